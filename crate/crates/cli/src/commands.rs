use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use t2sim::labels::{read_labels, write_labels};
use t2sim::metrics::{
    classification_report, confusion, image_quality, ClassReport, Counts, ImageQuality,
};
use t2sim::motion::{
    fit_curve_model, read_curve, recenter_to_median, sample_augmented_curve, synthetic_curve,
    write_curve, MotionCurve,
};
use t2sim::phantom::make_phantom;
use t2sim::recon::{weighted_tv_recon, ReconTrace};
use t2sim::sim::{
    generate_dataset, mix_seed, simulate, write_displacement, AcquisitionScheme, B0Map,
    CurveSource, DatasetIndex, PhantomEntry, Split, INDEX_FILE,
};
use t2sim::volume::{read_volume, write_volume};

use crate::config::{threshold_dir, RunConfig};
use crate::{Cli, Command};

/// Exit code 1 for bad input, 2 for failures while running.
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// `dir/name.ext` -> `dir/name.ext.<suffix>`
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).runtime()?;
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn read_curves(paths: &[PathBuf]) -> Result<Vec<MotionCurve>, Failure> {
    paths
        .iter()
        .map(|p| read_curve(p).with_context(|| format!("reading curve {}", p.display())))
        .collect::<anyhow::Result<_>>()
        .invalid()
}

fn synthetic_set(cfg: &RunConfig, n: usize) -> Result<Vec<MotionCurve>, Failure> {
    (0..n)
        .map(|i| {
            synthetic_curve(
                cfg.curve.n_samples,
                cfg.curve.dt_s,
                cfg.curve.mean_mm,
                cfg.sim.sphere_radius_mm,
                mix_seed(cfg.seed, 1000 + i as u64),
            )
        })
        .collect::<Result<_, _>>()
        .invalid()
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())
        .invalid()?
        .with_seed(cli.seed);
    match cli.command {
        Command::Phantom { out } => {
            cfg.validate().invalid()?;
            cmd_phantom(&cfg, &out)
        }
        Command::Curve { out, mean_mm } => {
            if let Some(m) = mean_mm {
                cfg.curve.mean_mm = m;
            }
            cfg.validate().invalid()?;
            cmd_curve(&cfg, &out)
        }
        Command::Augment { curves, n, out } => {
            cfg.validate().invalid()?;
            cmd_augment(&cfg, &curves, n, &out)
        }
        Command::Simulate {
            phantom,
            curve,
            d_min,
            out,
        } => {
            if let Some(d) = d_min {
                cfg.sim.d_min_mm = d;
            }
            cfg.validate().invalid()?;
            cmd_simulate(&cfg, &phantom, curve.as_deref(), &out)
        }
        Command::Dataset {
            curves,
            d_min,
            n_phantoms,
            out,
        } => {
            if let Some(d) = d_min {
                cfg.sim.d_min_mm = d;
            }
            if let Some(n) = n_phantoms {
                cfg.n_phantoms = n;
            }
            cfg.validate().invalid()?;
            cmd_dataset(&cfg, &curves, &out)
        }
        Command::Recon {
            kspace,
            labels,
            lambda,
            reference,
            out,
        } => {
            if let Some(l) = lambda {
                cfg.recon.lambda = l;
            }
            cfg.validate().invalid()?;
            cmd_recon(&cfg, &kspace, &labels, reference.as_deref(), &out)
        }
        Command::Evaluate { pred, target, csv } => cmd_evaluate(&pred, &target, csv.as_deref()),
        Command::Sweep {
            dataset_root,
            pred_dir,
            d_min,
            split,
            out,
        } => {
            if !d_min.is_empty() {
                cfg.sweep_thresholds_mm = d_min;
            }
            if dataset_root.is_some() {
                cfg.dataset_root = dataset_root;
            }
            cfg.validate().invalid()?;
            let split = parse_split(&split).invalid()?;
            cmd_sweep(&cfg, pred_dir.as_deref(), split, &out)
        }
    }
}

fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let vol = make_phantom(&cfg.phantom, cfg.seed).invalid()?;
    ensure_parent(out)?;
    write_volume(&vol, out).runtime()?;
    cfg.write(&sidecar(out, "config.json")).runtime()?;
    log::info!("wrote phantom {:?} to {}", vol.dims(), out.display());
    Ok(())
}

fn cmd_curve(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let c = synthetic_curve(
        cfg.curve.n_samples,
        cfg.curve.dt_s,
        cfg.curve.mean_mm,
        cfg.sim.sphere_radius_mm,
        cfg.seed,
    )
    .invalid()?;
    ensure_parent(out)?;
    write_curve(&c, out).runtime()?;
    cfg.write(&sidecar(out, "config.json")).runtime()?;
    log::info!(
        "wrote {} samples, mean displacement {:.3} mm",
        c.len(),
        c.mean_displacement(cfg.sim.sphere_radius_mm)
    );
    Ok(())
}

fn cmd_augment(cfg: &RunConfig, paths: &[PathBuf], n: usize, out: &Path) -> Result<(), Failure> {
    let training = if paths.is_empty() {
        synthetic_set(cfg, cfg.curve.n_training)?
    } else {
        read_curves(paths)?
    };
    let radius = cfg.sim.sphere_radius_mm;
    let training: Vec<MotionCurve> = training
        .iter()
        .map(|c| recenter_to_median(c, radius))
        .collect();
    let model = fit_curve_model(&training).invalid()?;
    ensure_dir(out)?;
    write_json(&model, &out.join("model.json"))?;
    for i in 0..n {
        let c = sample_augmented_curve(&model, mix_seed(cfg.seed, i as u64)).runtime()?;
        let c = recenter_to_median(&c, radius);
        write_curve(&c, out.join(format!("aug_{i:03}.csv"))).runtime()?;
    }
    cfg.write(&out.join("config.json")).runtime()?;
    log::info!(
        "fitted {} modes from {} curves, wrote {n} augmented curves",
        model.n_components,
        model.n_training
    );
    Ok(())
}

fn cmd_simulate(
    cfg: &RunConfig,
    phantom: &Path,
    curve: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let x = read_volume(phantom)
        .with_context(|| format!("reading {}", phantom.display()))
        .invalid()?;
    let curve = match curve {
        Some(p) => read_curves(&[p.to_path_buf()])?.remove(0),
        None => synthetic_set(cfg, 1)?.remove(0),
    };
    let curve = recenter_to_median(&curve, cfg.sim.sphere_radius_mm);
    let scheme = AcquisitionScheme::from_config(&cfg.scheme, x.n_pe(), x.n_slices()).invalid()?;
    if curve.duration() < scheme.scan_duration() {
        return Err(Failure::Validation(anyhow!(
            "motion curve covers {:.1} s, scan needs {:.1} s",
            curve.duration(),
            scheme.scan_duration()
        )));
    }
    let sim = simulate(&x, &curve, &scheme, &B0Map::for_volume(&x), &cfg.sim).runtime()?;
    ensure_dir(out)?;
    write_volume(&sim.kspace, out.join("kspace.vol")).runtime()?;
    write_labels(&sim.labels, Some(cfg.sim.d_min_mm), out.join("labels.csv")).runtime()?;
    write_displacement(&sim.displacement, out.join("displacement.csv")).runtime()?;
    cfg.write(&out.join("config.json")).runtime()?;
    log::info!(
        "{} of {} lines corrupted",
        sim.labels.count_corrupted(),
        sim.labels.n_slices() * sim.labels.n_pe()
    );
    Ok(())
}

fn cmd_dataset(cfg: &RunConfig, paths: &[PathBuf], out: &Path) -> Result<(), Failure> {
    if cfg.n_phantoms == 0 {
        return Err(Failure::Validation(anyhow!("n_phantoms must be positive")));
    }
    let radius = cfg.sim.sphere_radius_mm;
    let curves = if paths.is_empty() {
        synthetic_set(cfg, cfg.curve.n_training)?
    } else {
        read_curves(paths)?
    };
    let curves: Vec<MotionCurve> = curves
        .iter()
        .map(|c| recenter_to_median(c, radius))
        .collect();
    let model = if curves.len() >= 2 {
        Some(fit_curve_model(&curves).invalid()?)
    } else {
        None
    };
    let phantoms: Vec<PhantomEntry> = (0..cfg.n_phantoms)
        .map(|i| {
            make_phantom(&cfg.phantom, mix_seed(cfg.seed, i as u64)).map(|volume| PhantomEntry {
                id: format!("ph{i:03}"),
                volume,
            })
        })
        .collect::<Result<_, _>>()
        .invalid()?;
    ensure_dir(out)?;
    let index = generate_dataset(
        &phantoms,
        &CurveSource {
            model: model.as_ref(),
            curves: &curves,
        },
        &cfg.scheme,
        &cfg.sim,
        &cfg.dataset,
        out,
    )
    .runtime()?;
    cfg.write(&out.join("config.json")).runtime()?;
    log::info!(
        "wrote {} samples to {}",
        index.samples.len(),
        out.join(INDEX_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReconReport {
    quality: Option<ImageQuality>,
    corrupted_quality: Option<ImageQuality>,
    traces: Vec<ReconTrace>,
}

fn cmd_recon(
    cfg: &RunConfig,
    kspace: &Path,
    labels: &Path,
    reference: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let y = read_volume(kspace)
        .with_context(|| format!("reading {}", kspace.display()))
        .invalid()?;
    let mask = read_labels(labels)
        .with_context(|| format!("reading {}", labels.display()))
        .invalid()?;
    let reference = reference
        .map(|p| read_volume(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
        .invalid()?;
    let rec = weighted_tv_recon(&y, &mask, &cfg.recon).invalid()?;
    let (quality, corrupted_quality) = match &reference {
        Some(r) => {
            let corrupted = t2sim::volume::ifft2_per_slice(&y).runtime()?;
            (
                Some(image_quality(&rec.image, r).invalid()?),
                Some(image_quality(&corrupted, r).invalid()?),
            )
        }
        None => (None, None),
    };
    ensure_parent(out)?;
    write_volume(&rec.image, out).runtime()?;
    if let (Some(q), Some(c)) = (&quality, &corrupted_quality) {
        log::info!(
            "PSNR {:.2} -> {:.2} dB, SSIM {:.4} -> {:.4}",
            c.psnr_db,
            q.psnr_db,
            c.ssim,
            q.ssim
        );
    }
    write_json(
        &ReconReport {
            quality,
            corrupted_quality,
            traces: rec.traces,
        },
        &sidecar(out, "metrics.json"),
    )?;
    cfg.write(&sidecar(out, "config.json")).runtime()?;
    Ok(())
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map(|v| v.to_string()).unwrap_or_default()
}

fn cmd_evaluate(pred: &Path, target: &Path, csv: Option<&Path>) -> Result<(), Failure> {
    let p = read_labels(pred)
        .with_context(|| format!("reading {}", pred.display()))
        .invalid()?;
    let t = read_labels(target)
        .with_context(|| format!("reading {}", target.display()))
        .invalid()?;
    let report = classification_report(&p, &t).invalid()?;
    println!("{}", serde_json::to_string_pretty(&report).runtime()?);
    if let Some(path) = csv {
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))
            .runtime()?;
        if fresh {
            writeln!(f, "pred,target,accuracy,nd_rate,wd_rate,n_lines").runtime()?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{}",
            pred.display(),
            target.display(),
            report.accuracy,
            fmt_rate(report.nd_rate),
            fmt_rate(report.wd_rate),
            report.counts.total()
        )
        .runtime()?;
    }
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Option<Split>> {
    Ok(match s {
        "all" => None,
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        other => bail!("unknown split {other:?}; expected train, val, test or all"),
    })
}

/// Location of the prediction for one sample.
pub fn prediction_path(pred_root: &Path, d_min_mm: f64, sample_id: &str) -> PathBuf {
    threshold_dir(pred_root, d_min_mm).join(format!("{sample_id}.csv"))
}

fn cmd_sweep(
    cfg: &RunConfig,
    pred_dir: Option<&Path>,
    split: Option<Split>,
    out: &Path,
) -> Result<(), Failure> {
    let root = cfg
        .dataset_root
        .as_deref()
        .ok_or_else(|| Failure::Validation(anyhow!("no dataset root given")))?;
    let mut thresholds = cfg.sweep_thresholds_mm.clone();
    thresholds.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for &t in &thresholds {
        let dir = threshold_dir(root, t);
        let index = DatasetIndex::read(dir.join(INDEX_FILE))
            .with_context(|| format!("reading {}", dir.join(INDEX_FILE).display()))
            .invalid()?;
        let mut counts = Counts::default();
        let mut n = 0;
        for s in index
            .samples
            .iter()
            .filter(|s| split.is_none_or(|sp| s.split == sp))
        {
            let target = read_labels(dir.join(&s.labels)).invalid()?;
            let pred = match pred_dir {
                Some(pd) => {
                    let p = prediction_path(pd, t, &s.id);
                    read_labels(&p)
                        .with_context(|| format!("missing prediction {}", p.display()))
                        .invalid()?
                }
                None => target.clone(),
            };
            let flat = |m: &t2sim::LineLabelMask| m.labels().iter().copied().collect::<Vec<u8>>();
            let c = confusion(&flat(&pred), &flat(&target)).invalid()?;
            counts.true_clean += c.true_clean;
            counts.true_motion += c.true_motion;
            counts.missed_motion += c.missed_motion;
            counts.false_motion += c.false_motion;
            n += 1;
        }
        if n == 0 {
            return Err(Failure::Validation(anyhow!(
                "no samples in split at d_min {t}"
            )));
        }
        rows.push((t, ClassReport::from_counts(counts).runtime()?, n));
    }
    let mut text = String::from("d_min_mm,accuracy,nd_rate,wd_rate,n_samples,n_lines\n");
    for (t, r, n) in &rows {
        text.push_str(&format!(
            "{t},{},{},{},{n},{}\n",
            r.accuracy,
            fmt_rate(r.nd_rate),
            fmt_rate(r.wd_rate),
            r.counts.total()
        ));
    }
    ensure_parent(out)?;
    std::fs::write(out, &text)
        .with_context(|| format!("writing {}", out.display()))
        .runtime()?;
    cfg.write(&sidecar(out, "config.json")).runtime()?;
    print!("{text}");
    Ok(())
}
