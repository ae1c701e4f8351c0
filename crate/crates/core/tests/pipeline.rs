use ndarray::{s, Array4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use t2sim::labels::read_labels;
use t2sim::metrics::image_quality;
use t2sim::motion::{apply_rigid, synthetic_curve, MotionCurve, RigidTransform};
use t2sim::phantom::{background_fraction, make_phantom, uniform_volume, PhantomSpec};
use t2sim::recon::{weighted_tv_recon, ReconConfig};
use t2sim::sim::{
    generate_dataset, simulate, AcquisitionScheme, B0Map, CurveSource, DatasetConfig, DatasetIndex,
    PhantomEntry, SchemeConfig, SimConfig, Split,
};
use t2sim::volume::{fft2_per_slice, ifft2_per_slice, read_volume};
use t2sim::{LineLabelMask, MultiEchoVolume, Space};

fn small_phantom(seed: u64) -> MultiEchoVolume {
    make_phantom(
        &PhantomSpec {
            dims: [4, 6, 32, 32],
            te_ms: vec![5.0, 20.0, 35.0, 50.0],
            ..PhantomSpec::default()
        },
        seed,
    )
    .unwrap()
}

fn curve_for(scheme: &AcquisitionScheme, mean: f64, seed: u64) -> MotionCurve {
    let n = scheme.scan_duration().ceil() as usize + 2;
    synthetic_curve(n, 1.0, mean, 64.0, seed).unwrap()
}

#[test]
fn clean_lines_are_bit_identical_to_the_fourier_transform() {
    let x = small_phantom(1);
    let scheme = AcquisitionScheme::standard(32, 6, 2.0).unwrap();
    let curve = curve_for(&scheme, 0.9, 4);
    let out = simulate(
        &x,
        &curve,
        &scheme,
        &B0Map::for_volume(&x),
        &SimConfig::default(),
    )
    .unwrap();
    let fx = fft2_per_slice(&x).unwrap();
    let mut n_clean = 0;
    let mut n_corrupt = 0;
    for sl in 0..6 {
        for p in 0..32 {
            let a = out.kspace.data().slice(s![.., sl, p, ..]);
            let b = fx.data().slice(s![.., sl, p, ..]);
            if out.labels.get(sl, p) == 1 {
                assert!(a
                    .iter()
                    .zip(b.iter())
                    .all(|(u, v)| u.re.to_bits() == v.re.to_bits()
                        && u.im.to_bits() == v.im.to_bits()));
                assert!(out.displacement[(sl, p)] <= 0.5);
                n_clean += 1;
            } else {
                assert!(out.displacement[(sl, p)] > 0.5);
                n_corrupt += 1;
            }
        }
    }
    assert!(n_clean > 0 && n_corrupt > 0);
}

#[test]
fn uniform_field_gives_expected_global_phase() {
    let x = uniform_volume([2, 1, 4, 4], vec![25.0, 50.0], Complex64::new(1.0, 0.0)).unwrap();
    let out = t2sim::sim::apply_phase(&x, &B0Map::uniform(1, 4, 4, 10.0)).unwrap();
    for v in out.data().slice(s![1, .., .., ..]).iter() {
        assert!((v.arg().abs() - std::f64::consts::PI).abs() < 1e-9);
    }
    for v in out.data().slice(s![0, .., .., ..]).iter() {
        assert!((v.arg() + std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }
}

#[test]
fn pure_rotation_energy_change_is_bounded_by_interpolation_error() {
    let x = small_phantom(2);
    let scheme = AcquisitionScheme::standard(32, 6, 2.0).unwrap();
    let r = RigidTransform::rotation([0.0, 0.0, 2.0]);
    let curve = MotionCurve::new((0..80).map(|i| i as f64).collect(), vec![r; 80]).unwrap();
    let cfg = SimConfig {
        b0_enabled: false,
        ..SimConfig::default()
    };
    let out = simulate(&x, &curve, &scheme, &B0Map::for_volume(&x), &cfg).unwrap();
    let fx = fft2_per_slice(&x).unwrap();
    let moved = apply_rigid(&x, &r).unwrap();
    // interpolation error measured on the phantom itself
    let interp = ((x.energy() - moved.energy()) / x.energy()).abs();
    let total_y = out.kspace.energy();
    assert!(((total_y - fx.energy()) / fx.energy()).abs() <= interp + 1e-12);
    assert!(interp < 0.02, "interpolation energy loss {interp}");
}

#[test]
fn simulation_is_deterministic() {
    let x = small_phantom(3);
    let scheme = AcquisitionScheme::standard(32, 6, 2.0).unwrap();
    let curve = curve_for(&scheme, 1.2, 9);
    let cfg = SimConfig {
        seed: 77,
        ..SimConfig::default()
    };
    let a = simulate(&x, &curve, &scheme, &B0Map::for_volume(&x), &cfg).unwrap();
    let b = simulate(&x, &curve, &scheme, &B0Map::for_volume(&x), &cfg).unwrap();
    assert_eq!(a, b);
    let c = simulate(
        &x,
        &curve,
        &scheme,
        &B0Map::for_volume(&x),
        &SimConfig { seed: 78, ..cfg },
    )
    .unwrap();
    assert_ne!(a.kspace, c.kspace);
}

/// Uniform block with slices 0 and 11 turned into 40%-background slices.
fn block_phantom() -> MultiEchoVolume {
    let x = uniform_volume([2, 12, 10, 10], vec![5.0, 15.0], Complex64::new(1.0, 0.0)).unwrap();
    let mut data = x.data().clone();
    for sl in [0, 11] {
        data.slice_mut(s![.., sl, ..4, ..])
            .fill(Complex64::new(0.0, 0.0));
    }
    x.with_data(data, Space::Image).unwrap()
}

#[test]
fn dataset_counts_splits_and_exclusions() {
    let phantoms = vec![
        PhantomEntry {
            id: "ph0".into(),
            volume: block_phantom(),
        },
        PhantomEntry {
            id: "ph1".into(),
            volume: block_phantom(),
        },
    ];
    assert!((background_fraction(&phantoms[0].volume, 0) - 0.4).abs() < 1e-12);
    let curves: Vec<MotionCurve> = (0..3)
        .map(|i| synthetic_curve(30, 1.0, 0.8, 64.0, i).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let index = generate_dataset(
        &phantoms,
        &CurveSource {
            model: None,
            curves: &curves,
        },
        &SchemeConfig {
            tr_s: 2.0,
            ..SchemeConfig::default()
        },
        &SimConfig {
            d_min_mm: 0.5,
            seed: 5,
            ..SimConfig::default()
        },
        &DatasetConfig::default(),
        dir.path(),
    )
    .unwrap();
    assert_eq!(index.samples.len(), 2 * 6 * 10);
    assert!(index.samples.iter().all(|s| s.slice != 0 && s.slice != 11));
    for ph in ["ph0", "ph1"] {
        let splits: std::collections::HashSet<Split> = index
            .samples
            .iter()
            .filter(|s| s.phantom_id == ph)
            .map(|s| s.split)
            .collect();
        assert_eq!(splits.len(), 1);
    }
    let on_disk = DatasetIndex::read(dir.path().join("index.json")).unwrap();
    assert_eq!(on_disk, index);
    let first = &index.samples[0];
    let k = read_volume(dir.path().join(&first.kspace)).unwrap();
    assert_eq!(k.dims(), [2, 1, 10, 10]);
    let labels = read_labels(dir.path().join(&first.labels)).unwrap();
    assert_eq!((labels.n_slices(), labels.n_pe()), (1, 10));
}

#[test]
fn dataset_generation_is_bit_identical_across_runs() {
    let phantoms = vec![PhantomEntry {
        id: "a".into(),
        volume: block_phantom(),
    }];
    let curves = vec![synthetic_curve(30, 1.0, 1.0, 64.0, 2).unwrap()];
    let run = |dir: &std::path::Path| {
        generate_dataset(
            &phantoms,
            &CurveSource {
                model: None,
                curves: &curves,
            },
            &SchemeConfig {
                tr_s: 2.0,
                ..SchemeConfig::default()
            },
            &SimConfig {
                seed: 3,
                ..SimConfig::default()
            },
            &DatasetConfig {
                curves_per_phantom: 2,
                ..DatasetConfig::default()
            },
            dir,
        )
        .unwrap()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let i1 = run(d1.path());
    let i2 = run(d2.path());
    assert_eq!(i1, i2);
    for s in &i1.samples {
        for f in [&s.kspace, &s.labels, &s.displacement] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap()
            );
        }
    }
}

fn add_noise(k: &MultiEchoVolume, sigma: f64, seed: u64) -> MultiEchoVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    let data = k
        .data()
        .mapv(|v| v + Complex64::new(n.sample(&mut rng), n.sample(&mut rng)));
    k.with_data(data, Space::Kspace).unwrap()
}

#[test]
fn tiny_lambda_recovers_the_adjoint_image() {
    let x = small_phantom(4);
    let y = fft2_per_slice(&x).unwrap();
    let cfg = ReconConfig {
        lambda: 1e-6,
        max_iter: 20,
        ..ReconConfig::default()
    };
    let out = weighted_tv_recon(&y, &LineLabelMask::all_clean(6, 32), &cfg).unwrap();
    let ahy = ifft2_per_slice(&y).unwrap();
    let err: f64 = out
        .image
        .data()
        .iter()
        .zip(ahy.data().iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    assert!((err / ahy.energy()).sqrt() < 1e-4);
}

#[test]
fn zero_lambda_fixed_point_is_data_consistent() {
    let x = small_phantom(5);
    let y = fft2_per_slice(&x).unwrap();
    let cfg = ReconConfig {
        lambda: 0.0,
        ..ReconConfig::default()
    };
    let out = weighted_tv_recon(&y, &LineLabelMask::all_clean(6, 32), &cfg).unwrap();
    let ax = fft2_per_slice(&out.image).unwrap();
    let err: f64 = ax
        .data()
        .iter()
        .zip(y.data().iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    assert!((err / y.energy()).sqrt() < 1e-6);
}

#[test]
fn motion_free_recon_loses_at_most_one_db() {
    let x = small_phantom(6);
    let peak = x.data().iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let y = add_noise(&fft2_per_slice(&x).unwrap(), 0.01 * peak, 8);
    let ahy = ifft2_per_slice(&y).unwrap();
    let out = weighted_tv_recon(
        &y,
        &LineLabelMask::all_clean(6, 32),
        &ReconConfig::default(),
    )
    .unwrap();
    let base = image_quality(&ahy, &x).unwrap().psnr_db;
    let rec = image_quality(&out.image, &x).unwrap().psnr_db;
    assert!(
        rec >= base - 1.0,
        "recon {rec:.2} dB vs adjoint {base:.2} dB"
    );
}

#[test]
fn recon_is_deterministic_and_single_row_masks_broadcast() {
    let x = small_phantom(7);
    let y = fft2_per_slice(&x).unwrap();
    let cfg = ReconConfig {
        max_iter: 5,
        ..ReconConfig::default()
    };
    let row = LineLabelMask::new(
        Array4::<u8>::ones((1, 1, 1, 32))
            .into_shape_with_order((1, 32))
            .unwrap(),
    )
    .unwrap();
    let a = weighted_tv_recon(&y, &row, &cfg).unwrap();
    let b = weighted_tv_recon(&y, &LineLabelMask::all_clean(6, 32), &cfg).unwrap();
    assert_eq!(a, b);
}
