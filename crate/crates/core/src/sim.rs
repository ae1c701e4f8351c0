//! Forward simulation of motion-corrupted multi-echo k-space.
//!
//! Every phase-encode line of every slice is assigned an acquisition time.
//! Lines acquired while the sphere-averaged displacement exceeds `d_min` are
//! replaced by the corresponding line of the moved object's k-space; above
//! the B0 threshold the moved object also picks up an echo-time dependent
//! phase from a randomly perturbed off-resonance map. All echoes of a line
//! share one motion state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::labels::{self, LabelError, LineLabelMask, NormAxes};
use crate::motion::{
    self, recenter_to_median, sample_augmented_curve, CurveModel, Geometry, MotionCurve,
    MotionError, RigidTransform,
};
use crate::phantom::background_fraction;
use crate::volume::{fft2_per_slice, write_volume, Fft2, MultiEchoVolume, Space, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid acquisition scheme: {0}")]
    Scheme(String),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("motion curve spans {curve_s:.2} s but the scan takes {scan_s:.2} s")]
    CurveTooShort { curve_s: f64, scan_s: f64 },
    #[error("motion curve is not recentered: closest state is {0:.4} mm from the reference pose")]
    NotRecentered(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dataset is empty after slice exclusion")]
    EmptyDataset,
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// SplitMix64 step, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Acquisition timing

/// Timing of a multi-slice acquisition: one PE line per TR for every slice,
/// slices interleaved within the TR.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcquisitionScheme {
    pub n_pe: usize,
    pub n_slices: usize,
    pub tr_s: f64,
    /// Acquisition order of PE lines; `pe_order[k]` is the line read in TR `k`.
    pub pe_order: Vec<usize>,
    /// Time of each slice within a TR.
    pub slice_offsets_s: Vec<f64>,
    /// Duration of one echo train; all echoes of a line share its motion state.
    pub echo_train_span_s: f64,
    #[serde(skip)]
    position_of_line: Vec<usize>,
}

/// User-facing timing knobs; unset orderings take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub tr_s: f64,
    #[serde(default)]
    pub pe_order: Option<Vec<usize>>,
    #[serde(default)]
    pub slice_offsets_s: Option<Vec<f64>>,
    #[serde(default = "default_echo_train_span")]
    pub echo_train_span_s: f64,
}

fn default_echo_train_span() -> f64 {
    0.060
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            tr_s: 2.1,
            pe_order: None,
            slice_offsets_s: None,
            echo_train_span_s: default_echo_train_span(),
        }
    }
}

/// Even slices first, then odd slices, evenly spaced over the TR.
pub fn interleaved_offsets(n_slices: usize, tr_s: f64) -> Vec<f64> {
    let order: Vec<usize> = (0..n_slices)
        .step_by(2)
        .chain((1..n_slices).step_by(2))
        .collect();
    let mut offsets = vec![0.0; n_slices];
    for (slot, &s) in order.iter().enumerate() {
        offsets[s] = slot as f64 * tr_s / n_slices as f64;
    }
    offsets
}

impl AcquisitionScheme {
    pub fn new(
        n_pe: usize,
        n_slices: usize,
        tr_s: f64,
        pe_order: Vec<usize>,
        slice_offsets_s: Vec<f64>,
        echo_train_span_s: f64,
    ) -> Result<Self, SimError> {
        if n_pe == 0 || n_slices == 0 {
            return Err(SimError::Scheme("empty PE or slice dimension".into()));
        }
        if !(tr_s > 0.0) || !tr_s.is_finite() {
            return Err(SimError::Scheme(format!("TR must be positive, got {tr_s}")));
        }
        if pe_order.len() != n_pe {
            return Err(SimError::Scheme(format!(
                "pe_order has {} entries for {n_pe} lines",
                pe_order.len()
            )));
        }
        let mut position_of_line = vec![usize::MAX; n_pe];
        for (k, &p) in pe_order.iter().enumerate() {
            if p >= n_pe || position_of_line[p] != usize::MAX {
                return Err(SimError::Scheme("pe_order is not a permutation".into()));
            }
            position_of_line[p] = k;
        }
        if slice_offsets_s.len() != n_slices {
            return Err(SimError::Scheme(format!(
                "{} slice offsets for {n_slices} slices",
                slice_offsets_s.len()
            )));
        }
        if slice_offsets_s.iter().any(|&o| !(0.0..tr_s).contains(&o)) {
            return Err(SimError::Scheme("slice offsets must lie in [0, TR)".into()));
        }
        if !(echo_train_span_s >= 0.0) {
            return Err(SimError::Scheme(
                "echo train span must be non-negative".into(),
            ));
        }
        Ok(Self {
            n_pe,
            n_slices,
            tr_s,
            pe_order,
            slice_offsets_s,
            echo_train_span_s,
            position_of_line,
        })
    }

    /// Linear ascending PE order with interleaved slices.
    pub fn standard(n_pe: usize, n_slices: usize, tr_s: f64) -> Result<Self, SimError> {
        Self::new(
            n_pe,
            n_slices,
            tr_s,
            (0..n_pe).collect(),
            interleaved_offsets(n_slices, tr_s),
            default_echo_train_span(),
        )
    }

    pub fn from_config(cfg: &SchemeConfig, n_pe: usize, n_slices: usize) -> Result<Self, SimError> {
        Self::new(
            n_pe,
            n_slices,
            cfg.tr_s,
            cfg.pe_order.clone().unwrap_or_else(|| (0..n_pe).collect()),
            cfg.slice_offsets_s
                .clone()
                .unwrap_or_else(|| interleaved_offsets(n_slices, cfg.tr_s)),
            cfg.echo_train_span_s,
        )
    }

    /// Seconds from scan start at which line `p` of slice `s` is acquired.
    pub fn acquisition_time(&self, p: usize, s: usize) -> f64 {
        self.position_of_line[p] as f64 * self.tr_s + self.slice_offsets_s[s]
    }

    pub fn scan_duration(&self) -> f64 {
        self.n_pe as f64 * self.tr_s
    }
}

// ---------------------------------------------------------------------------
// B0

/// Off-resonance frequency in Hz over `[slice, PE, readout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct B0Map {
    pub freq_hz: Array3<f64>,
}

impl B0Map {
    pub fn zeros(n_slices: usize, n_pe: usize, n_readout: usize) -> Self {
        Self {
            freq_hz: Array3::zeros((n_slices, n_pe, n_readout)),
        }
    }

    pub fn uniform(n_slices: usize, n_pe: usize, n_readout: usize, hz: f64) -> Self {
        Self {
            freq_hz: Array3::from_elem((n_slices, n_pe, n_readout), hz),
        }
    }

    pub fn for_volume(vol: &MultiEchoVolume) -> Self {
        Self::zeros(vol.n_slices(), vol.n_pe(), vol.n_readout())
    }
}

/// Linear field ramp `g . (r - r_center)` in Hz.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldRamp {
    pub gradient_hz_per_mm: Vector3<f64>,
}

impl FieldRamp {
    /// Random direction, scaled so the largest |offset| over the voxel grid
    /// is a uniform draw in `(0, max_dev_hz]`.
    pub fn draw(geo: &Geometry, seed: u64, max_dev_hz: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: f64 = 2.0 * rng.random::<f64>() - 1.0;
        let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
        let sin_t = (1.0 - z * z).sqrt();
        let dir = Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), z);
        let amplitude = max_dev_hz * (1.0 - rng.random::<f64>());
        let h = geo.half_extent_mm();
        let reach = dir.x.abs() * h[0] + dir.y.abs() * h[1] + dir.z.abs() * h[2];
        let gradient_hz_per_mm = if reach > 0.0 {
            dir * (amplitude / reach)
        } else {
            Vector3::zeros()
        };
        Self { gradient_hz_per_mm }
    }

    pub fn eval(&self, position_mm: &Vector3<f64>) -> f64 {
        self.gradient_hz_per_mm.dot(position_mm)
    }

    fn add_to_slice(&self, geo: &Geometry, s: usize, mut plane: ndarray::ArrayViewMut2<'_, f64>) {
        for ((p, r), v) in plane.indexed_iter_mut() {
            *v += self.eval(&geo.position(s, p, r));
        }
    }
}

/// `base` plus a random linear ramp whose peak deviation over the field of
/// view is at most `max_dev_hz`. `voxel_size_mm` is (PE, readout, slice).
pub fn perturb_b0(
    base: &B0Map,
    voxel_size_mm: [f64; 3],
    state_seed: u64,
    max_dev_hz: f64,
) -> B0Map {
    let (ns, np, nr) = base.freq_hz.dim();
    let geo = Geometry {
        shape: [ns, np, nr],
        voxel_size_mm,
    };
    let ramp = FieldRamp::draw(&geo, state_seed, max_dev_hz);
    let mut out = base.clone();
    for (s, plane) in out.freq_hz.outer_iter_mut().enumerate() {
        ramp.add_to_slice(&geo, s, plane);
    }
    out
}

fn phase_slice(mut slice: ArrayViewMut3<'_, Complex64>, te_ms: &[f64], freq: ArrayView2<'_, f64>) {
    for (e, mut plane) in slice.outer_iter_mut().enumerate() {
        let te_s = te_ms[e] * 1e-3;
        for (v, f) in plane.iter_mut().zip(freq.iter()) {
            if *f != 0.0 {
                *v *= Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f * te_s);
            }
        }
    }
}

/// Multiply echo `e` voxelwise by `exp(-2 pi i f TE_e)`.
pub fn apply_phase(vol: &MultiEchoVolume, b0: &B0Map) -> Result<MultiEchoVolume, SimError> {
    vol.require_space(Space::Image)?;
    let [_, ns, np, nr] = vol.dims();
    if b0.freq_hz.dim() != (ns, np, nr) {
        return Err(SimError::Shape(format!(
            "B0 map {:?} vs volume {:?}",
            b0.freq_hz.dim(),
            (ns, np, nr)
        )));
    }
    let mut data = vol.data().clone();
    for s in 0..ns {
        phase_slice(
            data.index_axis_mut(Axis(1), s),
            vol.te_ms(),
            b0.freq_hz.index_axis(Axis(0), s),
        );
    }
    Ok(vol.with_data(data, Space::Image)?)
}

// ---------------------------------------------------------------------------
// Simulation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Lines with sphere displacement strictly above this are simulated.
    pub d_min_mm: f64,
    /// States displaced more than this also get a perturbed B0 field.
    #[serde(default = "default_b0_threshold")]
    pub b0_threshold_mm: f64,
    #[serde(default = "default_b0_max_dev")]
    pub b0_max_dev_hz: f64,
    #[serde(default = "default_radius")]
    pub sphere_radius_mm: f64,
    #[serde(default = "default_true")]
    pub b0_enabled: bool,
    /// Fail instead of warning when the curve's median state is not the identity.
    #[serde(default)]
    pub require_recentered: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_b0_threshold() -> f64 {
    0.5
}
fn default_b0_max_dev() -> f64 {
    5.0
}
fn default_radius() -> f64 {
    motion::HEAD_RADIUS_MM
}
fn default_true() -> bool {
    true
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            d_min_mm: 0.5,
            b0_threshold_mm: default_b0_threshold(),
            b0_max_dev_hz: default_b0_max_dev(),
            sphere_radius_mm: default_radius(),
            b0_enabled: true,
            require_recentered: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.d_min_mm > 0.0) || !self.d_min_mm.is_finite() {
            return Err(SimError::Config(format!(
                "d_min_mm must be positive, got {}",
                self.d_min_mm
            )));
        }
        if !(self.b0_max_dev_hz > 0.0) {
            return Err(SimError::Config("b0_max_dev_hz must be positive".into()));
        }
        if !(self.sphere_radius_mm > 0.0) {
            return Err(SimError::Config("sphere_radius_mm must be positive".into()));
        }
        if !(self.b0_threshold_mm >= 0.0) {
            return Err(SimError::Config(
                "b0_threshold_mm must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub kspace: MultiEchoVolume,
    pub labels: LineLabelMask,
    /// Sphere displacement in mm at the acquisition time of each (slice, line).
    pub displacement: Array2<f64>,
    /// Curve sample index used for each (slice, line).
    pub state_index: Array2<usize>,
}

/// B0 seed per curve sample: one seed per maximal run of consecutive samples
/// above the threshold, `None` below it.
fn b0_segment_seeds(displacements: &[f64], threshold: f64, seed: u64) -> Vec<Option<u64>> {
    let mut segment = 0u64;
    let mut prev_above = false;
    displacements
        .iter()
        .map(|&d| {
            let above = d > threshold;
            if above && !prev_above {
                segment += 1;
            }
            prev_above = above;
            above.then(|| mix_seed(seed, segment))
        })
        .collect()
}

/// k-space of slice `s` of `x` moved to `state` (plus the B0 phase when a
/// ramp is given), `[echo, PE, readout]`.
fn moved_slice_kspace(
    x: &MultiEchoVolume,
    base_b0: &B0Map,
    state: &RigidTransform,
    ramp: Option<&FieldRamp>,
    s: usize,
    fft: &mut Fft2,
) -> Result<Array3<Complex64>, SimError> {
    let mut moved = motion::resample_slice(x, state, s)?;
    let geo = Geometry::of(x);
    let base = base_b0.freq_hz.index_axis(Axis(0), s);
    match ramp {
        Some(ramp) => {
            let mut freq = base.to_owned();
            ramp.add_to_slice(&geo, s, freq.view_mut());
            phase_slice(moved.view_mut(), x.te_ms(), freq.view());
        }
        None => {
            if base.iter().any(|&f| f != 0.0) {
                phase_slice(moved.view_mut(), x.te_ms(), base);
            }
        }
    }
    for plane in moved.outer_iter_mut() {
        fft.forward(plane);
    }
    Ok(moved)
}

/// Motion-corrupted k-space of `x` under `curve`.
///
/// Scan time 0 is aligned with the first curve sample; the curve must cover
/// the whole scan.
pub fn simulate(
    x: &MultiEchoVolume,
    curve: &MotionCurve,
    scheme: &AcquisitionScheme,
    base_b0: &B0Map,
    cfg: &SimConfig,
) -> Result<SimOutput, SimError> {
    x.require_space(Space::Image)?;
    cfg.validate()?;
    let [_, ns, np, nr] = x.dims();
    if scheme.n_pe != np || scheme.n_slices != ns {
        return Err(SimError::Shape(format!(
            "scheme is {} slices x {} lines, volume is {ns} x {np}",
            scheme.n_slices, scheme.n_pe
        )));
    }
    if base_b0.freq_hz.dim() != (ns, np, nr) {
        return Err(SimError::Shape("B0 map does not match the volume".into()));
    }
    if curve.duration() < scheme.scan_duration() {
        return Err(SimError::CurveTooShort {
            curve_s: curve.duration(),
            scan_s: scheme.scan_duration(),
        });
    }
    let radius = cfg.sphere_radius_mm;
    let disp = curve.displacements(radius);
    // a recentered curve contains the reference pose itself
    let closest = disp.iter().copied().fold(f64::INFINITY, f64::min);
    if closest > 1e-6 {
        if cfg.require_recentered {
            return Err(SimError::NotRecentered(closest));
        }
        log::warn!(
            "no motion-curve sample is at the reference pose ({closest:.4} mm); recenter it first"
        );
    }

    let clean = fft2_per_slice(x)?;
    let mut data = clean.data().clone();
    let mut displacement = Array2::<f64>::zeros((ns, np));
    let mut state_index = Array2::<usize>::zeros((ns, np));
    let mut labels = Array2::<u8>::ones((ns, np));
    // (slice, curve sample) -> lines acquired in that state
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for s in 0..ns {
        for p in 0..np {
            let k = curve.index_at(curve.start() + scheme.acquisition_time(p, s));
            displacement[(s, p)] = disp[k];
            state_index[(s, p)] = k;
            if disp[k] > cfg.d_min_mm {
                labels[(s, p)] = 0;
                groups.entry((s, k)).or_default().push(p);
            }
        }
    }

    let b0_seeds = b0_segment_seeds(&disp, cfg.b0_threshold_mm, cfg.seed);
    let geo = Geometry::of(x);
    let jobs: Vec<((usize, usize), Vec<usize>)> = groups.into_iter().collect();
    let rows: Vec<Result<(usize, Vec<usize>, Array3<Complex64>), SimError>> = jobs
        .into_par_iter()
        .map_init(
            || Fft2::new(np, nr),
            |fft, ((s, k), lines)| {
                let ramp = match (cfg.b0_enabled, b0_seeds[k]) {
                    (true, Some(seed)) => Some(FieldRamp::draw(&geo, seed, cfg.b0_max_dev_hz)),
                    _ => None,
                };
                let ks = moved_slice_kspace(x, base_b0, &curve.params()[k], ramp.as_ref(), s, fft)?;
                Ok((s, lines, ks))
            },
        )
        .collect();
    for job in rows {
        let (s, lines, ks) = job?;
        for p in lines {
            data.slice_mut(ndarray::s![.., s, p, ..])
                .assign(&ks.slice(ndarray::s![.., p, ..]));
        }
    }

    Ok(SimOutput {
        kspace: clean.with_data(data, Space::Kspace)?,
        labels: LineLabelMask::new(labels)?,
        displacement,
        state_index,
    })
}

// ---------------------------------------------------------------------------
// Dataset generation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    /// Split per phantom, in phantom order: train first, then val, then test.
    pub fn assign(&self, n: usize) -> Vec<Split> {
        let total = self.train + self.val + self.test;
        let n_train = ((self.train / total) * n as f64).round() as usize;
        let n_train = n_train.min(n);
        let n_val = (((self.val / total) * n as f64).round() as usize).min(n - n_train);
        (0..n)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "default_curves_per_phantom")]
    pub curves_per_phantom: usize,
    #[serde(default = "default_max_background")]
    pub max_background_fraction: f64,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub norm_axes: NormAxes,
}

fn default_curves_per_phantom() -> usize {
    6
}
fn default_max_background() -> f64 {
    0.30
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            curves_per_phantom: default_curves_per_phantom(),
            max_background_fraction: default_max_background(),
            split: SplitFractions::default(),
            norm_axes: NormAxes::default(),
        }
    }
}

pub struct PhantomEntry {
    pub id: String,
    pub volume: MultiEchoVolume,
}

/// Where motion curves come from. Training phantoms draw augmented curves
/// from `model` when present; everything else cycles through `curves`.
#[derive(Default)]
pub struct CurveSource<'a> {
    pub model: Option<&'a CurveModel>,
    pub curves: &'a [MotionCurve],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub phantom_id: String,
    pub curve_id: String,
    pub slice: usize,
    pub split: Split,
    pub kspace: String,
    pub labels: String,
    pub displacement: String,
    pub d_min_mm: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub d_min_mm: f64,
    pub seed: u64,
    pub sim: SimConfig,
    pub scheme: SchemeConfig,
    pub dataset: DatasetConfig,
    pub samples: Vec<SampleEntry>,
}

impl DatasetIndex {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub const INDEX_FILE: &str = "index.json";

/// Sphere displacement per (slice, PE line) as CSV, one row per slice.
pub fn write_displacement(d: &Array2<f64>, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut text = String::from("# sphere displacement per PE line (mm), one row per slice\n");
    for row in d.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)
}

struct Job<'a> {
    phantom: &'a PhantomEntry,
    split: Split,
    curve_id: String,
    curve: MotionCurve,
    seed: u64,
    slices: &'a [usize],
}

/// Simulate every (phantom, curve) pair and write per-slice samples plus
/// `index.json` into `out_dir`.
pub fn generate_dataset(
    phantoms: &[PhantomEntry],
    curves: &CurveSource<'_>,
    scheme: &SchemeConfig,
    sim: &SimConfig,
    dataset: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetIndex, SimError> {
    sim.validate()?;
    if curves.model.is_none() && curves.curves.is_empty() {
        return Err(SimError::Config(
            "no motion curves or curve model given".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    let sample_dir = out_dir.join("samples");
    std::fs::create_dir_all(&sample_dir)?;

    let splits = dataset.split.assign(phantoms.len());
    let kept: Vec<Vec<usize>> = phantoms
        .iter()
        .map(|ph| {
            (0..ph.volume.n_slices())
                .filter(|&s| background_fraction(&ph.volume, s) <= dataset.max_background_fraction)
                .collect()
        })
        .collect();

    let mut jobs = Vec::new();
    for (i, ph) in phantoms.iter().enumerate() {
        for c in 0..dataset.curves_per_phantom {
            let seed = mix_seed(mix_seed(sim.seed, i as u64), c as u64);
            let model = curves
                .model
                .filter(|_| splits[i] == Split::Train || curves.curves.is_empty());
            let (curve_id, raw) = match model {
                Some(model) => (
                    format!("aug-{seed:016x}"),
                    sample_augmented_curve(model, seed)?,
                ),
                None => {
                    let idx = (i * dataset.curves_per_phantom + c) % curves.curves.len();
                    (format!("curve-{idx}"), curves.curves[idx].clone())
                }
            };
            jobs.push(Job {
                phantom: ph,
                split: splits[i],
                curve_id,
                curve: recenter_to_median(&raw, sim.sphere_radius_mm),
                seed,
                slices: &kept[i],
            });
        }
    }

    let per_job: Vec<Result<Vec<SampleEntry>, SimError>> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, job)| {
            if job.slices.is_empty() {
                return Ok(Vec::new());
            }
            let vol = &job.phantom.volume;
            let acq = AcquisitionScheme::from_config(scheme, vol.n_pe(), vol.n_slices())?;
            let cfg = SimConfig {
                seed: job.seed,
                ..sim.clone()
            };
            let out = simulate(vol, &job.curve, &acq, &B0Map::for_volume(vol), &cfg)?;
            let mut entries = Vec::with_capacity(job.slices.len());
            for &s in job.slices {
                let id = format!(
                    "{}_c{}_s{s:03}",
                    job.phantom.id,
                    j % dataset.curves_per_phantom.max(1)
                );
                let kspace_rel = PathBuf::from("samples").join(format!("{id}.vol"));
                let labels_rel = PathBuf::from("samples").join(format!("{id}.labels.csv"));
                let disp_rel = PathBuf::from("samples").join(format!("{id}.disp.csv"));
                let norm =
                    labels::normalize_lines(&out.kspace.extract_slice(s), dataset.norm_axes)?;
                write_volume(&norm.kspace, out_dir.join(&kspace_rel))?;
                labels::write_labels(
                    &out.labels.row(s),
                    Some(sim.d_min_mm),
                    out_dir.join(&labels_rel),
                )?;
                write_displacement(
                    &out.displacement.slice(ndarray::s![s..s + 1, ..]).to_owned(),
                    out_dir.join(&disp_rel),
                )?;
                entries.push(SampleEntry {
                    id,
                    phantom_id: job.phantom.id.clone(),
                    curve_id: job.curve_id.clone(),
                    slice: s,
                    split: job.split,
                    kspace: kspace_rel.to_string_lossy().into_owned(),
                    labels: labels_rel.to_string_lossy().into_owned(),
                    displacement: disp_rel.to_string_lossy().into_owned(),
                    d_min_mm: sim.d_min_mm,
                    seed: job.seed,
                });
            }
            Ok(entries)
        })
        .collect();

    let mut samples = Vec::new();
    for r in per_job {
        samples.extend(r?);
    }
    if samples.is_empty() {
        return Err(SimError::EmptyDataset);
    }
    let index = DatasetIndex {
        version: 1,
        d_min_mm: sim.d_min_mm,
        seed: sim.seed,
        sim: sim.clone(),
        scheme: scheme.clone(),
        dataset: dataset.clone(),
        samples,
    };
    std::fs::write(
        out_dir.join(INDEX_FILE),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(index)
}
