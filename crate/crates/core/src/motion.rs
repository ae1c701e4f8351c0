//! Rigid-body head motion: transforms and resampling of complex volumes, the
//! sphere-averaged displacement metric, median-state recentering and a
//! PCA model of motion curves used for augmentation.
//!
//! Conventions: physical axes are x = readout, y = phase-encode, z = slice.
//! Rotations are applied as `Rz * Ry * Rx` (degrees) about the volume center,
//! followed by the translation (mm). A transform maps a point `p` (relative to
//! the pivot) to `R p + t`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use ndarray::{Array3, Array4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::volume::{MultiEchoVolume, Space, VolumeError};

/// Radius of the sphere used as a head model, in mm.
pub const HEAD_RADIUS_MM: f64 = 64.0;
/// Size of the default quasi-uniform point set in the solid ball.
pub const DEFAULT_BALL_POINTS: usize = 4096;
pub const ROTATION_ORDER: &str = "Rz*Ry*Rx";
pub const PIVOT: &str = "volume_center";
const CURVE_CSV_HEADER: &str = "t_s,tx_mm,ty_mm,tz_mm,rx_deg,ry_deg,rz_deg";

#[derive(Debug, thiserror::Error)]
pub enum MotionError {
    #[error("non-finite transform parameters: {0:?}")]
    NonFinite(RigidTransform),
    #[error("invalid motion curve: {0}")]
    InvalidCurve(String),
    #[error("curve model needs at least 2 curves, got {0}")]
    TooFewCurves(usize),
    #[error("curve {index} spans {found:.3} s, expected {expected:.3} s")]
    DurationMismatch {
        index: usize,
        expected: f64,
        found: f64,
    },
    #[error("curve file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Six-parameter rigid-body pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Translation along (x, y, z) in mm.
    pub translation_mm: [f64; 3],
    /// Rotation about (x, y, z) in degrees.
    pub rotation_deg: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        translation_mm: [0.0; 3],
        rotation_deg: [0.0; 3],
    };

    pub fn new(translation_mm: [f64; 3], rotation_deg: [f64; 3]) -> Self {
        Self {
            translation_mm,
            rotation_deg,
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::new(t, [0.0; 3])
    }

    pub fn rotation(r: [f64; 3]) -> Self {
        Self::new([0.0; 3], r)
    }

    /// Parameters in CSV/PCA order: tx, ty, tz, rx, ry, rz.
    pub fn to_params(&self) -> [f64; 6] {
        let [tx, ty, tz] = self.translation_mm;
        let [rx, ry, rz] = self.rotation_deg;
        [tx, ty, tz, rx, ry, rz]
    }

    pub fn from_params(p: [f64; 6]) -> Self {
        Self::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    pub fn is_identity(&self) -> bool {
        self.to_params().iter().all(|v| *v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let rz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
        rz * ry * rx
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation_mm)
    }

    /// Recover parameters from a rotation matrix and translation.
    pub fn from_matrix(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let ay = sy.asin();
        let (ax, az) = if ay.cos() > 1e-12 {
            (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
        } else {
            // gimbal lock: fold the x rotation into z
            (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
        };
        Self::new(
            [t.x, t.y, t.z],
            [ax.to_degrees(), ay.to_degrees(), az.to_degrees()],
        )
    }

    /// 4x4 homogeneous matrix, row-major.
    pub fn homogeneous(&self) -> [[f64; 4]; 4] {
        let r = self.rotation_matrix();
        let t = self.translation_mm;
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[(i, j)];
            }
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        m
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let ra = self.rotation_matrix();
        let r = ra * other.rotation_matrix();
        let t = ra * other.translation_vector() + self.translation_vector();
        Self::from_matrix(&r, &t)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation_matrix().transpose();
        let t = -(rt * self.translation_vector());
        Self::from_matrix(&rt, &t)
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vector()
    }

    /// Largest absolute difference between the homogeneous matrices.
    pub fn matrix_distance(&self, other: &RigidTransform) -> f64 {
        let a = self.homogeneous();
        let b = other.homogeneous();
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                d = d.max((a[i][j] - b[i][j]).abs());
            }
        }
        d
    }
}

// ---------------------------------------------------------------------------
// Resampling

/// Voxel-index <-> mm mapping of a volume, pivoting about its center.
#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    /// (slices, PE, readout)
    pub shape: [usize; 3],
    /// (PE, readout, slice) in mm, as stored in the volume.
    pub voxel_size_mm: [f64; 3],
}

impl Geometry {
    pub fn of(vol: &MultiEchoVolume) -> Self {
        Self {
            shape: [vol.n_slices(), vol.n_pe(), vol.n_readout()],
            voxel_size_mm: vol.voxel_size_mm(),
        }
    }

    fn center(&self) -> [f64; 3] {
        self.shape.map(|n| (n as f64 - 1.0) / 2.0)
    }

    /// Physical position (x = readout, y = PE, z = slice) of voxel `(s, p, r)`.
    pub fn position(&self, s: usize, p: usize, r: usize) -> Vector3<f64> {
        let [cs, cp, cr] = self.center();
        let [vp, vr, vs] = self.voxel_size_mm;
        Vector3::new(
            (r as f64 - cr) * vr,
            (p as f64 - cp) * vp,
            (s as f64 - cs) * vs,
        )
    }

    /// Fractional (slice, PE, readout) index of a physical position.
    pub fn index_of(&self, x: &Vector3<f64>) -> [f64; 3] {
        let [cs, cp, cr] = self.center();
        let [vp, vr, vs] = self.voxel_size_mm;
        [x.z / vs + cs, x.y / vp + cp, x.x / vr + cr]
    }

    /// Half-extent of the voxel-center grid along (x, y, z) in mm.
    pub fn half_extent_mm(&self) -> [f64; 3] {
        let [ns, np, nr] = self.shape;
        let [vp, vr, vs] = self.voxel_size_mm;
        [
            (nr as f64 - 1.0) / 2.0 * vr,
            (np as f64 - 1.0) / 2.0 * vp,
            (ns as f64 - 1.0) / 2.0 * vs,
        ]
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Trilinear weights at a fractional index with zero padding outside the grid.
/// Returns up to 8 (flat spatial index, weight) pairs.
fn trilinear_taps(idx: [f64; 3], shape: [usize; 3], out: &mut Vec<(usize, f64)>) {
    out.clear();
    let [ns, np, nr] = shape;
    let idx = idx.map(snap);
    let base = idx.map(|v| v.floor());
    let frac = [idx[0] - base[0], idx[1] - base[1], idx[2] - base[2]];
    for ds in 0..2 {
        let ws = if ds == 0 { 1.0 - frac[0] } else { frac[0] };
        let s = base[0] as i64 + ds as i64;
        if ws == 0.0 || s < 0 || s >= ns as i64 {
            continue;
        }
        for dp in 0..2 {
            let wp = if dp == 0 { 1.0 - frac[1] } else { frac[1] };
            let p = base[1] as i64 + dp as i64;
            if wp == 0.0 || p < 0 || p >= np as i64 {
                continue;
            }
            for dr in 0..2 {
                let wr = if dr == 0 { 1.0 - frac[2] } else { frac[2] };
                let r = base[2] as i64 + dr as i64;
                if wr == 0.0 || r < 0 || r >= nr as i64 {
                    continue;
                }
                let flat = (s as usize * np + p as usize) * nr + r as usize;
                out.push((flat, ws * wp * wr));
            }
        }
    }
}

/// Resample one output slice of `vol` moved by `transform`.
///
/// Returns `[echo, PE, readout]`. Real and imaginary parts share the same
/// trilinear weights; samples outside the field of view are zero.
pub fn resample_slice(
    vol: &MultiEchoVolume,
    transform: &RigidTransform,
    s: usize,
) -> Result<Array3<Complex64>, MotionError> {
    vol.require_space(Space::Image)?;
    if !transform.is_finite() {
        return Err(MotionError::NonFinite(*transform));
    }
    let geo = Geometry::of(vol);
    let [_, np, nr] = geo.shape;
    let ne = vol.n_echoes();
    if transform.is_identity() {
        return Ok(vol.slice(s).to_owned());
    }
    let inv = transform.inverse();
    let r_inv = inv.rotation_matrix();
    let t_inv = inv.translation_vector();
    let src = vol
        .data()
        .as_slice()
        .expect("volume data is in standard layout");
    let spatial = geo.shape.iter().product::<usize>();
    let mut out = Array3::<Complex64>::zeros((ne, np, nr));
    let mut taps = Vec::with_capacity(8);
    for p in 0..np {
        for r in 0..nr {
            let q = geo.position(s, p, r);
            let from = r_inv * q + t_inv;
            trilinear_taps(geo.index_of(&from), geo.shape, &mut taps);
            if taps.is_empty() {
                continue;
            }
            for e in 0..ne {
                let plane = &src[e * spatial..(e + 1) * spatial];
                let mut acc = Complex64::new(0.0, 0.0);
                for &(i, w) in &taps {
                    acc += plane[i] * w;
                }
                out[(e, p, r)] = acc;
            }
        }
    }
    Ok(out)
}

/// Move the imaged object by `transform` (trilinear, zero fill).
pub fn apply_rigid(
    vol: &MultiEchoVolume,
    transform: &RigidTransform,
) -> Result<MultiEchoVolume, MotionError> {
    vol.require_space(Space::Image)?;
    if !transform.is_finite() {
        return Err(MotionError::NonFinite(*transform));
    }
    if transform.is_identity() {
        return Ok(vol.clone());
    }
    let [ne, ns, np, nr] = vol.dims();
    let mut data = Array4::<Complex64>::zeros((ne, ns, np, nr));
    for s in 0..ns {
        let moved = resample_slice(vol, transform, s)?;
        data.slice_mut(ndarray::s![.., s, .., ..]).assign(&moved);
    }
    Ok(vol.with_data(data, Space::Image)?)
}

// ---------------------------------------------------------------------------
// Sphere displacement

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut v = 0.0;
    while i > 0 {
        v += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    v
}

/// Deterministic quasi-uniform points in the unit ball.
///
/// Halton sequence (bases 2, 3, 5) mapped to the ball by inverse-CDF in
/// radius, with a Cranley-Patterson shift drawn from `seed`. Seed 0 is unshifted.
pub fn unit_ball_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let shift = if seed == 0 {
        [0.0; 3]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ]
    };
    (1..=n as u64)
        .map(|i| {
            let u = [
                (radical_inverse(i, 2) + shift[0]).fract(),
                (radical_inverse(i, 3) + shift[1]).fract(),
                (radical_inverse(i, 5) + shift[2]).fract(),
            ];
            let rho = u[0].cbrt();
            let cos_t = 1.0 - 2.0 * u[1];
            let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * u[2];
            Vector3::new(
                rho * sin_t * phi.cos(),
                rho * sin_t * phi.sin(),
                rho * cos_t,
            )
        })
        .collect()
}

fn default_ball() -> &'static [Vector3<f64>] {
    static POINTS: OnceLock<Vec<Vector3<f64>>> = OnceLock::new();
    POINTS.get_or_init(|| unit_ball_points(DEFAULT_BALL_POINTS, 0))
}

/// Mean displacement `|T p - p|` over points of a ball of `radius_mm`, given
/// as points of the unit ball.
pub fn mean_displacement_over(
    transform: &RigidTransform,
    radius_mm: f64,
    unit_points: &[Vector3<f64>],
) -> f64 {
    let r = transform.rotation_matrix() - Matrix3::identity();
    let t = transform.translation_vector();
    let sum: f64 = unit_points
        .iter()
        .map(|p| (r * (p * radius_mm) + t).norm())
        .sum();
    sum / unit_points.len() as f64
}

/// Average displacement of points inside a sphere of `radius_mm` centered at
/// the pivot, using the default 4096-point set.
pub fn sphere_displacement(transform: &RigidTransform, radius_mm: f64) -> f64 {
    if transform.rotation_deg == [0.0; 3] {
        return transform.translation_vector().norm();
    }
    mean_displacement_over(transform, radius_mm, default_ball())
}

// ---------------------------------------------------------------------------
// Motion curves

#[derive(Clone, Debug, PartialEq)]
pub struct MotionCurve {
    t_s: Vec<f64>,
    params: Vec<RigidTransform>,
}

impl MotionCurve {
    pub fn new(t_s: Vec<f64>, params: Vec<RigidTransform>) -> Result<Self, MotionError> {
        if t_s.len() != params.len() {
            return Err(MotionError::InvalidCurve(format!(
                "{} times for {} samples",
                t_s.len(),
                params.len()
            )));
        }
        if t_s.len() < 2 {
            return Err(MotionError::InvalidCurve(
                "at least 2 samples required".into(),
            ));
        }
        if t_s.iter().any(|t| !t.is_finite()) || t_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MotionError::InvalidCurve(
                "sample times must be finite and strictly increasing".into(),
            ));
        }
        if let Some(bad) = params.iter().find(|p| !p.is_finite()) {
            return Err(MotionError::NonFinite(*bad));
        }
        Ok(Self { t_s, params })
    }

    /// All-identity curve sampled at `n` points spaced `dt_s` apart.
    pub fn stationary(n: usize, dt_s: f64) -> Result<Self, MotionError> {
        Self::new(
            (0..n).map(|i| i as f64 * dt_s).collect(),
            vec![RigidTransform::IDENTITY; n],
        )
    }

    pub fn len(&self) -> usize {
        self.t_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_s.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.t_s
    }

    pub fn params(&self) -> &[RigidTransform] {
        &self.params
    }

    pub fn start(&self) -> f64 {
        self.t_s[0]
    }

    pub fn duration(&self) -> f64 {
        self.t_s[self.t_s.len() - 1] - self.t_s[0]
    }

    /// Index of the sample nearest to `t` (ties go to the earlier sample).
    pub fn index_at(&self, t: f64) -> usize {
        let i = self.t_s.partition_point(|&x| x < t);
        if i == 0 {
            return 0;
        }
        if i >= self.t_s.len() {
            return self.t_s.len() - 1;
        }
        if t - self.t_s[i - 1] <= self.t_s[i] - t {
            i - 1
        } else {
            i
        }
    }

    pub fn at(&self, t: f64) -> &RigidTransform {
        &self.params[self.index_at(t)]
    }

    /// Nearest-sample resampling onto `grid`.
    pub fn resample(&self, grid: &[f64]) -> Result<MotionCurve, MotionError> {
        let params = grid.iter().map(|&t| *self.at(t)).collect();
        MotionCurve::new(grid.to_vec(), params)
    }

    pub fn displacements(&self, radius_mm: f64) -> Vec<f64> {
        self.params
            .iter()
            .map(|p| sphere_displacement(p, radius_mm))
            .collect()
    }

    pub fn mean_displacement(&self, radius_mm: f64) -> f64 {
        let d = self.displacements(radius_mm);
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Index of the lower-median sample by sphere displacement.
    pub fn median_index(&self, radius_mm: f64) -> usize {
        let d = self.displacements(radius_mm);
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        order[(order.len() - 1) / 2]
    }

    pub fn map_params(&self, f: impl Fn(&RigidTransform) -> RigidTransform) -> MotionCurve {
        MotionCurve {
            t_s: self.t_s.clone(),
            params: self.params.iter().map(f).collect(),
        }
    }

    /// Flattened `[tx, ty, tz, rx, ry, rz]` per sample.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.to_params()).collect()
    }

    pub fn from_flat(t_s: Vec<f64>, flat: &[f64]) -> Result<MotionCurve, MotionError> {
        if flat.len() != 6 * t_s.len() {
            return Err(MotionError::InvalidCurve(format!(
                "{} values for {} samples",
                flat.len(),
                t_s.len()
            )));
        }
        let params = flat
            .chunks_exact(6)
            .map(|c| RigidTransform::from_params([c[0], c[1], c[2], c[3], c[4], c[5]]))
            .collect();
        MotionCurve::new(t_s, params)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# rotation_order={ROTATION_ORDER}");
        let _ = writeln!(out, "# pivot={PIVOT}");
        let _ = writeln!(out, "{CURVE_CSV_HEADER}");
        for (t, p) in self.t_s.iter().zip(&self.params) {
            let v = p.to_params();
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{},{}",
                v[0], v[1], v[2], v[3], v[4], v[5]
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MotionCurve, MotionError> {
        let mut t_s = Vec::new();
        let mut params = Vec::new();
        let mut seen_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(order) = comment.trim().strip_prefix("rotation_order=") {
                    if order.trim() != ROTATION_ORDER {
                        return Err(MotionError::Parse {
                            line: i + 1,
                            msg: format!("unsupported rotation order {order}"),
                        });
                    }
                }
                continue;
            }
            if !seen_header {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols.join(",") != CURVE_CSV_HEADER {
                    return Err(MotionError::Parse {
                        line: i + 1,
                        msg: format!("expected header `{CURVE_CSV_HEADER}`"),
                    });
                }
                seen_header = true;
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse()).collect();
            let vals = vals.map_err(|e| MotionError::Parse {
                line: i + 1,
                msg: format!("{e}"),
            })?;
            if vals.len() != 7 {
                return Err(MotionError::Parse {
                    line: i + 1,
                    msg: format!("expected 7 columns, got {}", vals.len()),
                });
            }
            t_s.push(vals[0]);
            params.push(RigidTransform::from_params([
                vals[1], vals[2], vals[3], vals[4], vals[5], vals[6],
            ]));
        }
        MotionCurve::new(t_s, params)
    }
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<MotionCurve, MotionError> {
    MotionCurve::from_csv(&std::fs::read_to_string(path)?)
}

pub fn write_curve(curve: &MotionCurve, path: impl AsRef<Path>) -> Result<(), MotionError> {
    std::fs::write(path, curve.to_csv())?;
    Ok(())
}

/// Re-express the curve relative to its median-displacement state, which
/// becomes the identity pose.
pub fn recenter_to_median(curve: &MotionCurve, radius_mm: f64) -> MotionCurve {
    let reference = curve.params[curve.median_index(radius_mm)].inverse();
    curve.map_params(|p| reference.compose(p))
}

// ---------------------------------------------------------------------------
// Curve PCA

/// Mean curve plus principal modes of variation of a set of training curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveModel {
    pub t_s: Vec<f64>,
    pub mean: Vec<f64>,
    /// Orthonormal modes over the flattened `6 * n_t` parameter vector,
    /// ordered by decreasing eigenvalue. May hold more than `n_components`.
    pub components: Vec<Vec<f64>>,
    /// Variance of the training set along each component.
    pub eigenvalues: Vec<f64>,
    /// Number of leading components used for sampling: `ceil(0.2 * N)`.
    pub n_components: usize,
    pub n_training: usize,
}

pub fn n_modes_for(n_curves: usize) -> usize {
    (n_curves as f64 * 0.2).ceil() as usize
}

pub fn fit_curve_model(curves: &[MotionCurve]) -> Result<CurveModel, MotionError> {
    let n = curves.len();
    if n < 2 {
        return Err(MotionError::TooFewCurves(n));
    }
    let grid = curves[0].times().to_vec();
    let expected = curves[0].duration();
    let step = expected / (grid.len() - 1) as f64;
    let mut rows = Vec::with_capacity(n);
    for (i, c) in curves.iter().enumerate() {
        if (c.duration() - expected).abs() > 0.5 * step {
            return Err(MotionError::DurationMismatch {
                index: i,
                expected,
                found: c.duration(),
            });
        }
        // align start times, then nearest-sample lookup
        let shifted: Vec<f64> = grid.iter().map(|t| t - grid[0] + c.start()).collect();
        rows.push(c.resample(&shifted)?.flatten());
    }
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let gram = &centered * centered.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let energy: f64 = rows.iter().flatten().map(|v| v * v).sum();
    let tol = 1e-12 * energy.max(eig.eigenvalues[order[0]]) + f64::MIN_POSITIVE;

    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut eigenvalues = Vec::new();
    for &k in &order {
        let mu = eig.eigenvalues[k];
        if mu <= tol {
            break;
        }
        let v = eig.eigenvectors.column(k);
        let comp = centered.transpose() * v / mu.sqrt();
        components.push(comp.iter().copied().collect());
        eigenvalues.push(mu / (n - 1) as f64);
    }
    let n_components = n_modes_for(n);
    // pad with zero-variance directions so the model always exposes
    // `n_components` orthonormal modes
    let mut axis = 0;
    while components.len() < n_components.min(dim) && axis < dim {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        axis += 1;
        for c in &components {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            components.push(v);
            eigenvalues.push(0.0);
        }
    }
    Ok(CurveModel {
        t_s: grid,
        mean,
        components,
        eigenvalues,
        n_components,
        n_training: n,
    })
}

impl CurveModel {
    pub fn mean_curve(&self) -> Result<MotionCurve, MotionError> {
        MotionCurve::from_flat(self.t_s.clone(), &self.mean)
    }

    /// Mean plus a weighted sum of the leading components.
    pub fn synthesize(&self, coefficients: &[f64]) -> Result<MotionCurve, MotionError> {
        let mut flat = self.mean.clone();
        for (a, comp) in coefficients.iter().zip(&self.components) {
            flat.iter_mut().zip(comp).for_each(|(f, c)| *f += a * c);
        }
        MotionCurve::from_flat(self.t_s.clone(), &flat)
    }

    /// Coordinates of `curve` along every stored component.
    pub fn project(&self, curve: &MotionCurve) -> Vec<f64> {
        let flat = curve.flatten();
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(flat.iter().zip(&self.mean))
                    .map(|(ci, (x, m))| ci * (x - m))
                    .sum()
            })
            .collect()
    }

    /// Random weights for the leading `n_components` modes: zero-mean normal
    /// with the component's variance, truncated at three standard deviations.
    pub fn sample_coefficients(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.n_components.min(self.components.len());
        self.eigenvalues[..k]
            .iter()
            .map(|&var| {
                let z: f64 = loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 3.0 {
                        break z;
                    }
                };
                z * var.max(0.0).sqrt()
            })
            .collect()
    }
}

pub fn sample_augmented_curve(model: &CurveModel, seed: u64) -> Result<MotionCurve, MotionError> {
    model.synthesize(&model.sample_coefficients(seed))
}

// ---------------------------------------------------------------------------
// Synthetic curves

/// Recorded-style head-motion curve: slow drifts, a few abrupt jerks and
/// small jitter, recentered to its median state and scaled so the mean
/// sphere displacement equals `target_mean_mm`.
pub fn synthetic_curve(
    n_samples: usize,
    dt_s: f64,
    target_mean_mm: f64,
    radius_mm: f64,
    seed: u64,
) -> Result<MotionCurve, MotionError> {
    if n_samples < 2 || !(dt_s > 0.0) || !(target_mean_mm >= 0.0) {
        return Err(MotionError::InvalidCurve(
            "need >= 2 samples, positive dt and non-negative target".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // per-channel scale: translations in mm, rotations in degrees
    let scale = [0.5, 0.8, 0.6, 0.6, 0.3, 0.3];
    let mut raw = vec![[0.0f64; 6]; n_samples];
    for (ch, &sc) in scale.iter().enumerate() {
        let mut level = 0.0;
        let mut drift = 0.0;
        let n_jerks = rng.random_range(1..=3);
        let jerks: Vec<(usize, f64)> = (0..n_jerks)
            .map(|_| {
                let at = rng.random_range(0..n_samples);
                let z: f64 = StandardNormal.sample(&mut rng);
                (at, z * sc)
            })
            .collect();
        for (i, row) in raw.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            drift = 0.97 * drift + 0.03 * z * sc;
            level += drift * 0.2;
            for &(at, size) in &jerks {
                if i == at {
                    level += size;
                }
            }
            let jitter: f64 = StandardNormal.sample(&mut rng);
            row[ch] = level + 0.02 * sc * jitter;
        }
    }
    let t_s: Vec<f64> = (0..n_samples).map(|i| i as f64 * dt_s).collect();
    let build = |k: f64| -> Result<MotionCurve, MotionError> {
        let params = raw
            .iter()
            .map(|r| RigidTransform::from_params(r.map(|v| v * k)))
            .collect();
        let c = MotionCurve::new(t_s.clone(), params)?;
        Ok(recenter_to_median(&c, radius_mm))
    };
    if target_mean_mm == 0.0 {
        return build(0.0);
    }
    let mean_at = |k: f64| build(k).map(|c| c.mean_displacement(radius_mm));
    let mut hi = 1.0;
    while mean_at(hi)? < target_mean_mm {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(MotionError::InvalidCurve(
                "could not reach target displacement".into(),
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid)? < target_mean_mm {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    build(0.5 * (lo + hi))
}
