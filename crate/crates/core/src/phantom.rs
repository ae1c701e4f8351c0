//! Synthetic multi-echo T2*-weighted brain phantom.
//!
//! The phantom is a stack of soft-edged ellipsoids, each filled with one
//! tissue. Per voxel, `signal(TE) = sum_k w_k s0_k exp(-TE / T2*_k)` times a
//! unit phasor holding the blended tissue phase and a smooth quadratic
//! background phase.

use ndarray::Array4;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volume::{MultiEchoVolume, Space, VolumeError};

/// Fraction of the slice maximum below which a voxel counts as background.
pub const BACKGROUND_LEVEL: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("tissue list is empty")]
    NoTissues,
    #[error("invalid tissue {label}: {msg}")]
    InvalidTissue { label: String, msg: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueSpec {
    pub label: String,
    pub s0: f64,
    pub t2star_ms: f64,
    #[serde(default)]
    pub phase0_rad: f64,
}

impl TissueSpec {
    pub fn new(label: &str, s0: f64, t2star_ms: f64, phase0_rad: f64) -> Self {
        Self {
            label: label.to_string(),
            s0,
            t2star_ms,
            phase0_rad,
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |msg: &str| PhantomError::InvalidTissue {
            label: self.label.clone(),
            msg: msg.to_string(),
        };
        if !(self.t2star_ms > 0.0) || !self.t2star_ms.is_finite() {
            return Err(bad("T2* must be positive"));
        }
        if !(self.s0 >= 0.0) || !self.s0.is_finite() {
            return Err(bad("s0 must be non-negative"));
        }
        if !self.phase0_rad.is_finite() {
            return Err(bad("phase must be finite"));
        }
        Ok(())
    }
}

/// Gray matter, white matter and CSF with typical 3T values.
pub fn default_tissues() -> Vec<TissueSpec> {
    vec![
        TissueSpec::new("gray_matter", 1.0, 60.0, 0.0),
        TissueSpec::new("white_matter", 0.8, 50.0, 0.0),
        TissueSpec::new("csf", 1.2, 200.0, 0.0),
    ]
}

/// `n` echo times starting at `first_ms` with spacing `spacing_ms`.
pub fn echo_times(n: usize, first_ms: f64, spacing_ms: f64) -> Vec<f64> {
    (0..n).map(|i| first_ms + spacing_ms * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// `[echo, slice, PE, readout]`
    pub dims: [usize; 4],
    pub te_ms: Vec<f64>,
    /// (PE, readout, slice) in mm.
    pub voxel_size_mm: [f64; 3],
    pub tissues: Vec<TissueSpec>,
    /// Width of the tissue boundary transition in mm.
    pub edge_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [12, 16, 64, 64],
            te_ms: echo_times(12, 5.0, 5.0),
            voxel_size_mm: [2.0, 2.0, 3.0],
            tissues: default_tissues(),
            edge_mm: 1.0,
        }
    }
}

struct Ellipsoid {
    /// center in units of the head semi-axes
    center: [f64; 3],
    /// semi-axes in units of the head semi-axes
    axes: [f64; 3],
    /// in-plane rotation in radians
    angle: f64,
    tissue: usize,
}

// (center, axes, in-plane angle in degrees, tissue slot)
// slot 0 = cortex-like, 1 = white-matter-like, 2 = fluid
const LAYOUT: &[([f64; 3], [f64; 3], f64, usize)] = &[
    ([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0),
    ([0.0, 0.02, 0.0], [0.84, 0.87, 0.86], 0.0, 1),
    ([-0.12, 0.06, 0.08], [0.08, 0.28, 0.35], -15.0, 2),
    ([0.12, 0.06, 0.08], [0.08, 0.28, 0.35], 15.0, 2),
    ([-0.34, -0.12, 0.0], [0.11, 0.16, 0.25], 10.0, 0),
    ([0.34, -0.12, 0.0], [0.11, 0.16, 0.25], -10.0, 0),
    ([0.0, 0.62, 0.0], [0.035, 0.3, 0.7], 0.0, 2),
    ([0.45, 0.35, 0.1], [0.07, 0.07, 0.12], 0.0, 2),
    ([-0.4, 0.45, -0.1], [0.09, 0.06, 0.1], 30.0, 0),
];

fn layout(n_tissues: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    LAYOUT
        .iter()
        .enumerate()
        .map(|(i, &(c, a, deg, slot))| {
            // keep the head outline fixed; jitter inner structures
            let j = if i == 0 { 0.0 } else { 1.0 };
            let mut jitter = |x: f64, amp: f64| x + j * amp * (2.0 * rng.random::<f64>() - 1.0);
            Ellipsoid {
                center: [jitter(c[0], 0.02), jitter(c[1], 0.02), jitter(c[2], 0.02)],
                axes: [
                    a[0] * jitter(1.0, 0.05),
                    a[1] * jitter(1.0, 0.05),
                    a[2] * jitter(1.0, 0.05),
                ],
                angle: jitter(deg, 5.0).to_radians(),
                tissue: slot % n_tissues,
            }
        })
        .collect()
}

/// Build a complex image-space phantom. Deterministic given `seed`.
pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<MultiEchoVolume, PhantomError> {
    if spec.tissues.is_empty() {
        return Err(PhantomError::NoTissues);
    }
    for t in &spec.tissues {
        t.validate()?;
    }
    let [ne, ns, np, nr] = spec.dims;
    let out = MultiEchoVolume::zeros(
        spec.dims,
        spec.voxel_size_mm,
        spec.te_ms.clone(),
        Space::Image,
    )?;
    let [vp, vr, vs] = spec.voxel_size_mm;
    let fov = [nr as f64 * vr, np as f64 * vp, ns as f64 * vs];
    // head semi-axes: fill most of the in-plane FOV, extend beyond the slab
    let head = [
        0.49 * fov[0],
        0.49 * fov[1],
        0.5 * fov[2].max(0.8 * fov[0].min(fov[1])),
    ];
    let edge = spec.edge_mm.max(1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = layout(spec.tissues.len(), &mut rng);
    let phase_coef: Vec<f64> = (0..7)
        .map(|_| 0.5 * (2.0 * rng.random::<f64>() - 1.0))
        .collect();

    let nt = spec.tissues.len();
    let mut data = out.into_data();
    let mut weights = vec![0.0; nt];
    for s in 0..ns {
        for p in 0..np {
            for r in 0..nr {
                let x = (r as f64 - (nr as f64 - 1.0) / 2.0) * vr;
                let y = (p as f64 - (np as f64 - 1.0) / 2.0) * vp;
                let z = (s as f64 - (ns as f64 - 1.0) / 2.0) * vs;
                weights.iter_mut().for_each(|w| *w = 0.0);
                for e in &shapes {
                    let dx = x - e.center[0] * head[0];
                    let dy = y - e.center[1] * head[1];
                    let dz = z - e.center[2] * head[2];
                    let (sa, ca) = e.angle.sin_cos();
                    let u = (ca * dx + sa * dy) / (e.axes[0] * head[0]);
                    let v = (-sa * dx + ca * dy) / (e.axes[1] * head[1]);
                    let w = dz / (e.axes[2] * head[2]);
                    let rho = (u * u + v * v + w * w).sqrt();
                    let min_axis = (e.axes[0] * head[0])
                        .min(e.axes[1] * head[1])
                        .min(e.axes[2] * head[2]);
                    let inside = 0.5 * (1.0 + ((1.0 - rho) * min_axis / edge).tanh());
                    if inside == 0.0 {
                        continue;
                    }
                    weights.iter_mut().for_each(|wk| *wk *= 1.0 - inside);
                    weights[e.tissue] += inside;
                }
                let total: f64 = weights.iter().sum();
                if total == 0.0 {
                    continue;
                }
                let tissue_phase: f64 = weights
                    .iter()
                    .zip(&spec.tissues)
                    .map(|(w, t)| w * t.phase0_rad)
                    .sum::<f64>()
                    / total;
                let (xn, yn, zn) = (x / head[0], y / head[1], z / head[2]);
                let c = &phase_coef;
                let bg = c[0]
                    + c[1] * xn
                    + c[2] * yn
                    + c[3] * zn
                    + c[4] * xn * xn
                    + c[5] * yn * yn
                    + c[6] * xn * yn;
                let phasor = Complex64::from_polar(1.0, tissue_phase + bg);
                for e in 0..ne {
                    let te = spec.te_ms[e];
                    let mag: f64 = weights
                        .iter()
                        .zip(&spec.tissues)
                        .map(|(w, t)| w * t.s0 * (-te / t.t2star_ms).exp())
                        .sum();
                    data[(e, s, p, r)] = phasor * mag;
                }
            }
        }
    }
    Ok(MultiEchoVolume::new(
        data,
        spec.voxel_size_mm,
        spec.te_ms.clone(),
        Space::Image,
    )?)
}

/// Fraction of voxels in `slice` whose first-echo magnitude is below 5% of
/// the slice maximum. An all-zero slice is entirely background.
pub fn background_fraction(vol: &MultiEchoVolume, slice: usize) -> f64 {
    let plane = vol.slice(slice);
    let first = plane.index_axis(ndarray::Axis(0), 0);
    let mags: Vec<f64> = first.iter().map(|c| c.norm()).collect();
    let max = mags.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 1.0;
    }
    let below = mags.iter().filter(|&&m| m < BACKGROUND_LEVEL * max).count();
    below as f64 / mags.len() as f64
}

/// Single-tissue block phantom used in tests: `value` everywhere.
pub fn uniform_volume(
    dims: [usize; 4],
    te_ms: Vec<f64>,
    value: Complex64,
) -> Result<MultiEchoVolume, VolumeError> {
    MultiEchoVolume::new(
        Array4::from_elem((dims[0], dims[1], dims[2], dims[3]), value),
        [2.0, 2.0, 3.0],
        te_ms,
        Space::Image,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::fft2_per_slice;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            dims: [4, 6, 32, 32],
            te_ms: vec![0.0, 20.0, 50.0, 80.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn single_tissue_center_follows_exponential_decay() {
        let spec = PhantomSpec {
            tissues: vec![TissueSpec::new("block", 100.0, 50.0, 0.3)],
            ..small_spec()
        };
        let v = make_phantom(&spec, 0).unwrap();
        // even dims: average the four voxels nearest the center is unnecessary,
        // the head interior is uniform
        let c = v.data()[(0, 3, 16, 16)].norm();
        assert!((c - 100.0).abs() < 1e-9, "{c}");
        let c50 = v.data()[(2, 3, 16, 16)].norm();
        assert!((c50 - 100.0 / std::f64::consts::E).abs() < 1e-9, "{c50}");
    }

    #[test]
    fn magnitude_decreases_across_echoes_in_brain() {
        let v = make_phantom(&small_spec(), 4).unwrap();
        let mag = v.magnitude();
        let max = mag.iter().cloned().fold(0.0, f64::max);
        let [ne, ns, np, nr] = v.dims();
        for s in 0..ns {
            for p in 0..np {
                for r in 0..nr {
                    if mag[(0, s, p, r)] < 1e-6 * max {
                        continue;
                    }
                    for e in 1..ne {
                        assert!(mag[(e, s, p, r)] < mag[(e - 1, s, p, r)]);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = make_phantom(&small_spec(), 9).unwrap();
        let b = make_phantom(&small_spec(), 9).unwrap();
        let c = make_phantom(&small_spec(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_tissue_list_is_an_error() {
        let spec = PhantomSpec {
            tissues: vec![],
            ..small_spec()
        };
        assert!(matches!(
            make_phantom(&spec, 0),
            Err(PhantomError::NoTissues)
        ));
    }

    #[test]
    fn invalid_tissue_is_an_error() {
        let spec = PhantomSpec {
            tissues: vec![TissueSpec::new("bad", 1.0, 0.0, 0.0)],
            ..small_spec()
        };
        assert!(matches!(
            make_phantom(&spec, 0),
            Err(PhantomError::InvalidTissue { .. })
        ));
    }

    #[test]
    fn background_fraction_edge_cases() {
        let te = vec![5.0];
        let zero = uniform_volume([1, 1, 4, 4], te.clone(), Complex64::new(0.0, 0.0)).unwrap();
        assert_eq!(background_fraction(&zero, 0), 1.0);
        let bright = uniform_volume([1, 1, 4, 4], te.clone(), Complex64::new(1.0, 1.0)).unwrap();
        assert_eq!(background_fraction(&bright, 0), 0.0);
        let mut half = bright.clone();
        half.data_mut()
            .slice_mut(ndarray::s![.., .., 0..2, ..])
            .fill(Complex64::new(0.0, 0.0));
        assert_eq!(background_fraction(&half, 0), 0.5);
    }

    #[test]
    fn energy_sits_in_central_k_space() {
        let v = make_phantom(&PhantomSpec::default(), 1).unwrap();
        let k = fft2_per_slice(&v).unwrap();
        let [_, _, np, nr] = k.dims();
        let total = k.energy();
        let mut central = 0.0;
        for ((_, _, p, r), c) in k.data().indexed_iter() {
            let dp = (p as i64 - (np / 2) as i64).unsigned_abs() as usize;
            let dr = (r as i64 - (nr / 2) as i64).unsigned_abs() as usize;
            if dp < np / 4 && dr < nr / 4 {
                central += c.norm_sqr();
            }
        }
        assert!(central / total >= 0.9, "{}", central / total);
    }

    #[test]
    fn default_phantom_keeps_most_central_slices() {
        let v = make_phantom(&PhantomSpec::default(), 1).unwrap();
        let fractions: Vec<f64> = (0..v.n_slices())
            .map(|s| background_fraction(&v, s))
            .collect();
        let kept = fractions.iter().filter(|&&f| f <= 0.3).count();
        assert!(kept >= v.n_slices() / 2, "{fractions:?}");
        assert!(kept < v.n_slices(), "{fractions:?}");
    }
}
