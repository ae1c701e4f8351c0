//! Motion-weighted total-variation reconstruction.
//!
//! Solves, independently for every (slice, echo),
//!
//! ```text
//! min_x  1/2 ||W (A x - y)||^2 + lambda ||Phi x||_1
//! ```
//!
//! with `A` the unitary 2D Fourier transform, `W` a diagonal weight that is
//! constant along each PE line and `Phi` isotropic forward differences. The
//! solver is proximal gradient descent with a dual-projection TV prox.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::labels::LineLabelMask;
use crate::volume::{Fft2, MultiEchoVolume, Space, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum ReconError {
    #[error("data-consistency weights must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("invalid recon config: {0}")]
    Config(String),
    #[error("label mask is {mask:?} but k-space has {slices} slices x {pe} lines")]
    MaskShape {
        mask: (usize, usize),
        slices: usize,
        pe: usize,
    },
    #[error("diverged at slice {slice}, echo {echo}, iteration {iteration}: objective {objective:.4e} exceeds 10x initial {initial:.4e}")]
    Diverged {
        slice: usize,
        echo: usize,
        iteration: usize,
        objective: f64,
        initial: f64,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_inner")]
    pub tv_inner_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Weight of lines labelled 0 (motion-corrupted).
    #[serde(default = "default_corrupted_weight")]
    pub corrupted_weight: f64,
    /// Weight of lines labelled 1.
    #[serde(default = "default_clean_weight")]
    pub clean_weight: f64,
    /// Each 2D problem is scaled so that `max |A^H y|` equals this value.
    #[serde(default = "default_intensity_scale")]
    pub intensity_scale: f64,
}

fn default_lambda() -> f64 {
    2.0
}
fn default_max_iter() -> usize {
    200
}
fn default_step() -> f64 {
    1.0
}
fn default_inner() -> usize {
    20
}
fn default_tol() -> f64 {
    1e-5
}
fn default_corrupted_weight() -> f64 {
    0.25
}
fn default_clean_weight() -> f64 {
    1.0
}
fn default_intensity_scale() -> f64 {
    4095.0
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            max_iter: default_max_iter(),
            step: default_step(),
            tv_inner_iter: default_inner(),
            tol: default_tol(),
            corrupted_weight: default_corrupted_weight(),
            clean_weight: default_clean_weight(),
            intensity_scale: default_intensity_scale(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), ReconError> {
        for w in [self.corrupted_weight, self.clean_weight] {
            if !(w > 0.0) || !w.is_finite() {
                return Err(ReconError::NonPositiveWeight(w));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(ReconError::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        let w_max = self.corrupted_weight.max(self.clean_weight);
        if !(self.step > 0.0) || self.step * w_max * w_max > 2.0 {
            return Err(ReconError::Config(format!(
                "step {} must lie in (0, 2 / max(w)^2]",
                self.step
            )));
        }
        if !(self.intensity_scale > 0.0) {
            return Err(ReconError::Config(
                "intensity_scale must be positive".into(),
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(ReconError::Config("tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-PE-line data-consistency weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DCWeights {
    pub w: Vec<f64>,
}

impl DCWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, ReconError> {
        if let Some(&bad) = w.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(ReconError::NonPositiveWeight(bad));
        }
        Ok(Self { w })
    }

    pub fn from_labels(labels: &[u8], cfg: &ReconConfig) -> Result<Self, ReconError> {
        Self::new(
            labels
                .iter()
                .map(|&l| {
                    if l == 1 {
                        cfg.clean_weight
                    } else {
                        cfg.corrupted_weight
                    }
                })
                .collect(),
        )
    }

    pub fn max(&self) -> f64 {
        self.w.iter().copied().fold(0.0, f64::max)
    }
}

/// Forward differences along PE (index 0) and readout (index 1), zero in the
/// last row/column.
pub fn finite_diff(x: ArrayView2<'_, Complex64>) -> Array3<Complex64> {
    let (np, nr) = x.dim();
    let mut d = Array3::zeros((2, np, nr));
    if np > 1 {
        let diff = &x.slice(s![1.., ..]) - &x.slice(s![..-1, ..]);
        d.slice_mut(s![0, ..-1, ..]).assign(&diff);
    }
    if nr > 1 {
        let diff = &x.slice(s![.., 1..]) - &x.slice(s![.., ..-1]);
        d.slice_mut(s![1, .., ..-1]).assign(&diff);
    }
    d
}

/// Adjoint of [`finite_diff`] (negative divergence).
pub fn finite_diff_adjoint(z: ArrayView3<'_, Complex64>) -> Array2<Complex64> {
    let (_, np, nr) = z.dim();
    let mut out = Array2::zeros((np, nr));
    if np > 1 {
        let zp = z.index_axis(Axis(0), 0);
        out.slice_mut(s![..-1, ..])
            .zip_mut_with(&zp.slice(s![..-1, ..]), |o, v| *o -= v);
        out.slice_mut(s![1.., ..])
            .zip_mut_with(&zp.slice(s![..-1, ..]), |o, v| *o += v);
    }
    if nr > 1 {
        let zr = z.index_axis(Axis(0), 1);
        out.slice_mut(s![.., ..-1])
            .zip_mut_with(&zr.slice(s![.., ..-1]), |o, v| *o -= v);
        out.slice_mut(s![.., 1..])
            .zip_mut_with(&zr.slice(s![.., ..-1]), |o, v| *o += v);
    }
    out
}

/// Isotropic TV, `sum sqrt(|d_pe|^2 + |d_ro|^2)`.
pub fn tv_norm(x: ArrayView2<'_, Complex64>) -> f64 {
    let d = finite_diff(x);
    Zip::from(d.index_axis(Axis(0), 0))
        .and(d.index_axis(Axis(0), 1))
        .fold(0.0, |acc, a, b| acc + (a.norm_sqr() + b.norm_sqr()).sqrt())
}

/// Approximate `argmin_u 1/2 ||u - z||^2 + theta ||Phi u||_1`.
pub fn tv_prox(z: ArrayView2<'_, Complex64>, theta: f64, inner_iter: usize) -> Array2<Complex64> {
    let (np, nr) = z.dim();
    let mut dual = Array3::zeros((2, np, nr));
    tv_prox_warm(z, theta, inner_iter, &mut dual)
}

/// [`tv_prox`] starting from (and updating) the dual variable `dual`.
pub fn tv_prox_warm(
    z: ArrayView2<'_, Complex64>,
    theta: f64,
    inner_iter: usize,
    dual: &mut Array3<Complex64>,
) -> Array2<Complex64> {
    if theta <= 0.0 {
        return z.to_owned();
    }
    // ||Phi||^2 <= 8
    let tau = 1.0 / (8.0 * theta);
    let primal = |dual: &Array3<Complex64>| {
        let mut u = finite_diff_adjoint(dual.view());
        u.zip_mut_with(&z, |u, z| *u = z - *u * theta);
        u
    };
    for _ in 0..inner_iter {
        let u = primal(dual);
        let g = finite_diff(u.view());
        let (mut d0, mut d1) = dual.multi_slice_mut((s![0, .., ..], s![1, .., ..]));
        Zip::from(&mut d0)
            .and(&mut d1)
            .and(g.index_axis(Axis(0), 0))
            .and(g.index_axis(Axis(0), 1))
            .for_each(|p0, p1, g0, g1| {
                let a = *p0 + g0 * tau;
                let b = *p1 + g1 * tau;
                let n = (a.norm_sqr() + b.norm_sqr()).sqrt().max(1.0);
                *p0 = a / n;
                *p1 = b / n;
            });
    }
    primal(dual)
}

/// Objective and convergence record of one 2D problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconTrace {
    pub slice: usize,
    pub echo: usize,
    /// Objective of `x0` followed by one value per iteration, in scaled units.
    pub objective: Vec<f64>,
    pub best_iteration: usize,
    pub converged: bool,
    /// Factor applied to the k-space before solving.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconOutput {
    pub image: MultiEchoVolume,
    pub traces: Vec<ReconTrace>,
}

fn objective(
    x: ArrayView2<'_, Complex64>,
    y: ArrayView2<'_, Complex64>,
    w: &[f64],
    lambda: f64,
    fft: &mut Fft2,
) -> f64 {
    let ax = fft.forward_owned(&x.to_owned());
    let dc = Zip::indexed(&ax).and(&y).fold(0.0, |acc, (p, _), a, b| {
        acc + w[p] * w[p] * (a - b).norm_sqr()
    });
    let tv = if lambda > 0.0 { tv_norm(x) } else { 0.0 };
    0.5 * dc + lambda * tv
}

/// Solve one (slice, echo) problem on k-space `y` of shape `[PE, readout]`.
/// Returns the image in the units of `y` and its trace.
pub fn recon_plane(
    y: ArrayView2<'_, Complex64>,
    weights: &DCWeights,
    cfg: &ReconConfig,
    fft: &mut Fft2,
    slice: usize,
    echo: usize,
) -> Result<(Array2<Complex64>, ReconTrace), ReconError> {
    let x0_raw = fft.inverse_owned(&y.to_owned());
    let peak = x0_raw.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let scale = if peak > 0.0 {
        cfg.intensity_scale / peak
    } else {
        1.0
    };
    let y = y.mapv(|v| v * scale);
    let w = &weights.w;
    let w2: Vec<f64> = w.iter().map(|v| v * v).collect();

    let mut x = x0_raw.mapv(|v| v * scale);
    let mut dual = Array3::zeros((2, x.nrows(), x.ncols()));
    let initial = objective(x.view(), y.view(), w, cfg.lambda, fft);
    let mut trace = vec![initial];
    let mut best = x.clone();
    let mut best_obj = initial;
    let mut best_iteration = 0;
    let mut converged = false;

    for it in 1..=cfg.max_iter {
        let mut r = fft.forward_owned(&x);
        Zip::indexed(&mut r)
            .and(&y)
            .for_each(|(p, _), v, yv| *v = (*v - yv) * w2[p]);
        let grad = fft.inverse_owned(&r);
        let mut v = x.clone();
        v.zip_mut_with(&grad, |v, g| *v -= g * cfg.step);
        let next = tv_prox_warm(
            v.view(),
            cfg.step * cfg.lambda,
            cfg.tv_inner_iter,
            &mut dual,
        );

        let diff: f64 = next
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let norm: f64 = x.iter().map(|a| a.norm_sqr()).sum();
        x = next;
        let obj = objective(x.view(), y.view(), w, cfg.lambda, fft);
        trace.push(obj);
        if !obj.is_finite() || obj > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(ReconError::Diverged {
                slice,
                echo,
                iteration: it,
                objective: obj,
                initial,
            });
        }
        if obj < best_obj {
            best_obj = obj;
            best.assign(&x);
            best_iteration = it;
        }
        if diff.sqrt() <= cfg.tol * norm.sqrt() {
            converged = true;
            break;
        }
    }
    best.mapv_inplace(|v| v / scale);
    Ok((
        best,
        ReconTrace {
            slice,
            echo,
            objective: trace,
            best_iteration,
            converged,
            scale,
        },
    ))
}

/// Weighted TV reconstruction of every slice and echo of `y`.
///
/// `labels` holds one row per slice, or a single row applied to all slices.
/// Lines labelled 1 get `clean_weight`, lines labelled 0 `corrupted_weight`.
pub fn weighted_tv_recon(
    y: &MultiEchoVolume,
    labels: &LineLabelMask,
    cfg: &ReconConfig,
) -> Result<ReconOutput, ReconError> {
    y.require_space(Space::Kspace)?;
    cfg.validate()?;
    let [ne, ns, np, nr] = y.dims();
    if labels.n_pe() != np || (labels.n_slices() != ns && labels.n_slices() != 1) {
        return Err(ReconError::MaskShape {
            mask: (labels.n_slices(), labels.n_pe()),
            slices: ns,
            pe: np,
        });
    }
    let weights: Vec<DCWeights> = (0..labels.n_slices())
        .map(|s| {
            let row: Vec<u8> = labels.labels().row(s).to_vec();
            DCWeights::from_labels(&row, cfg)
        })
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(usize, usize)> = (0..ns).flat_map(|s| (0..ne).map(move |e| (s, e))).collect();
    let solved: Vec<Result<(Array2<Complex64>, ReconTrace), ReconError>> = jobs
        .par_iter()
        .map_init(
            || Fft2::new(np, nr),
            |fft, &(s, e)| {
                let w = &weights[if weights.len() == 1 { 0 } else { s }];
                recon_plane(y.data().slice(s![e, s, .., ..]), w, cfg, fft, s, e)
            },
        )
        .collect();

    let mut data = y.data().clone();
    let mut traces = Vec::with_capacity(jobs.len());
    for r in solved {
        let (img, trace) = r?;
        data.slice_mut(s![trace.echo, trace.slice, .., ..])
            .assign(&img);
        traces.push(trace);
    }
    Ok(ReconOutput {
        image: y.with_data(data, Space::Image)?,
        traces,
    })
}
