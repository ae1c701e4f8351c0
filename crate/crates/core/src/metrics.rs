//! Line-classification and image-quality metrics.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::labels::LineLabelMask;
use crate::volume::{MultiEchoVolume, Space, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {0:?} is smaller than the {1}x{1} SSIM window")]
    TooSmall((usize, usize), usize),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Confusion counts with 1 = motion-free as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    /// target 1, pred 1
    pub true_clean: usize,
    /// target 0, pred 0
    pub true_motion: usize,
    /// target 0, pred 1 (non-detected)
    pub missed_motion: usize,
    /// target 1, pred 0 (wrongly detected)
    pub false_motion: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.true_clean + self.true_motion + self.missed_motion + self.false_motion
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub accuracy: f64,
    /// Fraction of motion lines predicted clean; `None` without motion lines.
    pub nd_rate: Option<f64>,
    /// Fraction of clean lines predicted as motion; `None` without clean lines.
    pub wd_rate: Option<f64>,
    pub counts: Counts,
}

pub fn confusion(pred: &[u8], target: &[u8]) -> Result<Counts, MetricsError> {
    if pred.len() != target.len() {
        return Err(MetricsError::Shape(vec![pred.len()], vec![target.len()]));
    }
    let mut c = Counts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (t, p) {
            (1, 1) => c.true_clean += 1,
            (1, _) => c.false_motion += 1,
            (_, 1) => c.missed_motion += 1,
            _ => c.true_motion += 1,
        }
    }
    Ok(c)
}

impl ClassReport {
    pub fn from_counts(counts: Counts) -> Result<Self, MetricsError> {
        let total = counts.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let motion = counts.true_motion + counts.missed_motion;
        let clean = counts.true_clean + counts.false_motion;
        Ok(Self {
            accuracy: (counts.true_clean + counts.true_motion) as f64 / total as f64,
            nd_rate: (motion > 0).then(|| counts.missed_motion as f64 / motion as f64),
            wd_rate: (clean > 0).then(|| counts.false_motion as f64 / clean as f64),
            counts,
        })
    }
}

pub fn classification_report(
    pred: &LineLabelMask,
    target: &LineLabelMask,
) -> Result<ClassReport, MetricsError> {
    if pred.labels().dim() != target.labels().dim() {
        return Err(MetricsError::Shape(
            pred.labels().shape().to_vec(),
            target.labels().shape().to_vec(),
        ));
    }
    let p: Vec<u8> = pred.labels().iter().copied().collect();
    let t: Vec<u8> = target.labels().iter().copied().collect();
    ClassReport::from_counts(confusion(&p, &t)?)
}

fn check_same(a: &[usize], b: &[usize]) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::Shape(a.to_vec(), b.to_vec()));
    }
    if a.iter().product::<usize>() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// `10 log10(max|ref|^2 / MSE)`; infinite when the images are equal.
pub fn psnr_slice(x: &[f64], reference: &[f64]) -> Result<f64, MetricsError> {
    check_same(&[x.len()], &[reference.len()])?;
    let range = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mse = x
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

pub fn psnr(x: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64, MetricsError> {
    check_same(x.shape(), reference.shape())?;
    let a: Vec<f64> = x.iter().copied().collect();
    let b: Vec<f64> = reference.iter().copied().collect();
    psnr_slice(&a, &b)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h - n + 1, w), |(i, j)| {
        (0..n).map(|t| k[t] * img[(i + t, j)]).sum::<f64>()
    });
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(i, j)| {
        (0..n).map(|t| k[t] * rows[(i, j + t)]).sum::<f64>()
    })
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and data range
/// `max|ref|`.
pub fn ssim(x: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64, MetricsError> {
    check_same(x.shape(), reference.shape())?;
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall((h, w), SSIM_WINDOW));
    }
    let range = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let k = gaussian_kernel();
    let a = x.to_owned();
    let b = reference.to_owned();
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let mut total = 0.0;
    for i in 0..mu_a.len_of(Axis(0)) {
        for j in 0..mu_a.len_of(Axis(1)) {
            let (ma, mb) = (mu_a[(i, j)], mu_b[(i, j)]);
            let va = aa[(i, j)] - ma * ma;
            let vb = bb[(i, j)] - mb * mb;
            let cov = ab[(i, j)] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += if den == 0.0 { 1.0 } else { num / den };
        }
    }
    Ok(total / mu_a.len() as f64)
}

/// PSNR and SSIM of magnitude images, per echo, averaged over slices for SSIM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub psnr_db: f64,
    pub ssim: f64,
    pub psnr_per_echo: Vec<f64>,
    pub ssim_per_echo: Vec<f64>,
}

/// Compare magnitudes of two image-space volumes. PSNR is taken over the
/// whole volume, SSIM is the mean over all (echo, slice) planes.
pub fn image_quality(
    x: &MultiEchoVolume,
    reference: &MultiEchoVolume,
) -> Result<ImageQuality, MetricsError> {
    x.require_space(Space::Image)?;
    reference.require_space(Space::Image)?;
    check_same(&x.dims(), &reference.dims())?;
    let a = x.magnitude();
    let b = reference.magnitude();
    let flat_a: Vec<f64> = a.iter().copied().collect();
    let flat_b: Vec<f64> = b.iter().copied().collect();
    let psnr_db = psnr_slice(&flat_a, &flat_b)?;
    let mut psnr_per_echo = Vec::new();
    let mut ssim_per_echo = Vec::new();
    for e in 0..x.n_echoes() {
        let ea: Vec<f64> = a.slice(s![e, .., .., ..]).iter().copied().collect();
        let eb: Vec<f64> = b.slice(s![e, .., .., ..]).iter().copied().collect();
        psnr_per_echo.push(psnr_slice(&ea, &eb)?);
        let mut acc = 0.0;
        for sl in 0..x.n_slices() {
            acc += ssim(a.slice(s![e, sl, .., ..]), b.slice(s![e, sl, .., ..]))?;
        }
        ssim_per_echo.push(acc / x.n_slices() as f64);
    }
    let ssim = ssim_per_echo.iter().sum::<f64>() / ssim_per_echo.len() as f64;
    Ok(ImageQuality {
        psnr_db,
        ssim,
        psnr_per_echo,
        ssim_per_echo,
    })
}
