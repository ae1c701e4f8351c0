//! Complex multi-echo volumes, the on-disk volume format and per-slice 2D FFTs.
//!
//! Arrays are laid out as `[echo, slice, phase-encode, readout]`. Samples are
//! held in double precision in memory and stored as little-endian `f32` pairs
//! on disk, so any volume whose samples are `f32`-representable round-trips
//! bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_MARKER: &str = "---";

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("echo times not strictly increasing")]
    EchoTimesNotIncreasing,
    #[error("expected {expected:?}-space volume, got {found:?}-space")]
    WrongSpace { expected: Space, found: Space },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Image,
    Kspace,
}

/// Complex data over `[echo, slice, PE, readout]` with its acquisition geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEchoVolume {
    data: Array4<Complex64>,
    /// Voxel size in mm, ordered (PE, readout, slice).
    voxel_size_mm: [f64; 3],
    te_ms: Vec<f64>,
    space: Space,
}

/// Header block of the volume file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub version: u32,
    pub dims: [usize; 4],
    pub voxel_size_mm: [f64; 3],
    pub te_ms: Vec<f64>,
    pub space: Space,
}

fn validate_echo_times(te_ms: &[f64], n_echoes: usize) -> Result<(), VolumeError> {
    if te_ms.len() != n_echoes {
        return Err(VolumeError::Invalid(format!(
            "{} echo times for {} echoes",
            te_ms.len(),
            n_echoes
        )));
    }
    if te_ms.iter().any(|t| !t.is_finite()) {
        return Err(VolumeError::Invalid("non-finite echo time".into()));
    }
    if te_ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(VolumeError::EchoTimesNotIncreasing);
    }
    Ok(())
}

impl MultiEchoVolume {
    pub fn new(
        data: Array4<Complex64>,
        voxel_size_mm: [f64; 3],
        te_ms: Vec<f64>,
        space: Space,
    ) -> Result<Self, VolumeError> {
        let dims = data.dim();
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 || dims.3 == 0 {
            return Err(VolumeError::Invalid(format!("empty dimension in {dims:?}")));
        }
        if voxel_size_mm.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(VolumeError::Invalid(format!(
                "voxel size must be positive, got {voxel_size_mm:?}"
            )));
        }
        validate_echo_times(&te_ms, dims.0)?;
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            voxel_size_mm,
            te_ms,
            space,
        })
    }

    pub fn zeros(
        dims: [usize; 4],
        voxel_size_mm: [f64; 3],
        te_ms: Vec<f64>,
        space: Space,
    ) -> Result<Self, VolumeError> {
        Self::new(
            Array4::zeros((dims[0], dims[1], dims[2], dims[3])),
            voxel_size_mm,
            te_ms,
            space,
        )
    }

    pub fn data(&self) -> &Array4<Complex64> {
        &self.data
    }

    /// Mutable access to the samples. The shape cannot change through a view.
    pub fn data_mut(&mut self) -> ndarray::ArrayViewMut4<'_, Complex64> {
        self.data.view_mut()
    }

    pub fn into_data(self) -> Array4<Complex64> {
        self.data
    }

    /// Same geometry and echo times, new samples and space tag.
    pub fn with_data(&self, data: Array4<Complex64>, space: Space) -> Result<Self, VolumeError> {
        if data.dim() != self.data.dim() {
            return Err(VolumeError::Invalid(format!(
                "shape {:?} does not match {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Ok(Self {
            data,
            voxel_size_mm: self.voxel_size_mm,
            te_ms: self.te_ms.clone(),
            space,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        let d = self.data.dim();
        [d.0, d.1, d.2, d.3]
    }

    pub fn n_echoes(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_slices(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_pe(&self) -> usize {
        self.data.dim().2
    }

    pub fn n_readout(&self) -> usize {
        self.data.dim().3
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn te_ms(&self) -> &[f64] {
        &self.te_ms
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn require_space(&self, expected: Space) -> Result<(), VolumeError> {
        if self.space != expected {
            return Err(VolumeError::WrongSpace {
                expected,
                found: self.space,
            });
        }
        Ok(())
    }

    /// `[echo, PE, readout]` view of one slice.
    pub fn slice(&self, s: usize) -> ArrayView3<'_, Complex64> {
        self.data.index_axis(Axis(1), s)
    }

    /// Volume holding only slice `s`.
    pub fn extract_slice(&self, s: usize) -> MultiEchoVolume {
        let data = self
            .data
            .slice(ndarray::s![.., s..s + 1, .., ..])
            .to_owned();
        Self {
            data,
            voxel_size_mm: self.voxel_size_mm,
            te_ms: self.te_ms.clone(),
            space: self.space,
        }
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            version: FORMAT_VERSION,
            dims: self.dims(),
            voxel_size_mm: self.voxel_size_mm,
            te_ms: self.te_ms.clone(),
            space: self.space,
        }
    }

    /// Sum of squared magnitudes over all samples.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Magnitude of every sample, `[echo, slice, PE, readout]`.
    pub fn magnitude(&self) -> Array4<f64> {
        self.data.mapv(|c| c.norm())
    }
}

pub fn write_volume(vol: &MultiEchoVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &vol.header())
        .map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
    w.write_all(b"\n")?;
    w.write_all(HEADER_MARKER.as_bytes())?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(vol.data.len() * 8);
    for c in vol.data.iter() {
        buf.extend_from_slice(&(c.re as f32).to_le_bytes());
        buf.extend_from_slice(&(c.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<MultiEchoVolume, VolumeError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_text = String::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(VolumeError::MalformedHeader(
                "missing `---` marker line".into(),
            ));
        }
        if line.trim_end_matches(['\n', '\r']) == HEADER_MARKER {
            break;
        }
        header_text.push_str(&line);
    }
    let header: VolumeHeader = serde_json::from_str(&header_text)
        .map_err(|e| VolumeError::MalformedHeader(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(VolumeError::MalformedHeader(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let [e, s, p, rd] = header.dims;
    let n = e
        .checked_mul(s)
        .and_then(|v| v.checked_mul(p))
        .and_then(|v| v.checked_mul(rd))
        .ok_or_else(|| VolumeError::MalformedHeader("dims overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * 8 {
        return Err(VolumeError::PayloadLengthMismatch {
            expected: n * 8,
            found: payload.len(),
        });
    }
    let samples: Vec<Complex64> = payload
        .chunks_exact(8)
        .map(|b| {
            let re = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            let im = f32::from_le_bytes([b[4], b[5], b[6], b[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    let data = Array4::from_shape_vec((e, s, p, rd), samples)
        .map_err(|err| VolumeError::MalformedHeader(err.to_string()))?;
    MultiEchoVolume::new(data, header.voxel_size_mm, header.te_ms, header.space)
}

/// Centered, unitary 2D DFT over a `[PE, readout]` plane.
///
/// k-space is stored with DC at index `(P/2, R/2)` and both directions are
/// scaled by `1/sqrt(P*R)`.
pub struct Fft2 {
    n_rows: usize,
    n_cols: usize,
    fwd_rows: Arc<dyn Fft<f64>>,
    fwd_cols: Arc<dyn Fft<f64>>,
    inv_rows: Arc<dyn Fft<f64>>,
    inv_cols: Arc<dyn Fft<f64>>,
    line: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd_rows = planner.plan_fft_forward(n_cols);
        let fwd_cols = planner.plan_fft_forward(n_rows);
        let inv_rows = planner.plan_fft_inverse(n_cols);
        let inv_cols = planner.plan_fft_inverse(n_rows);
        let scratch_len = [&fwd_rows, &fwd_cols, &inv_rows, &inv_cols]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            n_rows,
            n_cols,
            fwd_rows,
            fwd_cols,
            inv_rows,
            inv_cols,
            line: vec![Complex64::new(0.0, 0.0); n_rows.max(n_cols)],
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn forward(&mut self, plane: ArrayViewMut2<'_, Complex64>) {
        self.transform(plane, true);
    }

    pub fn inverse(&mut self, plane: ArrayViewMut2<'_, Complex64>) {
        self.transform(plane, false);
    }

    pub fn forward_owned(&mut self, plane: &Array2<Complex64>) -> Array2<Complex64> {
        let mut out = plane.clone();
        self.forward(out.view_mut());
        out
    }

    pub fn inverse_owned(&mut self, plane: &Array2<Complex64>) -> Array2<Complex64> {
        let mut out = plane.clone();
        self.inverse(out.view_mut());
        out
    }

    fn transform(&mut self, mut plane: ArrayViewMut2<'_, Complex64>, forward: bool) {
        assert_eq!(
            plane.dim(),
            (self.n_rows, self.n_cols),
            "plane shape does not match FFT plan"
        );
        let (row_fft, col_fft) = if forward {
            (self.fwd_rows.clone(), self.fwd_cols.clone())
        } else {
            (self.inv_rows.clone(), self.inv_cols.clone())
        };
        let scale_r = 1.0 / (self.n_cols as f64).sqrt();
        let scale_c = 1.0 / (self.n_rows as f64).sqrt();
        for row in plane.rows_mut() {
            self.centered_1d(row, row_fft.as_ref(), scale_r);
        }
        for col in plane.columns_mut() {
            self.centered_1d(col, col_fft.as_ref(), scale_c);
        }
    }

    // ifftshift -> FFT -> fftshift, scaled.
    fn centered_1d(
        &mut self,
        mut lane: ndarray::ArrayViewMut1<'_, Complex64>,
        fft: &dyn Fft<f64>,
        scale: f64,
    ) {
        let n = lane.len();
        let half = n / 2;
        let buf = &mut self.line[..n];
        for i in 0..n {
            buf[i] = lane[(i + half) % n];
        }
        fft.process_with_scratch(buf, &mut self.scratch);
        for i in 0..n {
            lane[(i + half) % n] = buf[i] * scale;
        }
    }
}

fn transform_per_slice(vol: &MultiEchoVolume, forward: bool) -> MultiEchoVolume {
    let mut data = vol.data.clone();
    let mut fft = Fft2::new(vol.n_pe(), vol.n_readout());
    for mut echo in data.outer_iter_mut() {
        for plane in echo.outer_iter_mut() {
            fft.transform(plane, forward);
        }
    }
    MultiEchoVolume {
        data,
        voxel_size_mm: vol.voxel_size_mm,
        te_ms: vol.te_ms.clone(),
        space: if forward { Space::Kspace } else { Space::Image },
    }
}

/// Image -> k-space, one unitary 2D transform per (echo, slice).
pub fn fft2_per_slice(vol: &MultiEchoVolume) -> Result<MultiEchoVolume, VolumeError> {
    vol.require_space(Space::Image)?;
    Ok(transform_per_slice(vol, true))
}

/// k-space -> image, inverse of [`fft2_per_slice`].
pub fn ifft2_per_slice(vol: &MultiEchoVolume) -> Result<MultiEchoVolume, VolumeError> {
    vol.require_space(Space::Kspace)?;
    Ok(transform_per_slice(vol, false))
}
