//! Per-line k-space normalisation for classifier inputs and binary
//! motion labels per phase-encode line (`1` = motion-free, `0` = corrupted).

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::volume::{MultiEchoVolume, Space, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("label values must be 0 or 1, found {0}")]
    NotBinary(u8),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite k-space sample at {0:?}")]
    NonFinite([usize; 4]),
    #[error("label file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary label per (slice, PE line).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineLabelMask {
    labels: Array2<u8>,
}

impl LineLabelMask {
    pub fn new(labels: Array2<u8>) -> Result<Self, LabelError> {
        if let Some(&bad) = labels.iter().find(|&&v| v > 1) {
            return Err(LabelError::NotBinary(bad));
        }
        if labels.is_empty() {
            return Err(LabelError::LengthMismatch("empty label mask".into()));
        }
        Ok(Self { labels })
    }

    pub fn all_clean(n_slices: usize, n_pe: usize) -> Self {
        Self {
            labels: Array2::ones((n_slices, n_pe)),
        }
    }

    /// One-slice mask from a list of line labels.
    pub fn from_line(line: &[u8]) -> Result<Self, LabelError> {
        Self::new(Array2::from_shape_vec((1, line.len()), line.to_vec()).expect("1 x n shape"))
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn n_slices(&self) -> usize {
        self.labels.nrows()
    }

    pub fn n_pe(&self) -> usize {
        self.labels.ncols()
    }

    pub fn get(&self, slice: usize, line: usize) -> u8 {
        self.labels[(slice, line)]
    }

    /// Mask holding only `slice`.
    pub fn row(&self, slice: usize) -> LineLabelMask {
        Self {
            labels: self
                .labels
                .slice(ndarray::s![slice..slice + 1, ..])
                .to_owned(),
        }
    }

    pub fn count_corrupted(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 0).count()
    }

    pub fn to_csv(&self, d_min_mm: Option<f64>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# convention: 1 = motion-free, 0 = motion-corrupted");
        if let Some(d) = d_min_mm {
            let _ = writeln!(out, "# d_min_mm={d}");
        }
        for row in self.labels.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, LabelError> {
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Result<Vec<u8>, _> = line.split(',').map(|v| v.trim().parse::<u8>()).collect();
            let row = row.map_err(|e| LabelError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(LabelError::Parse {
                        line: i + 1,
                        msg: format!("expected {} values, found {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(LabelError::Parse {
                line: 0,
                msg: "no label rows".into(),
            });
        }
        let (ns, np) = (rows.len(), rows[0].len());
        let flat: Vec<u8> = rows.into_iter().flatten().collect();
        Self::new(Array2::from_shape_vec((ns, np), flat).expect("rectangular rows"))
    }
}

pub fn write_labels(
    mask: &LineLabelMask,
    d_min_mm: Option<f64>,
    path: impl AsRef<Path>,
) -> Result<(), LabelError> {
    std::fs::write(path, mask.to_csv(d_min_mm))?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LineLabelMask, LabelError> {
    LineLabelMask::from_csv(&std::fs::read_to_string(path)?)
}

/// Summation axes of the per-line normalisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxes {
    /// Each PE line of a slice is scaled to unit energy over (echo, readout).
    #[default]
    EchoReadout,
    /// Each readout column of a slice is scaled to unit energy over (echo, PE).
    EchoPe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedKspace {
    pub kspace: MultiEchoVolume,
    /// `(slice, index)` of lines (or columns in `EchoPe` mode) with zero energy.
    pub zero_lines: Vec<(usize, usize)>,
}

pub fn normalize_lines(
    y: &MultiEchoVolume,
    axes: NormAxes,
) -> Result<NormalizedKspace, LabelError> {
    y.require_space(Space::Kspace)?;
    if let Some((idx, _)) = y.data().indexed_iter().find(|(_, c)| !c.is_finite()) {
        return Err(LabelError::NonFinite([idx.0, idx.1, idx.2, idx.3]));
    }
    let [_, ns, np, nr] = y.dims();
    let mut data = y.data().clone();
    let mut zero_lines = Vec::new();
    // axis 2 is PE, axis 3 is readout; a "line" fixes (slice, line_axis index)
    let line_axis = match axes {
        NormAxes::EchoReadout => 2,
        NormAxes::EchoPe => 3,
    };
    let n_lines = if line_axis == 2 { np } else { nr };
    for s in 0..ns {
        let mut slice = data.index_axis_mut(Axis(1), s);
        for l in 0..n_lines {
            let mut lane = slice.index_axis_mut(Axis(line_axis - 1), l);
            let energy: f64 = lane.iter().map(|c| c.norm_sqr()).sum();
            if energy == 0.0 {
                zero_lines.push((s, l));
                continue;
            }
            let inv = 1.0 / energy.sqrt();
            lane.mapv_inplace(|c| c * inv);
        }
    }
    Ok(NormalizedKspace {
        kspace: y.with_data(data, Space::Kspace)?,
        zero_lines,
    })
}

/// Threshold per-echo line displacements at `d_min_mm` (label 1 when
/// `d <= d_min_mm`), then average the per-echo masks and round half up.
///
/// `displacement` is `[echo, slice, PE line]`.
pub fn make_target_labels(
    displacement: ArrayView3<'_, f64>,
    d_min_mm: f64,
) -> Result<LineLabelMask, LabelError> {
    let (ne, ns, np) = displacement.dim();
    if ne == 0 || ns == 0 || np == 0 {
        return Err(LabelError::LengthMismatch(format!(
            "displacement array has shape {:?}",
            displacement.dim()
        )));
    }
    let mut labels = Array2::<u8>::zeros((ns, np));
    for ((s, p), out) in labels.indexed_iter_mut() {
        let clean = (0..ne)
            .filter(|&e| displacement[(e, s, p)] <= d_min_mm)
            .count();
        *out = u8::from(2 * clean >= ne);
    }
    LineLabelMask::new(labels)
}

/// [`make_target_labels`] for displacements shared by all echoes, `[slice, PE line]`.
pub fn labels_from_line_displacement(
    displacement: &Array2<f64>,
    d_min_mm: f64,
) -> Result<LineLabelMask, LabelError> {
    make_target_labels(displacement.view().insert_axis(Axis(0)), d_min_mm)
}

/// Check that a mask matches a k-space volume's (slice, PE) layout.
pub fn check_mask_shape(
    mask: &LineLabelMask,
    n_slices: usize,
    n_pe: usize,
) -> Result<(), LabelError> {
    if mask.n_slices() != n_slices || mask.n_pe() != n_pe {
        return Err(LabelError::LengthMismatch(format!(
            "mask is {}x{}, data has {} slices x {} PE lines",
            mask.n_slices(),
            mask.n_pe(),
            n_slices,
            n_pe
        )));
    }
    Ok(())
}
