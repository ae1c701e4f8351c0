//! Rigid-motion and B0 artifact simulation for multi-echo gradient-echo MRI,
//! per-line motion labels, and motion-weighted TV reconstruction.
//!
//! Volumes are `[echo, slice, PE, readout]` complex arrays ([`volume`]).
//! [`phantom`] builds synthetic test objects, [`motion`] handles rigid
//! transforms and motion curves, [`sim`] produces corrupted k-space and
//! datasets, [`labels`] normalizes k-space lines and builds targets,
//! [`recon`] reconstructs with down-weighted corrupted lines and [`metrics`]
//! scores both steps.

pub mod labels;
pub mod metrics;
pub mod motion;
pub mod phantom;
pub mod recon;
pub mod sim;
pub mod volume;

pub use labels::{LineLabelMask, NormAxes};
pub use metrics::{classification_report, psnr, ssim, ClassReport};
pub use motion::{CurveModel, MotionCurve, RigidTransform};
pub use phantom::{make_phantom, PhantomSpec};
pub use recon::{weighted_tv_recon, ReconConfig};
pub use sim::{simulate, AcquisitionScheme, B0Map, SimConfig};
pub use volume::{MultiEchoVolume, Space};
