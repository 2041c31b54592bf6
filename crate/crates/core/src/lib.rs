//! Class-balanced mean teacher for source-free domain adaptive segmentation.
//!
//! A segmentation model pretrained on a labeled source domain is adapted to an
//! unlabeled target domain. A teacher model labels weakly augmented target
//! images, a student learns from strongly augmented views of the same images,
//! and the teacher follows the student as an exponential moving average. The
//! background term of the binary cross entropy is reweighted per class by the
//! ratio of dataset-wide mean foreground and background losses.
//!
//! Numerical code is generic over [`Scalar`] (`f32` and `f64`); the aliases at
//! the crate root fix the precision used by the training pipeline (`f32`) and
//! the precision used by oracles and checks (`f64`).

pub mod augment;
pub mod calibration;
pub mod data_io;
pub mod datamodel;
pub mod engine;
mod error;
pub mod meanteacher;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod pseudo;
pub mod rng;

use std::fmt::{Debug, Display};

pub use error::{CbmtError, Result};

/// Floating point element type accepted by every numerical routine.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type ImageSampleF32 = datamodel::ImageSample<f32>;
pub type ImageSampleF64 = datamodel::ImageSample<f64>;
pub type ProbMapF32 = datamodel::ProbMap<f32>;
pub type ProbMapF64 = datamodel::ProbMap<f64>;
pub type ParamSnapshotF32 = datamodel::ParamSnapshot<f32>;
pub type ParamSnapshotF64 = datamodel::ParamSnapshot<f64>;
pub type SegNetF32 = nn::SegNet<f32>;
pub type SegNetF64 = nn::SegNet<f64>;

/// Class index of the optic disc channel in the default two-class layout.
pub const CLASS_DISC: usize = 0;
/// Class index of the optic cup channel in the default two-class layout.
pub const CLASS_CUP: usize = 1;

/// Human-readable class name used in logs and reports.
pub fn class_name(k: usize, num_classes: usize) -> String {
    match (num_classes, k) {
        (2, CLASS_DISC) => "disc".to_string(),
        (2, CLASS_CUP) => "cup".to_string(),
        _ => format!("class{k}"),
    }
}
