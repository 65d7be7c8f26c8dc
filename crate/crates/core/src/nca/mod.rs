//! Two-stage neural cellular automaton for segmentation.
//!
//! A coarse cell rule (θ) runs on a downscaled copy of the image, its state is
//! upscaled and re-joined with the full-resolution image, and a fine cell rule
//! (ω) refines the result. Gradients are computed by hand through the whole
//! unrolled sequence; there is no general autodiff here.

mod config;
mod grid;
mod loss;
mod model;
mod perceive;
mod weights;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use config::{GradReduction, ModelConfig};
pub use grid::{downscale, upscale_and_concat, upscale_and_concat_backward, Image, StateGrid};
pub use loss::{argmax_mask, cross_entropy_loss, Logits};
pub use model::{
    backward_bptt, fire_mask, forward, nca_step, relu_pattern, Gradients, Junction, StepRecord, Tape,
};
pub use perceive::{perceive, perceive_adjoint, SOBEL_X, SOBEL_Y};
pub use weights::{flatten, sgd_step, unflatten, NcaWeights, SegmentLayout, TwoStageModel};

/// Floating-point element type of the NCA. Training uses `f32`; gradient
/// checks use `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to any Real")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
