//! Dense-anchor temporal action spotting.
//!
//! The crate works on pre-extracted per-timestep feature matrices. A model
//! predicts, for every (time index, class) anchor, a detection confidence
//! and a temporal displacement toward the nearest action; post-processing
//! turns these into a list of timestamped detections, which are scored with
//! tolerance-based average-mAP.
//!
//! Modules, bottom-up:
//!
//! - [`seqdata`]: feature sequences, ground-truth action sets, chunk sampling,
//!   label/feature file formats and a synthetic benchmark generator.
//! - [`targets`]: per-anchor confidence and displacement targets, and the
//!   two training losses with their gradients.
//! - [`netcore`]: the network (input MLP, 1-D u-net or Transformer encoder
//!   trunk, two convolutional heads) with hand-written reverse-mode
//!   gradients and the checkpoint format.
//! - [`trainer`]: Adam with decoupled weight decay, SAM, mixup, schedules and
//!   the two-phase training loop.
//! - [`postproc`]: displacement consolidation and per-class NMS.
//! - [`evalmap`]: tolerance matching, AP, mAP and average-mAP.

pub mod evalmap;
pub mod fsio;
pub mod netcore;
pub mod postproc;
pub mod seqdata;
pub mod targets;
pub mod trainer;

/// Rounds half away from zero. `f64::round` already does this; the alias
/// keeps every seconds→anchor conversion going through one place.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}
