//! Affinity regression loss for semantic segmentation.
//!
//! A label map is sampled on a few coarse nearest-neighbour grids and turned
//! into a binary pairwise affinity (same class or not). The network's logits
//! are softmax-normalised, sampled at the same positions, square-rooted, and
//! multiplied into a real-valued affinity bounded by one. The AR loss is the
//! mean squared error between the two; it is added to cross-entropy with a
//! small weight.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below pin the double-precision instantiation used for
//! gradient verification and by the CLI.

// `!(x >= 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod error;
pub mod grid;
pub mod io;
pub mod losses;
pub mod pool;
pub mod scalar;
pub mod toy;
pub mod verify;

pub use affinity::{dot_affinity, label_affinity, sqrt_affinity, AffinityMatrix};
pub use error::{Error, Result};
pub use grid::{softmax_channels, sqrt_elementwise, LabelMap, ProbMap, ProbRootMap, ScoreMap};
pub use losses::{ar_loss, ce_loss, total_loss, LossGrad, LossWeights};
pub use pool::{nn_sample_grid, pool_label, pool_prob, pool_scores, MultiScaleEmbedding, MultiScaleLabelVector, ScaleSet};
pub use scalar::Scalar;

pub type ScoreMap64 = ScoreMap<f64>;
pub type ProbMap64 = ProbMap<f64>;
pub type AffinityMatrix64 = AffinityMatrix<f64>;
pub type Embedding64 = MultiScaleEmbedding<f64>;
pub type LossGrad64 = LossGrad<f64>;
pub type LossWeights64 = LossWeights<f64>;

pub type ScoreMap32 = ScoreMap<f32>;
pub type ProbMap32 = ProbMap<f32>;
pub type AffinityMatrix32 = AffinityMatrix<f32>;
pub type Embedding32 = MultiScaleEmbedding<f32>;
pub type LossGrad32 = LossGrad<f32>;
pub type LossWeights32 = LossWeights<f32>;
