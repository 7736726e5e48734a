//! Interactiveness-field modeling for human-object pair filtering.
//!
//! The crate builds up, layer by layer: a reverse-mode autodiff engine over
//! dense `f64` matrices ([`autodiff`]), box geometry and pairwise NMS
//! ([`geometry`]), the clustering-based field over candidate pair features
//! ([`field`]), its training losses ([`losses`]), Hungarian label binding
//! ([`matching`]), a synthetic bimodal scene generator ([`synth`]), a staged
//! trainer for a toy pair encoder ([`train`]), and the evaluation harness
//! ([`eval`]).

pub mod autodiff;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod synth;
pub mod train;

pub use autodiff::{gradcheck, Tape, Value};
pub use eval::{DetectionRecord, EvalOptions, EvalReport};
pub use field::{
    AttentionParams, FieldState, GroupKey, Indicators, PairFeatures, PairGroup,
};
pub use geometry::BBox;
pub use losses::{InteractivenessLabels, LossWeights};
pub use matching::{MatchResult, PairPrediction};
pub use synth::{Candidate, FeatureMode, GeneratorConfig, Regime, Scene};
pub use train::{ModelParams, PairScore, TrainConfig};
