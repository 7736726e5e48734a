//! Three-stage trainer for the toy pair model.
//!
//! A small feed-forward encoder maps each candidate pair descriptor to a
//! feature row; box, class and verb heads read that feature, and the
//! attention clustering summary turns per-group features into
//! interactiveness masses. Stage 1 trains encoder plus box/class heads on
//! the detection loss, stage 2 adds the field losses through the attention
//! summary, stage 3 adds the verb head. Training is plain gradient descent
//! with decoupled weight decay; batches reduce per-scene gradients in a
//! fixed order, so runs are bit-reproducible at any thread count.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Value};
use crate::field::{
    self, group_pairs, interactive_assignment, interactiveness_score, tape as ftape,
    AttentionCluster, AttentionParams, FieldError, PairFeatures,
};
use crate::geometry::{pairwise_nms, BBox, PairRecord, NMS_THRESHOLD};
use crate::losses::{
    field_loss, pair_loss, verb_bce, GroupLossInputs, LossWeights, MatchedPairBoxes,
};
use crate::matching::{assign_labels, LabelAssignment, MatchError, PairPrediction};
use crate::synth::{candidate_grid, derive_seed, GeneratorConfig, Scene};

/// Bump when the checkpoint layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

const SALT_INIT: u64 = 0x7a1e_110d_5eed_0001;
const SALT_SHUFFLE: u64 = 0x7a1e_110d_5eed_0002;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    InvalidConfig { reason: String },
    #[error("loss diverged to {value} at stage {stage}, epoch {epoch}, scene seed {scene_seed}")]
    Diverged { stage: u8, epoch: usize, scene_seed: u64, value: f64 },
    #[error("parameter {name} became non-finite at stage {stage}, epoch {epoch}")]
    NonFiniteParam { name: String, stage: u8, epoch: usize },
    #[error("gradient for {name} became non-finite at stage {stage}, epoch {epoch}")]
    NonFiniteGrad { name: String, stage: u8, epoch: usize },
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    CheckpointVersion { found: u32, supported: u32 },
    #[error("checkpoint is inconsistent: {reason}")]
    CorruptCheckpoint { reason: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Layer widths and head counts; everything needed to rebuild the
/// parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub descriptor_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Real object classes; the class head adds one no-object slot.
    pub object_classes: usize,
    pub verb_count: usize,
    pub heads: usize,
    pub head_dim: usize,
}

/// Per-dimension affine standardization of raw descriptors, fitted on the
/// training set and stored with the weights so inference sees the same
/// input scale. Near-constant dimensions keep scale 1 and collapse to 0
/// after centering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Pools every row of every matrix; zero total rows gives the identity.
    pub fn fit<'a>(dim: usize, mats: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0.0;
        for m in mats {
            for row in m.rows() {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Normalizer::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply_mat(&self, x: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(x.dim(), |(i, j)| (x[[i, j]] - self.mean[j]) / self.std[j])
    }
}

/// One affine layer; the bias is a 1 x out row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Dense {
    fn random(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        Dense {
            w: Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng)),
            b: Array2::zeros((1, fan_out)),
        }
    }
}

/// All learnable state of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Input standardization; not trained, but part of the checkpoint.
    pub norm: Normalizer,
    /// Input, middle, and output layers of the pair encoder.
    pub encoder: Vec<Dense>,
    pub box_head: Dense,
    pub class_head: Dense,
    pub verb_head: Dense,
    pub attention: AttentionParams,
}

/// Tensor count before the attention block in the flat layout.
const FIXED_TENSORS: usize = 12;

impl ModelParams {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_INIT, 0));
        let encoder = vec![
            Dense::random(dims.descriptor_dim, dims.hidden, &mut rng),
            Dense::random(dims.hidden, dims.hidden, &mut rng),
            Dense::random(dims.hidden, dims.feature_dim, &mut rng),
        ];
        let box_head = Dense::random(dims.feature_dim, 8, &mut rng);
        let class_head = Dense::random(dims.feature_dim, dims.object_classes + 1, &mut rng);
        let verb_head = Dense::random(dims.feature_dim, dims.verb_count, &mut rng);
        let attention =
            AttentionParams::random(dims.feature_dim, dims.heads, dims.head_dim, &mut rng);
        let norm = Normalizer::identity(dims.descriptor_dim);
        ModelParams { dims, norm, encoder, box_head, class_head, verb_head, attention }
    }

    /// Flat tensor snapshot in the fixed optimizer layout: encoder layers
    /// (w, b each), box, class, verb heads, then per-head wq/wk/wv and wo.
    pub fn to_flat(&self) -> Vec<Array2<f64>> {
        let mut out = Vec::with_capacity(FIXED_TENSORS + 3 * self.dims.heads + 1);
        for d in &self.encoder {
            out.push(d.w.clone());
            out.push(d.b.clone());
        }
        for d in [&self.box_head, &self.class_head, &self.verb_head] {
            out.push(d.w.clone());
            out.push(d.b.clone());
        }
        for h in self.attention.heads() {
            out.extend([h.wq.clone(), h.wk.clone(), h.wv.clone()]);
        }
        out.push(self.attention.wo().clone());
        out
    }

    /// Rebuilds parameters from a flat snapshot produced by [`to_flat`].
    ///
    /// [`to_flat`]: ModelParams::to_flat
    pub fn from_flat(dims: ModelDims, flat: &[Array2<f64>]) -> Result<Self, TrainError> {
        let expected = FIXED_TENSORS + 3 * dims.heads + 1;
        if flat.len() != expected {
            return Err(TrainError::InvalidConfig {
                reason: format!("flat layout has {} tensors, expected {expected}", flat.len()),
            });
        }
        let dense = |i: usize| Dense { w: flat[i].clone(), b: flat[i + 1].clone() };
        let heads = (0..dims.heads)
            .map(|h| field::AttentionHead {
                wq: flat[FIXED_TENSORS + 3 * h].clone(),
                wk: flat[FIXED_TENSORS + 3 * h + 1].clone(),
                wv: flat[FIXED_TENSORS + 3 * h + 2].clone(),
            })
            .collect();
        let attention = AttentionParams::new(heads, flat[FIXED_TENSORS + 3 * dims.heads].clone())
            .map_err(TrainError::Field)?;
        Ok(ModelParams {
            norm: Normalizer::identity(dims.descriptor_dim),
            dims,
            encoder: vec![dense(0), dense(2), dense(4)],
            box_head: dense(6),
            class_head: dense(8),
            verb_head: dense(10),
            attention,
        })
    }

    /// Rebuilds from a flat snapshot while keeping non-trained state.
    pub fn with_flat(&self, flat: &[Array2<f64>]) -> Result<Self, TrainError> {
        let mut p = Self::from_flat(self.dims.clone(), flat)?;
        p.norm = self.norm.clone();
        Ok(p)
    }

    /// Checks every tensor and the normalizer against the recorded dims.
    pub fn validate_shapes(&self) -> Result<(), String> {
        let d = &self.dims;
        if self.norm.mean.len() != d.descriptor_dim || self.norm.std.len() != d.descriptor_dim {
            return Err(format!(
                "normalizer length {}/{} does not match descriptor dim {}",
                self.norm.mean.len(),
                self.norm.std.len(),
                d.descriptor_dim
            ));
        }
        let check = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(format!("{name} has shape {got:?}, expected {want:?}"))
            } else {
                Ok(())
            }
        };
        let widths = [d.descriptor_dim, d.hidden, d.hidden, d.feature_dim];
        if self.encoder.len() != 3 {
            return Err(format!("encoder has {} layers, expected 3", self.encoder.len()));
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            check(&format!("encoder{i}.w"), layer.w.dim(), (widths[i], widths[i + 1]))?;
            check(&format!("encoder{i}.b"), layer.b.dim(), (1, widths[i + 1]))?;
        }
        let heads = [
            ("box_head", &self.box_head, 8),
            ("class_head", &self.class_head, d.object_classes + 1),
            ("verb_head", &self.verb_head, d.verb_count),
        ];
        for (name, layer, out) in heads {
            check(&format!("{name}.w"), layer.w.dim(), (d.feature_dim, out))?;
            check(&format!("{name}.b"), layer.b.dim(), (1, out))?;
        }
        if self.attention.n_heads() != d.heads {
            return Err(format!(
                "attention has {} heads, expected {}",
                self.attention.n_heads(),
                d.heads
            ));
        }
        for (h, head) in self.attention.heads().iter().enumerate() {
            for (m, mat) in [("wq", &head.wq), ("wk", &head.wk), ("wv", &head.wv)] {
                check(
                    &format!("attention.head{h}.{m}"),
                    mat.dim(),
                    (d.feature_dim, d.head_dim),
                )?;
            }
        }
        check(
            "attention.wo",
            self.attention.wo().dim(),
            (d.heads * d.head_dim, d.feature_dim),
        )
    }

    /// Names aligned with the flat layout, for diagnostics.
    pub fn tensor_names(dims: &ModelDims) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..3 {
            names.push(format!("encoder{i}.w"));
            names.push(format!("encoder{i}.b"));
        }
        for head in ["box_head", "class_head", "verb_head"] {
            names.push(format!("{head}.w"));
            names.push(format!("{head}.b"));
        }
        for h in 0..dims.heads {
            for m in ["wq", "wk", "wv"] {
                names.push(format!("attention.head{h}.{m}"));
            }
        }
        names.push("attention.wo".to_string());
        names
    }

    /// First non-finite tensor name, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let bad_norm = self
            .norm
            .mean
            .iter()
            .any(|v| !v.is_finite())
            || self.norm.std.iter().any(|v| !v.is_finite() || *v <= 0.0);
        if bad_norm {
            return Some("norm".into());
        }
        let names = Self::tensor_names(&self.dims);
        self.to_flat()
            .iter()
            .zip(names)
            .find(|(t, _)| !t.iter().all(|v| v.is_finite()))
            .map(|(_, n)| n)
    }
}

/// Training schedule. Stage epoch counts may be zero to skip a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_stage3: f64,
    /// Stage-1 epoch index at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global L2 cap on the mean batch gradient; set to infinity to
    /// disable clipping.
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// When false the field losses run label-free (no cross-entropy, no
    /// clustering loss, unbound cardinality).
    pub supervised_field: bool,
    pub hidden: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    /// 1 forces the serial path; larger values use the worker pool. The
    /// result is bit-identical either way because gradient reduction
    /// follows batch order.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 30,
            stage2_epochs: 9,
            stage3_epochs: 15,
            lr_stage1: 0.05,
            lr_stage2: 0.01,
            lr_stage3: 0.02,
            lr_decay_epoch: 20,
            lr_decay_factor: 0.1,
            batch_size: 16,
            weight_decay: 1e-4,
            clip_norm: 25.0,
            weights: LossWeights::default(),
            supervised_field: true,
            hidden: 64,
            feature_dim: 16,
            heads: 2,
            head_dim: 4,
            seed: 7,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: String| Err(TrainError::InvalidConfig { reason });
        for (name, lr) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("lr_stage3", self.lr_stage3),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return bad(format!("{name} must be finite and nonnegative, got {lr}"));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay must be finite and nonnegative, got {}",
                self.weight_decay
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2 for two-cluster summaries".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("hidden, heads, and head_dim must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        self.weights.validate().map_err(|e| TrainError::InvalidConfig { reason: e.to_string() })
    }
}

/// One scene with its precomputed candidate descriptors (grid order).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub scene: Scene,
    pub descriptors: Array2<f64>,
}

/// Prepared training data plus the descriptor geometry the model needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<TrainExample>,
    pub descriptor_dim: usize,
    pub object_classes: usize,
    pub verb_count: usize,
    /// Standardization fitted on the raw descriptors below; `examples`
    /// already hold normalized rows.
    pub norm: Normalizer,
}

impl Dataset {
    /// Builds standardized descriptors for every scene under the generator
    /// config.
    pub fn prepare(scenes: &[Scene], config: &GeneratorConfig) -> Self {
        let d = config.descriptor_dim();
        let raw: Vec<(Scene, Array2<f64>)> = scenes
            .iter()
            .map(|scene| {
                let grid = candidate_grid(scene, config);
                let mut descriptors = Array2::zeros((grid.len(), d));
                for (i, c) in grid.iter().enumerate() {
                    for (j, &v) in c.descriptor.iter().enumerate() {
                        descriptors[[i, j]] = v;
                    }
                }
                (scene.clone(), descriptors)
            })
            .collect();
        let norm = Normalizer::fit(d, raw.iter().map(|(_, m)| m));
        let examples = raw
            .into_iter()
            .map(|(scene, descriptors)| TrainExample {
                scene,
                descriptors: norm.apply_mat(&descriptors),
            })
            .collect();
        Dataset {
            examples,
            descriptor_dim: d,
            object_classes: config.object_classes,
            verb_count: config.verb_count,
            norm,
        }
    }

    pub fn dims(&self, cfg: &TrainConfig) -> ModelDims {
        ModelDims {
            descriptor_dim: self.descriptor_dim,
            hidden: cfg.hidden,
            feature_dim: cfg.feature_dim,
            object_classes: self.object_classes,
            verb_count: self.verb_count,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
        }
    }
}

/// Which losses are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Detection losses only.
    Pair,
    /// Detection plus field losses.
    PairField,
    /// Everything, including the verb head.
    Full,
}

impl Stage {
    pub fn id(self) -> u8 {
        match self {
            Stage::Pair => 1,
            Stage::PairField => 2,
            Stage::Full => 3,
        }
    }

    /// Flat-layout indices updated during this stage. Heads that do not
    /// contribute to the stage loss keep their exact values.
    fn active_indices(self, heads: usize) -> Vec<usize> {
        let attn = FIXED_TENSORS..FIXED_TENSORS + 3 * heads + 1;
        match self {
            Stage::Pair => (0..10).collect(),
            Stage::PairField => (0..10).chain(attn).collect(),
            Stage::Full => (0..FIXED_TENSORS).chain(attn).collect(),
        }
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_pair: f64,
    pub mean_field: f64,
    pub mean_verb: f64,
    /// Wall time; informational only, excluded from determinism claims.
    pub wall_ms: u64,
}

/// Final parameters plus the per-epoch log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Parameters lifted onto a tape; active tensors are differentiable
/// leaves, the rest constants.
struct TapeModel {
    encoder: Vec<(Value, Value)>,
    box_head: (Value, Value),
    class_head: (Value, Value),
    verb_head: (Value, Value),
    attention: ftape::TapeAttentionParams,
}

impl TapeModel {
    /// `leaf_override[i]` replaces flat tensor `i`; missing entries fall
    /// back to `flat` as vars (if active) or constants.
    fn build(
        tape: &Tape,
        flat: &[Array2<f64>],
        active: &[usize],
        n_heads: usize,
        mut leaf_override: impl FnMut(usize) -> Option<Value>,
    ) -> (Self, Vec<Value>) {
        let mut vars = Vec::with_capacity(active.len());
        let values: Vec<Value> = flat
            .iter()
            .enumerate()
            .map(|(i, arr)| {
                if let Some(v) = leaf_override(i) {
                    vars.push(v.clone());
                    return v;
                }
                if active.contains(&i) {
                    let v = tape.var(arr.clone());
                    vars.push(v.clone());
                    v
                } else {
                    tape.constant(arr.clone())
                }
            })
            .collect();
        let pair = |i: usize| (values[i].clone(), values[i + 1].clone());
        let model = TapeModel {
            encoder: vec![pair(0), pair(2), pair(4)],
            box_head: pair(6),
            class_head: pair(8),
            verb_head: pair(10),
            attention: ftape::TapeAttentionParams::from_values(&values[FIXED_TENSORS..], n_heads),
        };
        (model, vars)
    }
}

/// Everything the losses need from one scene forward pass.
struct SceneForward {
    features: Value,
    corners_h: Value,
    corners_o: Value,
    class_logits: Value,
    verb_logits: Value,
}

/// Maps (cx, cy, w, h) rows to (x1, y1, x2, y2) rows.
fn corner_matrix(tape: &Tape) -> Value {
    tape.constant(
        Array2::from_shape_vec(
            (4, 4),
            vec![
                1.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 1.0, //
                -0.5, 0.0, 0.5, 0.0, //
                0.0, -0.5, 0.0, 0.5,
            ],
        )
        .expect("4x4"),
    )
}

fn affine(x: &Value, layer: &(Value, Value)) -> Value {
    let (n, _) = x.shape();
    let (_, out) = layer.0.shape();
    x.matmul(&layer.0).add(&layer.1.broadcast(n, out))
}

fn forward(model: &TapeModel, x: &Value) -> SceneForward {
    let h1 = affine(x, &model.encoder[0]).tanh();
    let h2 = affine(&h1, &model.encoder[1]).tanh();
    let features = affine(&h2, &model.encoder[2]);
    let boxes = affine(&features, &model.box_head).sigmoid();
    let mc = corner_matrix(&x.tape());
    let corners_h = boxes.slice_cols(0, 4).matmul(&mc);
    let corners_o = boxes.slice_cols(4, 8).matmul(&mc);
    let class_logits = affine(&features, &model.class_head);
    let verb_logits = affine(&features, &model.verb_head);
    SceneForward { features, corners_h, corners_o, class_logits, verb_logits }
}

fn softmax_rows_raw(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

struct SceneOutcome {
    total: f64,
    pair: f64,
    field: f64,
    verb: f64,
    grads: Vec<Array2<f64>>,
}

fn field_weights_active(w: &LossWeights) -> bool {
    w.lambda4 != 0.0 || w.lambda5 != 0.0 || w.lambda6 != 0.0 || w.lambda_r != 0.0
}

/// Builds the full per-scene loss graph on `tape` and returns the loss
/// value plus the component means read off the forward pass.
fn scene_loss_graph(
    model: &TapeModel,
    ex: &TrainExample,
    stage: Stage,
    cfg: &TrainConfig,
    tape: &Tape,
) -> Result<(Value, f64, f64, f64, LabelAssignment), TrainError> {
    let x = tape.constant(ex.descriptors.clone());
    let fwd = forward(model, &x);
    let n = ex.scene.grid_size();

    let probs = softmax_rows_raw(&fwd.class_logits.data());
    let ch = fwd.corners_h.data();
    let co = fwd.corners_o.data();
    let preds: Vec<PairPrediction> = (0..n)
        .map(|i| PairPrediction {
            human: [ch[[i, 0]], ch[[i, 1]], ch[[i, 2]], ch[[i, 3]]],
            object: [co[[i, 0]], co[[i, 1]], co[[i, 2]], co[[i, 3]]],
            class_probs: probs.row(i).to_vec(),
        })
        .collect();
    let assignment = assign_labels(&ex.scene, &preds, &cfg.weights)?;

    let rows_h: Vec<Value> = (0..n).map(|i| fwd.corners_h.slice_rows(i, i + 1)).collect();
    let rows_o: Vec<Value> = (0..n).map(|i| fwd.corners_o.slice_rows(i, i + 1)).collect();
    let matched: Vec<MatchedPairBoxes<'_>> = assignment
        .targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            t.boxes.map(|(bh, bo)| MatchedPairBoxes {
                pred_h: &rows_h[i],
                pred_o: &rows_o[i],
                target_h: bh,
                target_o: bo,
            })
        })
        .collect();
    let class_targets: Vec<usize> = assignment.targets.iter().map(|t| t.class_target).collect();
    let l_pair = pair_loss(&matched, &fwd.class_logits, &class_targets, &cfg.weights);
    let pair_val = l_pair.scalar_value();
    let mut total = l_pair;

    let mut field_val = 0.0;
    if stage != Stage::Pair && field_weights_active(&cfg.weights) {
        let mut group_sum: Option<Value> = None;
        for g in &assignment.groups {
            let f_g = fwd.features.gather_rows(&g.group.cells);
            let (state, init) = ftape::summarize_group(&f_g, &model.attention)?;
            let (c_s0, c_l0) = ftape::init_centroids(&f_g, &init.small, &init.large);
            let (d_r, _) = ftape::removal_indicator(&f_g, (&c_s0, &c_l0), &state, &model.attention);
            let d_m = ftape::modification_indicator(&f_g, (&c_s0, &c_l0), &state, &model.attention);
            let labels = cfg.supervised_field.then_some(&g.labels);
            let gl = field_loss(
                &GroupLossInputs {
                    a_s: &state.a_s,
                    a_l: &state.a_l,
                    d_r: &d_r,
                    d_m: &d_m,
                    labels,
                },
                &cfg.weights,
            );
            group_sum = Some(match &group_sum {
                Some(s) => s.add(&gl),
                None => gl,
            });
        }
        // Mean over groups keeps the field term's scale independent of
        // how many object groups a scene happens to contain.
        let l_field = group_sum
            .expect("every scene has at least one group")
            .mul_scalar(1.0 / assignment.groups.len() as f64);
        field_val = l_field.scalar_value();
        total = total.add(&l_field);
    }

    let mut verb_val = 0.0;
    if stage == Stage::Full {
        let v = fwd.verb_logits.shape().1;
        let mut targets = Array2::zeros((n, v));
        for (i, t) in assignment.targets.iter().enumerate() {
            for &verb in &t.verbs {
                targets[[i, verb]] = 1.0;
            }
        }
        let l_verb = verb_bce(&fwd.verb_logits, &targets);
        verb_val = l_verb.scalar_value();
        total = total.add(&l_verb);
    }

    Ok((total, pair_val, field_val, verb_val, assignment))
}

fn scene_outcome(
    flat: &[Array2<f64>],
    active: &[usize],
    dims: &ModelDims,
    ex: &TrainExample,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<SceneOutcome, TrainError> {
    let tape = Tape::new();
    let (model, vars) = TapeModel::build(&tape, flat, active, dims.heads, |_| None);
    let (total, pair, field, verb, _) = scene_loss_graph(&model, ex, stage, cfg, &tape)?;
    let value = total.scalar_value();
    if !value.is_finite() {
        return Err(TrainError::Diverged {
            stage: stage.id(),
            epoch: 0,
            scene_seed: ex.scene.seed,
            value,
        });
    }
    total.backward().map_err(|e| TrainError::InvalidConfig { reason: e.to_string() })?;
    let grads = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Array2::zeros(v.shape())))
        .collect();
    Ok(SceneOutcome { total: value, pair, field, verb, grads })
}

fn run_stage(
    mut params: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    stage: Stage,
    epochs: usize,
    base_lr: f64,
    log: &mut Vec<EpochRecord>,
) -> Result<ModelParams, TrainError> {
    let dims = params.dims;
    let active = stage.active_indices(dims.heads);
    // Shuffle seeds are drawn from the global epoch index (offset by the
    // configured lengths of earlier stages), so a later stage whose loss
    // degenerates to an earlier stage's sees the same batch stream that a
    // longer run of that earlier stage would have seen.
    let epoch_offset = match stage {
        Stage::Pair => 0,
        Stage::PairField => cfg.stage1_epochs,
        Stage::Full => cfg.stage1_epochs + cfg.stage2_epochs,
    };
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut lr = base_lr;
        if stage == Stage::Pair && epoch >= cfg.lr_decay_epoch {
            lr *= cfg.lr_decay_factor;
        }
        let mut order: Vec<usize> = (0..data.examples.len()).collect();
        let shuffle_seed =
            derive_seed(cfg.seed, SALT_SHUFFLE, (epoch_offset + epoch) as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let flat = params.to_flat();
            let work = |&idx: &usize| scene_outcome(&flat, &active, &dims, &data.examples[idx], stage, cfg);
            let results: Vec<Result<SceneOutcome, TrainError>> = if cfg.threads == 1 {
                batch.iter().map(work).collect()
            } else {
                batch.par_iter().map(work).collect()
            };
            // Fixed reduction order (batch order) keeps sums bit-stable
            // regardless of worker scheduling.
            let mut acc: Vec<Array2<f64>> =
                active.iter().map(|&i| Array2::zeros(flat[i].dim())).collect();
            for r in results {
                let out = r.map_err(|e| match e {
                    TrainError::Diverged { stage, scene_seed, value, .. } => {
                        TrainError::Diverged { stage, epoch, scene_seed, value }
                    }
                    other => other,
                })?;
                for (a, g) in acc.iter_mut().zip(&out.grads) {
                    *a += g;
                }
                sums.0 += out.total;
                sums.1 += out.pair;
                sums.2 += out.field;
                sums.3 += out.verb;
            }
            let mut scale = 1.0 / batch.len() as f64;
            // Global-norm clip on the mean gradient: occasional near-flat
            // sigmoids in the field path produce loss cliffs whose raw steps
            // would throw the attention weights past any recovery.
            let norm = acc
                .iter()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
                * scale;
            if !norm.is_finite() {
                let names = ModelParams::tensor_names(&dims);
                let name = active
                    .iter()
                    .zip(&acc)
                    .find(|(_, g)| !g.iter().all(|v| v.is_finite()))
                    .map(|(&slot, _)| names[slot].clone())
                    .unwrap_or_else(|| "unknown".into());
                return Err(TrainError::NonFiniteGrad { name, stage: stage.id(), epoch });
            }
            if norm > cfg.clip_norm {
                scale *= cfg.clip_norm / norm;
            }
            let mut flat = flat;
            for (slot, g) in active.iter().zip(&acc) {
                let t = &mut flat[*slot];
                *t = &*t - &(g * (lr * scale)) - &(&*t * (lr * cfg.weight_decay));
            }
            params = params.with_flat(&flat)?;
            if let Some(name) = params.first_non_finite() {
                return Err(TrainError::NonFiniteParam { name, stage: stage.id(), epoch });
            }
        }
        let n = data.examples.len() as f64;
        log.push(EpochRecord {
            stage: stage.id(),
            epoch,
            lr,
            mean_total: sums.0 / n,
            mean_pair: sums.1 / n,
            mean_field: sums.2 / n,
            mean_verb: sums.3 / n,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(params)
}

/// Stage 1: encoder and box/class heads under the detection loss.
pub fn train_stage1(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.examples.is_empty() {
        return Err(TrainError::InvalidConfig { reason: "empty dataset".into() });
    }
    let mut params = ModelParams::init(data.dims(cfg), cfg.seed);
    params.norm = data.norm.clone();
    let mut log = Vec::new();
    let params =
        run_stage(params, data, cfg, Stage::Pair, cfg.stage1_epochs, cfg.lr_stage1, &mut log)?;
    Ok(TrainOutcome { params, log })
}

/// Stage 2: detection plus field losses through the attention summary.
pub fn train_stage2(
    params: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut log = Vec::new();
    let params = run_stage(
        params,
        data,
        cfg,
        Stage::PairField,
        cfg.stage2_epochs,
        cfg.lr_stage2,
        &mut log,
    )?;
    Ok(TrainOutcome { params, log })
}

/// Stage 3: the whole system, including the verb head.
pub fn train_stage3(
    params: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut log = Vec::new();
    let params =
        run_stage(params, data, cfg, Stage::Full, cfg.stage3_epochs, cfg.lr_stage3, &mut log)?;
    Ok(TrainOutcome { params, log })
}

/// Runs stages 1 through `last_stage` and concatenates the logs.
pub fn train_full(
    data: &Dataset,
    cfg: &TrainConfig,
    last_stage: u8,
) -> Result<TrainOutcome, TrainError> {
    if !(1..=3).contains(&last_stage) {
        return Err(TrainError::InvalidConfig {
            reason: format!("last_stage must be 1, 2, or 3, got {last_stage}"),
        });
    }
    let mut out = train_stage1(data, cfg)?;
    if last_stage >= 2 {
        let next = train_stage2(out.params, data, cfg)?;
        out.params = next.params;
        out.log.extend(next.log);
    }
    if last_stage >= 3 {
        let next = train_stage3(out.params, data, cfg)?;
        out.params = next.params;
        out.log.extend(next.log);
    }
    Ok(out)
}

/// One scored candidate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    /// Grid cell (object-major) this prediction came from.
    pub cell: usize,
    pub human: BBox,
    pub object: BBox,
    pub class_id: usize,
    /// Interactiveness score from the field summary.
    pub s_b: f64,
    /// Per-verb scores from the verb head.
    pub s_v: Vec<f64>,
    /// Final per-verb scores `s_v * s_b`.
    pub s: Vec<f64>,
}

impl PairScore {
    /// Detection record bound to the scene that produced this score.
    pub fn to_record(&self, scene_seed: u64) -> crate::eval::DetectionRecord {
        crate::eval::DetectionRecord {
            scene: scene_seed,
            human: self.human.corners(),
            object: self.object.corners(),
            class_id: self.class_id,
            s_b: Some(self.s_b),
            s_v: self.s_v.clone(),
            s: self.s.clone(),
        }
    }
}

impl PairRecord for PairScore {
    fn human_box(&self) -> &BBox {
        &self.human
    }
    fn object_box(&self) -> &BBox {
        &self.object
    }
    fn object_class(&self) -> usize {
        self.class_id
    }
    /// Suppression ranking: the best final verb score of the pair.
    fn score(&self) -> f64 {
        self.s.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Scores every candidate pair of a scene without suppression: encoder
/// forward, field summary per group with the minority cluster treated as
/// interactive, then `s = s_v * s_b`.
pub fn score_pairs(
    params: &ModelParams,
    scene: &Scene,
    gcfg: &GeneratorConfig,
) -> Result<Vec<PairScore>, TrainError> {
    if gcfg.descriptor_dim() != params.dims.descriptor_dim {
        return Err(TrainError::InvalidConfig {
            reason: format!(
                "generator descriptor dim {} does not match model {}",
                gcfg.descriptor_dim(),
                params.dims.descriptor_dim
            ),
        });
    }
    let grid = candidate_grid(scene, gcfg);
    let n = grid.len();
    let mut x = Array2::zeros((n, params.dims.descriptor_dim));
    for (i, c) in grid.iter().enumerate() {
        for (j, &v) in c.descriptor.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let x = params.norm.apply_mat(&x);

    let tape = Tape::new();
    let flat = params.to_flat();
    let (model, _) = TapeModel::build(&tape, &flat, &[], params.dims.heads, |_| None);
    let fwd = forward(&model, &tape.constant(x));
    let features = fwd.features.data();
    let ch = fwd.corners_h.data();
    let co = fwd.corners_o.data();
    let class_logits = fwd.class_logits.data();
    let verb = fwd.verb_logits.data().mapv(|v| 1.0 / (1.0 + (-v).exp()));

    let object_classes: Vec<usize> = scene.objects.iter().map(|o| o.class_id).collect();
    let summary = AttentionCluster { params: &params.attention };
    let mut s_b = vec![0.0; n];
    for group in group_pairs(scene.humans.len(), &object_classes) {
        let rows = Array2::from_shape_fn(
            (group.cells.len(), features.ncols()),
            |(r, c)| features[[group.cells[r], c]],
        );
        let f = PairFeatures::new(rows, group.key.clone())?;
        let (state, _) = field::summarize_group(&f, &summary)?;
        let (mass, _) = interactive_assignment(&state);
        let ind = field::indicators(&f, &summary)?;
        let scores =
            interactiveness_score(mass.view(), ind.d_r.view(), ind.d_m.view())?;
        for (r, &cell) in group.cells.iter().enumerate() {
            s_b[cell] = scores[r];
        }
    }

    let k = params.dims.object_classes;
    Ok((0..n)
        .map(|i| {
            // Predicted class: argmax over real classes, lowest index on
            // ties; the trailing no-object logit never names a detection.
            let class_id = (0..k)
                .max_by(|&a, &b| {
                    class_logits[[i, a]]
                        .partial_cmp(&class_logits[[i, b]])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.cmp(&a))
                })
                .unwrap_or(0);
            let s_v: Vec<f64> = verb.row(i).to_vec();
            let s: Vec<f64> = s_v.iter().map(|v| v * s_b[i]).collect();
            PairScore {
                cell: i,
                human: BBox::clamped(ch[[i, 0]], ch[[i, 1]], ch[[i, 2]], ch[[i, 3]]),
                object: BBox::clamped(co[[i, 0]], co[[i, 1]], co[[i, 2]], co[[i, 3]]),
                class_id,
                s_b: s_b[i],
                s_v,
                s,
            }
        })
        .collect())
}

/// Full prediction for one scene: scoring followed by pairwise NMS; the
/// output is ordered by descending suppression score.
pub fn predict(
    params: &ModelParams,
    scene: &Scene,
    gcfg: &GeneratorConfig,
) -> Result<Vec<PairScore>, TrainError> {
    let scored = score_pairs(params, scene, gcfg)?;
    Ok(pairwise_nms(scored, NMS_THRESHOLD))
}

/// Per-object-group interactive mass against the ground-truth pair count,
/// for regime-bucketed count evaluation. One entry per group of the
/// scene's candidate grid.
pub fn count_entries(
    params: &ModelParams,
    scene: &Scene,
    gcfg: &GeneratorConfig,
) -> Result<Vec<crate::eval::CountEntry>, TrainError> {
    if gcfg.descriptor_dim() != params.dims.descriptor_dim {
        return Err(TrainError::InvalidConfig {
            reason: format!(
                "generator descriptor dim {} does not match model {}",
                gcfg.descriptor_dim(),
                params.dims.descriptor_dim
            ),
        });
    }
    let grid = candidate_grid(scene, gcfg);
    let mut x = Array2::zeros((grid.len(), params.dims.descriptor_dim));
    for (i, c) in grid.iter().enumerate() {
        for (j, &v) in c.descriptor.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let x = params.norm.apply_mat(&x);
    let tape = Tape::new();
    let flat = params.to_flat();
    let (model, _) = TapeModel::build(&tape, &flat, &[], params.dims.heads, |_| None);
    let features = forward(&model, &tape.constant(x)).features.data();

    let n_humans = scene.humans.len();
    let gt_cells: Vec<usize> =
        scene.gt_pairs.iter().map(|g| g.object * n_humans + g.human).collect();
    let object_classes: Vec<usize> = scene.objects.iter().map(|o| o.class_id).collect();
    let summary = AttentionCluster { params: &params.attention };
    let mut out = Vec::new();
    for group in group_pairs(n_humans, &object_classes) {
        let rows = Array2::from_shape_fn(
            (group.cells.len(), features.ncols()),
            |(r, c)| features[[group.cells[r], c]],
        );
        let f = PairFeatures::new(rows, group.key.clone())?;
        let (state, _) = field::summarize_group(&f, &summary)?;
        let (mass, _) = interactive_assignment(&state);
        let n_t = group.cells.iter().filter(|c| gt_cells.contains(c)).count();
        out.push(crate::eval::CountEntry {
            regime: scene.regime,
            predicted: mass.sum(),
            n_t,
        });
    }
    Ok(out)
}

/// Versioned parameter dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), TrainError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, &Checkpoint {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    })?;
    use std::io::Write;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, TrainError> {
    let file = std::fs::File::open(path)?;
    let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointVersion {
            found: ckpt.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if let Some(name) = ckpt.params.first_non_finite() {
        return Err(TrainError::CorruptCheckpoint {
            reason: format!("tensor {name} has non-finite entries"),
        });
    }
    if let Err(reason) = ckpt.params.validate_shapes() {
        return Err(TrainError::CorruptCheckpoint { reason });
    }
    Ok(ckpt.params)
}
