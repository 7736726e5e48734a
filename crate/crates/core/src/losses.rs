//! Training objectives, built on the autodiff tape.
//!
//! Field-side losses shape the two-cluster summary: a cardinality loss
//! polarizes the cluster masses (optionally binding the interactive mass to
//! a label count), rank losses push pairs with more cluster mass to cause
//! larger summary changes, a pairwise clustering loss and a cross-entropy
//! bind assignments to labels, and [`field_loss`] composes them. Pair-side
//! losses supervise box regression and classification over matched
//! predictions ([`pair_loss`]) and the multi-label verb head
//! ([`verb_bce`]).
//!
//! Discrete choices (rank membership sets, cluster-role correspondence) are
//! made on forward values and enter the graph as constants.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Value;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before every log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weight {name} is {value}; weights must be finite and nonnegative")]
    InvalidWeight { name: &'static str, value: f64 },
}

/// Weighting coefficients: `lambda1..lambda3` scale the pair losses (giou,
/// regression, classification), `lambda4..lambda6` and `lambda_r` scale the
/// field losses (cardinality, cross-entropy, clustering, rank).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 2.5,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            lambda6: 1.0,
            // The rank losses are linear in the indicators and therefore
            // unbounded below; a small weight keeps their pull inside what
            // weight decay and clipping can balance.
            lambda_r: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda6", self.lambda6),
            ("lambda_r", self.lambda_r),
        ];
        for (name, value) in named {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Per-pair binary interactiveness labels of one group; the positive count
/// is derived, so it always matches the labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractivenessLabels {
    labels: Vec<bool>,
    n_t: usize,
}

impl InteractivenessLabels {
    pub fn new(labels: Vec<bool>) -> Self {
        let n_t = labels.iter().filter(|&&l| l).count();
        Self { labels, n_t }
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cardinality loss `sum(a_s) - sum(a_l)`, plus `|n_t - sum(a_s)|` when a
/// positive count is supplied. Minimizing drives the first cluster's total
/// mass down; the label-bound term pulls it toward `n_t`.
pub fn card_loss(a_s: &Value, a_l: &Value, n_t: Option<usize>) -> Value {
    assert_eq!(a_s.shape(), a_l.shape(), "mass vectors must match");
    let s = a_s.sum_all();
    let l = a_l.sum_all();
    let base = s.sub(&l);
    match n_t {
        None => base,
        // |n_t - sum| built as abs(sum - n_t); same value and subgradient.
        Some(n) => base.add(&s.add_scalar(-(n as f64)).abs()),
    }
}

/// Rank loss over one difference indicator: with `P_S = {i: a_s > a_l}` and
/// `P_L = {j: a_l > a_s}`, the loss is the sum of `d[j] - d[i]` over all
/// cross pairs. Pairs with equal masses join neither set. Membership is
/// decided on forward values and is constant under differentiation; the
/// loss itself is linear in `d`.
pub fn rank_loss(d: &Value, a_s: &Value, a_l: &Value) -> Value {
    let (r, n) = d.shape();
    assert_eq!(r, 1, "indicator must be a row vector");
    assert_eq!(a_s.shape(), (1, n), "mass vectors must match the indicator");
    assert_eq!(a_l.shape(), (1, n), "mass vectors must match the indicator");
    let s = a_s.data();
    let l = a_l.data();
    let in_s: Vec<bool> = (0..n).map(|i| s[(0, i)] > l[(0, i)]).collect();
    let in_l: Vec<bool> = (0..n).map(|i| l[(0, i)] > s[(0, i)]).collect();
    let n_s = in_s.iter().filter(|&&b| b).count() as f64;
    let n_l = in_l.iter().filter(|&&b| b).count() as f64;
    // sum_{i in S} sum_{j in L} (d_j - d_i) = |S| * sum_L d - |L| * sum_S d.
    let coeff = Array2::from_shape_fn((n, 1), |(i, _)| {
        if in_l[i] {
            n_s
        } else if in_s[i] {
            -n_l
        } else {
            0.0
        }
    });
    d.matmul(&d.tape().constant(coeff))
}

/// Pairwise clustering loss: `p_ij = a_s_i a_s_j + a_l_i a_l_j` is the
/// probability pairs i and j share a cluster; labels that agree pull it up,
/// labels that differ pull it down. The double sum is over ordered pairs
/// including the diagonal, and is invariant under a global cluster swap.
pub fn clus_loss(a_s: &Value, a_l: &Value, labels: &InteractivenessLabels) -> Value {
    let (r, n) = a_s.shape();
    assert_eq!(r, 1, "mass vectors must be row vectors");
    assert_eq!(a_l.shape(), (1, n), "mass vectors must match");
    assert_eq!(labels.len(), n, "labels must match the pair count");
    let tape = a_s.tape();
    let p = a_s
        .transpose()
        .matmul(a_s)
        .add(&a_l.transpose().matmul(a_l))
        .clamp(PROB_EPS, 1.0 - PROB_EPS);
    let alpha = Array2::from_shape_fn((n, n), |(i, j)| {
        f64::from(labels.labels()[i] == labels.labels()[j])
    });
    let alpha_minus_one = tape.constant(&alpha - 1.0);
    let alpha = tape.constant(alpha);
    let one_minus_p = p.neg().add_scalar(1.0);
    one_minus_p
        .ln()
        .mul(&alpha_minus_one)
        .sub(&p.ln().mul(&alpha))
        .sum_all()
}

/// Which cluster's mass is treated as the interactive probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractiveRole {
    Small,
    Large,
}

fn bce_mean(mass: &[f64], labels: &[bool]) -> f64 {
    let n = mass.len() as f64;
    mass.iter()
        .zip(labels)
        .map(|(&m, &y)| {
            let m = m.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -m.ln()
            } else {
                -(1.0 - m).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Picks the cluster-role mapping with the smaller cross-entropy against
/// the labels; an exact tie keeps the small cluster interactive.
pub fn correspondence(
    a_s: &Value,
    a_l: &Value,
    labels: &InteractivenessLabels,
) -> InteractiveRole {
    let s = a_s.data();
    let l = a_l.data();
    let s: Vec<f64> = s.iter().copied().collect();
    let l: Vec<f64> = l.iter().copied().collect();
    assert_eq!(s.len(), labels.len(), "labels must match the pair count");
    if bce_mean(&l, labels.labels()) < bce_mean(&s, labels.labels()) {
        InteractiveRole::Large
    } else {
        InteractiveRole::Small
    }
}

/// Mean binary cross-entropy of the interactive-cluster mass against the
/// labels, after role resolution. Returns the loss and the chosen role.
pub fn interactiveness_ce(
    a_s: &Value,
    a_l: &Value,
    labels: &InteractivenessLabels,
) -> (Value, InteractiveRole) {
    let role = correspondence(a_s, a_l, labels);
    let mass = match role {
        InteractiveRole::Small => a_s,
        InteractiveRole::Large => a_l,
    };
    (mass_bce(mass, labels.labels()), role)
}

/// Mean BCE of a mass row against binary labels, with probability clamping.
fn mass_bce(mass: &Value, labels: &[bool]) -> Value {
    let (r, n) = mass.shape();
    assert_eq!(r, 1, "mass must be a row vector");
    assert_eq!(n, labels.len(), "labels must match the pair count");
    let tape = mass.tape();
    let y = Array2::from_shape_fn((1, n), |(_, i)| f64::from(labels[i]));
    let one_minus_y = tape.constant(&y * -1.0 + 1.0);
    let y = tape.constant(y);
    let m = mass.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = m.ln().mul(&y);
    let neg = m.neg().add_scalar(1.0).ln().mul(&one_minus_y);
    pos.add(&neg).sum_all().mul_scalar(-1.0 / n as f64)
}

/// Everything [`field_loss`] consumes for one group.
pub struct GroupLossInputs<'a> {
    pub a_s: &'a Value,
    pub a_l: &'a Value,
    pub d_r: &'a Value,
    pub d_m: &'a Value,
    /// `None` selects unsupervised mode: no cross-entropy, no clustering
    /// loss, and the cardinality loss is unbound.
    pub labels: Option<&'a InteractivenessLabels>,
}

/// Composite per-group field loss
/// `l4 * card + l5 * ce + l6 * clus + lr * (rank_r + rank_m)`.
///
/// With labels, the cluster roles are resolved first and the cardinality,
/// cross-entropy and clustering losses see the resolved (interactive,
/// other) mass order; the rank losses always use the raw (small, large)
/// order, whose membership sets are role-independent up to sign.
pub fn field_loss(inputs: &GroupLossInputs<'_>, w: &LossWeights) -> Value {
    let rank = rank_loss(inputs.d_r, inputs.a_s, inputs.a_l)
        .add(&rank_loss(inputs.d_m, inputs.a_s, inputs.a_l));
    match inputs.labels {
        None => {
            let card = card_loss(inputs.a_s, inputs.a_l, None);
            card.mul_scalar(w.lambda4).add(&rank.mul_scalar(w.lambda_r))
        }
        Some(labels) => {
            let role = correspondence(inputs.a_s, inputs.a_l, labels);
            let (ai, ao) = match role {
                InteractiveRole::Small => (inputs.a_s, inputs.a_l),
                InteractiveRole::Large => (inputs.a_l, inputs.a_s),
            };
            let card = card_loss(ai, ao, Some(labels.n_t()));
            let ce = mass_bce(ai, labels.labels());
            let clus = clus_loss(ai, ao, labels);
            card.mul_scalar(w.lambda4)
                .add(&ce.mul_scalar(w.lambda5))
                .add(&clus.mul_scalar(w.lambda6))
                .add(&rank.mul_scalar(w.lambda_r))
        }
    }
}

/// Differentiable generalized IoU of a predicted corner row (1 x 4, order
/// x1, y1, x2, y2) against a fixed target box. The target must have
/// positive area so the union and enclosure stay positive even when the
/// prediction degenerates.
pub fn giou_value(pred: &Value, target: [f64; 4]) -> Value {
    assert_eq!(pred.shape(), (1, 4), "predicted box must be a 1x4 corner row");
    let [tx1, ty1, tx2, ty2] = target;
    assert!(tx2 > tx1 && ty2 > ty1, "target box must have positive area");
    let tape = pred.tape();
    let px1 = pred.get(0, 0);
    let py1 = pred.get(0, 1);
    let px2 = pred.get(0, 2);
    let py2 = pred.get(0, 3);
    let cx1 = tape.scalar(tx1);
    let cy1 = tape.scalar(ty1);
    let cx2 = tape.scalar(tx2);
    let cy2 = tape.scalar(ty2);

    let iw = px2.minimum(&cx2).sub(&px1.maximum(&cx1)).max_scalar(0.0);
    let ih = py2.minimum(&cy2).sub(&py1.maximum(&cy1)).max_scalar(0.0);
    let inter = iw.mul(&ih);
    let pred_area = px2.sub(&px1).mul(&py2.sub(&py1));
    let target_area = (tx2 - tx1) * (ty2 - ty1);
    let union = pred_area.add_scalar(target_area).sub(&inter);
    let iou = inter.div(&union);

    let ew = px2.maximum(&cx2).sub(&px1.minimum(&cx1));
    let eh = py2.maximum(&cy2).sub(&py1.minimum(&cy1));
    let enclose = ew.mul(&eh);
    iou.sub(&enclose.sub(&union).div(&enclose))
}

/// Cross-entropy of row-softmaxed class logits against target indices; the
/// class set includes a trailing no-object class for unmatched predictions.
pub fn class_ce(logits: &Value, targets: &[usize]) -> Value {
    let (n, k) = logits.shape();
    assert_eq!(n, targets.len(), "one target per logit row");
    for &t in targets {
        assert!(t < k, "class target {t} out of range for {k} classes");
    }
    let tape = logits.tape();
    let one_hot = Array2::from_shape_fn((n, k), |(i, j)| f64::from(targets[i] == j));
    let probs = logits.softmax_rows().clamp(PROB_EPS, 1.0 - PROB_EPS);
    probs
        .ln()
        .mul(&tape.constant(one_hot))
        .sum_all()
        .mul_scalar(-1.0 / n as f64)
}

/// Mean per-verb binary cross-entropy of verb logits against a 0/1 target
/// matrix of the same shape.
pub fn verb_bce(logits: &Value, targets: &Array2<f64>) -> Value {
    let (n, v) = logits.shape();
    assert_eq!(targets.dim(), (n, v), "targets must match the logit shape");
    assert!(
        targets.iter().all(|&t| t == 0.0 || t == 1.0),
        "verb targets must be 0 or 1"
    );
    let tape = logits.tape();
    let one_minus_t = tape.constant(targets * -1.0 + 1.0);
    let t = tape.constant(targets.clone());
    let p = logits.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = p.ln().mul(&t);
    let neg = p.neg().add_scalar(1.0).ln().mul(&one_minus_t);
    pos.add(&neg).sum_all().mul_scalar(-1.0 / (n * v) as f64)
}

/// Predicted and target boxes of one matched human-object pair.
pub struct MatchedPairBoxes<'a> {
    pub pred_h: &'a Value,
    pub pred_o: &'a Value,
    pub target_h: [f64; 4],
    pub target_o: [f64; 4],
}

/// Detection loss over one scene:
/// `l1 * (giou_h + giou_o) + l2 * (reg_h + reg_o) + l3 * class_ce`.
///
/// Giou terms are `1 - giou` averaged over matched pairs; regression terms
/// are mean absolute corner error averaged over matched pairs; the class
/// term covers every prediction row, with unmatched rows targeting the
/// trailing no-object class. With no matched pairs only the class term
/// remains.
pub fn pair_loss(
    matched: &[MatchedPairBoxes<'_>],
    class_logits: &Value,
    class_targets: &[usize],
    w: &LossWeights,
) -> Value {
    let l_o = class_ce(class_logits, class_targets);
    let mut total = l_o.mul_scalar(w.lambda3);
    if matched.is_empty() {
        return total;
    }
    let scale = 1.0 / matched.len() as f64;
    let mut giou_sum: Option<Value> = None;
    let mut reg_sum: Option<Value> = None;
    for m in matched {
        let g = giou_value(m.pred_h, m.target_h)
            .neg()
            .add_scalar(1.0)
            .add(&giou_value(m.pred_o, m.target_o).neg().add_scalar(1.0));
        let tgt_h = m.pred_h.tape().constant(Array2::from_shape_vec((1, 4), m.target_h.to_vec()).expect("1x4"));
        let tgt_o = m.pred_o.tape().constant(Array2::from_shape_vec((1, 4), m.target_o.to_vec()).expect("1x4"));
        let r = m
            .pred_h
            .sub(&tgt_h)
            .abs()
            .sum_all()
            .mul_scalar(0.25)
            .add(&m.pred_o.sub(&tgt_o).abs().sum_all().mul_scalar(0.25));
        giou_sum = Some(match &giou_sum {
            Some(v) => v.add(&g),
            None => g,
        });
        reg_sum = Some(match &reg_sum {
            Some(v) => v.add(&r),
            None => r,
        });
    }
    let giou_mean = giou_sum.expect("non-empty").mul_scalar(scale);
    let reg_mean = reg_sum.expect("non-empty").mul_scalar(scale);
    total = total
        .add(&giou_mean.mul_scalar(w.lambda1))
        .add(&reg_mean.mul_scalar(w.lambda2));
    total
}
