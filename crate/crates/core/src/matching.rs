//! Set-based ground-truth assignment.
//!
//! Predictions and ground-truth pairs are matched per scene by an optimal
//! bipartite assignment over a detection-style cost (class probability,
//! box L1, giou). Matched candidates inherit the ground truth's boxes,
//! class and verbs and a positive interactiveness label; everything else
//! becomes a no-object negative. Labels are then regrouped per clustering
//! group so the field losses can consume them.

use ndarray::Array2;
use thiserror::Error;

use crate::field::{group_pairs, PairGroup};
use crate::geometry::giou_corners;
use crate::losses::{InteractivenessLabels, LossWeights};
use crate::synth::Scene;

/// Pad value for dummy rows/columns in rectangular problems. Pad entries
/// are uniform, so they add a constant to every feasible assignment and
/// never change which real assignment is optimal.
pub const PAD_COST: f64 = 1.0e6;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cost matrix entry ({row}, {col}) is {value}; all entries must be finite")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("expected {expected} predictions for the candidate grid, got {found}")]
    GridMismatch { expected: usize, found: usize },
    #[error("prediction {index} has {found} class probabilities, expected {expected}")]
    ClassArity { index: usize, expected: usize, found: usize },
    #[error("ground-truth pair {index} references class {class_id}, but predictions carry {classes} object classes")]
    ClassOutOfRange { index: usize, class_id: usize, classes: usize },
}

/// Minimum-cost bipartite assignment of ground-truth columns to prediction
/// rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index)` pairs, sorted by
    /// prediction index. When there are at least as many predictions as
    /// ground truths, every ground truth appears exactly once.
    pub assignment: Vec<(usize, usize)>,
    /// Prediction rows left without a ground truth, ascending.
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    /// Total cost of the assignment under the given matrix.
    pub fn cost(&self, cost: &Array2<f64>) -> f64 {
        self.assignment.iter().map(|&(i, j)| cost[[i, j]]).sum()
    }
}

/// Shortest-augmenting-path assignment on a square matrix; returns the row
/// matched to each column. Runs in O(n^3).
fn solve_square(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    // 1-based potentials with a virtual column 0, after Jonker-Volgenant.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut row_of = vec![0_usize; n + 1];
    let mut way = vec![0_usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0_usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0_usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                // Strict comparisons keep the first minimizer, which makes
                // tie-breaks deterministic and stable in input order.
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        // Augment along the recorded path.
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| row_of[j] - 1).collect()
}

/// Globally optimal min-cost assignment of ground-truth columns to
/// prediction rows.
///
/// Rectangular inputs are padded to a square with the uniform [`PAD_COST`]
/// sentinel; padding adds the same constant to every assignment, so the
/// returned real assignment is optimal for any finite entries. With fewer
/// rows than columns, only `nrows` columns can be matched; the caller sees
/// the shortfall as absent column indices.
pub fn hungarian(cost: &Array2<f64>) -> Result<MatchResult, MatchError> {
    let (n, m) = cost.dim();
    for ((row, col), &value) in cost.indexed_iter() {
        if !value.is_finite() {
            return Err(MatchError::NonFinite { row, col, value });
        }
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult { assignment: Vec::new(), unmatched: (0..n).collect() });
    }
    let k = n.max(m);
    let padded = Array2::from_shape_fn((k, k), |(i, j)| {
        if i < n && j < m {
            cost[[i, j]]
        } else {
            PAD_COST
        }
    });
    let row_of_col = solve_square(&padded);
    let mut assignment: Vec<(usize, usize)> = row_of_col
        .iter()
        .enumerate()
        .filter(|&(j, &i)| i < n && j < m)
        .map(|(j, &i)| (i, j))
        .collect();
    assignment.sort_unstable();
    let mut matched_rows = vec![false; n];
    for &(i, _) in &assignment {
        matched_rows[i] = true;
    }
    let unmatched = (0..n).filter(|&i| !matched_rows[i]).collect();
    Ok(MatchResult { assignment, unmatched })
}

/// One decoded human-object pair prediction: corner boxes and a class
/// distribution whose trailing entry is the no-object class.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub human: [f64; 4],
    pub object: [f64; 4],
    pub class_probs: Vec<f64>,
}

impl PairPrediction {
    /// Index of the trailing no-object class.
    pub fn no_object_class(&self) -> usize {
        self.class_probs.len() - 1
    }
}

/// Matching cost of one prediction against one ground-truth pair:
/// `l3 * (1 - p_class) + l2 * (L1_h + L1_o) + l1 * ((1 - giou_h) + (1 - giou_o))`.
///
/// L1 terms are summed absolute corner differences. Lower is better; a
/// perfect prediction costs zero.
pub fn match_cost(
    pred: &PairPrediction,
    gt_human: [f64; 4],
    gt_object: [f64; 4],
    gt_class: usize,
    w: &LossWeights,
) -> f64 {
    assert!(
        gt_class < pred.class_probs.len(),
        "gt class {gt_class} out of range for {} classes",
        pred.class_probs.len()
    );
    let l1 = |a: [f64; 4], b: [f64; 4]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    };
    w.lambda3 * (1.0 - pred.class_probs[gt_class])
        + w.lambda2 * (l1(pred.human, gt_human) + l1(pred.object, gt_object))
        + w.lambda1 * ((1.0 - giou_corners(pred.human, gt_human)) + (1.0 - giou_corners(pred.object, gt_object)))
}

/// Training target of one candidate cell after matching.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTarget {
    /// Index into the scene's ground-truth pair list, if matched.
    pub matched_gt: Option<usize>,
    /// Ground-truth object class, or the no-object class when unmatched.
    pub class_target: usize,
    pub interactive: bool,
    /// Ground-truth `(human, object)` corner boxes for matched candidates.
    pub boxes: Option<([f64; 4], [f64; 4])>,
    /// Ground-truth verb ids; empty when unmatched.
    pub verbs: Vec<usize>,
}

/// Interactiveness labels of one clustering group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLabels {
    pub group: PairGroup,
    pub labels: InteractivenessLabels,
}

/// Output of [`assign_labels`]: per-candidate targets in grid order plus
/// per-group labels, whose positive count is each group's matched
/// interactive count.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    pub targets: Vec<CandidateTarget>,
    pub groups: Vec<GroupLabels>,
    /// Ground-truth pairs that could not be matched because the scene has
    /// fewer candidates than ground truths. Zero for well-formed scenes.
    pub overflow_gts: usize,
}

/// Matches predictions against a scene's ground-truth pairs and regroups
/// the resulting labels per clustering group.
///
/// `preds` must follow the candidate grid order: cell `o * n_humans + h`
/// holds the pair (human `h`, object `o`). Matching runs once over the
/// whole scene; every ground truth is interactive, so negatives arise only
/// from unmatched candidates.
pub fn assign_labels(
    scene: &Scene,
    preds: &[PairPrediction],
    w: &LossWeights,
) -> Result<LabelAssignment, MatchError> {
    let n = scene.grid_size();
    if preds.len() != n {
        return Err(MatchError::GridMismatch { expected: n, found: preds.len() });
    }
    let classes = preds.first().map_or(0, |p| p.class_probs.len());
    for (index, p) in preds.iter().enumerate() {
        if p.class_probs.len() != classes {
            return Err(MatchError::ClassArity {
                index,
                expected: classes,
                found: p.class_probs.len(),
            });
        }
    }
    for (index, gt) in scene.gt_pairs.iter().enumerate() {
        let class_id = scene.objects[gt.object].class_id;
        // The last probability is the no-object class, not a real class.
        if classes > 0 && class_id + 1 >= classes {
            return Err(MatchError::ClassOutOfRange { index, class_id, classes });
        }
    }

    let m = scene.gt_pairs.len();
    let cost = Array2::from_shape_fn((n, m), |(i, j)| {
        let gt = &scene.gt_pairs[j];
        match_cost(
            &preds[i],
            scene.humans[gt.human].corners(),
            scene.objects[gt.object].bbox.corners(),
            scene.objects[gt.object].class_id,
            w,
        )
    });
    let result = hungarian(&cost)?;
    let overflow_gts = m - result.assignment.len();

    let no_object = classes.saturating_sub(1);
    let mut targets: Vec<CandidateTarget> = (0..n)
        .map(|_| CandidateTarget {
            matched_gt: None,
            class_target: no_object,
            interactive: false,
            boxes: None,
            verbs: Vec::new(),
        })
        .collect();
    for &(i, j) in &result.assignment {
        let gt = &scene.gt_pairs[j];
        targets[i] = CandidateTarget {
            matched_gt: Some(j),
            class_target: scene.objects[gt.object].class_id,
            interactive: true,
            boxes: Some((
                scene.humans[gt.human].corners(),
                scene.objects[gt.object].bbox.corners(),
            )),
            verbs: gt.verbs.clone(),
        };
    }

    let object_classes: Vec<usize> = scene.objects.iter().map(|o| o.class_id).collect();
    let groups = group_pairs(scene.humans.len(), &object_classes)
        .into_iter()
        .map(|group| {
            let labels = InteractivenessLabels::new(
                group.cells.iter().map(|&c| targets[c].interactive).collect(),
            );
            GroupLabels { group, labels }
        })
        .collect();

    Ok(LabelAssignment { targets, groups, overflow_gts })
}
