//! Soft two-cluster summaries over groups of human-object candidate pairs.
//!
//! Each group holds the features of N candidate pairs. Clustering them into
//! two soft clusters yields a group summary: the two centroids `c_s` (from
//! the initially smaller cluster) and `c_l` (larger), plus per-pair
//! assignment masses `a_s`, `a_l` with `a_s + a_l = 1` for every pair. The
//! mass `a_s[i]` doubles as the pair's interactiveness energy.
//!
//! Two summary implementations share one agglomerative initialization: an
//! iterative [`soft_two_means`] and a single-pass learned
//! [`attention_cluster`]. Difference indicators measure how far the summary
//! moves when one pair is removed ([`removal_indicator`]) or blended into
//! the group mean ([`modification_indicator`]); large movement marks pairs
//! that shape the group. [`interactiveness_score`] combines mass and
//! indicators into a per-pair score in [0, 1].
//!
//! The [`tape`] submodule re-implements the attention summary and the
//! indicators on the autodiff tape for training; raw and tape paths follow
//! the same operation order and agree to float precision.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod tape;

/// Iteration cap for the soft two-means loop.
pub const SUMMARY_ITER_CAP: usize = 20;
/// The soft two-means loop stops once no centroid moves farther than this.
pub const CENTROID_MOVE_TOL: f64 = 1e-6;
/// Instance groups smaller than this fall back to category grouping.
pub const MIN_INSTANCE_GROUP: usize = 3;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid pair features: {reason}")]
    InvalidFeatures { reason: String },
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("pair index {index} out of range for {len} pairs")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("difference indicator entry {index} is {value}; indicators must be nonnegative")]
    NegativeIndicator { index: usize, value: f64 },
    #[error("invalid argument: {reason}")]
    InvalidArgument { reason: String },
}

/// Identifies which candidate pairs are clustered together.
///
/// Instance groups give each object its own field; category groups pool all
/// objects of one class, used when a scene has too few humans for instance
/// groups to reach [`MIN_INSTANCE_GROUP`] candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupKey {
    Instance { object: usize, class_id: usize },
    Category { class_id: usize },
}

/// One clustering group: its key and the candidate-grid cells it covers.
/// Cell indices follow the object-major grid convention
/// `cell = object * n_humans + human`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairGroup {
    pub key: GroupKey,
    pub cells: Vec<usize>,
}

/// Splits a scene's candidate grid into clustering groups.
///
/// With at least [`MIN_INSTANCE_GROUP`] humans every object forms its own
/// group (one candidate per human); otherwise candidates are pooled per
/// object class. Group order is deterministic: instance groups by object
/// index, category groups by class id; cells ascend within each group.
pub fn group_pairs(n_humans: usize, object_classes: &[usize]) -> Vec<PairGroup> {
    if n_humans >= MIN_INSTANCE_GROUP {
        return object_classes
            .iter()
            .enumerate()
            .map(|(o, &class_id)| PairGroup {
                key: GroupKey::Instance { object: o, class_id },
                cells: (0..n_humans).map(|h| o * n_humans + h).collect(),
            })
            .collect();
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (o, &class_id) in object_classes.iter().enumerate() {
        by_class
            .entry(class_id)
            .or_default()
            .extend((0..n_humans).map(|h| o * n_humans + h));
    }
    by_class
        .into_iter()
        .map(|(class_id, mut cells)| {
            cells.sort_unstable();
            PairGroup { key: GroupKey::Category { class_id }, cells }
        })
        .collect()
}

/// Feature matrix of one clustering group, one row per candidate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    features: Array2<f64>,
    group: GroupKey,
}

impl PairFeatures {
    /// Requires at least one row, at least two feature columns, and all
    /// entries finite.
    pub fn new(features: Array2<f64>, group: GroupKey) -> Result<Self, FieldError> {
        if features.nrows() == 0 {
            return Err(FieldError::InvalidFeatures { reason: "no pair rows".into() });
        }
        if features.ncols() < 2 {
            return Err(FieldError::InvalidFeatures {
                reason: format!("feature dimension {} below minimum 2", features.ncols()),
            });
        }
        if let Some(((i, j), v)) =
            features.indexed_iter().find(|(_, v)| !v.is_finite())
        {
            return Err(FieldError::InvalidFeatures {
                reason: format!("non-finite entry {v} at row {i}, column {j}"),
            });
        }
        Ok(Self { features, group })
    }

    pub fn from_rows(rows: &[Vec<f64>], group: GroupKey) -> Result<Self, FieldError> {
        if rows.is_empty() {
            return Err(FieldError::InvalidFeatures { reason: "no pair rows".into() });
        }
        let c = rows[0].len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(FieldError::InvalidFeatures { reason: "ragged rows".into() });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let features = Array2::from_shape_vec((rows.len(), c), flat)
            .expect("shape checked above");
        Self::new(features, group)
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn c(&self) -> usize {
        self.features.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn group(&self) -> GroupKey {
        self.group
    }
}

/// Summary of one group's field: two centroids and the per-pair soft
/// assignment masses. `a_s[i] + a_l[i] = 1` for every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub c_s: Array1<f64>,
    pub c_l: Array1<f64>,
    pub a_s: Array1<f64>,
    pub a_l: Array1<f64>,
}

impl FieldState {
    pub fn n(&self) -> usize {
        self.a_s.len()
    }

    /// The group summary: both centroids concatenated, small cluster first.
    pub fn summary(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.c_s.len() + self.c_l.len());
        out.slice_mut(ndarray::s![..self.c_s.len()]).assign(&self.c_s);
        out.slice_mut(ndarray::s![self.c_s.len()..]).assign(&self.c_l);
        out
    }

    /// Single-pair groups cannot be clustered; both centroids collapse to
    /// the lone feature row and the masses split evenly.
    pub fn degenerate_single(row: ArrayView1<'_, f64>) -> Self {
        Self {
            c_s: row.to_owned(),
            c_l: row.to_owned(),
            a_s: Array1::from_elem(1, 0.5),
            a_l: Array1::from_elem(1, 0.5),
        }
    }
}

/// The probability mass assigning pair `i` to the small cluster.
pub fn energy(state: &FieldState, i: usize) -> Result<f64, FieldError> {
    if i >= state.n() {
        return Err(FieldError::IndexOutOfRange { index: i, len: state.n() });
    }
    Ok(state.a_s[i])
}

/// At inference interactive pairs are taken to be the cluster with less
/// total mass. Returns that cluster's per-pair masses and whether the roles
/// were swapped relative to the small-first ordering; ties keep `a_s`.
pub fn interactive_assignment(state: &FieldState) -> (Array1<f64>, bool) {
    if state.a_s.sum() <= state.a_l.sum() {
        (state.a_s.clone(), false)
    } else {
        (state.a_l.clone(), true)
    }
}

/// Matches the tape sigmoid exactly so raw and tape paths agree bitwise.
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn euclid(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_of_rows(features: ArrayView2<'_, f64>, rows: &[usize]) -> Array1<f64> {
    let mut m = Array1::zeros(features.ncols());
    for &r in rows {
        m += &features.row(r);
    }
    m / rows.len() as f64
}

/// Two-cluster agglomerative initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct HierInit {
    /// Row indices of the smaller cluster, ascending.
    pub small: Vec<usize>,
    /// Row indices of the larger cluster, ascending.
    pub large: Vec<usize>,
    pub c_s: Array1<f64>,
    pub c_l: Array1<f64>,
}

/// Agglomerative average-linkage clustering down to two clusters.
///
/// Clusters merge by smallest average pairwise Euclidean distance
/// (Lance-Williams update); merge ties pick the lexicographically smallest
/// slot pair. The smaller cluster is returned first; equal sizes put the
/// cluster containing row 0's side (the smallest member index) first.
/// Requires N >= 2.
pub fn hier_init(f: &PairFeatures) -> Result<HierInit, FieldError> {
    hier_core(f.view())
}

pub(crate) fn hier_core(features: ArrayView2<'_, f64>) -> Result<HierInit, FieldError> {
    let n = features.nrows();
    if n < 2 {
        return Err(FieldError::InvalidArgument {
            reason: "hierarchical initialization needs at least 2 pairs".into(),
        });
    }
    let mut dist = vec![vec![0.0_f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclid(features.row(i), features.row(j));
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    // Slot index stays the minimum member index: merges keep the lower slot.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut active = n;
    while active > 2 {
        let mut best = f64::INFINITY;
        let (mut ba, mut bb) = (0, 0);
        for a in 0..n {
            if members[a].is_none() {
                continue;
            }
            for b in (a + 1)..n {
                if members[b].is_none() {
                    continue;
                }
                if dist[a][b] < best {
                    best = dist[a][b];
                    ba = a;
                    bb = b;
                }
            }
        }
        let sa = members[ba].as_ref().expect("active").len() as f64;
        let sb = members[bb].as_ref().expect("active").len() as f64;
        for k in 0..n {
            if k == ba || k == bb || members[k].is_none() {
                continue;
            }
            let d = (sa * dist[ba][k] + sb * dist[bb][k]) / (sa + sb);
            dist[ba][k] = d;
            dist[k][ba] = d;
        }
        let absorbed = members[bb].take().expect("active");
        let target = members[ba].as_mut().expect("active");
        target.extend(absorbed);
        target.sort_unstable();
        active -= 1;
    }
    let mut clusters: Vec<Vec<usize>> = members.into_iter().flatten().collect();
    debug_assert_eq!(clusters.len(), 2);
    // Slot order is ascending minimum member, so on a size tie the cluster
    // holding the smallest index comes first.
    if clusters[0].len() > clusters[1].len() {
        clusters.swap(0, 1);
    }
    let c_s = mean_of_rows(features, &clusters[0]);
    let c_l = mean_of_rows(features, &clusters[1]);
    let large = clusters.pop().expect("two clusters");
    let small = clusters.pop().expect("two clusters");
    Ok(HierInit { small, large, c_s, c_l })
}

/// One alternating iteration scheme: per-pair soft assignment from negative
/// Euclidean centroid distances, then mass-weighted centroid updates.
///
/// Each iteration assigns from the current centroids and then moves them;
/// the loop stops after `max_iters` iterations or once no centroid moves
/// farther than [`CENTROID_MOVE_TOL`]. The returned masses are the ones the
/// final update was computed from, so with `max_iters = 1` they reflect the
/// initialization centroids exactly.
pub fn soft_two_means(
    f: &PairFeatures,
    init: (&Array1<f64>, &Array1<f64>),
    max_iters: usize,
) -> Result<FieldState, FieldError> {
    if max_iters == 0 {
        return Err(FieldError::InvalidArgument {
            reason: "soft two-means needs at least one iteration".into(),
        });
    }
    check_centroid_dims(f.c(), init)?;
    Ok(stm_core(f.view(), init, max_iters))
}

fn check_centroid_dims(
    c: usize,
    init: (&Array1<f64>, &Array1<f64>),
) -> Result<(), FieldError> {
    for cent in [init.0, init.1] {
        if cent.len() != c {
            return Err(FieldError::DimensionMismatch {
                what: "initialization centroid",
                expected: c,
                found: cent.len(),
            });
        }
    }
    Ok(())
}

pub(crate) fn stm_core(
    features: ArrayView2<'_, f64>,
    init: (&Array1<f64>, &Array1<f64>),
    max_iters: usize,
) -> FieldState {
    let n = features.nrows();
    let mut c_s = init.0.clone();
    let mut c_l = init.1.clone();
    let mut a_s = Array1::zeros(n);
    let mut a_l = Array1::zeros(n);
    for _ in 0..max_iters {
        for i in 0..n {
            let d_s = euclid(features.row(i), c_s.view());
            let d_l = euclid(features.row(i), c_l.view());
            // Two-way softmax over negative distances.
            let m = sigmoid(d_l - d_s);
            a_s[i] = m;
            a_l[i] = 1.0 - m;
        }
        let mut new_s = Array1::<f64>::zeros(c_s.len());
        let mut new_l = Array1::<f64>::zeros(c_l.len());
        for i in 0..n {
            new_s += &(&features.row(i) * a_s[i]);
            new_l += &(&features.row(i) * a_l[i]);
        }
        new_s /= a_s.sum();
        new_l /= a_l.sum();
        let movement =
            euclid(new_s.view(), c_s.view()).max(euclid(new_l.view(), c_l.view()));
        c_s = new_s;
        c_l = new_l;
        if movement < CENTROID_MOVE_TOL {
            break;
        }
    }
    FieldState { c_s, c_l, a_s, a_l }
}

/// Projection weights of one attention head; each matrix is C x head_dim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// Learned parameters of the attention summary. `wo` recombines the
/// concatenated per-head values back to the feature dimension, so its shape
/// is (heads * head_dim) x C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    heads: Vec<AttentionHead>,
    wo: Array2<f64>,
}

impl AttentionParams {
    pub fn new(heads: Vec<AttentionHead>, wo: Array2<f64>) -> Result<Self, FieldError> {
        if heads.is_empty() {
            return Err(FieldError::InvalidArgument {
                reason: "attention summary needs at least one head".into(),
            });
        }
        let c = heads[0].wq.nrows();
        let d = heads[0].wq.ncols();
        if c == 0 || d == 0 {
            return Err(FieldError::InvalidArgument {
                reason: "attention projections must be non-empty".into(),
            });
        }
        for head in &heads {
            for (name, m) in [("wq", &head.wq), ("wk", &head.wk), ("wv", &head.wv)] {
                if m.dim() != (c, d) {
                    return Err(FieldError::InvalidArgument {
                        reason: format!(
                            "head matrix {name} has shape {:?}, expected ({c}, {d})",
                            m.dim()
                        ),
                    });
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(FieldError::InvalidArgument {
                        reason: format!("head matrix {name} has non-finite entries"),
                    });
                }
            }
        }
        if wo.dim() != (heads.len() * d, c) {
            return Err(FieldError::InvalidArgument {
                reason: format!(
                    "output projection has shape {:?}, expected ({}, {c})",
                    wo.dim(),
                    heads.len() * d
                ),
            });
        }
        if wo.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::InvalidArgument {
                reason: "output projection has non-finite entries".into(),
            });
        }
        Ok(Self { heads, wo })
    }

    /// Gaussian initialization scaled by the fan-in of each projection.
    pub fn random(
        c: usize,
        n_heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let draw = |rows: usize, cols: usize, std: f64, rng: &mut dyn rand::RngCore| {
            let normal = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
        };
        let qkv_std = 1.0 / (c as f64).sqrt();
        let heads = (0..n_heads)
            .map(|_| AttentionHead {
                wq: draw(c, head_dim, qkv_std, rng),
                wk: draw(c, head_dim, qkv_std, rng),
                wv: draw(c, head_dim, qkv_std, rng),
            })
            .collect();
        let wo_std = 1.0 / ((n_heads * head_dim) as f64).sqrt();
        let wo = draw(n_heads * head_dim, c, wo_std, rng);
        Self::new(heads, wo).expect("construction is consistent")
    }

    pub fn feature_dim(&self) -> usize {
        self.heads[0].wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].wq.ncols()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[AttentionHead] {
        &self.heads
    }

    pub fn wo(&self) -> &Array2<f64> {
        &self.wo
    }

    fn check_feature_dim(&self, c: usize) -> Result<(), FieldError> {
        if self.feature_dim() != c {
            return Err(FieldError::DimensionMismatch {
                what: "attention parameter feature dimension",
                expected: c,
                found: self.feature_dim(),
            });
        }
        Ok(())
    }
}

/// Single-pass learned summary: the two initialization centroids query the
/// pair features through multi-head attention.
///
/// Per head, logits are scaled by 1/sqrt(head_dim) and squashed per entry
/// with a sigmoid; the 2 x N masses are averaged over heads. Centroids are
/// the row-normalized masses applied to the recombined per-head values, and
/// the returned per-pair masses are renormalized so `a_s + a_l = 1`.
pub fn attention_cluster(
    f: &PairFeatures,
    init: (&Array1<f64>, &Array1<f64>),
    params: &AttentionParams,
) -> Result<FieldState, FieldError> {
    params.check_feature_dim(f.c())?;
    check_centroid_dims(f.c(), init)?;
    Ok(attn_core(f.view(), init, params))
}

/// Attention logits are clamped to this band before the sigmoid. The
/// sigmoid is flat to machine precision beyond it, so values are unchanged
/// for any input that matters, while mass sums stay bounded away from zero
/// and their reciprocals (and squared reciprocals in gradients) stay
/// representable.
pub(crate) const LOGIT_CLAMP: f64 = 40.0;

pub(crate) fn attn_core(
    features: ArrayView2<'_, f64>,
    init: (&Array1<f64>, &Array1<f64>),
    params: &AttentionParams,
) -> FieldState {
    let n = features.nrows();
    let c = features.ncols();
    let h = params.n_heads();
    let d = params.head_dim();
    let mut queries = Array2::zeros((2, c));
    queries.row_mut(0).assign(init.0);
    queries.row_mut(1).assign(init.1);

    let scale = 1.0 / (d as f64).sqrt();
    let mut mass = Array2::<f64>::zeros((2, n));
    let mut values = Array2::<f64>::zeros((n, h * d));
    for (hi, head) in params.heads().iter().enumerate() {
        let q = queries.dot(&head.wq);
        let k = features.dot(&head.wk);
        let v = features.dot(&head.wv);
        let logits = (q.dot(&k.t()) * scale).mapv(|v| v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
        mass += &logits.mapv(sigmoid);
        values.slice_mut(ndarray::s![.., hi * d..(hi + 1) * d]).assign(&v);
    }
    mass /= h as f64;

    let recombined = values.dot(params.wo());
    // Clamped logits keep every mass at least sigmoid(-LOGIT_CLAMP), so
    // the normalizations below cannot divide by zero.
    let row_sums = mass.sum_axis(Axis(1)).insert_axis(Axis(1));
    let row_norm = &mass / &row_sums;
    let centroids = row_norm.dot(&recombined);
    let pair_sums = mass.sum_axis(Axis(0));
    let a_s = &mass.row(0) / &pair_sums;
    let a_l = &mass.row(1) / &pair_sums;
    FieldState {
        c_s: centroids.row(0).to_owned(),
        c_l: centroids.row(1).to_owned(),
        a_s,
        a_l,
    }
}

/// A summary function over a group's pair features, given shared
/// initialization centroids.
pub trait Summary: Sync {
    fn summarize(
        &self,
        features: ArrayView2<'_, f64>,
        init: (&Array1<f64>, &Array1<f64>),
    ) -> Result<FieldState, FieldError>;
}

/// [`soft_two_means`] as a reusable summary function.
#[derive(Debug, Clone, Copy)]
pub struct SoftTwoMeans {
    pub max_iters: usize,
}

impl Default for SoftTwoMeans {
    fn default() -> Self {
        Self { max_iters: SUMMARY_ITER_CAP }
    }
}

impl Summary for SoftTwoMeans {
    fn summarize(
        &self,
        features: ArrayView2<'_, f64>,
        init: (&Array1<f64>, &Array1<f64>),
    ) -> Result<FieldState, FieldError> {
        if self.max_iters == 0 {
            return Err(FieldError::InvalidArgument {
                reason: "soft two-means needs at least one iteration".into(),
            });
        }
        Ok(stm_core(features, init, self.max_iters))
    }
}

/// [`attention_cluster`] as a reusable summary function.
#[derive(Debug, Clone, Copy)]
pub struct AttentionCluster<'p> {
    pub params: &'p AttentionParams,
}

impl Summary for AttentionCluster<'_> {
    fn summarize(
        &self,
        features: ArrayView2<'_, f64>,
        init: (&Array1<f64>, &Array1<f64>),
    ) -> Result<FieldState, FieldError> {
        self.params.check_feature_dim(features.ncols())?;
        Ok(attn_core(features, init, self.params))
    }
}

/// Runs the agglomerative initialization followed by the given summary.
/// Single-pair groups skip clustering entirely and return the degenerate
/// state with an initialization that repeats the lone row.
pub fn summarize_group(
    f: &PairFeatures,
    g: &dyn Summary,
) -> Result<(FieldState, HierInit), FieldError> {
    if f.n() == 1 {
        let row = f.view().row(0).to_owned();
        let init = HierInit {
            small: vec![0],
            large: vec![0],
            c_s: row.clone(),
            c_l: row,
        };
        return Ok((FieldState::degenerate_single(f.view().row(0)), init));
    }
    let init = hier_core(f.view())?;
    let state = g.summarize(f.view(), (&init.c_s, &init.c_l))?;
    Ok((state, init))
}

/// Resolves which perturbed centroid plays which role before measuring a
/// summary distance: the pairing with the smaller total centroid distance
/// wins, and ties keep the original (small, large) order. Returns true when
/// the roles must be swapped.
pub(crate) fn roles_swapped(orig: &FieldState, pert: &FieldState) -> bool {
    let straight = euclid(orig.c_s.view(), pert.c_s.view())
        + euclid(orig.c_l.view(), pert.c_l.view());
    let swapped = euclid(orig.c_s.view(), pert.c_l.view())
        + euclid(orig.c_l.view(), pert.c_s.view());
    swapped < straight
}

fn summary_distance(orig: &FieldState, pert: &FieldState) -> f64 {
    let (ps, pl) = if roles_swapped(orig, pert) {
        (&pert.c_l, &pert.c_s)
    } else {
        (&pert.c_s, &pert.c_l)
    };
    let ds = euclid(orig.c_s.view(), ps.view());
    let dl = euclid(orig.c_l.view(), pl.view());
    (ds * ds + dl * dl).sqrt()
}

/// How far the group summary moves when pair `i` is removed, for every `i`.
///
/// Each leave-one-out field is recomputed with the original initialization
/// centroids so only the removal itself changes the outcome. Groups with
/// fewer than 3 pairs cannot be re-clustered after a removal; they yield
/// all zeros and the degenerate flag is set.
pub fn removal_indicator(
    f: &PairFeatures,
    g: &dyn Summary,
) -> Result<(Array1<f64>, bool), FieldError> {
    let n = f.n();
    if n < 3 {
        return Ok((Array1::zeros(n), true));
    }
    let (full, init) = summarize_group(f, g)?;
    let d: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let reduced = f.view().select(Axis(0), &keep);
            let pert = g.summarize(reduced.view(), (&init.c_s, &init.c_l))?;
            Ok(summary_distance(&full, &pert))
        })
        .collect::<Result<_, FieldError>>()?;
    Ok((Array1::from_vec(d), false))
}

/// How far the group summary moves when pair `i` is replaced by the column
/// mean of all rows (the mean includes row `i`). Single-pair groups return
/// zero: replacing the lone row by its own mean changes nothing.
pub fn modification_indicator(
    f: &PairFeatures,
    g: &dyn Summary,
) -> Result<Array1<f64>, FieldError> {
    let n = f.n();
    if n == 1 {
        return Ok(Array1::zeros(1));
    }
    let (full, init) = summarize_group(f, g)?;
    let mean = f.view().mean_axis(Axis(0)).expect("n >= 1");
    let d: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut modified = f.view().to_owned();
            modified.row_mut(i).assign(&mean);
            let pert = g.summarize(modified.view(), (&init.c_s, &init.c_l))?;
            Ok(summary_distance(&full, &pert))
        })
        .collect::<Result<_, FieldError>>()?;
    Ok(Array1::from_vec(d))
}

/// Removal and modification indicators for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct Indicators {
    pub d_r: Array1<f64>,
    pub d_m: Array1<f64>,
    /// True when the group was too small for leave-one-out re-clustering
    /// and `d_r` is all zeros.
    pub removal_degenerate: bool,
}

pub fn indicators(f: &PairFeatures, g: &dyn Summary) -> Result<Indicators, FieldError> {
    let (d_r, removal_degenerate) = removal_indicator(f, g)?;
    let d_m = modification_indicator(f, g)?;
    Ok(Indicators { d_r, d_m, removal_degenerate })
}

/// Per-pair interactiveness score `(a + sigma(d_r) + sigma(d_m) - 1) / 2`.
///
/// For masses in [0, 1] and nonnegative indicators the score stays in
/// [0, 1]: each sigma term lies in [0.5, 1). Negative or non-finite
/// indicator entries are rejected.
pub fn interactiveness_score(
    a_s: ArrayView1<'_, f64>,
    d_r: ArrayView1<'_, f64>,
    d_m: ArrayView1<'_, f64>,
) -> Result<Array1<f64>, FieldError> {
    fn check_indicator(arr: &ArrayView1<'_, f64>, n: usize) -> Result<(), FieldError> {
        if arr.len() != n {
            return Err(FieldError::DimensionMismatch {
                what: "indicator length",
                expected: n,
                found: arr.len(),
            });
        }
        if let Some((i, &v)) = arr.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(FieldError::NegativeIndicator { index: i, value: v });
        }
        Ok(())
    }
    check_indicator(&d_r, a_s.len())?;
    check_indicator(&d_m, a_s.len())?;
    Ok(Array1::from_shape_fn(a_s.len(), |i| {
        (a_s[i] + sigmoid(d_r[i]) + sigmoid(d_m[i]) - 1.0) / 2.0
    }))
}
