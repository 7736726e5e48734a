//! Differentiable attention summary and difference indicators.
//!
//! Mirrors the raw attention path of the parent module on the autodiff
//! tape, operation for operation, so both paths agree to float precision.
//! Discrete choices (the agglomerative partition, centroid role
//! correspondence, degenerate-size handling) are made on the forward values
//! and treated as constants of the backward pass.

use ndarray::{Array1, Array2};

use crate::autodiff::{Tape, Value};

use super::{
    hier_core, roles_swapped, AttentionHead, AttentionParams, FieldError, FieldState,
    HierInit,
};

/// Attention parameters as tape values, in the parent module's layout.
#[derive(Clone)]
pub struct TapeAttentionParams {
    pub heads: Vec<TapeAttentionHead>,
    pub wo: Value,
}

#[derive(Clone)]
pub struct TapeAttentionHead {
    pub wq: Value,
    pub wk: Value,
    pub wv: Value,
}

impl TapeAttentionParams {
    /// Lifts parameters onto a tape as differentiable leaves.
    pub fn variables(params: &AttentionParams, tape: &Tape) -> Self {
        Self::lift(params, |a| tape.var(a))
    }

    /// Lifts parameters onto a tape without gradients.
    pub fn constants(params: &AttentionParams, tape: &Tape) -> Self {
        Self::lift(params, |a| tape.constant(a))
    }

    fn lift(params: &AttentionParams, mut leaf: impl FnMut(Array2<f64>) -> Value) -> Self {
        let heads = params
            .heads()
            .iter()
            .map(|h| TapeAttentionHead {
                wq: leaf(h.wq.clone()),
                wk: leaf(h.wk.clone()),
                wv: leaf(h.wv.clone()),
            })
            .collect();
        Self { heads, wo: leaf(params.wo().clone()) }
    }

    /// Rebuilds the grouping from a flat leaf list laid out as
    /// wq, wk, wv per head followed by wo. Used by gradient-check closures
    /// that receive their inputs as a slice.
    pub fn from_values(values: &[Value], n_heads: usize) -> Self {
        assert_eq!(values.len(), 3 * n_heads + 1, "expected 3 per head plus wo");
        let heads = (0..n_heads)
            .map(|h| TapeAttentionHead {
                wq: values[3 * h].clone(),
                wk: values[3 * h + 1].clone(),
                wv: values[3 * h + 2].clone(),
            })
            .collect();
        Self { heads, wo: values[3 * n_heads].clone() }
    }

    /// Leaves in the same order `from_values` expects.
    pub fn all_values(&self) -> Vec<Value> {
        let mut out = Vec::with_capacity(3 * self.heads.len() + 1);
        for h in &self.heads {
            out.extend([h.wq.clone(), h.wk.clone(), h.wv.clone()]);
        }
        out.push(self.wo.clone());
        out
    }

    /// Snapshot of the current forward values.
    pub fn to_params(&self) -> AttentionParams {
        let heads = self
            .heads
            .iter()
            .map(|h| AttentionHead {
                wq: h.wq.data(),
                wk: h.wk.data(),
                wv: h.wv.data(),
            })
            .collect();
        AttentionParams::new(heads, self.wo.data()).expect("tape params stay consistent")
    }

    fn head_dim(&self) -> usize {
        self.heads[0].wq.shape().1
    }
}

/// Field summary as tape values: centroids are 1 x C rows, masses 1 x N.
#[derive(Clone)]
pub struct TapeFieldState {
    pub c_s: Value,
    pub c_l: Value,
    pub a_s: Value,
    pub a_l: Value,
}

impl TapeFieldState {
    /// Both centroids concatenated into one 1 x 2C row, small cluster first.
    pub fn summary(&self) -> Value {
        self.c_s.concat_cols(&self.c_l)
    }

    /// Forward values as a raw state.
    pub fn to_state(&self) -> FieldState {
        let row = |v: &Value| Array1::from_vec(v.data().row(0).to_vec());
        FieldState {
            c_s: row(&self.c_s),
            c_l: row(&self.c_l),
            a_s: row(&self.a_s),
            a_l: row(&self.a_l),
        }
    }
}

/// Means of the two partition sides as differentiable centroids.
pub fn init_centroids(features: &Value, small: &[usize], large: &[usize]) -> (Value, Value) {
    let mean = |idx: &[usize]| {
        features.gather_rows(idx).sum_cols().mul_scalar(1.0 / idx.len() as f64)
    };
    (mean(small), mean(large))
}

/// The attention summary on the tape. Same operation order as the raw path.
pub fn attention(
    features: &Value,
    init: (&Value, &Value),
    params: &TapeAttentionParams,
) -> TapeFieldState {
    let (n, _c) = features.shape();
    let d = params.head_dim();
    let h = params.heads.len();
    let queries = init.0.concat_rows(init.1);
    let scale = 1.0 / (d as f64).sqrt();

    let mut mass: Option<Value> = None;
    let mut values: Option<Value> = None;
    for head in &params.heads {
        let q = queries.matmul(&head.wq);
        let k = features.matmul(&head.wk);
        let v = features.matmul(&head.wv);
        let logits = q
            .matmul(&k.transpose())
            .mul_scalar(scale)
            .clamp(-crate::field::LOGIT_CLAMP, crate::field::LOGIT_CLAMP);
        let assign = logits.sigmoid();
        mass = Some(match &mass {
            Some(m) => m.add(&assign),
            None => assign,
        });
        values = Some(match &values {
            Some(vs) => vs.concat_cols(&v),
            None => v,
        });
    }
    let mass = mass.expect("at least one head").mul_scalar(1.0 / h as f64);
    let values = values.expect("at least one head");

    let recombined = values.matmul(&params.wo);
    let row_sums = mass.sum_rows().broadcast(2, n);
    let row_norm = mass.div(&row_sums);
    let centroids = row_norm.matmul(&recombined);
    let pair_sums = mass.sum_cols();
    let a_s = mass.slice_rows(0, 1).div(&pair_sums);
    let a_l = mass.slice_rows(1, 2).div(&pair_sums);
    TapeFieldState {
        c_s: centroids.slice_rows(0, 1),
        c_l: centroids.slice_rows(1, 2),
        a_s,
        a_l,
    }
}

/// Degenerate single-pair state: both centroids are the lone row and the
/// masses are a constant even split (no gradient through the masses).
pub fn degenerate_single(features: &Value) -> TapeFieldState {
    assert_eq!(features.shape().0, 1, "degenerate state needs exactly one row");
    let half = features.tape().constant(Array2::from_elem((1, 1), 0.5));
    TapeFieldState {
        c_s: features.slice_rows(0, 1),
        c_l: features.slice_rows(0, 1),
        a_s: half.clone(),
        a_l: half,
    }
}

/// Agglomerative partition on the forward values, then the attention
/// summary. Single-row groups return the degenerate state.
pub fn summarize_group(
    features: &Value,
    params: &TapeAttentionParams,
) -> Result<(TapeFieldState, HierInit), FieldError> {
    let raw = features.data();
    if raw.nrows() == 1 {
        let row = Array1::from_vec(raw.row(0).to_vec());
        let init = HierInit {
            small: vec![0],
            large: vec![0],
            c_s: row.clone(),
            c_l: row,
        };
        return Ok((degenerate_single(features), init));
    }
    let init = hier_core(raw.view())?;
    let (c_s0, c_l0) = init_centroids(features, &init.small, &init.large);
    Ok((attention(features, (&c_s0, &c_l0), params), init))
}

/// L2 distance between two summaries after resolving centroid roles on the
/// forward values; the role choice is a constant of the backward pass.
pub fn summary_distance(full: &TapeFieldState, pert: &TapeFieldState) -> Value {
    let swapped = roles_swapped(&full.to_state(), &pert.to_state());
    let pert_summary = if swapped {
        pert.c_l.concat_cols(&pert.c_s)
    } else {
        pert.summary()
    };
    let diff = full.summary().sub(&pert_summary);
    diff.mul(&diff).sum_all().sqrt()
}

fn concat_entries(parts: &[Value]) -> Value {
    let mut out = parts[0].clone();
    for p in &parts[1..] {
        out = out.concat_cols(p);
    }
    out
}

/// Leave-one-out summary distances as a 1 x N row. Every reduced field
/// reuses the original initialization centroids. Groups with fewer than 3
/// pairs return constant zeros and the degenerate flag.
pub fn removal_indicator(
    features: &Value,
    init: (&Value, &Value),
    full: &TapeFieldState,
    params: &TapeAttentionParams,
) -> (Value, bool) {
    let (n, _) = features.shape();
    if n < 3 {
        return (features.tape().constant(Array2::zeros((1, n))), true);
    }
    let d: Vec<Value> = (0..n)
        .map(|i| {
            let keep: Vec<usize> = (0..n).filter(|&r| r != i).collect();
            let reduced = features.gather_rows(&keep);
            let pert = attention(&reduced, init, params);
            summary_distance(full, &pert)
        })
        .collect();
    (concat_entries(&d), false)
}

/// Mean-replacement summary distances as a 1 x N row; the column mean is
/// taken over all rows including the replaced one. Single-row groups return
/// a constant zero.
pub fn modification_indicator(
    features: &Value,
    init: (&Value, &Value),
    full: &TapeFieldState,
    params: &TapeAttentionParams,
) -> Value {
    let (n, _) = features.shape();
    if n == 1 {
        return features.tape().constant(Array2::zeros((1, 1)));
    }
    let mean = features.sum_cols().mul_scalar(1.0 / n as f64);
    let d: Vec<Value> = (0..n)
        .map(|i| {
            let modified = if i == 0 {
                mean.concat_rows(&features.slice_rows(1, n))
            } else if i == n - 1 {
                features.slice_rows(0, n - 1).concat_rows(&mean)
            } else {
                features
                    .slice_rows(0, i)
                    .concat_rows(&mean)
                    .concat_rows(&features.slice_rows(i + 1, n))
            };
            let pert = attention(&modified, init, params);
            summary_distance(full, &pert)
        })
        .collect();
    concat_entries(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::attn_core;
    use crate::autodiff::gradcheck::gradcheck;
    use crate::field::{
        indicators, AttentionCluster, GroupKey,
        PairFeatures,
    };
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((r, c), |_| normal.sample(rng))
    }

    fn random_params(rng: &mut ChaCha8Rng, c: usize, heads: usize, d: usize) -> AttentionParams {
        AttentionParams::random(c, heads, d, rng)
    }

    #[test]
    fn tape_attention_matches_the_raw_path() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 2 + rng.gen_range(0..7);
            let c = 2 + rng.gen_range(0..5);
            let heads = 1 + rng.gen_range(0..3);
            let d = 1 + rng.gen_range(0..4);
            let feats = random_matrix(&mut rng, n, c);
            let params = random_params(&mut rng, c, heads, d);

            let init = hier_core(feats.view()).unwrap();
            let raw = attn_core(feats.view(), (&init.c_s, &init.c_l), &params);

            let tape = Tape::new();
            let f = tape.var(feats.clone());
            let tp = TapeAttentionParams::constants(&params, &tape);
            let (c_s0, c_l0) = init_centroids(&f, &init.small, &init.large);
            let state = attention(&f, (&c_s0, &c_l0), &tp).to_state();

            for k in 0..c {
                assert_abs_diff_eq!(state.c_s[k], raw.c_s[k], epsilon = 1e-12);
                assert_abs_diff_eq!(state.c_l[k], raw.c_l[k], epsilon = 1e-12);
            }
            for i in 0..n {
                assert_abs_diff_eq!(state.a_s[i], raw.a_s[i], epsilon = 1e-12);
                assert_abs_diff_eq!(state.a_l[i], raw.a_l[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tape_indicators_match_the_raw_path() {
        for seed in 0..6 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 3 + rng.gen_range(0..6);
            let c = 2 + rng.gen_range(0..4);
            let feats = random_matrix(&mut rng, n, c);
            let params = random_params(&mut rng, c, 2, 3);

            let f_raw = PairFeatures::new(feats.clone(), GroupKey::Category { class_id: 0 })
                .unwrap();
            let g = AttentionCluster { params: &params };
            let raw = indicators(&f_raw, &g).unwrap();

            let tape = Tape::new();
            let f = tape.var(feats.clone());
            let tp = TapeAttentionParams::constants(&params, &tape);
            let (full, init) = summarize_group(&f, &tp).unwrap();
            let (c_s0, c_l0) = init_centroids(&f, &init.small, &init.large);
            let (d_r, degenerate) = removal_indicator(&f, (&c_s0, &c_l0), &full, &tp);
            let d_m = modification_indicator(&f, (&c_s0, &c_l0), &full, &tp);

            assert!(!degenerate);
            let d_r = d_r.data();
            let d_m = d_m.data();
            for i in 0..n {
                assert_abs_diff_eq!(d_r[(0, i)], raw.d_r[i], epsilon = 1e-12);
                assert_abs_diff_eq!(d_m[(0, i)], raw.d_m[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradients_pass_finite_difference_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 5;
        let c = 4;
        let heads = 2;
        let d = 3;
        let feats = random_matrix(&mut rng, n, c);
        let params = random_params(&mut rng, c, heads, d);
        let partition = hier_core(feats.view()).unwrap();
        // Random fixed readout so the scalar depends on masses and centroids.
        let w_mass = random_matrix(&mut rng, n, 1);
        let w_cent = random_matrix(&mut rng, 2 * c, 1);

        let mut inputs = vec![feats];
        for h in params.heads() {
            inputs.extend([h.wq.clone(), h.wk.clone(), h.wv.clone()]);
        }
        inputs.push(params.wo().clone());

        let small = partition.small.clone();
        let large = partition.large.clone();
        let report = gradcheck(
            &move |tape: &Tape, leaves: &[Value]| {
                let f = &leaves[0];
                let tp = TapeAttentionParams::from_values(&leaves[1..], heads);
                let (c_s0, c_l0) = init_centroids(f, &small, &large);
                let state = attention(f, (&c_s0, &c_l0), &tp);
                let mass_term = state.a_s.matmul(&tape.constant(w_mass.clone()));
                let cent_term = state.summary().matmul(&tape.constant(w_cent.clone()));
                mass_term.add(&cent_term)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn indicator_gradients_pass_finite_difference_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 4;
        let c = 3;
        let heads = 1;
        let d = 2;
        let feats = random_matrix(&mut rng, n, c);
        let params = random_params(&mut rng, c, heads, d);
        let partition = hier_core(feats.view()).unwrap();
        let w = random_matrix(&mut rng, n, 1);

        let mut inputs = vec![feats];
        for h in params.heads() {
            inputs.extend([h.wq.clone(), h.wk.clone(), h.wv.clone()]);
        }
        inputs.push(params.wo().clone());

        let small = partition.small.clone();
        let large = partition.large.clone();
        let report = gradcheck(
            &move |tape: &Tape, leaves: &[Value]| {
                let f = &leaves[0];
                let tp = TapeAttentionParams::from_values(&leaves[1..], heads);
                let (c_s0, c_l0) = init_centroids(f, &small, &large);
                let full = attention(f, (&c_s0, &c_l0), &tp);
                let (d_r, _) = removal_indicator(f, (&c_s0, &c_l0), &full, &tp);
                let d_m = modification_indicator(f, (&c_s0, &c_l0), &full, &tp);
                let w = tape.constant(w.clone());
                d_r.matmul(&w).add(&d_m.matmul(&w))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn small_groups_yield_constant_zero_indicators() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats = random_matrix(&mut rng, 2, 3);
        let params = random_params(&mut rng, 3, 1, 2);
        let tape = Tape::new();
        let f = tape.var(feats);
        let tp = TapeAttentionParams::constants(&params, &tape);
        let (full, init) = summarize_group(&f, &tp).unwrap();
        let (c_s0, c_l0) = init_centroids(&f, &init.small, &init.large);
        let (d_r, degenerate) = removal_indicator(&f, (&c_s0, &c_l0), &full, &tp);
        assert!(degenerate);
        assert_eq!(d_r.data(), Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn value_roundtrip_preserves_parameter_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = random_params(&mut rng, 4, 3, 2);
        let tape = Tape::new();
        let tp = TapeAttentionParams::variables(&params, &tape);
        let rebuilt = TapeAttentionParams::from_values(&tp.all_values(), 3);
        assert_eq!(rebuilt.to_params(), params);
    }
}
