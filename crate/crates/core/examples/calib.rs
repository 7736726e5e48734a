//! Throwaway calibration probe for the clustering stack. Not part of the
//! public surface; run with `cargo run --release --example calib`.

use ifield_core::field::{
    group_pairs, indicators, interactive_assignment, summarize_group, PairFeatures,
    SoftTwoMeans,
};
use ifield_core::synth::{candidate_grid, derive_seed, generate_scene, FeatureMode, GeneratorConfig};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() {
    field_recovery();
    outlier_detection();
}

/// Criterion-3 shape: fraction of planted-minority pairs that receive
/// minority mass above 0.9 from the raw soft two-means summary.
fn field_recovery() {
    let config = GeneratorConfig { feature_mode: FeatureMode::Oracle, ..Default::default() };
    let summary = SoftTwoMeans::default();
    let mut minority_pairs = 0usize;
    let mut recovered = 0usize;
    let mut groups_seen = 0usize;
    let mut degenerate = 0usize;
    for index in 0..500 {
        let scene = generate_scene(&config, index);
        let grid = candidate_grid(&scene, &config);
        let n_humans = scene.humans.len();
        let classes: Vec<usize> = scene.objects.iter().map(|o| o.class_id).collect();
        for group in group_pairs(n_humans, &classes) {
            groups_seen += 1;
            let labels: Vec<bool> =
                group.cells.iter().map(|&c| grid[c].interactive).collect();
            let pos = labels.iter().filter(|&&b| b).count();
            let neg = labels.len() - pos;
            if pos == 0 || neg == 0 || pos == neg {
                degenerate += 1;
                continue;
            }
            let minority_label = pos < neg;
            let dim = config.feature_dim;
            let mut feats = Array2::zeros((group.cells.len(), dim));
            for (row, &cell) in group.cells.iter().enumerate() {
                let planted = grid[cell].planted.as_ref().expect("oracle mode");
                for (k, &v) in planted.iter().enumerate() {
                    feats[[row, k]] = v;
                }
            }
            let pf = PairFeatures::new(feats, group.key.clone()).expect("features");
            let (state, _) = summarize_group(&pf, &summary).expect("summary");
            let (a_s, _) = interactive_assignment(&state);
            for (row, &is_pos) in labels.iter().enumerate() {
                if is_pos == minority_label {
                    minority_pairs += 1;
                    if a_s[row] > 0.9 {
                        recovered += 1;
                    }
                }
            }
        }
    }
    println!(
        "field recovery: {recovered}/{minority_pairs} minority pairs above 0.9 ({:.4})  [{} groups, {} degenerate]",
        recovered as f64 / minority_pairs as f64,
        groups_seen,
        degenerate
    );
}

/// Criterion-4 shape: planted 1-outlier groups, argmax of each indicator
/// should point at the outlier.
fn outlier_detection() {
    let dim = 8usize;
    let mut hit_r = 0usize;
    let mut hit_m = 0usize;
    let trials = 500usize;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(77, 4242, t as u64));
        let n = rng.gen_range(3..=8usize);
        let outlier = rng.gen_range(0..n);
        let mut dir = vec![0.0f64; dim];
        let mut norm = 0.0;
        for d in dir.iter_mut() {
            *d = rng.sample(StandardNormal);
            norm += *d * *d;
        }
        let norm = norm.sqrt();
        let mut feats = Array2::zeros((n, dim));
        for i in 0..n {
            for k in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                feats[[i, k]] = noise / (dim as f64).sqrt()
                    + if i == outlier { 6.0 * dir[k] / norm } else { 0.0 };
            }
        }
        let groups = group_pairs(n, &[0]);
        let pf = PairFeatures::new(feats, groups[0].key.clone()).expect("features");
        let summary = SoftTwoMeans::default();
        let ind = indicators(&pf, &summary).expect("indicators");
        let (d_r, d_m) = (ind.d_r, ind.d_m);
        let am_r = d_r
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let am_m = d_m
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if am_r == outlier {
            hit_r += 1;
        }
        if am_m == outlier {
            hit_m += 1;
        }
    }
    println!(
        "outlier: D_r {hit_r}/{trials} ({:.4})  D_m {hit_m}/{trials} ({:.4})",
        hit_r as f64 / trials as f64,
        hit_m as f64 / trials as f64
    );
}
