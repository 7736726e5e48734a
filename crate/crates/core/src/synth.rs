//! Synthetic bimodal scene generator.
//!
//! Every scene carries humans, objects, and ground-truth interactive pairs
//! whose count realizes one of three regimes measured on the full candidate
//! grid (all human-object pairs): minority (interactive fraction < 0.4),
//! balanced (within [0.4, 0.6]), majority (> 0.6). Scene files store only
//! structure plus the per-scene seed; candidate features are re-derived
//! deterministically, so serialization is lossless by construction.
//!
//! Pair features come in two modes. Oracle mode plants a two-cluster
//! structure per object class: non-interactive features draw from
//! `N(base, I/C)` and interactive ones from `N(base + separation * u, I/C)`
//! with a unit direction `u`. Per-axis noise of `1/sqrt(C)` keeps each
//! cluster's RMS radius at 1, so `separation` is measured in within-cluster
//! standard deviations regardless of the feature dimension (and the best
//! linear error rate is `Phi(-separation * sqrt(C) / 2)`, vanishing for any
//! usable dimension). By default `base` and `u` are fixed per class
//! across the whole dataset, with all classes sharing one direction and
//! bases orthogonal to it, so a single hyperplane separates the labels
//! globally. With [`GeneratorConfig::scene_relative_clusters`] both are
//! re-drawn per scene and class: the clusters' absolute position then
//! carries no information and only the within-scene split does. Geometric
//! mode provides raw box descriptors only.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scene record at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Interactive-pair prevalence class of a scene's candidate grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Minority,
    Balanced,
    Majority,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Minority, Regime::Balanced, Regime::Majority];

    pub fn index(self) -> usize {
        match self {
            Regime::Minority => 0,
            Regime::Balanced => 1,
            Regime::Majority => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Regime::Minority => "minority",
            Regime::Balanced => "balanced",
            Regime::Majority => "majority",
        }
    }
}

/// Regime realized by `interactive` ground-truth pairs on a grid of `total`
/// candidates. Band edges are decided in integer arithmetic: minority means
/// `k/T < 0.4`, balanced `0.4 <= k/T <= 0.6`, majority `k/T > 0.6`.
pub fn regime_of_counts(interactive: usize, total: usize) -> Regime {
    assert!(total > 0, "regime of an empty grid is undefined");
    if 5 * interactive < 2 * total {
        Regime::Minority
    } else if 5 * interactive <= 3 * total {
        Regime::Balanced
    } else {
        Regime::Majority
    }
}

/// How candidate pair features are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Plants separated feature clusters directly.
    Oracle,
    /// Emits only raw geometric descriptors; separating them is the
    /// encoder's job.
    Geometric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Mixture weights for (minority, balanced, majority) scenes.
    pub regime_mix: [f64; 3],
    /// Inclusive range of humans per scene.
    pub humans: (usize, usize),
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    /// Dimension of the planted oracle feature.
    pub feature_dim: usize,
    /// Distance between planted cluster means, in units of the
    /// within-cluster standard deviation (the cluster RMS radius, which
    /// is held at 1 for every feature dimension).
    pub separation: f64,
    /// Standard deviation of the per-class cluster base. Larger values
    /// spread the class clusters further apart.
    pub cluster_spread: f64,
    /// When set, cluster bases and separation directions are re-drawn per
    /// scene, so only the within-scene split identifies interactive pairs.
    /// When clear they are fixed per class for the whole dataset and
    /// globally linearly separable.
    pub scene_relative_clusters: bool,
    pub verb_count: usize,
    pub object_classes: usize,
    pub feature_mode: FeatureMode,
    /// Master seed; scene `i` derives its own seed from it.
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            regime_mix: [0.791, 0.073, 0.136],
            humans: (2, 8),
            objects: (1, 4),
            feature_dim: 8,
            separation: 6.0,
            cluster_spread: 3.0,
            scene_relative_clusters: false,
            verb_count: 4,
            object_classes: 6,
            feature_mode: FeatureMode::Oracle,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field: &'static str, reason: String| Err(SynthError::InvalidConfig { field, reason });
        if self.regime_mix.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("regime_mix", "weights must be finite and nonnegative".into());
        }
        let sum: f64 = self.regime_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad("regime_mix", format!("weights must sum to 1, got {sum}"));
        }
        if self.humans.0 < 1 || self.humans.0 > self.humans.1 {
            return bad("humans", format!("range ({}, {}) is empty or zero", self.humans.0, self.humans.1));
        }
        if self.objects.0 < 1 || self.objects.0 > self.objects.1 {
            return bad("objects", format!("range ({}, {}) is empty or zero", self.objects.0, self.objects.1));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1".into());
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return bad("separation", format!("must be a positive finite number, got {}", self.separation));
        }
        if !(self.cluster_spread >= 0.0) || !self.cluster_spread.is_finite() {
            return bad("cluster_spread", format!("must be finite and nonnegative, got {}", self.cluster_spread));
        }
        if self.verb_count == 0 {
            return bad("verb_count", "must be at least 1".into());
        }
        if self.object_classes == 0 {
            return bad("object_classes", "must be at least 1".into());
        }
        // A minority scene needs a grid of at least 3 candidates.
        if self.regime_mix[0] > 0.0 && self.humans.1 * self.objects.1 < 3 {
            return bad("humans", "minority scenes need a grid of at least 3 candidates".into());
        }
        // T = 3 cannot realize the balanced band; with T fixed at 3 the
        // generator would loop forever.
        if self.regime_mix[1] > 0.0 && self.humans.0 * self.objects.0 == 3 && self.humans.1 * self.objects.1 == 3 {
            return bad("humans", "a grid of exactly 3 candidates cannot realize a balanced scene".into());
        }
        Ok(())
    }

    /// Dimension of the encoder input descriptor under this config.
    pub fn descriptor_dim(&self) -> usize {
        let base = 4 + 4 + self.object_classes + 3;
        match self.feature_mode {
            FeatureMode::Oracle => base + self.feature_dim,
            FeatureMode::Geometric => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class_id: usize,
}

/// A ground-truth interactive pair. Pairs absent from a scene's list are
/// non-interactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPair {
    pub human: usize,
    pub object: usize,
    pub verbs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub regime: Regime,
    pub humans: Vec<BBox>,
    pub objects: Vec<SceneObject>,
    pub gt_pairs: Vec<GtPair>,
}

impl Scene {
    pub fn grid_size(&self) -> usize {
        self.humans.len() * self.objects.len()
    }

    pub fn is_interactive(&self, human: usize, object: usize) -> bool {
        self.gt_pairs.iter().any(|p| p.human == human && p.object == object)
    }

    pub fn gt_pair(&self, human: usize, object: usize) -> Option<&GtPair> {
        self.gt_pairs.iter().find(|p| p.human == human && p.object == object)
    }
}

/// One human-object hypothesis of the candidate grid, with its ground-truth
/// label and the inputs the encoder will see.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub human: usize,
    pub object: usize,
    pub interactive: bool,
    /// Ground-truth verbs; empty for non-interactive pairs.
    pub verbs: Vec<usize>,
    /// Encoder input: both boxes, object-class one-hot, center offsets.
    /// In oracle mode the planted feature is appended.
    pub descriptor: Vec<f64>,
    /// Planted cluster feature (oracle mode only).
    pub planted: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub scene_count: usize,
    pub regime_counts: [usize; 3],
    pub regime_frequencies: [f64; 3],
    pub config: GeneratorConfig,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derivation used for all per-scene randomness.
pub fn derive_seed(master: u64, salt: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ salt) ^ index)
}

const SALT_SCENE: u64 = 0x5345_4E45;
const SALT_CLASS: u64 = 0x434C_4153;
const SALT_PAIR: u64 = 0x5041_4952;
const SALT_DIRECTION: u64 = 0x4449_5243;

fn draw_normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * scale).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = draw_normal_vec(rng, dim, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_box(rng: &mut ChaCha8Rng, min_side: f64, max_side: f64) -> BBox {
    let w = rng.gen_range(min_side..=max_side);
    let h = rng.gen_range(min_side..=max_side);
    let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        .expect("sampled box is valid by construction")
}

fn box_at(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let cx = cx.clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = cy.clamp(h / 2.0, 1.0 - h / 2.0);
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        .expect("clamped box is valid by construction")
}

/// Maximum center distance the proximity bias aims for on interactive pairs.
pub const PROXIMITY_RADIUS: f64 = 0.3;

/// Deterministic verb rule: the primary verb follows the object class and
/// the quadrant of the center offset; very close pairs get a second verb.
fn verbs_for(class_id: usize, dx: f64, dy: f64, dist: f64, verb_count: usize) -> Vec<f64> {
    let quadrant = match (dx >= 0.0, dy >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    };
    let v1 = (class_id + quadrant) % verb_count;
    let mut verbs = vec![v1 as f64];
    if dist < 0.15 && verb_count > 1 {
        verbs.push(((v1 + 1) % verb_count) as f64);
    }
    verbs
}

/// Picks the interactive-pair count for `regime` on a grid of `total`
/// candidates, or `None` if the regime is infeasible at that grid size.
fn interactive_count_for(rng: &mut ChaCha8Rng, regime: Regime, total: usize) -> Option<usize> {
    match regime {
        Regime::Minority => {
            // k/T < 0.4 and k >= 1.
            let k_max = (2 * total).saturating_sub(1) / 5;
            if k_max < 1 {
                return None;
            }
            Some(rng.gen_range(1..=k_max))
        }
        Regime::Balanced => {
            // 0.4 <= k/T <= 0.6.
            let k_min = (2 * total).div_ceil(5);
            let k_max = 3 * total / 5;
            if k_min > k_max {
                return None;
            }
            Some(rng.gen_range(k_min..=k_max))
        }
        Regime::Majority => {
            // k/T > 0.6.
            let k_min = 3 * total / 5 + 1;
            if k_min > total {
                return None;
            }
            Some(rng.gen_range(k_min..=total))
        }
    }
}

/// Generates scene `index` of the dataset addressed by `config.seed`.
///
/// The same `(config, index)` always produces the same scene, and the
/// scene's own `seed` suffices to re-derive its candidate features.
pub fn generate_scene(config: &GeneratorConfig, index: u64) -> Scene {
    let scene_seed = derive_seed(config.seed, SALT_SCENE, index);
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);

    let r: f64 = rng.gen();
    let regime = if r < config.regime_mix[0] {
        Regime::Minority
    } else if r < config.regime_mix[0] + config.regime_mix[1] {
        Regime::Balanced
    } else {
        Regime::Majority
    };

    let (n_humans, n_objects, n_interactive) = loop {
        let h = rng.gen_range(config.humans.0..=config.humans.1);
        let o = rng.gen_range(config.objects.0..=config.objects.1);
        if let Some(k) = interactive_count_for(&mut rng, regime, h * o) {
            break (h, o, k);
        }
    };

    // Interactive cells of the object-major candidate grid, via a partial
    // Fisher-Yates shuffle.
    let total = n_humans * n_objects;
    let mut cells: Vec<usize> = (0..total).collect();
    for i in 0..n_interactive {
        let j = rng.gen_range(i..total);
        cells.swap(i, j);
    }
    let mut interactive_cells = cells[..n_interactive].to_vec();
    interactive_cells.sort_unstable();

    // Objects cluster around a scene activity center so that a human can
    // sit within the proximity radius of several of them at once.
    let activity = (rng.gen_range(0.3..=0.7), rng.gen_range(0.3..=0.7));
    let objects: Vec<SceneObject> = (0..n_objects)
        .map(|_| {
            let w = rng.gen_range(0.08..=0.28);
            let h = rng.gen_range(0.08..=0.28);
            let cx = activity.0 + rng.gen_range(-0.12..=0.12);
            let cy = activity.1 + rng.gen_range(-0.12..=0.12);
            SceneObject {
                bbox: box_at(cx, cy, w, h),
                class_id: rng.gen_range(0..config.object_classes),
            }
        })
        .collect();

    let is_interactive_cell =
        |h: usize, o: usize| interactive_cells.binary_search(&(o * n_humans + h)).is_ok();

    // Humans with interactive partners are drawn near the centroid of those
    // partners (best effort over a fixed number of proposals); the rest are
    // uniform over the whole image.
    let mut humans: Vec<BBox> = Vec::with_capacity(n_humans);
    for h in 0..n_humans {
        let partners: Vec<(f64, f64)> = (0..n_objects)
            .filter(|&o| is_interactive_cell(h, o))
            .map(|o| objects[o].bbox.center())
            .collect();
        if partners.is_empty() {
            humans.push(sample_box(&mut rng, 0.10, 0.34));
            continue;
        }
        let anchor_x = partners.iter().map(|p| p.0).sum::<f64>() / partners.len() as f64;
        let anchor_y = partners.iter().map(|p| p.1).sum::<f64>() / partners.len() as f64;
        let w = rng.gen_range(0.10..=0.34);
        let hh = rng.gen_range(0.10..=0.34);
        let mut best: Option<(f64, BBox)> = None;
        for _ in 0..40 {
            let cx = anchor_x + rng.gen_range(-0.1..=0.1);
            let cy = anchor_y + rng.gen_range(-0.1..=0.1);
            let candidate = box_at(cx, cy, w, hh);
            let (ccx, ccy) = candidate.center();
            let worst = partners
                .iter()
                .map(|&(px, py)| ((ccx - px).powi(2) + (ccy - py).powi(2)).sqrt())
                .fold(0.0_f64, f64::max);
            if best.as_ref().map_or(true, |(d, _)| worst < *d) {
                best = Some((worst, candidate));
            }
            if worst <= PROXIMITY_RADIUS {
                break;
            }
        }
        humans.push(best.expect("at least one proposal").1);
    }

    let mut gt_pairs = Vec::with_capacity(n_interactive);
    for &cell in &interactive_cells {
        let o = cell / n_humans;
        let h = cell % n_humans;
        let (hx, hy) = humans[h].center();
        let (ox, oy) = objects[o].bbox.center();
        let (dx, dy) = (ox - hx, oy - hy);
        let dist = (dx * dx + dy * dy).sqrt();
        let verbs = verbs_for(objects[o].class_id, dx, dy, dist, config.verb_count)
            .into_iter()
            .map(|v| v as usize)
            .collect();
        gt_pairs.push(GtPair { human: h, object: o, verbs });
    }

    debug_assert_eq!(regime_of_counts(n_interactive, total), regime);
    Scene { seed: scene_seed, regime, humans, objects, gt_pairs }
}

/// Re-derives the candidate grid (object-major order) with features for a
/// scene. Pure in `(scene, config)`; in particular it holds after a
/// serialization round trip.
pub fn candidate_grid(scene: &Scene, config: &GeneratorConfig) -> Vec<Candidate> {
    let dim = config.feature_dim;
    let mut class_params: std::collections::BTreeMap<usize, (Vec<f64>, Vec<f64>)> =
        std::collections::BTreeMap::new();
    if config.feature_mode == FeatureMode::Oracle {
        let global_dir = (!config.scene_relative_clusters).then(|| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SALT_DIRECTION, 0));
            unit_vec(&mut rng, dim)
        });
        for obj in &scene.objects {
            class_params.entry(obj.class_id).or_insert_with(|| {
                let seed_root =
                    if config.scene_relative_clusters { scene.seed } else { config.seed };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    seed_root,
                    SALT_CLASS,
                    obj.class_id as u64,
                ));
                let mut base = draw_normal_vec(&mut rng, dim, config.cluster_spread);
                match &global_dir {
                    Some(dir) => {
                        // Bases orthogonal to the shared offset direction keep
                        // the whole dataset separable by one hyperplane.
                        let proj: f64 = base.iter().zip(dir).map(|(b, d)| b * d).sum();
                        for (b, d) in base.iter_mut().zip(dir) {
                            *b -= proj * d;
                        }
                        (base, dir.clone())
                    }
                    None => {
                        let dir = unit_vec(&mut rng, dim);
                        (base, dir)
                    }
                }
            });
        }
    }

    let mut out = Vec::with_capacity(scene.grid_size());
    for (o, obj) in scene.objects.iter().enumerate() {
        for (h, human) in scene.humans.iter().enumerate() {
            let gt = scene.gt_pair(h, o);
            let interactive = gt.is_some();
            let (hx, hy) = human.center();
            let (ox, oy) = obj.bbox.center();
            let (dx, dy) = (ox - hx, oy - hy);
            let dist = (dx * dx + dy * dy).sqrt();

            let mut descriptor = Vec::with_capacity(config.descriptor_dim());
            descriptor.extend_from_slice(&human.corners());
            descriptor.extend_from_slice(&obj.bbox.corners());
            for c in 0..config.object_classes {
                descriptor.push(if c == obj.class_id { 1.0 } else { 0.0 });
            }
            descriptor.extend_from_slice(&[dx, dy, dist]);

            let planted = if config.feature_mode == FeatureMode::Oracle {
                let (base, dir) = &class_params[&obj.class_id];
                let cell = (o * scene.humans.len() + h) as u64;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, SALT_PAIR, cell));
                // Unit RMS cluster radius: separation stays in units of
                // within-cluster std at every feature dimension.
                let noise = draw_normal_vec(&mut rng, dim, 1.0 / (dim as f64).sqrt());
                let feature: Vec<f64> = (0..dim)
                    .map(|k| {
                        let mean = base[k]
                            + if interactive { config.separation * dir[k] } else { 0.0 };
                        mean + noise[k]
                    })
                    .collect();
                descriptor.extend_from_slice(&feature);
                Some(feature)
            } else {
                None
            };

            out.push(Candidate {
                human: h,
                object: o,
                interactive,
                verbs: gt.map(|g| g.verbs.clone()).unwrap_or_default(),
                descriptor,
                planted,
            });
        }
    }
    out
}

pub fn generate_dataset(config: &GeneratorConfig, count: usize) -> (Vec<Scene>, Manifest) {
    let scenes: Vec<Scene> = (0..count as u64).map(|i| generate_scene(config, i)).collect();
    let mut regime_counts = [0usize; 3];
    for s in &scenes {
        regime_counts[s.regime.index()] += 1;
    }
    let manifest = Manifest {
        scene_count: count,
        regime_counts,
        regime_frequencies: if count == 0 {
            [0.0; 3]
        } else {
            [
                regime_counts[0] as f64 / count as f64,
                regime_counts[1] as f64 / count as f64,
                regime_counts[2] as f64 / count as f64,
            ]
        },
        config: config.clone(),
    };
    (scenes, manifest)
}

/// Writes one JSON scene record per line.
pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<(), SynthError> {
    let as_io = |source| SynthError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::create(path).map_err(as_io)?;
    let mut w = std::io::BufWriter::new(file);
    for scene in scenes {
        let line = serde_json::to_string(scene).expect("scene serialization cannot fail");
        writeln!(w, "{line}").map_err(as_io)?;
    }
    w.flush().map_err(as_io)
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>, SynthError> {
    let as_io = |source| SynthError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(as_io)?;
    let reader = std::io::BufReader::new(file);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(as_io)?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| SynthError::Parse { line: i + 1, reason: e.to_string() })?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), SynthError> {
    let as_io = |source| SynthError::Io { path: path.display().to_string(), source };
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialization cannot fail");
    std::fs::write(path, json + "\n").map_err(as_io)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, SynthError> {
    let as_io = |source| SynthError::Io { path: path.display().to_string(), source };
    let text = std::fs::read_to_string(path).map_err(as_io)?;
    serde_json::from_str(&text).map_err(|e| SynthError::Parse { line: 0, reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_bands_use_exact_integer_arithmetic() {
        assert_eq!(regime_of_counts(1, 3), Regime::Minority);
        assert_eq!(regime_of_counts(2, 5), Regime::Balanced); // exactly 0.4
        assert_eq!(regime_of_counts(3, 5), Regime::Balanced); // exactly 0.6
        assert_eq!(regime_of_counts(4, 5), Regime::Majority);
        assert_eq!(regime_of_counts(1, 2), Regime::Balanced);
        assert_eq!(regime_of_counts(2, 2), Regime::Majority);
        assert_eq!(regime_of_counts(0, 4), Regime::Minority);
    }

    #[test]
    fn tags_match_realized_ratios() {
        let config = GeneratorConfig::default();
        for i in 0..200 {
            let scene = generate_scene(&config, i);
            assert_eq!(
                regime_of_counts(scene.gt_pairs.len(), scene.grid_size()),
                scene.regime,
                "scene {i}"
            );
            assert!(!scene.gt_pairs.is_empty(), "every scene plants at least one interactive pair");
        }
    }

    #[test]
    fn generation_is_deterministic_in_config_and_index() {
        let config = GeneratorConfig::default();
        let a = generate_scene(&config, 42);
        let b = generate_scene(&config, 42);
        assert_eq!(a, b);
        assert_eq!(candidate_grid(&a, &config), candidate_grid(&b, &config));
        let c = generate_scene(&config, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn round_trip_preserves_scenes_and_features_exactly() {
        let config = GeneratorConfig::default();
        let (scenes, _) = generate_dataset(&config, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        write_scenes(&path, &scenes).unwrap();
        let loaded = read_scenes(&path).unwrap();
        assert_eq!(scenes, loaded);
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(candidate_grid(a, &config), candidate_grid(b, &config));
        }
    }

    #[test]
    fn proximity_bias_holds_for_most_interactive_pairs() {
        let config = GeneratorConfig::default();
        let mut close = 0usize;
        let mut total = 0usize;
        for i in 0..1000 {
            let scene = generate_scene(&config, i);
            for pair in &scene.gt_pairs {
                total += 1;
                let d = scene.humans[pair.human].center_distance(&scene.objects[pair.object].bbox);
                if d <= PROXIMITY_RADIUS {
                    close += 1;
                }
            }
        }
        let frac = close as f64 / total as f64;
        assert!(frac > 0.95, "only {frac:.3} of interactive pairs within {PROXIMITY_RADIUS}");
    }

    #[test]
    fn oracle_features_are_linearly_separable() {
        // Projected onto the offset direction the clusters are normals with
        // std 1/sqrt(C) and gap `separation`, so the best linear error rate
        // is Phi(-separation * sqrt(C) / 2): about 1e-17 at the defaults.
        // Any residual errors would point at a sampling bug.
        let config = GeneratorConfig { seed: 11, ..GeneratorConfig::default() };
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for i in 0..120 {
            let scene = generate_scene(&config, i);
            for cand in candidate_grid(&scene, &config) {
                xs.push(cand.planted.expect("oracle mode"));
                ys.push(if cand.interactive { 1.0 } else { -1.0 });
            }
        }
        // Pocket perceptron over the raw features plus a bias term: keep the
        // best weight vector seen, since on overlapping data the plain update
        // rule cycles and can end anywhere.
        let dim = xs[0].len();
        let count_errors = |w: &[f64]| {
            xs.iter()
                .zip(&ys)
                .filter(|(x, &y)| {
                    let score: f64 =
                        w[..dim].iter().zip(*x).map(|(wi, xi)| wi * xi).sum::<f64>() + w[dim];
                    y * score <= 0.0
                })
                .count()
        };
        let mut w = vec![0.0; dim + 1];
        let mut best = (count_errors(&w), w.clone());
        for _ in 0..200 {
            for (x, &y) in xs.iter().zip(&ys) {
                let score: f64 =
                    w[..dim].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + w[dim];
                if y * score <= 0.0 {
                    for k in 0..dim {
                        w[k] += y * x[k];
                    }
                    w[dim] += y;
                }
            }
            let errs = count_errors(&w);
            if errs < best.0 {
                best = (errs, w.clone());
            }
            if errs == 0 {
                break;
            }
        }
        let rate = best.0 as f64 / xs.len() as f64;
        assert!(rate < 0.001, "linear error rate {rate:.5} on {} samples", xs.len());
    }

    #[test]
    fn mixture_weights_are_respected_at_scale() {
        let config = GeneratorConfig::default();
        let (_, manifest) = generate_dataset(&config, 4000);
        for (freq, target) in manifest.regime_frequencies.iter().zip(config.regime_mix) {
            assert!(
                (freq - target).abs() < 0.03,
                "frequency {freq:.3} far from mixture weight {target:.3}"
            );
        }
    }

    #[test]
    fn invalid_configs_name_the_offending_field() {
        let mut config = GeneratorConfig { regime_mix: [0.5, 0.5, 0.5], ..Default::default() };
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("regime_mix"), "{err}");

        config = GeneratorConfig { separation: -1.0, ..Default::default() };
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("separation"), "{err}");

        config = GeneratorConfig { humans: (5, 2), ..Default::default() };
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("humans"), "{err}");
    }

    #[test]
    fn descriptor_layout_matches_declared_dimension() {
        for mode in [FeatureMode::Oracle, FeatureMode::Geometric] {
            let config = GeneratorConfig { feature_mode: mode, ..Default::default() };
            let scene = generate_scene(&config, 5);
            for cand in candidate_grid(&scene, &config) {
                assert_eq!(cand.descriptor.len(), config.descriptor_dim());
                assert_eq!(cand.planted.is_some(), mode == FeatureMode::Oracle);
            }
        }
    }

    #[test]
    fn verbs_are_within_range_and_nonempty_for_interactive() {
        let config = GeneratorConfig::default();
        for i in 0..100 {
            let scene = generate_scene(&config, i);
            for pair in &scene.gt_pairs {
                assert!(!pair.verbs.is_empty());
                assert!(pair.verbs.len() <= 2);
                for &v in &pair.verbs {
                    assert!(v < config.verb_count);
                }
            }
        }
    }
}
