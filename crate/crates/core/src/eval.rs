//! Detection metrics and report emission.
//!
//! Average precision follows the standard greedy protocol: predictions are
//! consumed in descending score order and each ground-truth pair can be
//! matched at most once. A prediction is a true positive when an unmatched
//! ground-truth pair in its scene shares the object class (unless class
//! awareness is disabled) and both the human and the object box clear the
//! IoU threshold. The area under the precision-recall curve uses all-points
//! interpolation: at every achieved recall level the interpolated precision
//! is the maximum precision at any equal-or-higher recall cutoff.
//!
//! The interactiveness metric ranks records by their dedicated
//! interactiveness score when present; records without one fall back to the
//! mean of their per-verb scores, so externally produced prediction files
//! remain scorable. Per-verb AP ranks every record by that verb's final
//! score, and the mean covers only verbs with at least one ground-truth
//! instance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::iou_corners;
use crate::synth::{Regime, Scene};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid detection record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("record {index} references scene seed {seed} absent from the evaluated set")]
    UnknownScene { index: usize, seed: u64 },
    #[error("invalid evaluation options: {reason}")]
    InvalidOptions { reason: String },
    #[error("prediction file line {line}: {source}")]
    PredictionParse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One scored pair detection, bound to a scene by the scene's seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene: u64,
    pub human: [f64; 4],
    pub object: [f64; 4],
    pub class_id: usize,
    /// Interactiveness score; absent in prediction files from systems that
    /// do not model it.
    #[serde(default)]
    pub s_b: Option<f64>,
    /// Raw per-verb scores.
    pub s_v: Vec<f64>,
    /// Final per-verb scores (verb score times interactiveness).
    pub s: Vec<f64>,
}

impl DetectionRecord {
    /// Ranking score for the interactiveness metric: S_b when available,
    /// otherwise the mean of the final verb scores.
    pub fn interactiveness_score(&self) -> f64 {
        match self.s_b {
            Some(v) => v,
            None => {
                if self.s.is_empty() {
                    0.0
                } else {
                    self.s.iter().sum::<f64>() / self.s.len() as f64
                }
            }
        }
    }

    /// Detection confidence used for top-k filtering: the best final verb
    /// score.
    pub fn confidence(&self) -> f64 {
        self.s.iter().cloned().fold(0.0, f64::max)
    }

    fn validate(&self, index: usize) -> Result<(), EvalError> {
        let bad = |reason: String| Err(EvalError::InvalidRecord { index, reason });
        if self.s_v.len() != self.s.len() {
            return bad(format!(
                "s_v has {} entries but s has {}",
                self.s_v.len(),
                self.s.len()
            ));
        }
        let mut scores: Vec<f64> = Vec::new();
        if let Some(sb) = self.s_b {
            scores.push(sb);
        }
        scores.extend(&self.s_v);
        scores.extend(&self.s);
        for v in scores {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("score {v} outside [0, 1]"));
            }
        }
        for c in self.human.iter().chain(&self.object) {
            if !c.is_finite() {
                return bad(format!("non-finite box coordinate {c}"));
            }
        }
        Ok(())
    }
}

/// Matching controls shared by both AP metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_thr: f64,
    /// Require the predicted object class to equal the ground truth's.
    pub class_aware: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { iou_thr: 0.5, class_aware: true }
    }
}

impl EvalOptions {
    fn validate(&self) -> Result<(), EvalError> {
        if !self.iou_thr.is_finite() || !(0.0..1.0).contains(&self.iou_thr) {
            return Err(EvalError::InvalidOptions {
                reason: format!("iou_thr must lie in [0, 1), got {}", self.iou_thr),
            });
        }
        Ok(())
    }
}

/// AP plus the data needed to draw and audit its curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub gt_count: usize,
    /// Precision-recall polyline: a (0, 1) anchor, one point per distinct
    /// score threshold (cumulative through all records at that threshold),
    /// and a final anchor dropping to precision 0.
    pub pr: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbAp {
    pub verb: usize,
    pub ap: f64,
    pub gt_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbSummary {
    /// Every verb with at least one ground-truth instance, ascending id.
    pub per_verb: Vec<VerbAp>,
    /// Mean over `per_verb`; 0 when no verb has ground truth.
    pub mean_ap: f64,
}

#[derive(Debug, Clone, Copy)]
struct GtPairBoxes {
    human: [f64; 4],
    object: [f64; 4],
    class_id: usize,
}

/// Ground truth grouped per scene seed, with per-pair verb sets.
struct GtIndex {
    by_scene: BTreeMap<u64, Vec<(GtPairBoxes, Vec<usize>)>>,
}

impl GtIndex {
    fn build(scenes: &[Scene]) -> Self {
        let mut by_scene = BTreeMap::new();
        for scene in scenes {
            let pairs: Vec<(GtPairBoxes, Vec<usize>)> = scene
                .gt_pairs
                .iter()
                .map(|g| {
                    let obj = &scene.objects[g.object];
                    (
                        GtPairBoxes {
                            human: scene.humans[g.human].corners(),
                            object: obj.bbox.corners(),
                            class_id: obj.class_id,
                        },
                        g.verbs.clone(),
                    )
                })
                .collect();
            by_scene.insert(scene.seed, pairs);
        }
        GtIndex { by_scene }
    }
}

fn validate_all(preds: &[DetectionRecord], gts: &GtIndex) -> Result<(), EvalError> {
    for (i, p) in preds.iter().enumerate() {
        p.validate(i)?;
        if !gts.by_scene.contains_key(&p.scene) {
            return Err(EvalError::UnknownScene { index: i, seed: p.scene });
        }
    }
    Ok(())
}

/// Descending stable order by the given score.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    idx
}

/// Walks predictions in rank order and greedily matches each against the
/// relevant unmatched ground truth of its scene. Returns per-rank hit flags
/// and the total relevant ground-truth count.
fn greedy_hits(
    preds: &[DetectionRecord],
    order: &[usize],
    gts: &GtIndex,
    opts: &EvalOptions,
    relevant: impl Fn(&[usize]) -> bool,
) -> (Vec<bool>, usize) {
    let mut unmatched: BTreeMap<u64, Vec<(GtPairBoxes, bool)>> = BTreeMap::new();
    let mut gt_count = 0;
    for (&seed, pairs) in &gts.by_scene {
        let remaining: Vec<(GtPairBoxes, bool)> = pairs
            .iter()
            .filter(|(_, verbs)| relevant(verbs))
            .map(|(b, _)| (*b, false))
            .collect();
        gt_count += remaining.len();
        unmatched.insert(seed, remaining);
    }
    let mut hits = Vec::with_capacity(order.len());
    for &pi in order {
        let p = &preds[pi];
        let pool = unmatched.get_mut(&p.scene).expect("validated scene");
        let mut hit = false;
        for (gt, taken) in pool.iter_mut() {
            if *taken {
                continue;
            }
            if opts.class_aware && gt.class_id != p.class_id {
                continue;
            }
            if iou_corners(p.human, gt.human) > opts.iou_thr
                && iou_corners(p.object, gt.object) > opts.iou_thr
            {
                *taken = true;
                hit = true;
                break;
            }
        }
        hits.push(hit);
    }
    (hits, gt_count)
}

/// All-points interpolated average precision over per-rank hit flags.
fn average_precision(hits: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(hits.len());
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / gt_count as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut pmax = 0.0f64;
    for i in (0..curve.len()).rev() {
        pmax = pmax.max(curve[i].1);
        let prev_recall = if i == 0 { 0.0 } else { curve[i - 1].0 };
        ap += (curve[i].0 - prev_recall) * pmax;
    }
    ap
}

/// Precision-recall polyline at distinct-threshold granularity, bracketed
/// by a (0, 1) anchor and a precision-0 terminal anchor.
fn pr_polyline(scores: &[f64], order: &[usize], hits: &[bool], gt_count: usize) -> Vec<[f64; 2]> {
    let mut points = vec![[0.0, 1.0]];
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if hits[i] {
                tp += 1;
            }
            seen += 1;
            i += 1;
        }
        let recall = if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 };
        points.push([recall, tp as f64 / seen as f64]);
    }
    let last_recall = points.last().expect("anchored")[0];
    points.push([last_recall, 0.0]);
    points
}

/// Interactiveness AP: ranks by S_b (or its fallback) and matches against
/// every ground-truth interactive pair. `gt_count` 0 yields AP 0; callers
/// surface that as a warning.
pub fn interactiveness_ap(
    preds: &[DetectionRecord],
    scenes: &[Scene],
    opts: &EvalOptions,
) -> Result<ApSummary, EvalError> {
    opts.validate()?;
    let gts = GtIndex::build(scenes);
    validate_all(preds, &gts)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.interactiveness_score()).collect();
    let order = ranked_indices(&scores);
    let (hits, gt_count) = greedy_hits(preds, &order, &gts, opts, |_| true);
    Ok(ApSummary {
        ap: average_precision(&hits, gt_count),
        gt_count,
        pr: pr_polyline(&scores, &order, &hits, gt_count),
    })
}

/// Per-verb AP ranked by each verb's final score, averaged over verbs that
/// occur in the ground truth.
pub fn verb_ap(
    preds: &[DetectionRecord],
    scenes: &[Scene],
    verb_count: usize,
    opts: &EvalOptions,
) -> Result<VerbSummary, EvalError> {
    opts.validate()?;
    let gts = GtIndex::build(scenes);
    validate_all(preds, &gts)?;
    let mut per_verb = Vec::new();
    for verb in 0..verb_count {
        let scores: Vec<f64> =
            preds.iter().map(|p| p.s.get(verb).copied().unwrap_or(0.0)).collect();
        let order = ranked_indices(&scores);
        let (hits, gt_count) =
            greedy_hits(preds, &order, &gts, opts, |verbs| verbs.contains(&verb));
        if gt_count > 0 {
            per_verb.push(VerbAp { verb, ap: average_precision(&hits, gt_count), gt_count });
        }
    }
    let mean_ap = if per_verb.is_empty() {
        0.0
    } else {
        per_verb.iter().map(|v| v.ap).sum::<f64>() / per_verb.len() as f64
    };
    Ok(VerbSummary { per_verb, mean_ap })
}

/// Keeps the `k` highest-confidence records per scene, preserving input
/// order among kept records and breaking confidence ties by input order.
pub fn topk_filter(preds: &[DetectionRecord], k: usize) -> Vec<DetectionRecord> {
    let mut by_scene: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        by_scene.entry(p.scene).or_default().push(i);
    }
    let mut keep = vec![false; preds.len()];
    for indices in by_scene.values() {
        let mut ranked = indices.clone();
        ranked.sort_by(|&a, &b| {
            preds[b].confidence().partial_cmp(&preds[a].confidence()).expect("finite scores")
        });
        for &i in ranked.iter().take(k) {
            keep[i] = true;
        }
    }
    preds
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| p.clone())
        .collect()
}

/// One object group's predicted interactive mass against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountEntry {
    pub regime: Regime,
    /// Sum of interactive-cluster assignment mass over the group.
    pub predicted: f64,
    /// Ground-truth interactive pair count within the group.
    pub n_t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCountError {
    pub regime: Regime,
    pub mean_abs_error: f64,
    pub groups: usize,
}

/// Mean absolute count error per regime; regimes without entries are
/// omitted. Order is fixed: minority, balanced, majority.
pub fn count_error(entries: &[CountEntry]) -> Vec<RegimeCountError> {
    let mut out = Vec::new();
    for regime in [Regime::Minority, Regime::Balanced, Regime::Majority] {
        let errs: Vec<f64> = entries
            .iter()
            .filter(|e| e.regime == regime)
            .map(|e| (e.predicted - e.n_t as f64).abs())
            .collect();
        if !errs.is_empty() {
            out.push(RegimeCountError {
                regime,
                mean_abs_error: errs.iter().sum::<f64>() / errs.len() as f64,
                groups: errs.len(),
            });
        }
    }
    out
}

/// Run descriptors carried into the report for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub label: String,
    pub scenes: usize,
    pub predictions: usize,
    pub iou_thr: f64,
    pub class_aware: bool,
}

/// AP pair for one top-k protocol row; `k` absent means all predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkRow {
    pub k: Option<usize>,
    pub interactiveness_ap: f64,
    pub verb_mean_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub interactiveness: ApSummary,
    pub verbs: VerbSummary,
    pub topk: Vec<TopkRow>,
    pub count_errors: Vec<RegimeCountError>,
}

/// Computes every metric the report carries. `ks` lists the top-k
/// protocols to evaluate (None = all predictions).
pub fn build_report(
    label: &str,
    preds: &[DetectionRecord],
    scenes: &[Scene],
    verb_count: usize,
    opts: &EvalOptions,
    count_entries: &[CountEntry],
    ks: &[Option<usize>],
) -> Result<EvalReport, EvalError> {
    let interactiveness = interactiveness_ap(preds, scenes, opts)?;
    let verbs = verb_ap(preds, scenes, verb_count, opts)?;
    let mut topk = Vec::new();
    for &k in ks {
        let filtered;
        let subset = match k {
            Some(k) => {
                filtered = topk_filter(preds, k);
                &filtered[..]
            }
            None => preds,
        };
        topk.push(TopkRow {
            k,
            interactiveness_ap: interactiveness_ap(subset, scenes, opts)?.ap,
            verb_mean_ap: verb_ap(subset, scenes, verb_count, opts)?.mean_ap,
        });
    }
    Ok(EvalReport {
        meta: ReportMeta {
            label: label.to_string(),
            scenes: scenes.len(),
            predictions: preds.len(),
            iou_thr: opts.iou_thr,
            class_aware: opts.class_aware,
        },
        interactiveness,
        verbs,
        topk,
        count_errors: count_error(count_entries),
    })
}

fn csv_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("section,key,value\n");
    let mut row = |section: &str, key: &str, value: String| {
        out.push_str(section);
        out.push(',');
        out.push_str(key);
        out.push(',');
        out.push_str(&value);
        out.push('\n');
    };
    row("meta", "label", report.meta.label.clone());
    row("meta", "scenes", report.meta.scenes.to_string());
    row("meta", "predictions", report.meta.predictions.to_string());
    row("meta", "iou_thr", report.meta.iou_thr.to_string());
    row("meta", "class_aware", report.meta.class_aware.to_string());
    row("interactiveness", "ap", report.interactiveness.ap.to_string());
    row("interactiveness", "gt_count", report.interactiveness.gt_count.to_string());
    row("verbs", "mean_ap", report.verbs.mean_ap.to_string());
    for v in &report.verbs.per_verb {
        row("verb", &format!("ap_{}", v.verb), v.ap.to_string());
    }
    for t in &report.topk {
        let key = match t.k {
            Some(k) => format!("top{k}"),
            None => "all".to_string(),
        };
        row("topk", &format!("{key}_interactiveness_ap"), t.interactiveness_ap.to_string());
        row("topk", &format!("{key}_verb_mean_ap"), t.verb_mean_ap.to_string());
    }
    for c in &report.count_errors {
        let regime = match c.regime {
            Regime::Minority => "minority",
            Regime::Balanced => "balanced",
            Regime::Majority => "majority",
        };
        row("count_error", regime, c.mean_abs_error.to_string());
        row("count_groups", regime, c.groups.to_string());
    }
    out
}

fn svg_text(report: &EvalReport) -> String {
    // Fixed-format floats keep re-emission byte-identical.
    let (w, h, margin) = (640.0, 480.0, 48.0);
    let sx = |r: f64| margin + r * (w - 2.0 * margin);
    let sy = |p: f64| h - margin - p * (h - 2.0 * margin);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(svg, "  <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        sx(0.0),
        sy(0.0),
        sx(1.0),
        sy(0.0)
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        sx(0.0),
        sy(0.0),
        sx(0.0),
        sy(1.0)
    );
    let pts: Vec<String> = report
        .interactiveness
        .pr
        .iter()
        .map(|p| format!("{:.6},{:.6}", sx(p[0]), sy(p[1])))
        .collect();
    let _ = writeln!(
        svg,
        "  <polyline fill=\"none\" stroke=\"crimson\" stroke-width=\"1.5\" points=\"{}\"/>",
        pts.join(" ")
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"14\">{} AP {:.4}</text>",
        sx(0.0),
        sy(1.0) - 10.0,
        report.meta.label,
        report.interactiveness.ap
    );
    let _ = writeln!(svg, "  <text x=\"{:.2}\" y=\"{h}\" font-family=\"monospace\" font-size=\"12\">recall</text>", sx(0.45));
    svg.push_str("</svg>\n");
    svg
}

/// Writes `report.json`, `metrics.csv`, and `pr_interactiveness.svg` into
/// `dir` (created if missing). Byte-identical for identical reports.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(&json_path, json)?;
    written.push(json_path);
    let csv_path = dir.join("metrics.csv");
    std::fs::write(&csv_path, csv_text(report))?;
    written.push(csv_path);
    let svg_path = dir.join("pr_interactiveness.svg");
    std::fs::write(&svg_path, svg_text(report))?;
    written.push(svg_path);
    Ok(written)
}

/// One record per line, in `DetectionRecord` field order.
pub fn write_predictions(preds: &[DetectionRecord], path: &Path) -> Result<(), EvalError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<DetectionRecord>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|source| EvalError::PredictionParse { line: i + 1, source })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::synth::{GtPair, SceneObject};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).expect("valid test box")
    }

    /// Scene with one human per listed human box and objects of class 0
    /// unless stated; `gt` lists (human, object, verbs).
    fn scene(seed: u64, humans: Vec<BBox>, objects: Vec<(BBox, usize)>, gt: Vec<(usize, usize, Vec<usize>)>) -> Scene {
        Scene {
            seed,
            regime: Regime::Balanced,
            humans,
            objects: objects.into_iter().map(|(bbox, class_id)| SceneObject { bbox, class_id }).collect(),
            gt_pairs: gt
                .into_iter()
                .map(|(human, object, verbs)| GtPair { human, object, verbs })
                .collect(),
        }
    }

    fn rec(scene: u64, human: BBox, object: BBox, class_id: usize, s_b: Option<f64>, s: Vec<f64>) -> DetectionRecord {
        DetectionRecord {
            scene,
            human: human.corners(),
            object: object.corners(),
            class_id,
            s_b,
            s_v: s.clone(),
            s,
        }
    }

    fn one_pair_scene(seed: u64) -> (Scene, BBox, BBox) {
        let h = bx(0.1, 0.1, 0.3, 0.5);
        let o = bx(0.5, 0.4, 0.8, 0.7);
        (
            scene(seed, vec![h.clone()], vec![(o.clone(), 0)], vec![(0, 0, vec![0])]),
            h,
            o,
        )
    }

    #[test]
    fn perfect_ranking_gives_ap_one() {
        let (sc, h, o) = one_pair_scene(1);
        let far = bx(0.6, 0.05, 0.9, 0.2);
        let preds = vec![
            rec(1, h.clone(), o.clone(), 0, Some(0.9), vec![0.8]),
            rec(1, h, far, 0, Some(0.3), vec![0.2]),
        ];
        let out = interactiveness_ap(&preds, &[sc], &EvalOptions::default()).unwrap();
        assert_eq!(out.ap, 1.0);
        assert_eq!(out.gt_count, 1);
    }

    #[test]
    fn disjoint_predictions_give_ap_zero() {
        let (sc, h, _) = one_pair_scene(1);
        let far = bx(0.6, 0.05, 0.9, 0.2);
        let preds = vec![rec(1, h, far, 0, Some(0.9), vec![0.8])];
        let out = interactiveness_ap(&preds, &[sc], &EvalOptions::default()).unwrap();
        assert_eq!(out.ap, 0.0);
    }

    #[test]
    fn missing_ground_truth_yields_zero_ap_and_count() {
        let sc = scene(4, vec![bx(0.1, 0.1, 0.3, 0.5)], vec![(bx(0.5, 0.4, 0.8, 0.7), 0)], vec![]);
        let h = bx(0.1, 0.1, 0.3, 0.5);
        let o = bx(0.5, 0.4, 0.8, 0.7);
        let preds = vec![rec(4, h, o, 0, Some(0.9), vec![0.8])];
        let out = interactiveness_ap(&preds, &[sc], &EvalOptions::default()).unwrap();
        assert_eq!(out.ap, 0.0);
        assert_eq!(out.gt_count, 0);
    }

    #[test]
    fn all_gts_at_top_ranks_are_perfect_despite_trailing_misses() {
        let h1 = bx(0.05, 0.05, 0.25, 0.45);
        let h2 = bx(0.55, 0.05, 0.75, 0.45);
        let o1 = bx(0.05, 0.55, 0.35, 0.85);
        let o2 = bx(0.55, 0.55, 0.85, 0.85);
        let sc = scene(
            9,
            vec![h1.clone(), h2.clone()],
            vec![(o1.clone(), 0), (o2.clone(), 0)],
            vec![(0, 0, vec![0]), (1, 1, vec![0])],
        );
        let preds = vec![
            rec(9, h1.clone(), o1.clone(), 0, Some(0.9), vec![0.9]),
            rec(9, h2.clone(), o2.clone(), 0, Some(0.8), vec![0.8]),
            rec(9, h1, o2, 0, Some(0.4), vec![0.4]),
            rec(9, h2, o1, 0, Some(0.2), vec![0.2]),
        ];
        let out = interactiveness_ap(&preds, &[sc], &EvalOptions::default()).unwrap();
        assert_eq!(out.ap, 1.0);
    }

    #[test]
    fn class_mismatch_only_counts_when_class_aware() {
        let (sc, h, o) = one_pair_scene(2);
        let preds = vec![rec(2, h, o, 3, Some(0.9), vec![0.9])];
        let aware = interactiveness_ap(&preds, &[sc.clone()], &EvalOptions::default()).unwrap();
        assert_eq!(aware.ap, 0.0);
        let blind = interactiveness_ap(
            &preds,
            &[sc],
            &EvalOptions { class_aware: false, ..EvalOptions::default() },
        )
        .unwrap();
        assert_eq!(blind.ap, 1.0);
    }

    #[test]
    fn records_without_s_b_rank_by_mean_final_score() {
        let (sc, h, o) = one_pair_scene(3);
        let far = bx(0.6, 0.05, 0.9, 0.2);
        let hit = rec(3, h.clone(), o.clone(), 0, None, vec![0.3, 0.5]);
        let miss = rec(3, h, far, 0, None, vec![0.9, 0.3]);
        assert_eq!(hit.interactiveness_score(), 0.4);
        assert_eq!(miss.interactiveness_score(), 0.6);
        // The miss outranks the hit, so precision at the hit's rank is 1/2.
        let out = interactiveness_ap(&[hit, miss], &[sc], &EvalOptions::default()).unwrap();
        assert_eq!(out.ap, 0.5);
    }

    #[test]
    fn ap_is_invariant_under_monotone_score_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scenes: Vec<Scene> = (0..3).map(random_scene_with(&mut rng)).collect();
        let preds = random_preds(&mut rng, &scenes, 8);
        let base = interactiveness_ap(&preds, &scenes, &EvalOptions::default()).unwrap();
        let squeezed: Vec<DetectionRecord> = preds
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.s_b = p.s_b.map(|v| v * v / 2.0);
                q
            })
            .collect();
        let mapped = interactiveness_ap(&squeezed, &scenes, &EvalOptions::default()).unwrap();
        assert_eq!(base.ap, mapped.ap);
    }

    fn random_scene_with(rng: &mut ChaCha8Rng) -> impl FnMut(u64) -> Scene + '_ {
        move |seed| {
            let nh = rng.gen_range(1..=2);
            let no = rng.gen_range(1..=2);
            let humans: Vec<BBox> = (0..nh).map(|_| random_box(rng)).collect();
            let objects: Vec<(BBox, usize)> =
                (0..no).map(|_| (random_box(rng), rng.gen_range(0..2))).collect();
            let mut gt = Vec::new();
            for hi in 0..nh {
                for oi in 0..no {
                    if rng.gen_bool(0.5) && gt.len() < 4 {
                        gt.push((hi, oi, vec![rng.gen_range(0..2)]));
                    }
                }
            }
            scene(seed, humans, objects, gt)
        }
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let x1: f64 = rng.gen_range(0.0..0.6);
        let y1: f64 = rng.gen_range(0.0..0.6);
        let w: f64 = rng.gen_range(0.1..0.35);
        let h: f64 = rng.gen_range(0.1..0.35);
        BBox::clamped(x1, y1, x1 + w, y1 + h)
    }

    fn jitter(rng: &mut ChaCha8Rng, b: [f64; 4]) -> BBox {
        let d = 0.02;
        BBox::clamped(
            b[0] + rng.gen_range(-d..d),
            b[1] + rng.gen_range(-d..d),
            b[2] + rng.gen_range(-d..d),
            b[3] + rng.gen_range(-d..d),
        )
    }

    fn random_preds(rng: &mut ChaCha8Rng, scenes: &[Scene], n: usize) -> Vec<DetectionRecord> {
        (0..n)
            .map(|_| {
                let sc = &scenes[rng.gen_range(0..scenes.len())];
                let (human, object, class_id) = if rng.gen_bool(0.5) && !sc.gt_pairs.is_empty() {
                    let g = &sc.gt_pairs[rng.gen_range(0..sc.gt_pairs.len())];
                    let obj = &sc.objects[g.object];
                    (
                        jitter(rng, sc.humans[g.human].corners()),
                        jitter(rng, obj.bbox.corners()),
                        obj.class_id,
                    )
                } else {
                    (random_box(rng), random_box(rng), rng.gen_range(0..2))
                };
                let score = if rng.gen_bool(0.3) { 0.5 } else { rng.gen_range(0.0..1.0) };
                rec(sc.seed, human, object, class_id, Some(score), vec![rng.gen_range(0.0..1.0)])
            })
            .collect()
    }

    /// Independent AP oracle: greedy-match in rank order, then integrate by
    /// scanning, for each recall level m/T, every rank cutoff for the best
    /// precision among cutoffs reaching that recall.
    fn oracle_ap(preds: &[DetectionRecord], scenes: &[Scene], opts: &EvalOptions) -> f64 {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| {
            preds[b]
                .interactiveness_score()
                .partial_cmp(&preds[a].interactiveness_score())
                .unwrap()
        });
        let mut taken: Vec<Vec<bool>> =
            scenes.iter().map(|s| vec![false; s.gt_pairs.len()]).collect();
        let mut hits = Vec::new();
        for &pi in &order {
            let p = &preds[pi];
            let si = scenes.iter().position(|s| s.seed == p.scene).unwrap();
            let sc = &scenes[si];
            let mut hit = false;
            for (gi, g) in sc.gt_pairs.iter().enumerate() {
                if taken[si][gi] {
                    continue;
                }
                let obj = &sc.objects[g.object];
                if opts.class_aware && obj.class_id != p.class_id {
                    continue;
                }
                if iou_corners(p.human, sc.humans[g.human].corners()) > opts.iou_thr
                    && iou_corners(p.object, obj.bbox.corners()) > opts.iou_thr
                {
                    taken[si][gi] = true;
                    hit = true;
                    break;
                }
            }
            hits.push(hit);
        }
        let total: usize = scenes.iter().map(|s| s.gt_pairs.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let tp_at = |k: usize| hits[..k].iter().filter(|&&h| h).count();
        let mut ap = 0.0;
        for m in 1..=total {
            let mut best = 0.0f64;
            for k in 1..=hits.len() {
                if tp_at(k) >= m {
                    best = best.max(tp_at(k) as f64 / k as f64);
                }
            }
            ap += best / total as f64;
        }
        ap
    }

    #[test]
    fn ap_matches_rank_cutoff_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..200 {
            let scenes: Vec<Scene> =
                (0..rng.gen_range(1..=2)).map(random_scene_with(&mut rng)).collect();
            let n = rng.gen_range(0..=8);
            let preds = random_preds(&mut rng, &scenes, n);
            let got = interactiveness_ap(&preds, &scenes, &EvalOptions::default())
                .unwrap()
                .ap;
            let want = oracle_ap(&preds, &scenes, &EvalOptions::default());
            assert!(
                (got - want).abs() <= 1e-12,
                "trial {trial}: got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn verb_mean_covers_only_verbs_with_ground_truth() {
        let h = bx(0.1, 0.1, 0.3, 0.5);
        let o = bx(0.5, 0.4, 0.8, 0.7);
        let sc = scene(
            7,
            vec![h.clone()],
            vec![(o.clone(), 0)],
            vec![(0, 0, vec![0, 2])],
        );
        let preds = vec![rec(7, h, o, 0, Some(0.9), vec![0.9, 0.8, 0.1])];
        let out = verb_ap(&preds, &[sc], 3, &EvalOptions::default()).unwrap();
        let ids: Vec<usize> = out.per_verb.iter().map(|v| v.verb).collect();
        assert_eq!(ids, vec![0, 2]);
        assert_eq!(out.mean_ap, 1.0);
    }

    #[test]
    fn verb_ranking_uses_that_verbs_score() {
        let (sc, h, o) = one_pair_scene(8);
        let far = bx(0.6, 0.05, 0.9, 0.2);
        // The miss wins on verb 1 but the hit wins on verb 0.
        let preds = vec![
            rec(8, h.clone(), o, 0, Some(0.5), vec![0.9, 0.1]),
            rec(8, h, far, 0, Some(0.5), vec![0.2, 0.8]),
        ];
        let out = verb_ap(&preds, &[sc], 2, &EvalOptions::default()).unwrap();
        assert_eq!(out.per_verb.len(), 1);
        assert_eq!(out.per_verb[0].verb, 0);
        assert_eq!(out.per_verb[0].ap, 1.0);
    }

    #[test]
    fn topk_keeps_highest_confidence_per_scene() {
        let (sc1, h, o) = one_pair_scene(1);
        let (_, h2, o2) = one_pair_scene(2);
        let preds = vec![
            rec(1, h.clone(), o.clone(), 0, Some(0.2), vec![0.9, 0.1]),
            rec(1, h.clone(), o.clone(), 0, Some(0.9), vec![0.3, 0.4]),
            rec(2, h2.clone(), o2.clone(), 0, Some(0.5), vec![0.2]),
            rec(1, h, o, 0, Some(0.5), vec![0.5, 0.6]),
        ];
        let _ = sc1;
        let kept = topk_filter(&preds, 2);
        // Scene 1 keeps confidences 0.9 and 0.6; scene 2 keeps its only record.
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].confidence(), 0.9);
        assert_eq!(kept[1].confidence(), 0.2);
        assert_eq!(kept[2].confidence(), 0.6);
    }

    #[test]
    fn topk_with_large_k_is_identity() {
        let (_, h, o) = one_pair_scene(1);
        let preds = vec![
            rec(1, h.clone(), o.clone(), 0, Some(0.2), vec![0.9]),
            rec(1, h, o, 0, Some(0.9), vec![0.3]),
        ];
        assert_eq!(topk_filter(&preds, 10), preds);
    }

    #[test]
    fn topk_ties_prefer_earlier_records() {
        let (_, h, o) = one_pair_scene(1);
        let a = rec(1, h.clone(), o.clone(), 0, Some(0.1), vec![0.7]);
        let b = rec(1, h, o, 1, Some(0.9), vec![0.7]);
        let kept = topk_filter(&[a.clone(), b], 1);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn smaller_k_keeps_a_subset_of_larger_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scenes: Vec<Scene> = (0..3).map(random_scene_with(&mut rng)).collect();
        let preds = random_preds(&mut rng, &scenes, 20);
        for k in 1..6 {
            let small = topk_filter(&preds, k);
            let large = topk_filter(&preds, k + 1);
            for p in &small {
                assert!(large.contains(p), "k={k} kept a record k+1 dropped");
            }
        }
    }

    #[test]
    fn count_error_matches_hand_examples() {
        let entries = vec![
            // One-hot mass on the true pair: exact.
            CountEntry { regime: Regime::Minority, predicted: 1.0, n_t: 1 },
            // Uniform 0.5 over five pairs with one true: |2.5 - 1| = 1.5.
            CountEntry { regime: Regime::Balanced, predicted: 2.5, n_t: 1 },
            CountEntry { regime: Regime::Balanced, predicted: 3.0, n_t: 2 },
        ];
        let out = count_error(&entries);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].regime, Regime::Minority);
        assert_eq!(out[0].mean_abs_error, 0.0);
        assert_eq!(out[0].groups, 1);
        assert_eq!(out[1].regime, Regime::Balanced);
        assert_eq!(out[1].mean_abs_error, 1.25);
        assert_eq!(out[1].groups, 2);
    }

    #[test]
    fn count_error_ignores_entry_order() {
        let a = vec![
            CountEntry { regime: Regime::Majority, predicted: 2.0, n_t: 3 },
            CountEntry { regime: Regime::Minority, predicted: 0.5, n_t: 1 },
        ];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(count_error(&a), count_error(&b));
    }

    #[test]
    fn pr_curve_has_one_point_per_distinct_threshold_plus_anchors() {
        let (sc, h, o) = one_pair_scene(1);
        let far = bx(0.6, 0.05, 0.9, 0.2);
        let preds = vec![
            rec(1, h.clone(), o, 0, Some(0.9), vec![0.9]),
            rec(1, h.clone(), far.clone(), 0, Some(0.4), vec![0.4]),
            rec(1, h, far, 0, Some(0.4), vec![0.4]),
        ];
        let out = interactiveness_ap(&preds, &[sc], &EvalOptions::default()).unwrap();
        // Two distinct thresholds plus the leading and trailing anchors.
        assert_eq!(out.pr.len(), 4);
        assert_eq!(out.pr[0], [0.0, 1.0]);
        assert_eq!(out.pr[1], [1.0, 1.0]);
        assert_eq!(out.pr[2], [1.0, 1.0 / 3.0]);
        assert_eq!(out.pr[3], [1.0, 0.0]);
    }

    #[test]
    fn empty_prediction_set_yields_anchored_empty_curve() {
        let (sc, _, _) = one_pair_scene(1);
        let out = interactiveness_ap(&[], &[sc], &EvalOptions::default()).unwrap();
        assert_eq!(out.ap, 0.0);
        assert_eq!(out.gt_count, 1);
        assert_eq!(out.pr, vec![[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn unknown_scene_is_rejected() {
        let (sc, h, o) = one_pair_scene(1);
        let preds = vec![rec(999, h, o, 0, Some(0.9), vec![0.9])];
        let err = interactiveness_ap(&preds, &[sc], &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, EvalError::UnknownScene { index: 0, seed: 999 }));
    }

    #[test]
    fn out_of_range_scores_are_rejected() {
        let (sc, h, o) = one_pair_scene(1);
        let mut bad = rec(1, h, o, 0, Some(0.9), vec![0.9]);
        bad.s[0] = 1.5;
        bad.s_v[0] = 1.5;
        let err = interactiveness_ap(&[bad], &[sc], &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, EvalError::InvalidRecord { index: 0, .. }));
    }

    #[test]
    fn reports_reemit_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scenes: Vec<Scene> = (0..3).map(random_scene_with(&mut rng)).collect();
        let preds = random_preds(&mut rng, &scenes, 10);
        let counts = vec![
            CountEntry { regime: Regime::Minority, predicted: 1.2, n_t: 1 },
            CountEntry { regime: Regime::Majority, predicted: 4.0, n_t: 5 },
        ];
        let report = build_report(
            "unit",
            &preds,
            &scenes,
            2,
            &EvalOptions::default(),
            &counts,
            &[None, Some(2)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = emit_report(&report, &dir.path().join("a")).unwrap();
        let second = emit_report(&report, &dir.path().join("b")).unwrap();
        assert_eq!(first.len(), 3);
        for (fa, fb) in first.iter().zip(&second) {
            let ba = std::fs::read(fa).unwrap();
            let bb = std::fs::read(fb).unwrap();
            assert!(!ba.is_empty());
            assert_eq!(ba, bb, "{} differs between emissions", fa.display());
        }
        let parsed: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&first[0]).unwrap()).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn predictions_round_trip_through_jsonl() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scenes: Vec<Scene> = (0..2).map(random_scene_with(&mut rng)).collect();
        let mut preds = random_preds(&mut rng, &scenes, 6);
        preds[0].s_b = None;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        write_predictions(&preds, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }

    #[test]
    fn malformed_prediction_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        std::fs::write(&path, "{\"scene\":1,\n{not json}\n").unwrap();
        let err = read_predictions(&path).unwrap_err();
        match err {
            EvalError::PredictionParse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
