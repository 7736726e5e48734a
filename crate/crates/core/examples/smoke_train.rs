use ifield_core::losses::LossWeights;
use ifield_core::matching::{assign_labels, PairPrediction};
use ifield_core::synth::{generate_dataset, FeatureMode, GeneratorConfig};
use ifield_core::train::{score_pairs, train_full, Dataset, ModelParams, TrainConfig};

fn box_l1_and_class_acc(
    params: &ModelParams,
    scenes: &[ifield_core::synth::Scene],
    gcfg: &GeneratorConfig,
) -> (f64, f64, f64) {
    let mut l1_sum = 0.0;
    let mut l1_n = 0.0;
    let mut acc_sum = 0.0;
    let mut acc_n = 0.0;
    let mut sb_pos = 0.0;
    let mut sb_neg = 0.0;
    let mut np = 0.0;
    let mut nn = 0.0_f64;
    for scene in scenes {
        let scored = score_pairs(params, scene, gcfg).unwrap();
        let preds: Vec<PairPrediction> = scored
            .iter()
            .map(|p| {
                let mut probs = vec![0.0; gcfg.object_classes + 1];
                probs[p.class_id] = 1.0;
                PairPrediction {
                    human: p.human.corners(),
                    object: p.object.corners(),
                    class_probs: probs,
                }
            })
            .collect();
        let asg = assign_labels(scene, &preds, &LossWeights::default()).unwrap();
        for (i, t) in asg.targets.iter().enumerate() {
            if let Some((bh, bo)) = t.boxes {
                let ph = scored[i].human.corners();
                let po = scored[i].object.corners();
                let l1: f64 = ph.iter().zip(bh).map(|(a, b)| (a - b).abs()).sum::<f64>()
                    + po.iter().zip(bo).map(|(a, b)| (a - b).abs()).sum::<f64>();
                l1_sum += l1 / 8.0;
                l1_n += 1.0;
                acc_sum += f64::from(scored[i].class_id == t.class_target);
                acc_n += 1.0;
            }
        }
        for (i, t) in asg.targets.iter().enumerate() {
            if t.interactive {
                sb_pos += scored[i].s_b;
                np += 1.0;
            } else {
                sb_neg += scored[i].s_b;
                nn += 1.0;
            }
        }
    }
    (l1_sum / l1_n, acc_sum / acc_n, (sb_pos / np) - (sb_neg / nn.max(1.0)))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = if args.get(1).map(String::as_str) == Some("geom") {
        FeatureMode::Geometric
    } else {
        FeatureMode::Oracle
    };
    let fdim: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_scenes: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(200);
    let gcfg = GeneratorConfig { feature_mode: mode, seed: 9, ..GeneratorConfig::default() };
    let (scenes, _) = generate_dataset(&gcfg, n_scenes);
    let test_cfg = GeneratorConfig { seed: 1009, ..gcfg.clone() };
    let (test_scenes, _) = generate_dataset(&test_cfg, 40);
    let data = Dataset::prepare(&scenes, &gcfg);
    let unsup = args.get(4).map(String::as_str) == Some("unsup");
    let last_stage: u8 = if unsup { 2 } else { 3 };
    let cfg = TrainConfig {
        threads: 4,
        feature_dim: fdim,
        supervised_field: !unsup,
        ..TrainConfig::default()
    };

    let out = train_full(&data, &cfg, last_stage).unwrap();
    for r in out.log.iter().filter(|r| r.epoch % 5 == 0 || r.epoch + 1 == 30) {
        println!(
            "stage {} epoch {:2} lr {:.4} total {:8.4} pair {:7.4} field {:8.4} verb {:6.4}",
            r.stage, r.epoch, r.lr, r.mean_total, r.mean_pair, r.mean_field, r.mean_verb
        );
    }
    let (l1, acc, sb_gap) = box_l1_and_class_acc(&out.params, &test_scenes, &gcfg);
    println!("held-out matched-box mean L1 {l1:.4}  class acc {acc:.3}  s_b gap (pos-neg) {sb_gap:.4}");
}
