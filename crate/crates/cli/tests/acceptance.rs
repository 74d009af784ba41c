//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 3 and 6 train real models through the CLI and are serialized on
//! a lock so their wall-clock budgets are measured unshared.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coordemb::detector::{
    decode_offsets, encode_offsets, jaccard, match_anchors, mean_average_precision,
    AnchorAssignment, Anchor, BoundingBox, Detection, GroundTruth, SizeTier,
};
use coordemb::graph::Graph;
use coordemb::layers::CoordEmbLayer;
use coordemb::scenes::{transform_box, AffineTransform};
use coordemb::tensor::Tensor;

static HEAVY: Mutex<()> = Mutex::new(());

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coordemb"))
}

fn run_ok(args: &[&str], dir: &Path) -> String {
    let out = bin().args(args).current_dir(dir).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn report_line(criterion: &str, passed: bool, detail: &str) {
    println!(
        "[{}] {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
}

/// Criterion 1: the finite-difference suite covers every differentiable op
/// (including both coordinate layers), passes at rel err < 1e-5, exits 0,
/// and finishes inside a minute.
#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let out = bin().args(["gradcheck", "--module", "all"]).output().unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let ok = out.status.code() == Some(0)
        && stdout.contains("coord_embed_forward")
        && stdout.contains("coord_conv_forward")
        && elapsed < 60.0;
    report_line(
        "criterion 1 (gradient suite)",
        ok,
        &format!("exit {:?}, {elapsed:.1}s", out.status.code()),
    );
    assert!(ok, "gradcheck output:\n{stdout}");
}

/// Criterion 2: the 2x2 hand example reproduces (I+X+Y)/3 to 1e-15 and the
/// added parameter count is exactly 2*H*W for H, W in {8, 16, 32}.
#[test]
fn criterion_2_coordemb_formula_fidelity() {
    let layer = CoordEmbLayer::new(2, 2);
    let mut g = Graph::new();
    let img = g.leaf(Tensor::zeros(&[2, 2, 1]));
    let (out, _, _) = layer.forward(&mut g, img).unwrap();
    let o = g.value(out);
    let hand = [
        (o.at3(0, 0, 0), -2.0 / 3.0),
        (o.at3(0, 1, 0), 0.0),
        (o.at3(1, 0, 0), 0.0),
        (o.at3(1, 1, 0), 2.0 / 3.0),
    ];
    let formula_ok = hand.iter().all(|(got, want)| (got - want).abs() <= 1e-15);

    let mut count_ok = true;
    for hw in [8usize, 16, 32] {
        count_ok &= CoordEmbLayer::new(hw, hw).parameter_count() == 2 * hw * hw;
    }
    let ok = formula_ok && count_ok;
    report_line(
        "criterion 2 (coordemb formula fidelity)",
        ok,
        &format!("hand example {hand:?}, counts 2*H*W for 8/16/32: {count_ok}"),
    );
    assert!(ok);
}

/// Criterion 3: Fig.-1-style failure reproduction on the 16x16 quadrant
/// split, 5000 steps, 3 seeds. Gates: vanilla held-out accuracy < 0.15 and
/// coordconv > 0.9 and coordemb > vanilla, per seed. The absolute coordemb
/// level is reported, not gated.
#[test]
fn criterion_3_coordinate_task_reproduction() {
    let _lock = HEAVY.lock().unwrap();
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "gen-data", "--task", "coord", "--out", "data", "--h", "16", "--w", "16", "--split",
            "quadrant", "--seed", "0",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "compare", "--task", "coord", "--data", "data", "--seeds", "1,2,3", "--steps",
            "5000", "--out", "cmp", "--jobs", "2",
        ],
        dir.path(),
    );
    let elapsed = started.elapsed().as_secs_f64();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cmp/compare.json")).unwrap())
            .unwrap();

    let accuracy = |variant: &str, seed: u64| -> f64 {
        report["runs"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["variant"] == variant && r["seed"] == seed)
            .map(|r| r["metrics"]["accuracy"].as_f64().unwrap())
            .unwrap()
    };

    let mut clauses_ok = true;
    for seed in [1u64, 2, 3] {
        let vanilla = accuracy("vanilla", seed);
        let coordconv = accuracy("coordconv", seed);
        let coordemb = accuracy("coordemb", seed);
        println!(
            "  seed {seed}: vanilla {vanilla:.4} (< 0.15: {}), coordconv {coordconv:.4} \
             (> 0.9: {}), coordemb {coordemb:.4} (> vanilla: {})",
            vanilla < 0.15,
            coordconv > 0.9,
            coordemb > vanilla
        );
        clauses_ok &= vanilla < 0.15 && coordconv > 0.9 && coordemb > vanilla;
    }
    let runtime_ok = elapsed < 600.0;
    let ok = clauses_ok && runtime_ok;
    report_line(
        "criterion 3 (coordinate-task reproduction)",
        ok,
        &format!("{elapsed:.0}s (< 600s: {runtime_ok})"),
    );
    assert!(
        ok,
        "see the decisions ledger: coordemb has no held-out mechanism on this \
         diagnostic (its per-pixel embeddings for never-targeted pixels receive \
         no identity-shaping gradients), so the coordemb > vanilla clause is \
         expected to fail honestly"
    );
}

fn rand_box(rng: &mut ChaCha8Rng, extent: f64) -> BoundingBox {
    let x1 = rng.random_range(0.0..extent - 2.0);
    let y1 = rng.random_range(0.0..extent - 2.0);
    let w = rng.random_range(0.5..(extent - x1 - 0.5).min(12.0));
    let h = rng.random_range(0.5..(extent - y1 - 0.5).min(12.0));
    BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Independent matcher restated from the contract: per ground truth (in
/// order) take the best unclaimed anchor by IoU; then every unclaimed anchor
/// with IoU > 0.5 joins its argmax ground truth. IoU recomputed from scratch.
fn reference_match(anchors: &[Anchor], gts: &[(BoundingBox, usize)]) -> Vec<Option<usize>> {
    let iou = |a: &Anchor, b: &BoundingBox| -> f64 {
        let ab = BoundingBox::new(
            a.cx - a.w / 2.0,
            a.cy - a.h / 2.0,
            a.cx + a.w / 2.0,
            a.cy + a.h / 2.0,
        )
        .unwrap();
        let iw = (ab.x2.min(b.x2) - ab.x1.max(b.x1)).max(0.0);
        let ih = (ab.y2.min(b.y2) - ab.y1.max(b.y1)).max(0.0);
        let inter = iw * ih;
        let union = (ab.x2 - ab.x1) * (ab.y2 - ab.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    };
    let mut assigned: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut claimed = vec![false; anchors.len()];
    for (g, (gt_box, _)) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, anchor) in anchors.iter().enumerate() {
            if claimed[a] {
                continue;
            }
            let v = iou(anchor, gt_box);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            claimed[a] = true;
            assigned[a] = Some(g);
        }
    }
    for (a, anchor) in anchors.iter().enumerate() {
        if claimed[a] {
            continue;
        }
        let mut best_g = None;
        let mut best_v = 0.5;
        for (g, (gt_box, _)) in gts.iter().enumerate() {
            let v = iou(anchor, gt_box);
            if v > best_v {
                best_v = v;
                best_g = Some(g);
            }
        }
        assigned[a] = best_g;
    }
    assigned
}

/// Independent AP: greedy confidence-ranked matching restated from scratch,
/// then all-point interpolation computed per true positive as
/// `(1/P) * max precision at or after its rank`.
fn reference_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    class: usize,
    threshold: f64,
) -> Option<f64> {
    let n_pos = gts.iter().filter(|g| g.class_id == class).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class_id == class)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut tp_flags = Vec::new();
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.class_id != class || taken[g] {
                continue;
            }
            let v = jaccard(&dets[i].bbox, &gt.bbox);
            if v > threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }
    let precisions: Vec<f64> = tp_flags
        .iter()
        .scan(0usize, |tp, &flag| {
            if flag {
                *tp += 1;
            }
            Some(*tp as f64)
        })
        .enumerate()
        .map(|(i, tp)| tp / (i + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for (rank, &flag) in tp_flags.iter().enumerate() {
        if flag {
            let best_later = precisions[rank..]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            ap += best_later / n_pos as f64;
        }
    }
    Some(ap)
}

/// Criterion 4: matching and average precision agree exactly with brute-force
/// references on 200 random small instances each.
#[test]
fn criterion_4_detector_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut match_cases = 0;
    for _ in 0..200 {
        let n_anchors = rng.random_range(1..=8usize);
        let n_gts = rng.random_range(0..=3usize.min(n_anchors));
        let anchors: Vec<Anchor> = (0..n_anchors)
            .map(|i| Anchor {
                cx: rng.random_range(2.0..30.0),
                cy: rng.random_range(2.0..30.0),
                w: rng.random_range(1.0..12.0),
                h: rng.random_range(1.0..12.0),
                cell: i,
                scale: 0,
            })
            .collect();
        let gts: Vec<(BoundingBox, usize)> = (0..n_gts)
            .map(|_| (rand_box(&mut rng, 32.0), rng.random_range(0..3usize)))
            .collect();
        let got = match_anchors(&anchors, &gts);
        let want = reference_match(&anchors, &gts);
        for (a, expected) in want.iter().enumerate() {
            let actual = match got.assignments[a] {
                AnchorAssignment::Positive { gt } => Some(gt),
                AnchorAssignment::Negative => None,
            };
            assert_eq!(
                actual, *expected,
                "anchor {a} assignment mismatch (anchors {anchors:?}, gts {gts:?})"
            );
        }
        match_cases += 1;
    }

    let mut ap_cases = 0;
    for _ in 0..200 {
        let n_dets = rng.random_range(0..=5usize);
        let n_gts = rng.random_range(1..=3usize);
        let classes = 3;
        let dets: Vec<Detection> = (0..n_dets)
            .map(|_| Detection {
                bbox: rand_box(&mut rng, 32.0),
                class_id: rng.random_range(0..classes),
                confidence: rng.random_range(0.01..1.0),
            })
            .collect();
        let gts: Vec<GroundTruth> = (0..n_gts)
            .map(|_| GroundTruth {
                bbox: rand_box(&mut rng, 32.0),
                class_id: rng.random_range(0..classes),
                tier: SizeTier::Medium,
            })
            .collect();
        let got = mean_average_precision(
            &[dets.clone()],
            &[gts.clone()],
            0.5,
            classes,
        )
        .unwrap();
        for class in 0..classes {
            let want = reference_ap(&dets, &gts, class, 0.5);
            match (got.per_class[class], want) {
                (None, None) => {}
                (Some(a), Some(b)) => assert!(
                    (a - b).abs() < 1e-12,
                    "class {class}: AP {a} vs reference {b}"
                ),
                (a, b) => panic!("class {class}: presence mismatch {a:?} vs {b:?}"),
            }
        }
        ap_cases += 1;
    }
    report_line(
        "criterion 4 (detector oracle equivalence)",
        true,
        &format!("{match_cases} matching + {ap_cases} AP instances agree"),
    );
}

/// Criterion 5: the metric hand values.
#[test]
fn criterion_5_metric_hand_values() {
    let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
    let jaccard_ok = (jaccard(&a, &b) - 1.0 / 7.0).abs() <= 1e-12;

    let gt = vec![vec![GroundTruth {
        bbox: a,
        class_id: 0,
        tier: SizeTier::Small,
    }]];
    let dets = vec![vec![
        Detection {
            bbox: BoundingBox::new(10.0, 10.0, 12.0, 12.0).unwrap(),
            class_id: 0,
            confidence: 0.9,
        },
        Detection {
            bbox: a,
            class_id: 0,
            confidence: 0.8,
        },
    ]];
    let ap = mean_average_precision(&dets, &gt, 0.5, 1).unwrap().map;
    let ap_ok = (ap - 0.5).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut roundtrip_ok = true;
    for _ in 0..1000 {
        let anchor = Anchor {
            cx: rng.random_range(2.0..30.0),
            cy: rng.random_range(2.0..30.0),
            w: rng.random_range(0.5..15.0),
            h: rng.random_range(0.5..15.0),
            cell: 0,
            scale: 0,
        };
        let gt_box = rand_box(&mut rng, 32.0);
        let off = encode_offsets(&anchor, &gt_box).unwrap();
        let back = decode_offsets(&anchor, off);
        roundtrip_ok &= (back.x1 - gt_box.x1).abs() <= 1e-12
            && (back.y1 - gt_box.y1).abs() <= 1e-12
            && (back.x2 - gt_box.x2).abs() <= 1e-12
            && (back.y2 - gt_box.y2).abs() <= 1e-12;
    }
    let ok = jaccard_ok && ap_ok && roundtrip_ok;
    report_line(
        "criterion 5 (metric hand values)",
        ok,
        &format!("jaccard 1/7: {jaccard_ok}, AP 0.5: {ap_ok}, 1000 roundtrips: {roundtrip_ok}"),
    );
    assert!(ok);
}

/// Criterion 6: the synthetic analog of the headline comparison. 300 scenes
/// (edge_bias 0.8), 10000 steps, 3 seeds; gate is completion of the full
/// report (per-size-tier + affine-robustness columns, signed delta with
/// spread) inside 30 minutes. The paper's GTSDB numbers are out of reach at
/// desk scale; the delta's direction is recorded, not gated.
#[test]
fn criterion_6_shapes_comparison_substitute() {
    let _lock = HEAVY.lock().unwrap();
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "gen-data", "--task", "shapes", "--out", "data", "--h", "64", "--w", "64", "--n",
            "300", "--edge-bias", "0.8", "--seed", "0",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "compare", "--task", "shapes", "--data", "data", "--seeds", "1,2,3", "--steps",
            "10000", "--out", "cmp", "--jobs", "2",
        ],
        dir.path(),
    );
    let elapsed = started.elapsed().as_secs_f64();

    let csv = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    let columns_ok = ["map", "map_small", "map_medium", "map_large"]
        .iter()
        .all(|c| header.split(',').any(|h| h == *c))
        && ["map_affine_mild", "map_affine_medium", "map_affine_strong"]
            .iter()
            .all(|c| header.split(',').any(|h| h == *c));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cmp/compare.json")).unwrap())
            .unwrap();
    let delta = &report["coordemb_minus_vanilla"];
    let delta_ok = delta["per_seed"].as_array().map(|v| v.len()) == Some(3)
        && delta["mean"].is_number()
        && delta["min"].is_number()
        && delta["max"].is_number()
        && delta["positive_on_all_seeds"].is_boolean();
    println!(
        "  coordemb - vanilla mAP: per-seed {:?}, mean {}, range [{}, {}]; \
         consistent direction on all seeds: {} (recorded, not gated)",
        delta["per_seed"], delta["mean"], delta["min"], delta["max"],
        delta["positive_on_all_seeds"]
    );
    let runtime_ok = elapsed < 1800.0;
    let ok = columns_ok && delta_ok && runtime_ok;
    report_line(
        "criterion 6 (shapes comparison substitute)",
        ok,
        &format!("{elapsed:.0}s (< 1800s: {runtime_ok}), columns: {columns_ok}, delta: {delta_ok}"),
    );
    assert!(ok, "header: {header}");
}

/// Criterion 7: identity transform leaves mAP bit-identical end to end, and
/// the box-corner brute force matches apply_affine's boxes on 100 random
/// transforms.
#[test]
fn criterion_7_affine_pipeline_exactness() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "gen-data", "--task", "shapes", "--out", "data", "--h", "48", "--w", "48", "--n",
            "10", "--seed", "2",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "train", "--task", "shapes", "--variant", "coordemb", "--data", "data", "--steps",
            "50", "--seed", "2", "--ckpt", "run/model.ckpt",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "eval", "--ckpt", "run/model.ckpt", "--data", "data", "--affine", "1,0,0,0,0",
        ],
        dir.path(),
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/report.json")).unwrap())
            .unwrap();
    let base = report["metrics"]["map"].as_f64().unwrap();
    let identity = report["affine"]["1,0,0,0,0"]["map"].as_f64().unwrap();
    let identity_ok = base.to_bits() == identity.to_bits();

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut oracle_ok = true;
    for _ in 0..100 {
        let t = AffineTransform::from_params(
            rng.random_range(0.5..1.5),
            rng.random_range(-0.4..0.4),
            rng.random_range(-90.0..90.0),
            rng.random_range(-6.0..6.0),
            rng.random_range(-6.0..6.0),
            (rng.random_range(0.0..48.0), rng.random_range(0.0..48.0)),
        );
        let b = rand_box(&mut rng, 40.0);
        let got = transform_box(&t, &b);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (x, y) in [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)] {
            xs.push(t.a11 * x + t.a12 * y + t.tx);
            ys.push(t.a21 * x + t.a22 * y + t.ty);
        }
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        oracle_ok &= (got.x1 - min(&xs)).abs() < 1e-12
            && (got.y1 - min(&ys)).abs() < 1e-12
            && (got.x2 - max(&xs)).abs() < 1e-12
            && (got.y2 - max(&ys)).abs() < 1e-12;
    }
    let ok = identity_ok && oracle_ok;
    report_line(
        "criterion 7 (affine pipeline exactness)",
        ok,
        &format!("identity mAP bit-identical: {identity_ok}, 100 corner oracles: {oracle_ok}"),
    );
    assert!(ok);
}

/// Criterion 8: repeating any seeded command yields byte-identical
/// metrics.csv and checkpoints (and datasets).
#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        run_ok(
            &[
                "gen-data", "--task", "shapes", "--out", &format!("data_{name}"), "--h", "48",
                "--w", "48", "--n", "8", "--edge-bias", "0.7", "--seed", "11",
            ],
            dir.path(),
        );
        run_ok(
            &[
                "train", "--task", "shapes", "--variant", "coordconv", "--data",
                &format!("data_{name}"), "--steps", "25", "--seed", "11", "--eval-every", "10",
                "--ckpt", &format!("run_{name}/model.ckpt"),
            ],
            dir.path(),
        );
    }
    let file_pairs = [
        ("data_a/train/scenes.jsonl", "data_b/train/scenes.jsonl"),
        (
            "data_a/train/scene_00000.celf",
            "data_b/train/scene_00000.celf",
        ),
        ("run_a/metrics.csv", "run_b/metrics.csv"),
        ("run_a/model.ckpt", "run_b/model.ckpt"),
    ];
    let mut ok = true;
    for (a, b) in file_pairs {
        let fa = fs::read(dir.path().join(a)).unwrap();
        let fb = fs::read(dir.path().join(b)).unwrap();
        if fa != fb {
            ok = false;
            println!("  {a} differs from {b}");
        }
    }
    report_line(
        "criterion 8 (determinism)",
        ok,
        "datasets, metrics.csv, and checkpoints byte-identical across reruns",
    );
    assert!(ok);
}
