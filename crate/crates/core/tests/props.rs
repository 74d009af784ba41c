//! Property tests for the spec's stated invariants.

use proptest::prelude::*;

use coordemb::coord_task::{gen_coord_dataset, SplitKind};
use coordemb::detector::{
    decode_offsets, encode_offsets, jaccard, mean_average_precision, nms, Anchor, BoundingBox,
    Detection, GroundTruth, SizeTier,
};
use coordemb::graph::Graph;
use coordemb::layers::CoordEmbLayer;
use coordemb::tensor::Tensor;
use coordemb::training::{rmsprop_step, RmspropState, TrainConfig};

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.1..30.0f64, 0.1..30.0f64)
        .prop_map(|(x1, y1, w, h)| BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap())
}

fn arb_anchor() -> impl Strategy<Value = Anchor> {
    (0.0..60.0f64, 0.0..60.0f64, 0.5..20.0f64, 0.5..20.0f64).prop_map(|(cx, cy, w, h)| Anchor {
        cx,
        cy,
        w,
        h,
        cell: 0,
        scale: 0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn jaccard_is_symmetric_and_reflexive(a in arb_box(), b in arb_box()) {
        prop_assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
        let v = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn encode_decode_roundtrip(anchor in arb_anchor(), gt in arb_box()) {
        let offsets = encode_offsets(&anchor, &gt).unwrap();
        let back = decode_offsets(&anchor, offsets);
        prop_assert!((back.x1 - gt.x1).abs() <= 1e-12);
        prop_assert!((back.y1 - gt.y1).abs() <= 1e-12);
        prop_assert!((back.x2 - gt.x2).abs() <= 1e-12);
        prop_assert!((back.y2 - gt.y2).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..4,
        cols in 1usize..8,
        values in prop::collection::vec(-50.0..50.0f64, 1..32),
    ) {
        let n = rows * cols;
        let mut data = values;
        data.resize(n, 0.3);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax_last(x);
        for row in g.value(s).data().chunks_exact(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsprop_accumulators_never_go_negative(
        grads in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 4), 1..30),
    ) {
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let mut p = Tensor::zeros(&[4]);
        let mut state = RmspropState { accumulators: vec![Tensor::zeros(&[4])] };
        for g in grads {
            let gt = Tensor::new(vec![4], g).unwrap();
            let mut params = vec![("p".to_string(), &mut p)];
            rmsprop_step(&mut params, &[gt], &mut state, &cfg).unwrap();
            prop_assert!(state.accumulators[0].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn coord_embed_output_stays_in_unit_range(
        h in 1usize..6,
        w in 1usize..6,
        c in 1usize..4,
        fill in prop::collection::vec(-1.0..1.0f64, 1..128),
    ) {
        let n = h * w * c;
        let mut data = fill;
        data.resize(n, 0.0);
        let image = Tensor::new(vec![h, w, c], data).unwrap();
        let layer = CoordEmbLayer::new(h, w);
        let mut g = Graph::new();
        let img = g.leaf(image);
        let (out, _, _) = layer.forward(&mut g, img).unwrap();
        prop_assert!(g.value(out).iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn nms_output_is_a_clean_subset(
        boxes in prop::collection::vec((arb_box(), 0usize..3, 0.01..1.0f64), 1..12),
        threshold in 0.2..0.9f64,
    ) {
        let dets: Vec<Detection> = boxes
            .into_iter()
            .map(|(bbox, class_id, confidence)| Detection { bbox, class_id, confidence })
            .collect();
        let kept = nms(&dets, threshold);
        prop_assert!(kept.len() <= dets.len());
        for k in &kept {
            prop_assert!(dets.iter().any(|d| d == k));
        }
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if kept[i].class_id == kept[j].class_id {
                    prop_assert!(jaccard(&kept[i].bbox, &kept[j].bbox) <= threshold);
                }
            }
        }
        // Sorted by descending confidence.
        for pair in kept.windows(2) {
            prop_assert!(pair[0].confidence >= pair[1].confidence);
        }
    }

    #[test]
    fn map_depends_only_on_confidence_ranking(
        case in prop::collection::vec((arb_box(), 0usize..2, 0.01..0.99f64), 1..8),
        gts in prop::collection::vec((arb_box(), 0usize..2), 1..4),
    ) {
        let dets: Vec<Detection> = case
            .iter()
            .map(|(bbox, class_id, confidence)| Detection {
                bbox: *bbox,
                class_id: *class_id,
                confidence: *confidence,
            })
            .collect();
        let gt: Vec<GroundTruth> = gts
            .iter()
            .map(|(bbox, class_id)| GroundTruth {
                bbox: *bbox,
                class_id: *class_id,
                tier: SizeTier::Medium,
            })
            .collect();
        let base = mean_average_precision(&[dets.clone()], &[gt.clone()], 0.5, 2).unwrap();
        // Strictly monotone transform of every confidence.
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                confidence: 0.5 + d.confidence.atan() / std::f64::consts::PI,
                ..d.clone()
            })
            .collect();
        let transformed = mean_average_precision(&[squashed], &[gt], 0.5, 2).unwrap();
        prop_assert_eq!(base.map.to_bits(), transformed.map.to_bits());
    }
}

/// Partition property over the full sweep the spec names.
#[test]
fn coord_splits_partition_for_all_grid_sizes() {
    for h in 4..=16usize {
        for w in 4..=16usize {
            for split in [SplitKind::Uniform, SplitKind::Quadrant] {
                let (train, test) = gen_coord_dataset(h, w, split, 7).unwrap();
                assert_eq!(train.len() + test.len(), h * w);
                let mut seen = vec![false; h * w];
                for s in train.iter().chain(&test) {
                    assert!(!seen[s.class_index]);
                    seen[s.class_index] = true;
                }
                assert!(seen.iter().all(|&v| v));
            }
        }
    }
}
