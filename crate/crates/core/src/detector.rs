//! Detection geometry and evaluation: boxes, anchors, Jaccard matching,
//! offset encoding, non-maximum suppression, and mean average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x1, self.y1),
            (self.x2, self.y1),
            (self.x2, self.y2),
            (self.x1, self.y2),
        ]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection area over union area; 0 for disjoint boxes.
pub fn jaccard(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A default box: center, size, and its provenance in the anchor grid.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Flat cell index within its feature map.
    pub cell: usize,
    /// Scale index within the cell.
    pub scale: usize,
}

impl Anchor {
    pub fn to_box(&self) -> BoundingBox {
        BoundingBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }
}

/// One anchor per (feature-map cell, scale), centers at cell centers mapped
/// to image coordinates. Iteration order: maps outer, cells row-major,
/// scales inner — detector heads rely on this ordering.
pub fn make_anchor_grid(
    feature_dims: &[(usize, usize)],
    scales: &[Vec<(f64, f64)>],
    image_dims: (usize, usize),
) -> Vec<Anchor> {
    assert_eq!(feature_dims.len(), scales.len());
    let (img_h, img_w) = image_dims;
    let mut anchors = Vec::new();
    for ((fh, fw), map_scales) in feature_dims.iter().zip(scales) {
        let cell_h = img_h as f64 / *fh as f64;
        let cell_w = img_w as f64 / *fw as f64;
        for row in 0..*fh {
            for col in 0..*fw {
                let cy = (row as f64 + 0.5) * cell_h;
                let cx = (col as f64 + 0.5) * cell_w;
                for (scale, &(w, h)) in map_scales.iter().enumerate() {
                    anchors.push(Anchor {
                        cx,
                        cy,
                        w,
                        h,
                        cell: row * fw + col,
                        scale,
                    });
                }
            }
        }
    }
    anchors
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorAssignment {
    Positive { gt: usize },
    Negative,
}

/// Per-anchor assignment plus the IoU backing the decision: for positives the
/// IoU with the assigned ground truth, for negatives the best IoU over all
/// ground truths (0 when there are none).
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub assignments: Vec<AnchorAssignment>,
    pub ious: Vec<f64>,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(a, asn)| match asn {
                AnchorAssignment::Positive { gt } => Some((a, *gt)),
                AnchorAssignment::Negative => None,
            })
    }
}

/// Two-clause matching rule:
/// 1. each ground truth claims its best-IoU anchor (even below 0.5), greedily
///    in ground-truth order over anchors not yet claimed, so every ground
///    truth keeps at least one positive whenever anchors are plentiful;
/// 2. every unclaimed anchor with IoU > 0.5 to some ground truth becomes
///    positive for its highest-IoU ground truth.
/// Ties break toward the lower anchor index (clause 1) and the lower
/// ground-truth index (clause 2).
pub fn match_anchors(anchors: &[Anchor], ground_truth: &[(BoundingBox, usize)]) -> MatchResult {
    assert!(!anchors.is_empty(), "match_anchors needs at least one anchor");
    let n = anchors.len();
    let mut assignments = vec![AnchorAssignment::Negative; n];
    let mut ious = vec![0.0; n];
    if ground_truth.is_empty() {
        return MatchResult { assignments, ious };
    }

    let anchor_boxes: Vec<BoundingBox> = anchors.iter().map(Anchor::to_box).collect();
    let iou = |a: usize, g: usize| jaccard(&anchor_boxes[a], &ground_truth[g].0);

    let mut claimed = vec![false; n];
    for g in 0..ground_truth.len() {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..n {
            if claimed[a] {
                continue;
            }
            let v = iou(a, g);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((a, v));
            }
        }
        if let Some((a, v)) = best {
            claimed[a] = true;
            assignments[a] = AnchorAssignment::Positive { gt: g };
            ious[a] = v;
        }
    }

    for a in 0..n {
        if claimed[a] {
            continue;
        }
        let mut best_g = 0;
        let mut best_v = f64::NEG_INFINITY;
        for g in 0..ground_truth.len() {
            let v = iou(a, g);
            if v > best_v {
                best_v = v;
                best_g = g;
            }
        }
        ious[a] = best_v;
        if best_v > 0.5 {
            assignments[a] = AnchorAssignment::Positive { gt: best_g };
        }
    }

    MatchResult { assignments, ious }
}

/// Center-size offset encoding:
/// `(dcx / w_a, dcy / h_a, ln(w_g / w_a), ln(h_g / h_a))`.
pub fn encode_offsets(anchor: &Anchor, gt: &BoundingBox) -> Result<[f64; 4]> {
    let (gw, gh) = (gt.width(), gt.height());
    if gw <= 0.0 || gh <= 0.0 {
        return Err(Error::NonPositiveExtent {
            width: gw,
            height: gh,
        });
    }
    let (gcx, gcy) = gt.center();
    Ok([
        (gcx - anchor.cx) / anchor.w,
        (gcy - anchor.cy) / anchor.h,
        (gw / anchor.w).ln(),
        (gh / anchor.h).ln(),
    ])
}

/// Exact inverse of [`encode_offsets`].
pub fn decode_offsets(anchor: &Anchor, offsets: [f64; 4]) -> BoundingBox {
    let cx = anchor.cx + offsets[0] * anchor.w;
    let cy = anchor.cy + offsets[1] * anchor.h;
    let w = anchor.w * offsets[2].exp();
    let h = anchor.h * offsets[3].exp();
    BoundingBox {
        x1: cx - w / 2.0,
        y1: cy - h / 2.0,
        x2: cx + w / 2.0,
        y2: cy + h / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// Greedy per-class non-maximum suppression. Output is sorted by descending
/// confidence, ties by lower class id then input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(detections[a].class_id.cmp(&detections[b].class_id))
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; detections.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(detections[i].clone());
        for &j in &order[rank + 1..] {
            if suppressed[j] || detections[j].class_id != detections[i].class_id {
                continue;
            }
            if jaccard(&detections[i].bbox, &detections[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Object size grouping by box area; thresholds live with the scene
/// generator (`scenes::size_tier`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeTier {
    Small,
    Medium,
    Large,
}

impl SizeTier {
    pub const ALL: [SizeTier; 3] = [SizeTier::Small, SizeTier::Medium, SizeTier::Large];

    pub fn as_str(&self) -> &'static str {
        match self {
            SizeTier::Small => "small",
            SizeTier::Medium => "medium",
            SizeTier::Large => "large",
        }
    }
}

impl std::str::FromStr for SizeTier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizeTier::Small),
            "medium" => Ok(SizeTier::Medium),
            "large" => Ok(SizeTier::Large),
            other => Err(Error::Config(format!("unknown size tier '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub tier: SizeTier,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReport {
    /// Mean over classes with at least one ground truth.
    pub map: f64,
    /// Per-class AP; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// mAP restricted to small/medium/large ground truths; `None` when the
    /// tier has no ground truths.
    pub map_small: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_large: Option<f64>,
}

/// Outcome of greedy matching for one ranked detection of one class.
enum RankedOutcome {
    TruePositive(SizeTier),
    FalsePositive,
}

/// Area under the precision-recall curve by all-point interpolation
/// (precision envelope). `flags[i]` says whether the i-th ranked detection
/// is a true positive.
fn average_precision(flags: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_pos as f64);
    }
    // Precision envelope: running max from the right.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Mean average precision at a fixed IoU threshold, with per-class APs and
/// per-size-tier mAPs.
///
/// Detections are ranked by confidence across all images (ties by image then
/// input order); each is a true positive when it greedily matches an
/// unmatched same-class ground truth with IoU strictly above the threshold,
/// taking the highest-IoU candidate. Tier mAPs restrict ground truths and
/// their matches to the tier: detections matched to other tiers are dropped
/// from that tier's ranking, unmatched detections stay false positives.
pub fn mean_average_precision(
    detections_per_image: &[Vec<Detection>],
    ground_truths_per_image: &[Vec<GroundTruth>],
    iou_threshold: f64,
    num_classes: usize,
) -> Result<MapReport> {
    let total_gt: usize = ground_truths_per_image.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }

    let mut per_class: Vec<Option<f64>> = vec![None; num_classes];
    let mut tier_aps: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    for class in 0..num_classes {
        let n_pos: usize = ground_truths_per_image
            .iter()
            .flatten()
            .filter(|gt| gt.class_id == class)
            .count();
        let tier_pos: Vec<usize> = SizeTier::ALL
            .iter()
            .map(|&t| {
                ground_truths_per_image
                    .iter()
                    .flatten()
                    .filter(|gt| gt.class_id == class && gt.tier == t)
                    .count()
            })
            .collect();
        if n_pos == 0 {
            continue;
        }

        // Rank this class's detections across all images.
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (img, dets) in detections_per_image.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                if d.class_id == class {
                    ranked.push((img, di));
                }
            }
        }
        ranked.sort_by(|&(ia, da), &(ib, db)| {
            let ca = detections_per_image[ia][da].confidence;
            let cb = detections_per_image[ib][db].confidence;
            cb.partial_cmp(&ca)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(&ib))
                .then(da.cmp(&db))
        });

        let mut matched: Vec<Vec<bool>> = ground_truths_per_image
            .iter()
            .map(|gts| vec![false; gts.len()])
            .collect();
        let mut outcomes = Vec::with_capacity(ranked.len());
        for &(img, di) in &ranked {
            let det = &detections_per_image[img][di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in ground_truths_per_image[img].iter().enumerate() {
                if gt.class_id != class || matched[img][gi] {
                    continue;
                }
                let v = jaccard(&det.bbox, &gt.bbox);
                if v > iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[img][gi] = true;
                    outcomes.push(RankedOutcome::TruePositive(
                        ground_truths_per_image[img][gi].tier,
                    ));
                }
                None => outcomes.push(RankedOutcome::FalsePositive),
            }
        }

        let flags: Vec<bool> = outcomes
            .iter()
            .map(|o| matches!(o, RankedOutcome::TruePositive(_)))
            .collect();
        per_class[class] = Some(average_precision(&flags, n_pos));

        for (ti, &tier) in SizeTier::ALL.iter().enumerate() {
            if tier_pos[ti] == 0 {
                continue;
            }
            let tier_flags: Vec<bool> = outcomes
                .iter()
                .filter_map(|o| match o {
                    RankedOutcome::TruePositive(t) if *t == tier => Some(true),
                    RankedOutcome::TruePositive(_) => None,
                    RankedOutcome::FalsePositive => Some(false),
                })
                .collect();
            tier_aps[ti].push(average_precision(&tier_flags, tier_pos[ti]));
        }
    }

    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len() as f64;
    let tier_map = |v: &Vec<f64>| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };

    Ok(MapReport {
        map,
        per_class,
        map_small: tier_map(&tier_aps[0]),
        map_medium: tier_map(&tier_aps[1]),
        map_large: tier_map(&tier_aps[2]),
    })
}
