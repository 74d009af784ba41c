//! Toy single-shot detector head.
//!
//! Four shared 3x3 stride-2 convolutions turn a 64x64 image into feature
//! maps, two of which (8x8 and 4x4) feed 3x3 prediction heads. Each head
//! cell evaluates 3 default boxes and predicts, per box, 4 center-size
//! offsets and class probabilities over the shape classes plus background.
//! At training time ground truths are matched to anchors by Jaccard overlap
//! (threshold 0.5, plus the best anchor per ground truth); the loss is
//! softmax cross-entropy over matched and hard-mined negative anchors (3:1
//! negatives to positives) plus smooth-L1 on positive-anchor offsets.

use crate::conv::Padding;
use crate::detector::{
    decode_offsets, encode_offsets, make_anchor_grid, match_anchors, mean_average_precision,
    nms, Anchor, BoundingBox, Detection, MapReport,
};
use crate::error::Result;
use crate::graph::{ActivationOp, CeTarget, Graph, NodeId};
use crate::layers::{
    build_model, coord_grid, ConvLayer, CoordConvLayer, LayerSpec, Model, ModelSpec, Variant,
};
use crate::scenes::ShapeScene;
use crate::tensor::Tensor;
use crate::training::ParamModel;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SsdConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub num_classes: usize,
    pub trunk_channels: usize,
    /// Anchor (width, height) sets for the 8x8 and 4x4 maps.
    pub scales: [Vec<(f64, f64)>; 2],
    pub match_iou: f64,
    pub neg_pos_ratio: usize,
    /// Hard negatives kept when an image has no positive anchors.
    pub min_negatives: usize,
    pub loc_weight: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for SsdConfig {
    fn default() -> Self {
        SsdConfig {
            input_h: 64,
            input_w: 64,
            num_classes: 3,
            trunk_channels: 24,
            scales: [
                vec![(4.0, 4.0), (8.0, 8.0), (14.0, 14.0)],
                vec![(20.0, 20.0), (26.0, 26.0), (34.0, 34.0)],
            ],
            match_iou: 0.5,
            neg_pos_ratio: 3,
            min_negatives: 8,
            loc_weight: 1.0,
            conf_threshold: 0.02,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl SsdConfig {
    fn scales_per_cell(&self) -> usize {
        self.scales[0].len()
    }

    fn background_class(&self) -> usize {
        self.num_classes
    }
}

enum HeadConv {
    Plain(ConvLayer),
    Coord(CoordConvLayer),
}

impl HeadConv {
    fn forward(&self, g: &mut Graph, input: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        match self {
            HeadConv::Plain(l) => l.forward(g, input),
            HeadConv::Coord(l) => l.forward(g, input),
        }
    }

    fn kernel(&self) -> &Tensor {
        match self {
            HeadConv::Plain(l) => &l.kernel,
            HeadConv::Coord(l) => &l.kernel,
        }
    }

    fn bias(&self) -> &Tensor {
        match self {
            HeadConv::Plain(l) => &l.bias,
            HeadConv::Coord(l) => &l.bias,
        }
    }

    fn tensors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        match self {
            HeadConv::Plain(l) => (&mut l.kernel, &mut l.bias),
            HeadConv::Coord(l) => (&mut l.kernel, &mut l.bias),
        }
    }
}

struct Head {
    loc: HeadConv,
    cls: HeadConv,
}

/// Toy SSD: shared trunk (variant-transformed) plus per-map loc/cls heads.
pub struct SsdModel {
    pub cfg: SsdConfig,
    pub variant: Variant,
    trunk: Model,
    heads: Vec<Head>,
    anchors: Vec<Anchor>,
    feature_dims: Vec<(usize, usize)>,
    /// Trunk layer indices whose outputs feed the heads.
    tap_layers: [usize; 2],
}

fn trunk_spec(cfg: &SsdConfig, variant: Variant) -> ModelSpec {
    let conv = |out_channels: usize| LayerSpec::Conv {
        kernel: 3,
        out_channels,
        stride: 2,
        padding: Padding::Same,
        activation: Some(ActivationOp::Relu),
    };
    ModelSpec {
        variant,
        input_h: cfg.input_h,
        input_w: cfg.input_w,
        input_c: 3,
        layers: vec![
            conv(cfg.trunk_channels),
            conv(cfg.trunk_channels),
            conv(cfg.trunk_channels),
            conv(cfg.trunk_channels),
        ],
    }
}

fn head_conv(
    rng: &mut ChaCha8Rng,
    variant: Variant,
    map_dims: (usize, usize),
    cin: usize,
    cout: usize,
) -> HeadConv {
    let make_kernel = |rng: &mut ChaCha8Rng, channels: usize| {
        let fan_in = 3 * 3 * channels;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = 3 * 3 * channels * cout;
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(vec![3, 3, channels, cout], data).expect("valid shape")
    };
    if variant == Variant::CoordConv {
        let (x_grid, y_grid) = coord_grid(map_dims.0, map_dims.1);
        HeadConv::Coord(CoordConvLayer {
            i_channel: y_grid,
            j_channel: x_grid,
            kernel: make_kernel(rng, cin + 2),
            bias: Tensor::zeros(&[cout]),
            stride: 1,
            padding: Padding::Same,
            activation: None,
        })
    } else {
        HeadConv::Plain(ConvLayer {
            kernel: make_kernel(rng, cin),
            bias: Tensor::zeros(&[cout]),
            stride: 1,
            padding: Padding::Same,
            activation: None,
        })
    }
}

/// Builds the detector for one variant with deterministic initialization.
/// Vanilla and coordemb share bit-identical trunk and head parameters for
/// the same seed.
pub fn build_ssd(cfg: &SsdConfig, variant: Variant, seed: u64) -> Result<SsdModel> {
    let trunk = build_model(&trunk_spec(cfg, variant), seed)?;
    // Feature maps after four stride-2 convolutions; taps at layers 2 and 3.
    let h8 = (cfg.input_h - 1) / 8 + 1;
    let w8 = (cfg.input_w - 1) / 8 + 1;
    let h16 = (cfg.input_h - 1) / 16 + 1;
    let w16 = (cfg.input_w - 1) / 16 + 1;
    let feature_dims = vec![(h8, w8), (h16, w16)];
    let anchors = make_anchor_grid(&feature_dims, &cfg.scales, (cfg.input_h, cfg.input_w));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
    let k = cfg.scales_per_cell();
    let mut heads = Vec::new();
    for &dims in &feature_dims {
        let loc = head_conv(&mut rng, variant, dims, cfg.trunk_channels, k * 4);
        let cls = head_conv(
            &mut rng,
            variant,
            dims,
            cfg.trunk_channels,
            k * (cfg.num_classes + 1),
        );
        heads.push(Head { loc, cls });
    }

    Ok(SsdModel {
        cfg: cfg.clone(),
        variant,
        trunk,
        heads,
        anchors,
        feature_dims,
        tap_layers: [2, 3],
    })
}

pub struct SsdForward {
    /// `[num_anchors, 4]` center-size offsets.
    pub loc: NodeId,
    /// `[num_anchors, num_classes + 1]` logits.
    pub cls: NodeId,
    pub params: Vec<NodeId>,
}

impl SsdModel {
    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn feature_dims(&self) -> &[(usize, usize)] {
        &self.feature_dims
    }

    pub fn forward(&self, g: &mut Graph, image: NodeId) -> Result<SsdForward> {
        let (outputs, mut params) = self.trunk.forward_layers(g, image)?;
        let k = self.cfg.scales_per_cell();
        let n_cls = self.cfg.num_classes + 1;

        let mut loc_parts = Vec::new();
        let mut cls_parts = Vec::new();
        for (head, &tap) in self.heads.iter().zip(&self.tap_layers) {
            let feature = outputs[tap];
            let (loc_map, lk, lb) = head.loc.forward(g, feature)?;
            params.push(lk);
            params.push(lb);
            let (cls_map, ck, cb) = head.cls.forward(g, feature)?;
            params.push(ck);
            params.push(cb);
            let (fh, fw, _) = g.value(loc_map).dims3();
            loc_parts.push(g.reshape(loc_map, &[fh * fw * k, 4])?);
            cls_parts.push(g.reshape(cls_map, &[fh * fw * k, n_cls])?);
        }
        let loc = g.concat_rows(&loc_parts)?;
        let cls = g.concat_rows(&cls_parts)?;
        debug_assert_eq!(g.value(loc).shape()[0], self.anchors.len());
        Ok(SsdForward { loc, cls, params })
    }

    /// Builds the training loss for one scene and returns the scalar node
    /// plus parameter nodes in `parameters()` order.
    pub fn loss(&self, g: &mut Graph, scene: &ShapeScene) -> Result<(NodeId, Vec<NodeId>)> {
        let image = g.leaf(scene.image.clone());
        let fwd = self.forward(g, image)?;
        let gts: Vec<(BoundingBox, usize)> = scene
            .objects
            .iter()
            .map(|o| (o.bbox, o.class_id))
            .collect();
        let matches = match_anchors(&self.anchors, &gts);
        let positives: Vec<(usize, usize)> = matches.positives().collect();

        // Rank negatives by their current cross-entropy against background.
        let cls_values = g.value(fwd.cls).clone();
        let n_cls = self.cfg.num_classes + 1;
        let bg = self.cfg.background_class();
        let positive_set: Vec<bool> = {
            let mut s = vec![false; self.anchors.len()];
            for &(a, _) in &positives {
                s[a] = true;
            }
            s
        };
        let mut negatives: Vec<(usize, f64)> = Vec::new();
        for a in 0..self.anchors.len() {
            if positive_set[a] {
                continue;
            }
            let row = &cls_values.data()[a * n_cls..(a + 1) * n_cls];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            negatives.push((a, lse - row[bg]));
        }
        negatives.sort_by(|x, y| {
            y.1.partial_cmp(&x.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.0.cmp(&y.0))
        });
        let keep = (self.cfg.neg_pos_ratio * positives.len())
            .max(self.cfg.min_negatives)
            .min(negatives.len());
        let mut selected: Vec<(usize, usize)> = positives
            .iter()
            .map(|&(a, gt)| (a, gts[gt].1))
            .chain(negatives[..keep].iter().map(|&(a, _)| (a, bg)))
            .collect();
        selected.sort_by_key(|&(a, _)| a);

        let rows: Vec<usize> = selected.iter().map(|&(a, _)| a).collect();
        let targets: Vec<usize> = selected.iter().map(|&(_, c)| c).collect();
        let cls_sel = g.gather_rows(fwd.cls, rows)?;
        let ce = g.cross_entropy(cls_sel, CeTarget::Indices(targets))?;

        if positives.is_empty() {
            return Ok((ce, fwd.params));
        }

        let pos_rows: Vec<usize> = positives.iter().map(|&(a, _)| a).collect();
        let mut encoded = Vec::with_capacity(positives.len() * 4);
        for &(a, gt) in &positives {
            encoded.extend(encode_offsets(&self.anchors[a], &gts[gt].0)?);
        }
        let target = Tensor::new(vec![positives.len(), 4], encoded)?;
        let loc_sel = g.gather_rows(fwd.loc, pos_rows)?;
        let sl1 = g.smooth_l1(loc_sel, &target)?;
        let weighted = g.scale(sl1, self.cfg.loc_weight);
        let total = g.add(ce, weighted)?;
        Ok((total, fwd.params))
    }

    /// Runs inference on one image: decode, clip, threshold, per-class NMS,
    /// confidence-sorted and truncated.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let input = g.leaf(image.clone());
        let fwd = self.forward(&mut g, input)?;
        let loc = g.value(fwd.loc);
        let cls = g.value(fwd.cls);
        let n_cls = self.cfg.num_classes + 1;
        let (img_h, img_w) = (self.cfg.input_h as f64, self.cfg.input_w as f64);

        let mut raw = Vec::new();
        for (a, anchor) in self.anchors.iter().enumerate() {
            let row = &cls.data()[a * n_cls..(a + 1) * n_cls];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let offsets = [
                loc.data()[a * 4],
                loc.data()[a * 4 + 1],
                loc.data()[a * 4 + 2],
                loc.data()[a * 4 + 3],
            ];
            for class_id in 0..self.cfg.num_classes {
                let p = exps[class_id] / denom;
                if p <= self.cfg.conf_threshold {
                    continue;
                }
                let decoded = decode_offsets(anchor, offsets);
                let x1 = decoded.x1.max(0.0);
                let y1 = decoded.y1.max(0.0);
                let x2 = decoded.x2.min(img_w);
                let y2 = decoded.y2.min(img_h);
                if x2 <= x1 || y2 <= y1 {
                    continue;
                }
                raw.push(Detection {
                    bbox: BoundingBox { x1, y1, x2, y2 },
                    class_id,
                    confidence: p,
                });
            }
        }
        let mut kept = nms(&raw, self.cfg.nms_iou);
        kept.truncate(self.cfg.max_detections);
        Ok(kept)
    }
}

impl ParamModel for SsdModel {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.parameters();
        for (i, head) in self.heads.iter().enumerate() {
            out.push((format!("head{i}/loc/kernel"), head.loc.kernel()));
            out.push((format!("head{i}/loc/bias"), head.loc.bias()));
            out.push((format!("head{i}/cls/kernel"), head.cls.kernel()));
            out.push((format!("head{i}/cls/bias"), head.cls.bias()));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.trunk.parameters_mut();
        for (i, head) in self.heads.iter_mut().enumerate() {
            let (lk, lb) = head.loc.tensors_mut();
            out.push((format!("head{i}/loc/kernel"), lk));
            out.push((format!("head{i}/loc/bias"), lb));
            let (ck, cb) = head.cls.tensors_mut();
            out.push((format!("head{i}/cls/kernel"), ck));
            out.push((format!("head{i}/cls/bias"), cb));
        }
        out
    }
}

/// Detections for every scene, in scene order.
pub fn detect_all(model: &SsdModel, scenes: &[ShapeScene]) -> Result<Vec<Vec<Detection>>> {
    scenes.iter().map(|s| model.detect(&s.image)).collect()
}

/// mAP at IoU 0.5 over a scene set.
pub fn evaluate_map(model: &SsdModel, scenes: &[ShapeScene]) -> Result<MapReport> {
    let detections = detect_all(model, scenes)?;
    let ground_truths: Vec<_> = scenes.iter().map(crate::io::scene_ground_truths).collect();
    mean_average_precision(&detections, &ground_truths, 0.5, model.cfg.num_classes)
}
