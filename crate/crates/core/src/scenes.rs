//! Synthetic shape scenes with ground-truth boxes, plus invertible affine
//! distortion of a scene and its annotations.
//!
//! Scenes stand in for a real detection dataset at desk scale: filled
//! circles, triangles, and squares (class ids 0..2) in distinct colors over a
//! textured background, with tight boxes heavy on small objects near the
//! image margin when `edge_bias` is high.
//!
//! Coordinates are continuous: pixel `(row, col)` covers
//! `[col, col+1] x [row, row+1]`, its center sits at `(col+0.5, row+0.5)`.
//! Rasterization tests pixel centers with plain f64 arithmetic (no
//! transcendentals), so scenes are bit-identical across platforms.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{jaccard, BoundingBox, SizeTier};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Base background color; the generator textures around it, and affine
/// warping samples it outside the source image.
pub const SCENE_BACKGROUND: [f64; 3] = [-0.35, -0.3, -0.25];

/// Texture amplitude around the base background color.
const BACKGROUND_NOISE: f64 = 0.08;

pub const NUM_SHAPE_CLASSES: usize = 3;

/// Saturated color for a hue in [0, 1), mapped into [-1, 1] per channel.
/// Piecewise-linear, so rasterization stays free of transcendentals.
fn hue_color(hue: f64, brightness: f64) -> [f64; 3] {
    let h = (hue.fract() + 1.0).fract() * 6.0;
    let seg = h as usize % 6;
    let f = h - h.floor();
    let (r, g, b) = match seg {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [
        (2.0 * r - 1.0) * brightness,
        (2.0 * g - 1.0) * brightness,
        (2.0 * b - 1.0) * brightness,
    ]
}

/// Tier thresholds on box area relative to the image's smaller side `m`:
/// small below `(0.06 m)^2`, large above `(0.25 m)^2`, medium between.
pub fn size_tier(area: f64, image_min_dim: usize) -> SizeTier {
    let m = image_min_dim as f64;
    if area < (0.06 * m).powi(2) {
        SizeTier::Small
    } else if area > (0.25 * m).powi(2) {
        SizeTier::Large
    } else {
        SizeTier::Medium
    }
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub tier: SizeTier,
}

/// Synthetic image plus ground-truth objects. Image values stay in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ShapeScene {
    pub image: Tensor,
    pub objects: Vec<SceneObject>,
}

impl ShapeScene {
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.image.dims3();
        (h, w)
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Circle,
    Triangle,
    Square,
}

impl ShapeKind {
    fn from_class(class_id: usize) -> Self {
        match class_id {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Triangle,
            _ => ShapeKind::Square,
        }
    }

    /// Inside test at a continuous point for a shape of nominal size `s`
    /// centered at `(cx, cy)`.
    fn contains(&self, cx: f64, cy: f64, s: f64, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= (s / 2.0) * (s / 2.0),
            ShapeKind::Square => dx.abs() <= s / 2.0 && dy.abs() <= s / 2.0,
            ShapeKind::Triangle => {
                // Upward triangle: apex at (cx, cy - h/2), base at cy + h/2.
                let h = 0.9 * s;
                let top = (cx, cy - h / 2.0);
                let left = (cx - s / 2.0, cy + h / 2.0);
                let right = (cx + s / 2.0, cy + h / 2.0);
                let sign = |a: (f64, f64), b: (f64, f64)| {
                    (px - b.0) * (a.1 - b.1) - (a.0 - b.0) * (py - b.1)
                };
                let d1 = sign(top, left);
                let d2 = sign(left, right);
                let d3 = sign(right, top);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Nominal object sizes per intended tier, in pixels, scaled from the
/// image's smaller side. Chosen so an object rendered from one intent never
/// crosses into a smaller tier than intended (keeps margin placement sound).
fn sample_size(rng: &mut ChaCha8Rng, intent: SizeTier, min_dim: usize) -> f64 {
    let m = min_dim as f64;
    let (lo, hi) = match intent {
        SizeTier::Small => (0.038 * m, 0.054 * m),
        SizeTier::Medium => (0.11 * m, 0.20 * m),
        SizeTier::Large => (0.32 * m, 0.40 * m),
    };
    rng.random_range(lo.max(2.2)..hi.max(2.7))
}

/// Renders `n_objects` non-overlapping shapes (pairwise box IoU < 0.1) on a
/// textured background. With probability `edge_bias`, a small-intent object
/// is centered within the outer 20% margin of the image. Deterministic in
/// `(args, seed)`.
pub fn gen_shape_scene(
    h: usize,
    w: usize,
    n_objects: usize,
    seed: u64,
    edge_bias: f64,
) -> Result<ShapeScene> {
    assert!(n_objects >= 1, "n_objects must be at least 1");
    assert!((0.0..=1.0).contains(&edge_bias), "edge_bias must be in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = h.min(w);

    let mut image = Tensor::zeros(&[h, w, 3]);
    for px in image.data_mut().chunks_exact_mut(3) {
        for (v, base) in px.iter_mut().zip(SCENE_BACKGROUND) {
            *v = base + rng.random_range(-BACKGROUND_NOISE..BACKGROUND_NOISE);
        }
    }

    let mut objects: Vec<SceneObject> = Vec::new();
    let hue_base: f64 = rng.random_range(0.0..1.0);
    let mut attempts = 0usize;
    const MAX_ATTEMPTS: usize = 1000;

    while objects.len() < n_objects {
        if attempts >= MAX_ATTEMPTS {
            return Err(Error::PlacementFailed {
                requested: n_objects,
                placed: objects.len(),
                attempts,
            });
        }
        attempts += 1;

        let class_id = rng.random_range(0..NUM_SHAPE_CLASSES);
        let intent = SizeTier::ALL[rng.random_range(0..3)];
        let size = sample_size(&mut rng, intent, min_dim);
        let clearance = size / 2.0 + 1.5;
        let edge_placed = intent == SizeTier::Small && rng.random_bool(edge_bias);

        let (cx, cy) = if edge_placed {
            sample_margin_center(&mut rng, h, w, clearance)
        } else {
            (
                rng.random_range(clearance..w as f64 - clearance),
                rng.random_range(clearance..h as f64 - clearance),
            )
        };

        let kind = ShapeKind::from_class(class_id);
        let mask = rasterize(kind, cx, cy, size, h, w);
        let Some(bbox) = mask_bbox(&mask, h, w) else {
            continue;
        };
        if objects.iter().any(|o| jaccard(&o.bbox, &bbox) >= 0.1) {
            continue;
        }

        // Hues stratified per object, so colors within a scene stay distinct
        // while the full hue range appears across scenes.
        let hue = (hue_base + objects.len() as f64 / n_objects as f64
            + rng.random_range(-0.07..0.07))
        .fract();
        let color = hue_color(hue, rng.random_range(0.75..1.0));
        for (i, &inside) in mask.iter().enumerate() {
            if inside {
                let (r, c) = (i / w, i % w);
                for (ch, &v) in color.iter().enumerate() {
                    image.set3(r, c, ch, v);
                }
            }
        }

        let tier = size_tier(bbox.area(), min_dim);
        objects.push(SceneObject {
            bbox,
            class_id,
            tier,
        });
    }

    Ok(ShapeScene { image, objects })
}

/// Uniform center within the outer 20% band, inset one pixel from the band's
/// inner boundary so the rendered box center stays inside the band.
fn sample_margin_center(rng: &mut ChaCha8Rng, h: usize, w: usize, clearance: f64) -> (f64, f64) {
    let (hf, wf) = (h as f64, w as f64);
    let band_x = 0.2 * wf;
    let band_y = 0.2 * hf;
    // Sides: 0 left, 1 right, 2 top, 3 bottom.
    match rng.random_range(0..4u32) {
        0 => (
            rng.random_range(clearance..(band_x - 1.0).max(clearance + 0.1)),
            rng.random_range(clearance..hf - clearance),
        ),
        1 => (
            rng.random_range((wf - band_x + 1.0).min(wf - clearance - 0.1)..wf - clearance),
            rng.random_range(clearance..hf - clearance),
        ),
        2 => (
            rng.random_range(clearance..wf - clearance),
            rng.random_range(clearance..(band_y - 1.0).max(clearance + 0.1)),
        ),
        _ => (
            rng.random_range(clearance..wf - clearance),
            rng.random_range((hf - band_y + 1.0).min(hf - clearance - 0.1)..hf - clearance),
        ),
    }
}

fn rasterize(kind: ShapeKind, cx: f64, cy: f64, size: f64, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    let reach = size / 2.0 + 1.0;
    let r0 = ((cy - reach).floor().max(0.0)) as usize;
    let r1 = ((cy + reach).ceil().min(h as f64)) as usize;
    let c0 = ((cx - reach).floor().max(0.0)) as usize;
    let c1 = ((cx + reach).ceil().min(w as f64)) as usize;
    for r in r0..r1 {
        for c in c0..c1 {
            if kind.contains(cx, cy, size, c as f64 + 0.5, r as f64 + 0.5) {
                mask[r * w + c] = true;
            }
        }
    }
    mask
}

/// Tight box around the rendered pixels, in continuous pixel-edge
/// coordinates. `None` when nothing rasterized.
fn mask_bbox(mask: &[bool], h: usize, w: usize) -> Option<BoundingBox> {
    let mut min_r = usize::MAX;
    let mut max_r = 0;
    let mut min_c = usize::MAX;
    let mut max_c = 0;
    let mut any = false;
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] {
                any = true;
                min_r = min_r.min(r);
                max_r = max_r.max(r);
                min_c = min_c.min(c);
                max_c = max_c.max(c);
            }
        }
    }
    if !any {
        return None;
    }
    BoundingBox::new(
        min_c as f64,
        min_r as f64,
        (max_c + 1) as f64,
        (max_r + 1) as f64,
    )
    .ok()
}

/// 2x3 affine map from source to destination pixel coordinates:
/// `x' = a11 x + a12 y + tx`, `y' = a21 x + a22 y + ty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a11: f64,
    pub a12: f64,
    pub tx: f64,
    pub a21: f64,
    pub a22: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            a11: 1.0,
            a12: 0.0,
            tx: 0.0,
            a21: 0.0,
            a22: 1.0,
            ty: 0.0,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            tx,
            ty,
            ..AffineTransform::identity()
        }
    }

    /// Scale, then shear, then rotation (degrees), applied about `center`,
    /// followed by translation.
    pub fn from_params(
        scale: f64,
        shear: f64,
        rotation_deg: f64,
        tx: f64,
        ty: f64,
        center: (f64, f64),
    ) -> Self {
        let theta = rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        // R * Sh * S
        let m11 = cos * scale + (-sin) * 0.0;
        let m12 = cos * (shear * scale) - sin * scale;
        let m21 = sin * scale + cos * 0.0;
        let m22 = sin * (shear * scale) + cos * scale;
        let (cx, cy) = center;
        AffineTransform {
            a11: m11,
            a12: m12,
            tx: cx - m11 * cx - m12 * cy + tx,
            a21: m21,
            a22: m22,
            ty: cy - m21 * cx - m22 * cy + ty,
        }
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a11 * x + self.a12 * y + self.tx,
            self.a21 * x + self.a22 * y + self.ty,
        )
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform { det });
        }
        let a11 = self.a22 / det;
        let a12 = -self.a12 / det;
        let a21 = -self.a21 / det;
        let a22 = self.a11 / det;
        Ok(AffineTransform {
            a11,
            a12,
            tx: -(a11 * self.tx + a12 * self.ty),
            a21,
            a22,
            ty: -(a21 * self.tx + a22 * self.ty),
        })
    }
}

/// Axis-aligned hull of a box's four corners under `t`.
pub fn transform_box(t: &AffineTransform, bbox: &BoundingBox) -> BoundingBox {
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (x, y) in bbox.corners() {
        let (tx, ty) = t.apply(x, y);
        min_x = min_x.min(tx);
        min_y = min_y.min(ty);
        max_x = max_x.max(tx);
        max_y = max_y.max(ty);
    }
    BoundingBox {
        x1: min_x,
        y1: min_y,
        x2: max_x,
        y2: max_y,
    }
}

/// Warps a scene by `t`: the image is resampled by inverse mapping with
/// bilinear interpolation (background outside the source), each box becomes
/// the axis-aligned hull of its transformed corners clipped to the image,
/// and objects whose clipped area falls below 25% of the transformed hull
/// area are dropped. Tiers are recomputed from the clipped boxes.
pub fn apply_affine(scene: &ShapeScene, t: &AffineTransform) -> Result<ShapeScene> {
    let inv = t.inverse()?;
    let (h, w, c) = scene.image.dims3();
    let mut image = Tensor::zeros(&[h, w, c]);

    for r in 0..h {
        for col in 0..w {
            let (sx, sy) = inv.apply(col as f64 + 0.5, r as f64 + 0.5);
            for ch in 0..c {
                let v = sample_bilinear(&scene.image, sx, sy, ch);
                image.set3(r, col, ch, v);
            }
        }
    }

    let mut objects = Vec::new();
    for obj in &scene.objects {
        let hull = transform_box(t, &obj.bbox);
        let x1 = hull.x1.max(0.0);
        let y1 = hull.y1.max(0.0);
        let x2 = hull.x2.min(w as f64);
        let y2 = hull.y2.min(h as f64);
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        let clipped = BoundingBox { x1, y1, x2, y2 };
        if clipped.area() < 0.25 * hull.area() {
            continue;
        }
        objects.push(SceneObject {
            bbox: clipped,
            class_id: obj.class_id,
            tier: size_tier(clipped.area(), h.min(w)),
        });
    }

    Ok(ShapeScene { image, objects })
}

/// Bilinear sample at a continuous point; pixel values live at pixel
/// centers, out-of-range neighbors read the background color. Exact for the
/// identity transform.
fn sample_bilinear(image: &Tensor, x: f64, y: f64, ch: usize) -> f64 {
    let (h, w, _) = image.dims3();
    let u = x - 0.5;
    let v = y - 0.5;
    let c0 = u.floor();
    let r0 = v.floor();
    let fx = u - c0;
    let fy = v - r0;
    let fetch = |r: f64, c: f64| -> f64 {
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            SCENE_BACKGROUND[ch.min(2)]
        } else {
            image.at3(r as usize, c as usize, ch)
        }
    };
    let p00 = fetch(r0, c0);
    let p01 = fetch(r0, c0 + 1.0);
    let p10 = fetch(r0 + 1.0, c0);
    let p11 = fetch(r0 + 1.0, c0 + 1.0);
    let top = p00 + fx * (p01 - p00);
    let bottom = p10 + fx * (p11 - p10);
    top + fy * (bottom - top)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_object_scene_is_in_bounds() {
        let scene = gen_shape_scene(64, 64, 1, 0, 0.5).unwrap();
        assert_eq!(scene.objects.len(), 1);
        let b = &scene.objects[0].bbox;
        assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
        assert!(scene.image.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = gen_shape_scene(64, 64, 4, 123, 0.8).unwrap();
        let b = gen_shape_scene(64, 64, 4, 123, 0.8).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.objects.len(), b.objects.len());
        for (oa, ob) in a.objects.iter().zip(&b.objects) {
            assert_eq!(oa.bbox, ob.bbox);
            assert_eq!(oa.class_id, ob.class_id);
            assert_eq!(oa.tier, ob.tier);
        }
    }

    #[test]
    fn full_edge_bias_puts_small_objects_in_margin() {
        for seed in 0..100u64 {
            let scene = gen_shape_scene(64, 64, 3, seed, 1.0).unwrap();
            for obj in &scene.objects {
                if obj.tier == SizeTier::Small {
                    let (cx, cy) = obj.bbox.center();
                    let in_margin =
                        cx < 0.2 * 64.0 || cx > 0.8 * 64.0 || cy < 0.2 * 64.0 || cy > 0.8 * 64.0;
                    assert!(
                        in_margin,
                        "seed {seed}: small object center ({cx:.2}, {cy:.2}) outside margin"
                    );
                }
            }
        }
    }

    #[test]
    fn scene_objects_do_not_overlap() {
        let scene = gen_shape_scene(64, 64, 5, 7, 0.5).unwrap();
        for i in 0..scene.objects.len() {
            for j in i + 1..scene.objects.len() {
                assert!(jaccard(&scene.objects[i].bbox, &scene.objects[j].bbox) < 0.1);
            }
        }
    }

    #[test]
    fn impossible_packing_reports_placement_failure() {
        let err = gen_shape_scene(32, 32, 300, 0, 0.0).unwrap_err();
        assert!(matches!(err, Error::PlacementFailed { .. }));
    }

    #[test]
    fn identity_transform_is_exact() {
        let scene = gen_shape_scene(48, 48, 2, 5, 0.5).unwrap();
        let warped = apply_affine(&scene, &AffineTransform::identity()).unwrap();
        for (a, b) in scene.image.iter().zip(warped.image.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(scene.objects.len(), warped.objects.len());
        for (a, b) in scene.objects.iter().zip(&warped.objects) {
            assert_eq!(a.bbox, b.bbox);
        }
    }

    #[test]
    fn pure_translation_shifts_boxes_exactly() {
        let scene = gen_shape_scene(64, 64, 2, 9, 0.0).unwrap();
        let t = AffineTransform::translation(2.0, 3.0);
        let warped = apply_affine(&scene, &t).unwrap();
        assert_eq!(scene.objects.len(), warped.objects.len());
        for (a, b) in scene.objects.iter().zip(&warped.objects) {
            assert!((b.bbox.x1 - (a.bbox.x1 + 2.0).max(0.0)).abs() < 1e-12);
            assert!((b.bbox.y1 - (a.bbox.y1 + 3.0).max(0.0)).abs() < 1e-12);
            assert!((b.bbox.x2 - (a.bbox.x2 + 2.0).min(64.0)).abs() < 1e-12);
            assert!((b.bbox.y2 - (a.bbox.y2 + 3.0).min(64.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_about_center_matches_corner_hull() {
        // 90-degree rotation about the center of an 8x8 image applied to the
        // box (1, 2, 3, 4): corners rotate to the hull (4, 1, 6, 3).
        let t = AffineTransform::from_params(1.0, 0.0, 90.0, 0.0, 0.0, (4.0, 4.0));
        let b = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let hull = transform_box(&t, &b);
        assert!((hull.x1 - 4.0).abs() < 1e-12);
        assert!((hull.y1 - 1.0).abs() < 1e-12);
        assert!((hull.x2 - 6.0).abs() < 1e-12);
        assert!((hull.y2 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_transform_is_rejected() {
        let t = AffineTransform {
            a11: 1.0,
            a12: 2.0,
            tx: 0.0,
            a21: 0.5,
            a22: 1.0,
            ty: 0.0,
        };
        assert!((t.det()).abs() < 1e-12);
        let scene = gen_shape_scene(32, 32, 1, 0, 0.0).unwrap();
        assert!(matches!(
            apply_affine(&scene, &t),
            Err(Error::SingularTransform { .. })
        ));
    }

    #[test]
    fn size_tier_thresholds() {
        // For a 64-pixel image: small below 14.75, large above 256.
        assert_eq!(size_tier(10.0, 64), SizeTier::Small);
        assert_eq!(size_tier(100.0, 64), SizeTier::Medium);
        assert_eq!(size_tier(300.0, 64), SizeTier::Large);
    }
}
