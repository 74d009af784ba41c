//! Supervised coordinate classification and regression diagnostics.
//!
//! Classification: the model receives a normalized coordinate pair and must
//! put softmax mass on the matching pixel among `H * W` positions.
//! Regression runs the reverse direction: a one-hot image in, a normalized
//! coordinate pair out. A translation-invariant stack cannot solve the
//! classification direction on held-out coordinates; that failure is the
//! diagnostic.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::graph::ActivationOp;
use crate::layers::{denormalize_coord, normalize_coord, LayerSpec, ModelSpec, Variant};
use crate::tensor::Tensor;

/// One diagnostic sample: a grid coordinate, its one-hot image, and its flat
/// class index `row * W + col`.
#[derive(Debug, Clone)]
pub struct CoordTaskSample {
    pub row: usize,
    pub col: usize,
    pub class_index: usize,
    pub onehot_image: Tensor,
}

impl CoordTaskSample {
    pub fn new(row: usize, col: usize, h: usize, w: usize) -> Self {
        let mut onehot_image = Tensor::zeros(&[h, w, 1]);
        onehot_image.set3(row, col, 0, 1.0);
        CoordTaskSample {
            row,
            col,
            class_index: row * w + col,
            onehot_image,
        }
    }

    /// Normalized `(x, y)` of the coordinate; x indexes columns.
    pub fn normalized(&self, h: usize, w: usize) -> (f64, f64) {
        (
            normalize_coord(self.col, w).expect("col < w"),
            normalize_coord(self.row, h).expect("row < h"),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Seeded shuffle, 75% train / 25% test.
    Uniform,
    /// Train on everything except the bottom-right quadrant
    /// (`row >= H/2 && col >= W/2`), which becomes the test set.
    Quadrant,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SplitKind::Uniform),
            "quadrant" => Ok(SplitKind::Quadrant),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Partitions all `H * W` coordinates into disjoint train/test sets that
/// jointly cover the grid.
pub fn gen_coord_dataset(
    h: usize,
    w: usize,
    split: SplitKind,
    seed: u64,
) -> Result<(Vec<CoordTaskSample>, Vec<CoordTaskSample>)> {
    if h * w < 4 {
        return Err(Error::GridTooSmall { h, w });
    }
    match split {
        SplitKind::Uniform => {
            let mut coords: Vec<(usize, usize)> = (0..h)
                .flat_map(|r| (0..w).map(move |c| (r, c)))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            coords.shuffle(&mut rng);
            let n_train = (coords.len() * 3) / 4;
            let make = |cs: &[(usize, usize)]| {
                cs.iter()
                    .map(|&(r, c)| CoordTaskSample::new(r, c, h, w))
                    .collect::<Vec<_>>()
            };
            Ok((make(&coords[..n_train]), make(&coords[n_train..])))
        }
        SplitKind::Quadrant => {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    // row >= H/2 and col >= W/2 under real division.
                    if 2 * r >= h && 2 * c >= w {
                        test.push(CoordTaskSample::new(r, c, h, w));
                    } else {
                        train.push(CoordTaskSample::new(r, c, h, w));
                    }
                }
            }
            Ok((train, test))
        }
    }
}

/// Tiles the sample's normalized coordinate pair into an `H x W x 2` input:
/// every pixel carries the same `(x, y)` target so only coordinate-aware
/// layers can tell positions apart.
pub fn coord_input_tile(sample: &CoordTaskSample, h: usize, w: usize) -> Tensor {
    let (x, y) = sample.normalized(h, w);
    let mut t = Tensor::zeros(&[h, w, 2]);
    for px in t.data_mut().chunks_exact_mut(2) {
        px[0] = x;
        px[1] = y;
    }
    t
}

/// Fraction of test samples whose argmax logit is the true class index,
/// ties broken toward the lowest index.
pub fn coord_classification_eval(
    mut predict: impl FnMut(&CoordTaskSample) -> Vec<f64>,
    test: &[CoordTaskSample],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut correct = 0usize;
    for sample in test {
        let logits = predict(sample);
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if best == sample.class_index {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean Euclidean error in pixels between predicted and true coordinates.
/// Predictions are normalized `(x, y)` pairs; they are de-normalized through
/// the inverse of the coordinate mapping before measuring.
pub fn coord_regression_eval(
    mut predict: impl FnMut(&CoordTaskSample) -> (f64, f64),
    test: &[CoordTaskSample],
    h: usize,
    w: usize,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut total = 0.0;
    for sample in test {
        let (px, py) = predict(sample);
        let x = denormalize_coord(px, w);
        let y = denormalize_coord(py, h);
        let dx = x - sample.col as f64;
        let dy = y - sample.row as f64;
        total += (dx * dx + dy * dy).sqrt();
    }
    Ok(total / test.len() as f64)
}

/// Downstream stack for the classification diagnostic. A single 3x3 layer
/// followed by 1x1 layers keeps the vanilla receptive field at 3 pixels, so
/// its translation invariance is airtight away from borders; the output is
/// one logit map flattened to `H * W` classes.
pub fn coord_classification_spec(h: usize, w: usize, variant: Variant) -> ModelSpec {
    ModelSpec {
        variant,
        input_h: h,
        input_w: w,
        input_c: 2,
        layers: vec![
            LayerSpec::Conv {
                kernel: 3,
                out_channels: 24,
                stride: 1,
                padding: Padding::Same,
                activation: Some(ActivationOp::Relu),
            },
            LayerSpec::Conv {
                kernel: 1,
                out_channels: 24,
                stride: 1,
                padding: Padding::Same,
                activation: Some(ActivationOp::Relu),
            },
            LayerSpec::Conv {
                kernel: 1,
                out_channels: 1,
                stride: 1,
                padding: Padding::Same,
                activation: None,
            },
            LayerSpec::Flatten,
        ],
    }
}

/// Downstream stack for the regression diagnostic: strided convolutions and
/// a dense head emitting the normalized `(x, y)` pair.
pub fn coord_regression_spec(h: usize, w: usize, variant: Variant) -> ModelSpec {
    ModelSpec {
        variant,
        input_h: h,
        input_w: w,
        input_c: 1,
        layers: vec![
            LayerSpec::Conv {
                kernel: 3,
                out_channels: 8,
                stride: 2,
                padding: Padding::Same,
                activation: Some(ActivationOp::Relu),
            },
            LayerSpec::Conv {
                kernel: 3,
                out_channels: 16,
                stride: 2,
                padding: Padding::Same,
                activation: Some(ActivationOp::Relu),
            },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                out: 2,
                activation: None,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_split_on_2x2() {
        let (train, test) = gen_coord_dataset(2, 2, SplitKind::Quadrant, 0).unwrap();
        let t: Vec<(usize, usize)> = test.iter().map(|s| (s.row, s.col)).collect();
        assert_eq!(t, vec![(1, 1)]);
        let tr: Vec<(usize, usize)> = train.iter().map(|s| (s.row, s.col)).collect();
        assert_eq!(tr, vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn splits_partition_the_grid() {
        for h in 4..=16usize {
            for &split in &[SplitKind::Uniform, SplitKind::Quadrant] {
                let (train, test) = gen_coord_dataset(h, h, split, 3).unwrap();
                assert_eq!(train.len() + test.len(), h * h);
                let mut seen = vec![false; h * h];
                for s in train.iter().chain(&test) {
                    assert!(!seen[s.class_index], "duplicate coordinate");
                    seen[s.class_index] = true;
                }
                assert!(seen.iter().all(|&b| b));
            }
        }
    }

    #[test]
    fn uniform_split_is_deterministic() {
        let (a_train, a_test) = gen_coord_dataset(8, 8, SplitKind::Uniform, 42).unwrap();
        let (b_train, b_test) = gen_coord_dataset(8, 8, SplitKind::Uniform, 42).unwrap();
        let key = |v: &[CoordTaskSample]| v.iter().map(|s| s.class_index).collect::<Vec<_>>();
        assert_eq!(key(&a_train), key(&b_train));
        assert_eq!(key(&a_test), key(&b_test));
    }

    #[test]
    fn tiny_grid_is_rejected() {
        assert!(matches!(
            gen_coord_dataset(1, 3, SplitKind::Uniform, 0),
            Err(Error::GridTooSmall { .. })
        ));
    }

    #[test]
    fn onehot_image_has_exactly_one_hot_pixel() {
        let s = CoordTaskSample::new(2, 5, 8, 8);
        assert_eq!(s.onehot_image.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(s.onehot_image.at3(2, 5, 0), 1.0);
        assert_eq!(s.class_index, 2 * 8 + 5);
    }

    #[test]
    fn oracle_classifier_scores_one() {
        let (_, test) = gen_coord_dataset(4, 4, SplitKind::Quadrant, 0).unwrap();
        let acc = coord_classification_eval(
            |s| {
                let mut logits = vec![0.0; 16];
                logits[s.class_index] = 1.0;
                logits
            },
            &test,
        )
        .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn constant_logits_break_ties_toward_lowest_index() {
        // All-equal logits always pick class 0; only the (0, 0) sample can be
        // counted correct.
        let test: Vec<CoordTaskSample> = (0..8)
            .flat_map(|r| (0..8).map(move |c| CoordTaskSample::new(r, c, 8, 8)))
            .collect();
        let acc = coord_classification_eval(|_| vec![1.0; 64], &test).unwrap();
        assert!((acc - 1.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn empty_test_set_is_an_error_not_zero() {
        assert!(matches!(
            coord_classification_eval(|_| vec![1.0], &[]),
            Err(Error::EmptyTestSet)
        ));
        assert!(matches!(
            coord_regression_eval(|_| (0.0, 0.0), &[], 4, 4),
            Err(Error::EmptyTestSet)
        ));
    }

    #[test]
    fn perfect_regressor_scores_zero() {
        let (_, test) = gen_coord_dataset(5, 5, SplitKind::Quadrant, 0).unwrap();
        let err = coord_regression_eval(
            |s| s.normalized(5, 5),
            &test,
            5,
            5,
        )
        .unwrap();
        assert!(err.abs() < 1e-12);
    }

    #[test]
    fn center_prediction_on_corner_sample_is_sqrt_two() {
        // 3x3 grid, test = {(0, 0)}, constant prediction at the center (1, 1).
        let test = vec![CoordTaskSample::new(0, 0, 3, 3)];
        let err = coord_regression_eval(|_| (0.0, 0.0), &test, 3, 3).unwrap();
        assert!((err - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tiled_input_carries_the_normalized_pair_everywhere() {
        let s = CoordTaskSample::new(0, 3, 4, 4);
        let t = coord_input_tile(&s, 4, 4);
        assert_eq!(t.shape(), &[4, 4, 2]);
        for px in t.data().chunks_exact(2) {
            assert_eq!(px[0], 1.0); // col 3 of 4 -> +1
            assert_eq!(px[1], -1.0); // row 0 of 4 -> -1
        }
    }
}
