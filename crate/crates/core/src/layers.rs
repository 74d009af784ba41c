//! Coordinate-aware input layers and the model builder.
//!
//! Three input mechanisms share one downstream architecture:
//! - vanilla: the image goes straight into the convolution stack;
//! - coordemb: two trainable `H x W x 1` embeddings, initialized with the
//!   normalized x/y coordinate grids, are averaged into the image as
//!   `(I + X + Y) / 3` before the unchanged downstream stack;
//! - coordconv: every convolution first concatenates fixed normalized
//!   row/column coordinate channels onto its input.
//!
//! Convention used throughout: x indexes columns, y indexes rows.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::graph::{ActivationOp, Graph, NodeId};
use crate::tensor::Tensor;

/// Maps a grid index to `[-1, 1]` linearly with endpoint attainment:
/// `2 * index / (extent - 1) - 1`, and 0 for the degenerate extent 1.
pub fn normalize_coord(index: usize, extent: usize) -> Result<f64> {
    if index >= extent {
        return Err(Error::CoordIndexOutOfRange { index, extent });
    }
    if extent == 1 {
        return Ok(0.0);
    }
    Ok(2.0 * index as f64 / (extent - 1) as f64 - 1.0)
}

/// Inverse of [`normalize_coord`] on the continuous range.
pub fn denormalize_coord(value: f64, extent: usize) -> f64 {
    if extent == 1 {
        return 0.0;
    }
    (value + 1.0) * (extent - 1) as f64 / 2.0
}

/// Normalized coordinate grids: `x_grid[i][j][0] = normalize_coord(j, W)`
/// varies along columns, `y_grid[i][j][0] = normalize_coord(i, H)` along rows.
pub fn coord_grid(h: usize, w: usize) -> (Tensor, Tensor) {
    let mut x_grid = Tensor::zeros(&[h, w, 1]);
    let mut y_grid = Tensor::zeros(&[h, w, 1]);
    for i in 0..h {
        let yv = normalize_coord(i, h).expect("i < h");
        for j in 0..w {
            let xv = normalize_coord(j, w).expect("j < w");
            x_grid.set3(i, j, 0, xv);
            y_grid.set3(i, j, 0, yv);
        }
    }
    (x_grid, y_grid)
}

/// The coordinate-embedding layer: two trainable `H x W x 1` matrices.
#[derive(Debug, Clone)]
pub struct CoordEmbLayer {
    pub x_embed: Tensor,
    pub y_embed: Tensor,
    height: usize,
    width: usize,
}

impl CoordEmbLayer {
    /// Coordinate-grid initialization; every element lies in `[-1, 1]`.
    pub fn new(height: usize, width: usize) -> Self {
        let (x_embed, y_embed) = coord_grid(height, width);
        CoordEmbLayer {
            x_embed,
            y_embed,
            height,
            width,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of trainable values: `2 * H * W`, independent of the image
    /// channel count.
    pub fn parameter_count(&self) -> usize {
        2 * self.height * self.width
    }

    /// Inserts the embeddings as graph leaves and applies the forward rule.
    /// Returns `(output, x_node, y_node)` so callers can collect gradients.
    pub fn forward(&self, g: &mut Graph, image: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let x_node = g.leaf(self.x_embed.clone());
        let y_node = g.leaf(self.y_embed.clone());
        let out = coord_embed_forward(g, image, x_node, y_node)?;
        Ok((out, x_node, y_node))
    }
}

/// `(I + X + Y) / 3` with X and Y broadcast over the image channels.
/// The averaging keeps the output in `[-1, 1]` whenever all inputs are.
pub fn coord_embed_forward(
    g: &mut Graph,
    image: NodeId,
    x_embed: NodeId,
    y_embed: NodeId,
) -> Result<NodeId> {
    let (h, w, _) = g.value(image).dims3();
    let (eh, ew, _) = g.value(x_embed).dims3();
    if (h, w) != (eh, ew) {
        return Err(Error::ShapeMismatch {
            context: "coord_embed_forward image vs embedding",
            left: g.value(image).shape().to_vec(),
            right: g.value(x_embed).shape().to_vec(),
        });
    }
    let with_x = g.add(image, x_embed)?;
    let with_xy = g.add(with_x, y_embed)?;
    Ok(g.scale(with_xy, 1.0 / 3.0))
}

/// CoordConv layer: fixed normalized coordinate channels concatenated onto
/// the input, followed by an ordinary convolution over `Cin + 2` channels.
#[derive(Debug, Clone)]
pub struct CoordConvLayer {
    /// Normalized row coordinates, `H x W x 1`. Never trained.
    pub i_channel: Tensor,
    /// Normalized column coordinates, `H x W x 1`. Never trained.
    pub j_channel: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Option<ActivationOp>,
}

impl CoordConvLayer {
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let i_node = g.leaf(self.i_channel.clone());
        let j_node = g.leaf(self.j_channel.clone());
        let kernel = g.leaf(self.kernel.clone());
        let bias = g.leaf(self.bias.clone());
        let conv = coord_conv_forward(g, input, i_node, j_node, kernel, self.stride, self.padding)?;
        let mut out = g.bias_add(conv, bias)?;
        if let Some(act) = self.activation {
            out = g.activation(act, out);
        }
        Ok((out, kernel, bias))
    }
}

/// Concatenates the i (row) and j (column) coordinate channels onto `input`
/// and convolves. Gradients reach the kernel; the coordinate channels are
/// constants and are never updated by the optimizer.
pub fn coord_conv_forward(
    g: &mut Graph,
    input: NodeId,
    i_channel: NodeId,
    j_channel: NodeId,
    kernel: NodeId,
    stride: usize,
    padding: Padding,
) -> Result<NodeId> {
    let (h, w, _) = g.value(input).dims3();
    let (ih, iw, _) = g.value(i_channel).dims3();
    if (h, w) != (ih, iw) {
        return Err(Error::ShapeMismatch {
            context: "coord_conv_forward input vs coordinate channels",
            left: g.value(input).shape().to_vec(),
            right: g.value(i_channel).shape().to_vec(),
        });
    }
    let stacked = g.concat_channels(&[input, i_channel, j_channel])?;
    g.conv2d(stacked, kernel, stride, padding)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    CoordEmb,
    CoordConv,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::CoordEmb, Variant::CoordConv];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::CoordEmb => "coordemb",
            Variant::CoordConv => "coordconv",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "coordemb" => Ok(Variant::CoordEmb),
            "coordconv" => Ok(Variant::CoordConv),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// One downstream layer in a [`ModelSpec`].
#[derive(Debug, Clone)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
        activation: Option<ActivationOp>,
    },
    Flatten,
    Dense {
        out: usize,
        activation: Option<ActivationOp>,
    },
}

/// Variant plus the shared downstream layer sequence. The downstream layers
/// describe the vanilla stack; `build_model` applies the variant's input
/// mechanism without altering that sequence.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Option<ActivationOp>,
}

impl ConvLayer {
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let kernel = g.leaf(self.kernel.clone());
        let bias = g.leaf(self.bias.clone());
        let conv = g.conv2d(input, kernel, self.stride, self.padding)?;
        let mut out = g.bias_add(conv, bias)?;
        if let Some(act) = self.activation {
            out = g.activation(act, out);
        }
        Ok((out, kernel, bias))
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Option<ActivationOp>,
}

#[derive(Debug, Clone)]
pub enum ModelLayer {
    CoordEmb(CoordEmbLayer),
    Conv(ConvLayer),
    CoordConv(CoordConvLayer),
    Flatten,
    Dense(DenseLayer),
}

/// A parameterized model: the variant's input mechanism followed by the
/// shared downstream stack. Parameter enumeration order is stable, and
/// downstream parameter names are independent of the variant.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    layers: Vec<ModelLayer>,
}

fn uniform_kernel(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Builds a model from its spec with deterministic, seeded initialization.
///
/// Kernels and dense weights draw from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// in layer order; biases start at zero; coordinate embeddings start from
/// the coordinate grid and consume no randomness, so a vanilla and a
/// coordemb model built from the same seed have bit-identical downstream
/// parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let (mut h, mut w, mut c) = (spec.input_h, spec.input_w, spec.input_c);
    let mut flat: Option<usize> = None;

    if spec.variant == Variant::CoordEmb {
        layers.push(ModelLayer::CoordEmb(CoordEmbLayer::new(h, w)));
    }

    for (idx, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv {
                kernel,
                out_channels,
                stride,
                padding,
                activation,
            } => {
                if flat.is_some() {
                    return Err(Error::Config(format!(
                        "layer {idx}: convolution after flatten"
                    )));
                }
                let k = *kernel;
                let geom = crate::conv::conv_geometry(h, w, k, *stride, *padding)?;
                if spec.variant == Variant::CoordConv {
                    let (x_grid, y_grid) = coord_grid(h, w);
                    let fan_in = k * k * (c + 2);
                    let kernel_t = uniform_kernel(&mut rng, &[k, k, c + 2, *out_channels], fan_in);
                    layers.push(ModelLayer::CoordConv(CoordConvLayer {
                        i_channel: y_grid,
                        j_channel: x_grid,
                        kernel: kernel_t,
                        bias: Tensor::zeros(&[*out_channels]),
                        stride: *stride,
                        padding: *padding,
                        activation: *activation,
                    }));
                } else {
                    let fan_in = k * k * c;
                    let kernel_t = uniform_kernel(&mut rng, &[k, k, c, *out_channels], fan_in);
                    layers.push(ModelLayer::Conv(ConvLayer {
                        kernel: kernel_t,
                        bias: Tensor::zeros(&[*out_channels]),
                        stride: *stride,
                        padding: *padding,
                        activation: *activation,
                    }));
                }
                h = geom.out_h;
                w = geom.out_w;
                c = *out_channels;
            }
            LayerSpec::Flatten => {
                flat = Some(h * w * c);
                layers.push(ModelLayer::Flatten);
            }
            LayerSpec::Dense { out, activation } => {
                let n = flat.ok_or_else(|| {
                    Error::Config(format!("layer {idx}: dense before flatten"))
                })?;
                let weight = uniform_kernel(&mut rng, &[n, *out], n);
                layers.push(ModelLayer::Dense(DenseLayer {
                    weight,
                    bias: Tensor::zeros(&[*out]),
                    activation: *activation,
                }));
                flat = Some(*out);
            }
        }
    }

    Ok(Model {
        variant: spec.variant,
        input_h: spec.input_h,
        input_w: spec.input_w,
        input_c: spec.input_c,
        layers,
    })
}

impl Model {
    pub fn layers(&self) -> &[ModelLayer] {
        &self.layers
    }

    /// Stable `(name, tensor)` enumeration. Downstream layers are numbered by
    /// their position in the shared sequence, so names agree across variants.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let mut downstream = 0usize;
        for layer in &self.layers {
            match layer {
                ModelLayer::CoordEmb(l) => {
                    out.push(("coordemb/x".to_string(), &l.x_embed));
                    out.push(("coordemb/y".to_string(), &l.y_embed));
                }
                ModelLayer::Conv(l) => {
                    out.push((format!("layer{downstream}/kernel"), &l.kernel));
                    out.push((format!("layer{downstream}/bias"), &l.bias));
                    downstream += 1;
                }
                ModelLayer::CoordConv(l) => {
                    out.push((format!("layer{downstream}/kernel"), &l.kernel));
                    out.push((format!("layer{downstream}/bias"), &l.bias));
                    downstream += 1;
                }
                ModelLayer::Dense(l) => {
                    out.push((format!("layer{downstream}/weight"), &l.weight));
                    out.push((format!("layer{downstream}/bias"), &l.bias));
                    downstream += 1;
                }
                ModelLayer::Flatten => {
                    downstream += 1;
                }
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let mut downstream = 0usize;
        for layer in &mut self.layers {
            match layer {
                ModelLayer::CoordEmb(l) => {
                    out.push(("coordemb/x".to_string(), &mut l.x_embed));
                    out.push(("coordemb/y".to_string(), &mut l.y_embed));
                }
                ModelLayer::Conv(l) => {
                    out.push((format!("layer{downstream}/kernel"), &mut l.kernel));
                    out.push((format!("layer{downstream}/bias"), &mut l.bias));
                    downstream += 1;
                }
                ModelLayer::CoordConv(l) => {
                    out.push((format!("layer{downstream}/kernel"), &mut l.kernel));
                    out.push((format!("layer{downstream}/bias"), &mut l.bias));
                    downstream += 1;
                }
                ModelLayer::Dense(l) => {
                    out.push((format!("layer{downstream}/weight"), &mut l.weight));
                    out.push((format!("layer{downstream}/bias"), &mut l.bias));
                    downstream += 1;
                }
                ModelLayer::Flatten => {
                    downstream += 1;
                }
            }
        }
        out
    }

    /// Forward pass on a fresh graph segment. Returns the output node and the
    /// parameter nodes in `parameters()` order.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let (outputs, params) = self.forward_layers(g, input)?;
        let last = outputs.last().copied().unwrap_or(input);
        Ok((last, params))
    }

    /// Like [`Model::forward`] but returns one output node per downstream
    /// layer (the variant's input mechanism is applied before the first
    /// entry), so callers can tap intermediate feature maps.
    pub fn forward_layers(
        &self,
        g: &mut Graph,
        input: NodeId,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let mut x = input;
        let mut param_nodes = Vec::new();
        let mut outputs = Vec::new();
        for layer in &self.layers {
            match layer {
                ModelLayer::CoordEmb(l) => {
                    let (out, xn, yn) = l.forward(g, x)?;
                    param_nodes.push(xn);
                    param_nodes.push(yn);
                    x = out;
                }
                ModelLayer::Conv(l) => {
                    let (out, k, b) = l.forward(g, x)?;
                    param_nodes.push(k);
                    param_nodes.push(b);
                    x = out;
                    outputs.push(x);
                }
                ModelLayer::CoordConv(l) => {
                    let (out, k, b) = l.forward(g, x)?;
                    param_nodes.push(k);
                    param_nodes.push(b);
                    x = out;
                    outputs.push(x);
                }
                ModelLayer::Flatten => {
                    let n = g.value(x).len();
                    x = g.reshape(x, &[n])?;
                    outputs.push(x);
                }
                ModelLayer::Dense(l) => {
                    let weight = g.leaf(l.weight.clone());
                    let bias = g.leaf(l.bias.clone());
                    let mv = g.matvec(x, weight)?;
                    let mut out = g.add(mv, bias)?;
                    if let Some(act) = l.activation {
                        out = g.activation(act, out);
                    }
                    param_nodes.push(weight);
                    param_nodes.push(bias);
                    x = out;
                    outputs.push(x);
                }
            }
        }
        Ok((outputs, param_nodes))
    }

    /// Convenience inference: runs the forward pass and returns the output
    /// tensor.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let (out, _) = self.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_coord_endpoints_and_midpoint() {
        assert_eq!(normalize_coord(0, 5).unwrap(), -1.0);
        assert_eq!(normalize_coord(2, 5).unwrap(), 0.0);
        assert_eq!(normalize_coord(3, 5).unwrap(), 0.5);
        assert_eq!(normalize_coord(4, 5).unwrap(), 1.0);
        assert_eq!(normalize_coord(0, 1).unwrap(), 0.0);
        assert!(matches!(
            normalize_coord(5, 5),
            Err(Error::CoordIndexOutOfRange { .. })
        ));
    }

    #[test]
    fn normalize_coord_is_monotone() {
        for extent in 2..10 {
            let vals: Vec<f64> = (0..extent)
                .map(|i| normalize_coord(i, extent).unwrap())
                .collect();
            assert!(vals.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(vals[0], -1.0);
            assert_eq!(*vals.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn denormalize_inverts_normalize_on_grid_points() {
        for extent in 1..12 {
            for i in 0..extent {
                let v = normalize_coord(i, extent).unwrap();
                assert!((denormalize_coord(v, extent) - i as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coord_grid_row_of_three() {
        let (x, y) = coord_grid(1, 3);
        assert_eq!(x.data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn coord_grid_two_by_two() {
        let (x, y) = coord_grid(2, 2);
        assert_eq!(x.data(), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(y.data(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn coord_grid_single_cell() {
        let (x, y) = coord_grid(1, 1);
        assert_eq!(x.data(), &[0.0]);
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn coord_embed_zero_case_and_fixed_point() {
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[2, 2, 1]));
        let x = g.leaf(Tensor::zeros(&[2, 2, 1]));
        let y = g.leaf(Tensor::zeros(&[2, 2, 1]));
        let out = coord_embed_forward(&mut g, img, x, y).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let img = g.leaf(Tensor::filled(&[2, 2, 1], 1.0));
        let x = g.leaf(Tensor::filled(&[2, 2, 1], 1.0));
        let y = g.leaf(Tensor::filled(&[2, 2, 1], 1.0));
        let out = coord_embed_forward(&mut g, img, x, y).unwrap();
        for &v in g.value(out).iter() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn coord_embed_hand_example_on_grid_init() {
        // 2x2 image of zeros with coordinate-grid embeddings:
        // out[0][0] = (0 - 1 - 1)/3, out[1][1] = (0 + 1 + 1)/3.
        let layer = CoordEmbLayer::new(2, 2);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[2, 2, 1]));
        let (out, _, _) = layer.forward(&mut g, img).unwrap();
        let o = g.value(out);
        assert!((o.at3(0, 0, 0) - (-2.0 / 3.0)).abs() < 1e-15);
        assert!((o.at3(1, 1, 0) - (2.0 / 3.0)).abs() < 1e-15);
        assert!((o.at3(0, 1, 0) - 0.0).abs() < 1e-15);
        assert!((o.at3(1, 0, 0) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn coord_embed_rejects_spatial_mismatch() {
        let layer = CoordEmbLayer::new(2, 2);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[3, 2, 1]));
        assert!(matches!(
            layer.forward(&mut g, img),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn coord_embed_stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = rng.random_range(1..6usize);
            let w = rng.random_range(1..6usize);
            let c = rng.random_range(1..4usize);
            let img = {
                let n = h * w * c;
                let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(vec![h, w, c], data).unwrap()
            };
            let layer = CoordEmbLayer::new(h, w);
            let mut g = Graph::new();
            let img_n = g.leaf(img);
            let (out, _, _) = layer.forward(&mut g, img_n).unwrap();
            assert!(g.value(out).iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn coord_conv_concatenates_two_channels() {
        let mut g = Graph::new();
        let input = g.leaf(Tensor::zeros(&[4, 4, 3]));
        let (xg, yg) = coord_grid(4, 4);
        let i_ch = g.leaf(yg);
        let j_ch = g.leaf(xg);
        let stacked = g.concat_channels(&[input, i_ch, j_ch]).unwrap();
        assert_eq!(g.value(stacked).shape(), &[4, 4, 5]);
    }

    #[test]
    fn coord_conv_zero_kernel_gives_zero_output() {
        let mut g = Graph::new();
        let input = g.leaf(Tensor::filled(&[3, 3, 2], 0.7));
        let (xg, yg) = coord_grid(3, 3);
        let i_ch = g.leaf(yg);
        let j_ch = g.leaf(xg);
        let kernel = g.leaf(Tensor::zeros(&[3, 3, 4, 2]));
        let out = coord_conv_forward(&mut g, input, i_ch, j_ch, kernel, 1, Padding::Same).unwrap();
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coord_conv_selector_kernel_extracts_row_grid() {
        // 1x1 kernel with weight 1 on the i-coordinate channel only.
        let mut g = Graph::new();
        let input = g.leaf(Tensor::filled(&[3, 4, 1], 0.5));
        let (xg, yg) = coord_grid(3, 4);
        let i_ch = g.leaf(yg.clone());
        let j_ch = g.leaf(xg);
        // Channels after concat: [input, i, j] -> select index 1.
        let mut k = Tensor::zeros(&[1, 1, 3, 1]);
        k.data_mut()[1] = 1.0;
        let kn = g.leaf(k);
        let out = coord_conv_forward(&mut g, input, i_ch, j_ch, kn, 1, Padding::Same).unwrap();
        assert_eq!(g.value(out).data(), yg.data());
    }

    fn toy_spec(variant: Variant) -> ModelSpec {
        ModelSpec {
            variant,
            input_h: 8,
            input_w: 8,
            input_c: 2,
            layers: vec![
                LayerSpec::Conv {
                    kernel: 3,
                    out_channels: 4,
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
            ],
        }
    }

    #[test]
    fn build_model_is_deterministic() {
        let spec = toy_spec(Variant::Vanilla);
        let a = build_model(&spec, 42).unwrap();
        let b = build_model(&spec, 42).unwrap();
        for ((na, ta), (nb, tb)) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn vanilla_and_coordemb_share_downstream_parameters() {
        let vanilla = build_model(&toy_spec(Variant::Vanilla), 9).unwrap();
        let coordemb = build_model(&toy_spec(Variant::CoordEmb), 9).unwrap();
        let vp = vanilla.parameters();
        let cp: Vec<_> = coordemb
            .parameters()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("coordemb/"))
            .collect();
        assert_eq!(vp.len(), cp.len());
        for ((na, ta), (nb, tb)) in vp.iter().zip(cp.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn coordemb_adds_exactly_two_hw_parameters() {
        for hw in [8usize, 16, 32] {
            let mut spec = toy_spec(Variant::Vanilla);
            spec.input_h = hw;
            spec.input_w = hw;
            let vanilla = build_model(&spec, 0).unwrap();
            spec.variant = Variant::CoordEmb;
            let coordemb = build_model(&spec, 0).unwrap();
            let count = |m: &Model| -> usize {
                m.parameters().iter().map(|(_, t)| t.len()).sum()
            };
            assert_eq!(count(&coordemb) - count(&vanilla), 2 * hw * hw);
        }
    }

    #[test]
    fn coordemb_layer_is_first_and_unique() {
        let m = build_model(&toy_spec(Variant::CoordEmb), 5).unwrap();
        assert!(matches!(m.layers()[0], ModelLayer::CoordEmb(_)));
        let n_emb = m
            .layers()
            .iter()
            .filter(|l| matches!(l, ModelLayer::CoordEmb(_)))
            .count();
        assert_eq!(n_emb, 1);
    }

    #[test]
    fn dense_before_flatten_is_rejected() {
        let spec = ModelSpec {
            variant: Variant::Vanilla,
            input_h: 4,
            input_w: 4,
            input_c: 1,
            layers: vec![LayerSpec::Dense {
                out: 2,
                activation: None,
            }],
        };
        assert!(build_model(&spec, 0).is_err());
    }

    #[test]
    fn translation_sensitivity_of_coordemb_vs_vanilla_conv() {
        // Shifting the input by one pixel shifts a same-padded convolution's
        // interior outputs, but not the coordinate-embedding output.
        let h = 6;
        let w = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = {
            let data = (0..h * w).map(|_| rng.random_range(-0.5..0.5)).collect();
            Tensor::new(vec![h, w, 1], data).unwrap()
        };
        // Shift right by one column, zero-filling the first.
        let mut shifted = Tensor::zeros(&[h, w, 1]);
        for r in 0..h {
            for c in 1..w {
                shifted.set3(r, c, 0, img.at3(r, c - 1, 0));
            }
        }

        // Vanilla convolution: interior outputs translate exactly.
        let kernel = {
            let data = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![3, 3, 1, 1], data).unwrap()
        };
        let conv = |input: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let x = g.leaf(input.clone());
            let k = g.leaf(kernel.clone());
            let y = g.conv2d(x, k, 1, Padding::Same).unwrap();
            g.value(y).clone()
        };
        let base = conv(&img);
        let moved = conv(&shifted);
        for r in 1..h - 1 {
            for c in 2..w - 1 {
                assert!(
                    (moved.at3(r, c, 0) - base.at3(r, c - 1, 0)).abs() < 1e-12,
                    "vanilla conv interior must translate"
                );
            }
        }

        // CoordEmb at grid initialization: translation does not commute.
        let layer = CoordEmbLayer::new(h, w);
        let emb = |input: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let x = g.leaf(input.clone());
            let (out, _, _) = layer.forward(&mut g, x).unwrap();
            g.value(out).clone()
        };
        let base_e = emb(&img);
        let moved_e = emb(&shifted);
        let mut any_differs = false;
        for r in 1..h - 1 {
            for c in 2..w - 1 {
                if (moved_e.at3(r, c, 0) - base_e.at3(r, c - 1, 0)).abs() > 1e-9 {
                    any_differs = true;
                }
            }
        }
        assert!(any_differs, "coordemb output must not merely translate");
    }

    #[test]
    fn coordemb_gradients_are_not_identically_zero() {
        let spec = toy_spec(Variant::CoordEmb);
        let model = build_model(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = {
            let data = (0..8 * 8 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![8, 8, 2], data).unwrap()
        };
        let mut g = Graph::new();
        let x = g.leaf(img);
        let (out, params) = model.forward(&mut g, x).unwrap();
        let target = Tensor::filled(g.value(out).shape(), 0.3);
        let loss = g.mse(out, &target).unwrap();
        let grads = g.backward(loss).unwrap();
        let names: Vec<String> = model.parameters().iter().map(|(n, _)| n.clone()).collect();
        for (name, node) in names.iter().zip(&params) {
            if name.starts_with("coordemb/") {
                assert!(
                    grads.wrt(*node).iter().any(|&v| v != 0.0),
                    "{name} gradient must not be identically zero"
                );
            }
        }
    }
}
