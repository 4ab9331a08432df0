//! Residual ReLU feedforward network.
//!
//! The network maps an input `z` to an output `y` through
//!
//! ```text
//! z2      = W1 z + b1
//! h       = Wk g(z_in) + bk             (per residual block)
//! z_out   = z_in + Wk+1 g(h) + bk+1
//! y       = WK zK + bK
//! ```
//!
//! with `g(v) = max(0, v)` applied element-wise. Each block is pre-activated
//! and its skip connection spans two hidden layers. Skips can be switched off
//! per network, which turns a block into two plain ReLU layers.
//!
//! All evaluation is batched: rows of the input matrix are samples. The
//! single-sample entry points wrap a one-row batch.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Layer widths of a residual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_residual_blocks: usize,
    pub output_dim: usize,
    /// Whether residual blocks add their input to their output.
    #[serde(default = "default_true")]
    pub residual: bool,
}

fn default_true() -> bool {
    true
}

impl NetShape {
    pub fn new(input_dim: usize, hidden_dim: usize, num_residual_blocks: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_residual_blocks,
            output_dim,
            residual: true,
        }
    }

    pub fn without_residual(mut self) -> Self {
        self.residual = false;
        self
    }

    /// Total number of linear layers, `2 * blocks + 2`.
    pub fn num_layers(&self) -> usize {
        2 * self.num_residual_blocks + 2
    }

    /// `(rows, cols)` of every weight matrix in layer order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers());
        dims.push((self.hidden_dim, self.input_dim));
        for _ in 0..2 * self.num_residual_blocks {
            dims.push((self.hidden_dim, self.hidden_dim));
        }
        dims.push((self.output_dim, self.hidden_dim));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(r, c)| r * c + r).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Weight matrix and bias vector of one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    /// `input * W^T + b` for a batch of row vectors.
    fn apply(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = input.dot(&self.weight.t());
        out += &self.bias;
        out
    }
}

/// All trainable weights of a residual network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    shape: NetShape,
    layers: Vec<Layer>,
}

/// Intermediate states retained by a forward pass.
///
/// `states[0]` is the first-layer output `z2`. Block `i` contributes its
/// hidden pre-activation at `states[2i + 1]` and its output at
/// `states[2i + 2]`. The final linear layer reads the last state.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    pub states: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Gradients mirroring a [`ParamSet`], plus the gradient w.r.t. the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
    pub d_input: Array2<f64>,
}

fn relu(v: &Array2<f64>) -> Array2<f64> {
    v.mapv(|x| if x > 0.0 { x } else { 0.0 })
}

/// Zeroes `grad` wherever the pre-activation is not strictly positive.
fn relu_mask(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

impl ParamSet {
    /// All-zero parameters.
    pub fn zeros(shape: NetShape) -> Self {
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(r, c)| Layer::zeros(r, c))
            .collect();
        Self { shape, layers }
    }

    pub fn from_layers(shape: NetShape, layers: Vec<Layer>) -> Result<Self> {
        shape.validate()?;
        let dims = shape.layer_dims();
        check_dim("layer count", dims.len(), layers.len())?;
        for ((rows, cols), layer) in dims.iter().zip(&layers) {
            check_dim("weight rows", *rows, layer.weight.nrows())?;
            check_dim("weight cols", *cols, layer.weight.ncols())?;
            check_dim("bias length", *rows, layer.bias.len())?;
        }
        Ok(Self { shape, layers })
    }

    /// He initialization: weights ~ N(0, 2 / fan_in), biases zero.
    pub fn init_he(shape: NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_he_with(shape, &mut rng)
    }

    pub fn init_he_with<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let mut params = Self::zeros(shape);
        for layer in &mut params.layers {
            let std = (2.0 / layer.weight.ncols() as f64).sqrt();
            for w in layer.weight.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *w = std * n;
            }
        }
        params
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.shape.num_params()
    }

    /// Sum of squares of every weight and bias.
    pub fn l2_penalty(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum()
    }

    /// Forward pass for one input vector.
    pub fn forward(&self, z: &[f64]) -> Result<ForwardTrace> {
        let input = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        self.forward_batch(input)
    }

    /// Scalar output for one input vector.
    pub fn evaluate(&self, z: &[f64]) -> Result<f64> {
        check_dim("network output", 1, self.shape.output_dim)?;
        Ok(self.forward(z)?.output[[0, 0]])
    }

    /// Forward pass for a batch of inputs, one sample per row.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<ForwardTrace> {
        check_dim("network input", self.shape.input_dim, input.ncols())?;
        let blocks = self.shape.num_residual_blocks;
        let mut states = Vec::with_capacity(2 * blocks + 1);
        states.push(self.layers[0].apply(&input));
        for block in 0..blocks {
            let z_in = &states[2 * block];
            let hidden = self.layers[1 + 2 * block].apply(&relu(z_in).view());
            let mut out = self.layers[2 + 2 * block].apply(&relu(&hidden).view());
            if self.shape.residual {
                out += z_in;
            }
            states.push(hidden);
            states.push(out);
        }
        let output = self.layers[self.layers.len() - 1].apply(&states[2 * blocks].view());
        Ok(ForwardTrace {
            input: input.to_owned(),
            states,
            output,
        })
    }

    /// Outputs only, without keeping intermediate states.
    pub fn predict_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("network input", self.shape.input_dim, input.ncols())?;
        let blocks = self.shape.num_residual_blocks;
        let mut state = self.layers[0].apply(&input);
        for block in 0..blocks {
            let hidden = self.layers[1 + 2 * block].apply(&relu(&state).view());
            let out = self.layers[2 + 2 * block].apply(&relu(&hidden).view());
            if self.shape.residual {
                state += &out;
            } else {
                state = out;
            }
        }
        Ok(self.layers[self.layers.len() - 1].apply(&state.view()))
    }

    /// Reverse-mode gradients of `sum(upstream ⊙ output)` for a single sample.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<GradientSet> {
        let up =
            ArrayView2::from_shape((1, upstream.len()), upstream).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        self.backward_batch(trace, up)
    }

    /// Reverse-mode gradients of `sum(upstream ⊙ output)` over a batch.
    ///
    /// Parameter gradients are summed over rows; `d_input` keeps one row per
    /// sample. The ReLU derivative at exactly zero is taken as zero.
    pub fn backward_batch(&self, trace: &ForwardTrace, upstream: ArrayView2<f64>) -> Result<GradientSet> {
        let blocks = self.shape.num_residual_blocks;
        check_dim("trace states", 2 * blocks + 1, trace.states.len())?;
        check_dim("trace input", self.shape.input_dim, trace.input.ncols())?;
        check_dim("upstream rows", trace.batch_size(), upstream.nrows())?;
        check_dim("upstream cols", self.shape.output_dim, upstream.ncols())?;

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let last = &self.layers[self.layers.len() - 1];
        let top = &trace.states[2 * blocks];
        grads.push(Layer {
            weight: upstream.t().dot(top),
            bias: upstream.sum_axis(Axis(0)),
        });
        let mut d_state = upstream.dot(&last.weight);

        for block in (0..blocks).rev() {
            let z_in = &trace.states[2 * block];
            let hidden = &trace.states[2 * block + 1];
            let second = &self.layers[2 + 2 * block];
            let first = &self.layers[1 + 2 * block];

            grads.push(Layer {
                weight: d_state.t().dot(&relu(hidden)),
                bias: d_state.sum_axis(Axis(0)),
            });
            let mut d_hidden = d_state.dot(&second.weight);
            relu_mask(&mut d_hidden, hidden);

            grads.push(Layer {
                weight: d_hidden.t().dot(&relu(z_in)),
                bias: d_hidden.sum_axis(Axis(0)),
            });
            let mut d_in = d_hidden.dot(&first.weight);
            relu_mask(&mut d_in, z_in);
            if self.shape.residual {
                d_in += &d_state;
            }
            d_state = d_in;
        }

        grads.push(Layer {
            weight: d_state.t().dot(&trace.input),
            bias: d_state.sum_axis(Axis(0)),
        });
        let d_input = d_state.dot(&self.layers[0].weight);
        grads.reverse();
        Ok(GradientSet { layers: grads, d_input })
    }

    /// Visits every scalar parameter in layer order (weights row-major, then bias).
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.num_params(), values.len())?;
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }
}

impl GradientSet {
    /// Zero gradients shaped like `params`.
    pub fn zeros_like(params: &ParamSet, batch: usize) -> Self {
        let layers = params
            .layers()
            .iter()
            .map(|l| Layer::zeros(l.weight.nrows(), l.weight.ncols()))
            .collect();
        Self {
            layers,
            d_input: Array2::zeros((batch, params.shape().input_dim)),
        }
    }

    /// Flattened parameter gradients in the same order as [`ParamSet::flat_values`].
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    /// Adds `2 * lambda * theta` for every parameter, the gradient of `lambda * l2_penalty`.
    pub fn add_l2(&mut self, params: &ParamSet, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for (g, p) in self.layers.iter_mut().zip(params.layers()) {
            g.weight.scaled_add(2.0 * lambda, &p.weight);
            g.bias.scaled_add(2.0 * lambda, &p.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weight *= factor;
            g.bias *= factor;
        }
        self.d_input *= factor;
    }
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Serialized form: shape header followed by layers, matrices row-major.
#[derive(Serialize, Deserialize)]
pub(crate) struct ParamSetDoc {
    shape: NetShape,
    layers: Vec<LayerDoc>,
}

impl From<&ParamSet> for ParamSetDoc {
    fn from(p: &ParamSet) -> Self {
        Self {
            shape: p.shape,
            layers: p
                .layers
                .iter()
                .map(|l| LayerDoc {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ParamSetDoc> for ParamSet {
    type Error = Error;

    fn try_from(doc: ParamSetDoc) -> Result<Self> {
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let weight = Array2::from_shape_vec((l.rows, l.cols), l.weight)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                Ok(Layer {
                    weight,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ParamSet::from_layers(doc.shape, layers)
    }
}

impl Serialize for ParamSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamSetDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = ParamSetDoc::deserialize(d)?;
        ParamSet::try_from(doc).map_err(serde::de::Error::custom)
    }
}

impl ParamSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
