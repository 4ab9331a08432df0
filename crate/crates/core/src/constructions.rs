//! Hand-built networks with known exact behavior.
//!
//! The pyramid network interpolates `(0,0), (0.5,1), (1,0), (1.5,1), (2,0)`
//! at zero task parameter. Its context column decides what a nonzero task
//! parameter does: nothing, a shift of `x`, or a dilation of both axes.
//!
//! The selector encoder maps `(x, β)` to `(x, ĉ)` where `ĉ` is the one-hot
//! code of task `j` whenever `β = j`, so a context-sensitive network stacked
//! on it becomes a learned-context network with one scalar task parameter.

use ndarray::{arr1, arr2, s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{Layer, NetShape, ParamSet};

/// Context column of the pyramid network's first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PyramidContext {
    Zero,
    /// Context column equal to the input column: shifts `x` by `β`.
    Translation,
    /// Context column equal to the first-layer bias: dilates by `1 + β`.
    Dilation,
}

impl PyramidContext {
    pub const ALL: [PyramidContext; 3] = [Self::Zero, Self::Translation, Self::Dilation];
}

const PYRAMID_BIAS: [f64; 4] = [0.0, -0.5, -1.0, -1.5];

/// Shape of the pyramid network: input `(x, β)`, four hidden units, one
/// block without skip connection.
pub fn pyramid_shape() -> NetShape {
    NetShape::new(2, 4, 1, 1).without_residual()
}

/// The pyramid network evaluated on inputs `(x, β)`.
///
/// The three-layer construction is embedded in the block structure: the
/// block's two layers carry the pair-summing and output layers, and the
/// final linear layer reads the first unit.
pub fn build_pyramid(context: PyramidContext) -> ParamSet {
    let column: [f64; 4] = match context {
        PyramidContext::Zero => [0.0; 4],
        PyramidContext::Translation => [1.0; 4],
        PyramidContext::Dilation => PYRAMID_BIAS,
    };
    let first = Layer {
        weight: Array2::from_shape_fn((4, 2), |(r, c)| if c == 0 { 1.0 } else { column[r] }),
        bias: arr1(&PYRAMID_BIAS),
    };
    let mut pairs = Layer::zeros(4, 4);
    pairs
        .weight
        .slice_mut(s![..2, ..])
        .assign(&arr2(&[[2.0, -4.0, 0.0, 0.0], [0.0, 0.0, 2.0, -4.0]]));
    let mut sum = Layer::zeros(4, 4);
    sum.weight[[0, 0]] = 1.0;
    sum.weight[[0, 1]] = 1.0;
    let mut read = Layer::zeros(1, 4);
    read.weight[[0, 0]] = 1.0;
    ParamSet::from_layers(pyramid_shape(), vec![first, pairs, sum, read]).expect("pyramid layer sizes are fixed")
}

/// The base shape's interpolation points.
pub const PYRAMID_POINTS: [(f64, f64); 5] = [(0.0, 0.0), (0.5, 1.0), (1.0, 0.0), (1.5, 1.0), (2.0, 0.0)];

/// Encoder width parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorSpec {
    pub num_tasks: usize,
    /// Half-width of each triangle, strictly inside `(0, 0.5)`.
    pub delta: f64,
    pub x_dim: usize,
}

impl SelectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::InvalidArgument("selector needs at least one task".into()));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "selector slope parameter must lie in (0, 0.5), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Two ReLU layers mapping `(x, β)` to `(x⁺, x⁻, ĉ)` with `x = x⁺ − x⁻`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorEncoder {
    spec: SelectorSpec,
    first: Layer,
    second: Layer,
}

fn relu(v: Array2<f64>) -> Array2<f64> {
    v.mapv_into(|a| a.max(0.0))
}

impl SelectorEncoder {
    pub fn spec(&self) -> SelectorSpec {
        self.spec
    }

    /// `(rows = 2m + 2·x_dim, cols = x_dim + 1)` first layer.
    pub fn first_layer(&self) -> &Layer {
        &self.first
    }

    /// `(rows = 2·x_dim + m, cols = 2m + 2·x_dim)` second layer.
    pub fn second_layer(&self) -> &Layer {
        &self.second
    }

    /// ReLU outputs of the second layer for inputs `[x, β]`, one per row.
    pub fn encode_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("selector input", self.spec.x_dim + 1, input.ncols())?;
        let h = relu(input.dot(&self.first.weight.t()) + &self.first.bias);
        Ok(relu(h.dot(&self.second.weight.t()) + &self.second.bias))
    }

    /// `(x, ĉ)` for one input.
    pub fn encode(&self, x: &[f64], beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut z = x.to_vec();
        z.push(beta);
        let z = ArrayView2::from_shape((1, z.len()), &z).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let out = self.encode_batch(z)?;
        let d = self.spec.x_dim;
        let copy = (0..d).map(|k| out[[0, k]] - out[[0, d + k]]).collect();
        Ok((copy, out.slice(s![0, 2 * d..]).to_vec()))
    }

    /// `ĉ` alone. At `β = j` entry `j` equals one up to the rounding of
    /// `j − δ`; every other entry is exactly zero.
    pub fn task_code(&self, beta: f64) -> Result<Vec<f64>> {
        Ok(self.encode(&vec![0.0; self.spec.x_dim], beta)?.1)
    }
}

/// Encoder whose `j`-th code entry is a triangle of half-width `δ` centred
/// at `β = j` (tasks numbered from 1), plus an exact copy of `x`.
pub fn build_selector(spec: SelectorSpec) -> Result<SelectorEncoder> {
    spec.validate()?;
    let (m, d) = (spec.num_tasks, spec.x_dim);
    // first layer rows: β − (j − δ), β − j for each j, then x, −x
    let mut first = Layer::zeros(2 * m + 2 * d, d + 1);
    for j in 1..=m {
        let r = 2 * (j - 1);
        first.weight[[r, d]] = 1.0;
        first.weight[[r + 1, d]] = 1.0;
        first.bias[r] = -(j as f64 - spec.delta);
        first.bias[r + 1] = -(j as f64);
    }
    for k in 0..d {
        first.weight[[2 * m + k, k]] = 1.0;
        first.weight[[2 * m + d + k, k]] = -1.0;
    }
    // second layer rows: x⁺, x⁻, then the triangles (1/δ)[1, −2] per task
    let mut second = Layer::zeros(2 * d + m, 2 * m + 2 * d);
    for k in 0..2 * d {
        second.weight[[k, 2 * m + k]] = 1.0;
    }
    for j in 0..m {
        second.weight[[2 * d + j, 2 * j]] = 1.0 / spec.delta;
        second.weight[[2 * d + j, 2 * j + 1]] = -2.0 / spec.delta;
    }
    Ok(SelectorEncoder { spec, first, second })
}

/// Selector encoder followed by a context-sensitive network, evaluated as a
/// single learned-context network with scalar task parameter `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedNetwork {
    encoder: SelectorEncoder,
    /// The context-sensitive network with its first layer rewritten to read
    /// `(x⁺, x⁻, ĉ)`.
    head: ParamSet,
}

impl ComposedNetwork {
    pub fn new(encoder: SelectorEncoder, cs_net: &ParamSet) -> Result<Self> {
        let spec = encoder.spec;
        let (d, m) = (spec.x_dim, spec.num_tasks);
        let shape = *cs_net.shape();
        check_dim("context-sensitive input", d + m, shape.input_dim)?;
        let mut layers = cs_net.layers().to_vec();
        let old = &cs_net.layers()[0].weight;
        let mut w = Array2::zeros((shape.hidden_dim, 2 * d + m));
        w.slice_mut(s![.., ..d]).assign(&old.slice(s![.., ..d]));
        w.slice_mut(s![.., d..2 * d]).assign(&(-&old.slice(s![.., ..d])));
        w.slice_mut(s![.., 2 * d..]).assign(&old.slice(s![.., d..]));
        layers[0].weight = w;
        let head = ParamSet::from_layers(
            NetShape {
                input_dim: 2 * d + m,
                ..shape
            },
            layers,
        )?;
        Ok(Self { encoder, head })
    }

    pub fn evaluate(&self, x: &[f64], beta: f64) -> Result<f64> {
        let mut z = x.to_vec();
        z.push(beta);
        let z = ArrayView2::from_shape((1, z.len()), &z).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let code = self.encoder.encode_batch(z)?;
        Ok(self.head.predict_batch(code.view())?[[0, 0]])
    }
}

/// `cs_net([x, c_j])` with the one-hot code of task `j` (1-based).
pub fn evaluate_cs(cs_net: &ParamSet, x: &[f64], task: usize, num_tasks: usize) -> Result<f64> {
    if task == 0 || task > num_tasks {
        return Err(Error::UnknownTask { task, num_tasks });
    }
    let mut z = x.to_vec();
    z.extend((1..=num_tasks).map(|k| if k == task { 1.0 } else { 0.0 }));
    cs_net.evaluate(&z)
}

/// Largest `|composed(x, β) − cs_net([x, c_task])|` over `inputs` of
/// `(x, β, task)`; `β = task` gives the exact encoding.
pub fn verify_selector_composition(
    encoder: &SelectorEncoder,
    cs_net: &ParamSet,
    inputs: &[(Vec<f64>, f64, usize)],
) -> Result<f64> {
    let composed = ComposedNetwork::new(encoder.clone(), cs_net)?;
    let m = encoder.spec.num_tasks;
    let mut worst = 0.0f64;
    for (x, beta, task) in inputs {
        check_dim("composition input", encoder.spec.x_dim, x.len())?;
        let a = composed.evaluate(x, *beta)?;
        let b = evaluate_cs(cs_net, x, *task, m)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// One verification check and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub max_deviation: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub checks: Vec<CheckResult>,
}

impl ConstructionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Exactness tolerance used by every check.
pub const EXACT_TOLERANCE: f64 = 1e-12;

fn check(name: &str, deviation: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        tolerance: EXACT_TOLERANCE,
        max_deviation: deviation,
        passed: deviation <= EXACT_TOLERANCE,
    }
}

fn perturbed(mut net: ParamSet, amount: f64) -> ParamSet {
    if amount != 0.0 {
        for layer in net.layers_mut() {
            layer.weight.mapv_inplace(|w| if w != 0.0 { w + amount } else { w });
        }
    }
    net
}

/// Pyramid interpolation, translation and dilation identities, selector
/// one-hot codes and the selector composition. `perturbation` is added to
/// every nonzero pyramid weight to exercise the failure path.
pub fn verify_all(perturbation: f64, seed: u64) -> Result<ConstructionReport> {
    let mut checks = Vec::new();
    let pyr = |c| perturbed(build_pyramid(c), perturbation);

    let zero = pyr(PyramidContext::Zero);
    let mut dev = 0.0f64;
    for (x, y) in PYRAMID_POINTS {
        dev = dev.max((zero.evaluate(&[x, 0.0])? - y).abs());
    }
    checks.push(check("pyramid interpolation", dev));

    let xs: Vec<f64> = (0..=100).map(|i| -0.5 + 3.0 * i as f64 / 100.0).collect();
    let shifted = pyr(PyramidContext::Translation);
    let mut dev = 0.0f64;
    for beta in [-0.5, -0.25, 0.1, 0.5] {
        for &x in &xs {
            dev = dev.max((shifted.evaluate(&[x, beta])? - shifted.evaluate(&[x + beta, 0.0])?).abs());
        }
    }
    checks.push(check("pyramid translation", dev));

    let dilated = pyr(PyramidContext::Dilation);
    let mut dev = 0.0f64;
    for beta in [-0.5, -0.25, 0.25, 0.5] {
        for &x in &xs {
            let lhs = dilated.evaluate(&[(1.0 + beta) * x, beta])?;
            let rhs = (1.0 + beta) * dilated.evaluate(&[x, 0.0])?;
            dev = dev.max((lhs - rhs).abs());
        }
    }
    checks.push(check("pyramid dilation", dev));

    let m = 4;
    let mut dev = 0.0f64;
    for delta in [0.05, 0.25, 0.49] {
        let enc = build_selector(SelectorSpec {
            num_tasks: m,
            delta,
            x_dim: 1,
        })?;
        for j in 1..=m {
            let code = enc.task_code(j as f64)?;
            for (k, v) in code.iter().enumerate() {
                let want = if k + 1 == j { 1.0 } else { 0.0 };
                dev = dev.max((v - want).abs());
            }
        }
    }
    checks.push(check("selector one-hot codes", dev));

    let enc = build_selector(SelectorSpec {
        num_tasks: m,
        delta: 0.25,
        x_dim: 2,
    })?;
    let cs = ParamSet::init_he(NetShape::new(2 + m, 16, 2, 1), seed);
    let inputs = random_inputs(100, 2, m, seed);
    checks.push(check(
        "selector composition",
        verify_selector_composition(&enc, &cs, &inputs)?,
    ));

    Ok(ConstructionReport { checks })
}

/// `n` random `(x, β = task, task)` triples with `x` uniform in `[-3, 3]`.
pub fn random_inputs(n: usize, x_dim: usize, num_tasks: usize, seed: u64) -> Vec<(Vec<f64>, f64, usize)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..x_dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let task = rng.gen_range(1..=num_tasks);
            (x, task as f64, task)
        })
        .collect()
}

/// `[x, β]` rows for a batch evaluation of the pyramid.
pub fn pyramid_inputs(xs: &[f64], beta: f64) -> Array2<f64> {
    Array2::from_shape_fn((xs.len(), 2), |(i, c)| if c == 0 { xs[i] } else { beta })
}

/// Pyramid outputs at `xs` for a fixed task parameter.
pub fn pyramid_curve(net: &ParamSet, xs: &[f64], beta: f64) -> Result<Array1<f64>> {
    Ok(net.predict_batch(pyramid_inputs(xs, beta).view())?.column(0).to_owned())
}
