//! Quantized forward passes, the float reference, micro-step training and
//! the sign-consistency certificate.
//!
//! All parametric architectures share one dataflow ([`dataflow`]) written
//! against the [`Numeric`] trait. The fixed-point lane, the float reference
//! and the error-bound tracker used by [`sign_consistency`] are three
//! instantiations of the same loop nest, so their accumulation order is
//! identical by construction.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{self, FixedError, Scale, ScaledInt};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InferenceError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kernel size {kernel} exceeds input dimension {inputs}")]
    KernelTooLarge { kernel: usize, inputs: usize },
    #[error("malformed decision tree: {0}")]
    MalformedTree(String),
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error("operation expects a {expected} model")]
    ArchMismatch { expected: &'static str },
    #[error("decision trees have no micro-step update rule")]
    NotTrainable,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("non-finite parameter or input")]
    NonFinite,
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

/// One node of a decision tree. Split thresholds are stored in the model's
/// weight vector at the node's index; leaves carry a zero weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: usize, left: usize, right: usize },
    Leaf { label: u8 },
}

/// Model architecture, including the input dimension `d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArch {
    /// Logistic regression / linear SVM: one logit over `inputs` features.
    Linear {
        inputs: usize,
    },
    /// Fully connected layers; `layers` lists output widths, ending in 1.
    Mlp {
        inputs: usize,
        layers: Vec<usize>,
    },
    /// One valid 1-D convolution followed by a dense read-out.
    Cnn1d {
        inputs: usize,
        filters: usize,
        kernel: usize,
    },
    /// Elman recurrence with ReLU over `timesteps` chunks of the input.
    Rnn {
        inputs: usize,
        units: usize,
        timesteps: usize,
    },
    DecisionTree {
        inputs: usize,
        nodes: Vec<TreeNode>,
    },
}

impl ModelArch {
    pub fn input_dim(&self) -> usize {
        match self {
            ModelArch::Linear { inputs }
            | ModelArch::Mlp { inputs, .. }
            | ModelArch::Cnn1d { inputs, .. }
            | ModelArch::Rnn { inputs, .. }
            | ModelArch::DecisionTree { inputs, .. } => *inputs,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelArch::Linear { .. } => "linear",
            ModelArch::Mlp { .. } => "mlp",
            ModelArch::Cnn1d { .. } => "cnn1d",
            ModelArch::Rnn { .. } => "rnn",
            ModelArch::DecisionTree { .. } => "decision_tree",
        }
    }

    /// Short human-readable identifier, e.g. `cnn1d(d=3,F=2,K=2)`.
    pub fn label(&self) -> String {
        match self {
            ModelArch::Linear { inputs } => format!("linear(d={inputs})"),
            ModelArch::Mlp { inputs, layers } => {
                let sizes: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
                format!("mlp(d={inputs},layers={})", sizes.join("x"))
            }
            ModelArch::Cnn1d { inputs, filters, kernel } => format!("cnn1d(d={inputs},F={filters},K={kernel})"),
            ModelArch::Rnn { inputs, units, timesteps } => format!("rnn(d={inputs},U={units},T={timesteps})"),
            ModelArch::DecisionTree { inputs, nodes } => {
                format!("tree(d={inputs},nodes={})", nodes.len())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(InferenceError::MalformedModel("input dimension is zero".into()));
        }
        match self {
            ModelArch::Linear { .. } => Ok(()),
            ModelArch::Mlp { layers, .. } => {
                if layers.is_empty() || layers.contains(&0) {
                    return Err(InferenceError::MalformedModel("layer sizes must be nonempty and positive".into()));
                }
                if layers.last() != Some(&1) {
                    return Err(InferenceError::MalformedModel("final layer must have width 1".into()));
                }
                Ok(())
            }
            ModelArch::Cnn1d { inputs, filters, kernel } => {
                if *filters == 0 || *kernel == 0 {
                    return Err(InferenceError::MalformedModel("filters and kernel must be positive".into()));
                }
                if kernel > inputs {
                    return Err(InferenceError::KernelTooLarge {
                        kernel: *kernel,
                        inputs: *inputs,
                    });
                }
                Ok(())
            }
            ModelArch::Rnn { inputs, units, timesteps } => {
                if *units == 0 || *timesteps == 0 || timesteps > inputs {
                    return Err(InferenceError::MalformedModel(format!(
                        "rnn needs units >= 1 and 1 <= timesteps <= {inputs}"
                    )));
                }
                Ok(())
            }
            ModelArch::DecisionTree { inputs, nodes } => validate_tree(*inputs, nodes),
        }
    }

    pub fn weight_count(&self) -> usize {
        match self {
            ModelArch::Linear { inputs } => *inputs,
            ModelArch::Mlp { inputs, layers } => {
                let mut prev = *inputs;
                let mut total = 0;
                for &width in layers {
                    total += width * prev;
                    prev = width;
                }
                total
            }
            ModelArch::Cnn1d { inputs, filters, kernel } => filters * kernel + filters * conv_positions(*inputs, *kernel),
            ModelArch::Rnn { inputs, units, timesteps } => {
                let d_in = rnn_step_width(*inputs, *timesteps);
                units * d_in + units * units + units
            }
            ModelArch::DecisionTree { nodes, .. } => nodes.len(),
        }
    }

    pub fn bias_count(&self) -> usize {
        match self {
            ModelArch::Linear { .. } => 1,
            ModelArch::Mlp { layers, .. } => layers.iter().sum(),
            ModelArch::Cnn1d { filters, .. } => filters + 1,
            ModelArch::Rnn { units, .. } => units + 1,
            ModelArch::DecisionTree { .. } => 0,
        }
    }

    /// Weight index range and bias index of the output layer, i.e. the
    /// parameters a micro-step touches. `None` for decision trees.
    pub fn output_layer(&self) -> Option<(Range<usize>, usize)> {
        let weights = self.weight_count();
        let biases = self.bias_count();
        let fan_in = match self {
            ModelArch::Linear { inputs } => *inputs,
            ModelArch::Mlp { inputs, layers } => {
                if layers.len() >= 2 {
                    layers[layers.len() - 2]
                } else {
                    *inputs
                }
            }
            ModelArch::Cnn1d { inputs, filters, kernel } => filters * conv_positions(*inputs, *kernel),
            ModelArch::Rnn { units, .. } => *units,
            ModelArch::DecisionTree { .. } => return None,
        };
        Some((weights - fan_in..weights, biases - 1))
    }

    /// Depth of the deepest leaf (0 for a single leaf). Zero for non-trees.
    pub fn tree_depth(&self) -> usize {
        match self {
            ModelArch::DecisionTree { nodes, .. } => {
                fn depth(nodes: &[TreeNode], i: usize) -> usize {
                    match nodes[i] {
                        TreeNode::Leaf { .. } => 0,
                        TreeNode::Split { left, right, .. } => 1 + depth(nodes, left).max(depth(nodes, right)),
                    }
                }
                if nodes.is_empty() {
                    0
                } else {
                    depth(nodes, 0)
                }
            }
            _ => 0,
        }
    }
}

fn validate_tree(inputs: usize, nodes: &[TreeNode]) -> Result<()> {
    if nodes.is_empty() {
        return Err(InferenceError::MalformedTree("tree has no nodes".into()));
    }
    let mut parents = vec![0usize; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        match *node {
            TreeNode::Leaf { label } if label > 1 => return Err(InferenceError::MalformedTree(format!("leaf {i} has label {label}"))),
            TreeNode::Leaf { .. } => {}
            TreeNode::Split { feature, left, right } => {
                if feature >= inputs {
                    return Err(InferenceError::MalformedTree(format!(
                        "node {i} splits on feature {feature} of {inputs}"
                    )));
                }
                for child in [left, right] {
                    // children after parents rules out cycles
                    if child <= i || child >= nodes.len() {
                        return Err(InferenceError::MalformedTree(format!("node {i} has invalid child {child}")));
                    }
                    parents[child] += 1;
                }
            }
        }
    }
    if let Some(i) = (1..nodes.len()).find(|&i| parents[i] != 1) {
        return Err(InferenceError::MalformedTree(format!("node {i} has {} parents", parents[i])));
    }
    Ok(())
}

/// Number of valid convolution positions `o = d - K + 1`.
pub fn conv_positions(inputs: usize, kernel: usize) -> usize {
    inputs + 1 - kernel
}

/// Per-step input width `ceil(d / T)`; the input is zero-padded to `T * d_in`.
pub fn rnn_step_width(inputs: usize, timesteps: usize) -> usize {
    inputs.div_ceil(timesteps)
}

/// A model whose parameters are fixed-point raws at `scale`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub arch: ModelArch,
    pub weights: Vec<i128>,
    pub biases: Vec<i128>,
    pub scale: Scale,
    pub version: u64,
}

impl QuantizedModel {
    pub fn new(arch: ModelArch, weights: Vec<i128>, biases: Vec<i128>, scale: Scale) -> Result<Self> {
        let model = Self {
            arch,
            weights,
            biases,
            scale,
            version: 0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn zeros(arch: ModelArch, scale: Scale) -> Result<Self> {
        let (w, b) = (arch.weight_count(), arch.bias_count());
        Self::new(arch, vec![0; w], vec![0; b], scale)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        check_counts(&self.arch, self.weights.len(), self.biases.len())?;
        if self.weights.iter().chain(&self.biases).any(|r| *r == i128::MIN) {
            return Err(FixedError::Overflow.into());
        }
        Ok(())
    }
}

/// Same shape as [`QuantizedModel`] with real-valued parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatModel {
    pub arch: ModelArch,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl FloatModel {
    pub fn new(arch: ModelArch, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        let model = Self { arch, weights, biases };
        model.validate()?;
        Ok(model)
    }

    pub fn zeros(arch: ModelArch) -> Result<Self> {
        let (w, b) = (arch.weight_count(), arch.bias_count());
        Self::new(arch, vec![0.0; w], vec![0.0; b])
    }

    /// Parameters drawn uniformly from `[-bound, bound]`.
    pub fn random<R: Rng + ?Sized>(arch: ModelArch, bound: f64, rng: &mut R) -> Result<Self> {
        let w = (0..arch.weight_count()).map(|_| rng.random_range(-bound..=bound)).collect();
        let b = (0..arch.bias_count()).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(arch, w, b)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        check_counts(&self.arch, self.weights.len(), self.biases.len())?;
        if self.weights.iter().chain(&self.biases).any(|v| !v.is_finite()) {
            return Err(InferenceError::NonFinite);
        }
        Ok(())
    }
}

fn check_counts(arch: &ModelArch, weights: usize, biases: usize) -> Result<()> {
    if weights != arch.weight_count() {
        return Err(InferenceError::MalformedModel(format!(
            "{} expects {} weights, got {weights}",
            arch.label(),
            arch.weight_count()
        )));
    }
    if biases != arch.bias_count() {
        return Err(InferenceError::MalformedModel(format!(
            "{} expects {} biases, got {biases}",
            arch.label(),
            arch.bias_count()
        )));
    }
    Ok(())
}

/// An encoded feature vector (raws at the model scale) with its label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<i128>,
    pub label: u8,
}

impl Sample {
    pub fn new(features: Vec<i128>, label: u8) -> Self {
        Self { features, label }
    }
}

/// Every parameter passed independently through [`fixedpoint::to_fixed`].
pub fn quantize(m: &FloatModel, s: Scale) -> Result<QuantizedModel> {
    m.validate()?;
    let conv = |v: &f64| fixedpoint::to_fixed(*v, s).map(|x| x.raw);
    let weights = m.weights.iter().map(conv).collect::<std::result::Result<_, _>>()?;
    let biases = m.biases.iter().map(conv).collect::<std::result::Result<_, _>>()?;
    QuantizedModel::new(m.arch.clone(), weights, biases, s)
}

pub fn dequantize(q: &QuantizedModel) -> FloatModel {
    let conv = |r: &i128| fixedpoint::from_fixed(ScaledInt { raw: *r, scale: q.scale });
    FloatModel {
        arch: q.arch.clone(),
        weights: q.weights.iter().map(conv).collect(),
        biases: q.biases.iter().map(conv).collect(),
    }
}

pub fn quantize_input(x: &[f64], s: Scale) -> Result<Vec<i128>> {
    x.iter().map(|v| Ok(fixedpoint::to_fixed(*v, s)?.raw)).collect()
}

/// Arithmetic the shared dataflow is written against.
pub(crate) trait Numeric {
    type Value: Copy;
    type Param: Copy;
    fn zero(&self) -> Self::Value;
    fn bias(&self, b: Self::Param) -> Self::Value;
    fn mac(&self, acc: Self::Value, w: Self::Param, x: Self::Value) -> Result<Self::Value>;
    fn relu(&self, v: Self::Value) -> Self::Value;
}

pub(crate) struct FixedLane(pub Scale);

impl Numeric for FixedLane {
    type Value = i128;
    type Param = i128;
    fn zero(&self) -> i128 {
        0
    }
    fn bias(&self, b: i128) -> i128 {
        b
    }
    fn mac(&self, acc: i128, w: i128, x: i128) -> Result<i128> {
        Ok(fixedpoint::mac(acc, w, x, self.0)?)
    }
    fn relu(&self, v: i128) -> i128 {
        v.max(0)
    }
}

pub(crate) struct FloatLane;

impl Numeric for FloatLane {
    type Value = f64;
    type Param = f64;
    fn zero(&self) -> f64 {
        0.0
    }
    fn bias(&self, b: f64) -> f64 {
        b
    }
    fn mac(&self, acc: f64, w: f64, x: f64) -> Result<f64> {
        Ok(acc + w * x)
    }
    fn relu(&self, v: f64) -> f64 {
        v.max(0.0)
    }
}

/// A float value together with a bound on its distance from the value the
/// fixed-point pass computes (in real units).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Bounded {
    pub value: f64,
    pub err: f64,
}

/// Propagates worst-case error between the float reference and the
/// fixed-point pass: parameter and input quantization (each below `1/S`
/// plus the decimal/binary gap), one truncation per `idiv`, and float
/// round-off of the reference itself.
pub(crate) struct ErrorLane {
    pub resolution: f64,
}

const UNIT_ROUNDOFF: f64 = f64::EPSILON;

impl ErrorLane {
    fn param_err(&self, p: f64) -> f64 {
        self.resolution + p.abs() * UNIT_ROUNDOFF
    }

    pub fn input(&self, x: f64) -> Bounded {
        Bounded {
            value: x,
            err: self.param_err(x),
        }
    }
}

impl Numeric for ErrorLane {
    type Value = Bounded;
    type Param = f64;
    fn zero(&self) -> Bounded {
        Bounded { value: 0.0, err: 0.0 }
    }
    fn bias(&self, b: f64) -> Bounded {
        Bounded {
            value: b,
            err: self.param_err(b),
        }
    }
    fn mac(&self, acc: Bounded, w: f64, x: Bounded) -> Result<Bounded> {
        let term = w * x.value;
        let value = acc.value + term;
        let err = acc.err
            + self.param_err(w) * (x.value.abs() + x.err)
            + w.abs() * x.err
            + self.resolution
            + UNIT_ROUNDOFF * (term.abs() + value.abs());
        Ok(Bounded { value, err })
    }
    fn relu(&self, v: Bounded) -> Bounded {
        Bounded {
            value: v.value.max(0.0),
            err: v.err,
        }
    }
}

pub(crate) struct Pass<V> {
    /// Activations feeding the output layer (the raw input for linear models).
    pub penultimate: Vec<V>,
    pub logit: V,
}

/// The forward dataflow shared by every parametric architecture.
pub(crate) fn dataflow<N: Numeric>(
    n: &N,
    arch: &ModelArch,
    weights: &[N::Param],
    biases: &[N::Param],
    x: &[N::Value],
) -> Result<Pass<N::Value>> {
    let d = arch.input_dim();
    if x.len() != d {
        return Err(InferenceError::DimensionMismatch { expected: d, got: x.len() });
    }
    match arch {
        ModelArch::Linear { .. } => {
            let mut z = n.bias(biases[0]);
            for (w, xi) in weights.iter().zip(x) {
                z = n.mac(z, *w, *xi)?;
            }
            Ok(Pass {
                penultimate: x.to_vec(),
                logit: z,
            })
        }
        ModelArch::Mlp { layers, .. } => {
            let mut input = x.to_vec();
            let mut w_off = 0;
            let mut b_off = 0;
            for (l, &width) in layers.iter().enumerate() {
                let fan_in = input.len();
                let mut out = Vec::with_capacity(width);
                for i in 0..width {
                    let mut z = n.bias(biases[b_off + i]);
                    for (j, a) in input.iter().enumerate() {
                        z = n.mac(z, weights[w_off + i * fan_in + j], *a)?;
                    }
                    out.push(z);
                }
                w_off += width * fan_in;
                b_off += width;
                if l + 1 == layers.len() {
                    return Ok(Pass {
                        penultimate: input,
                        logit: out[0],
                    });
                }
                input = out.into_iter().map(|z| n.relu(z)).collect();
            }
            unreachable!("validated mlp has a final layer")
        }
        ModelArch::Cnn1d { inputs, filters, kernel } => {
            let (f_count, k) = (*filters, *kernel);
            let o = conv_positions(*inputs, k);
            let mut act = Vec::with_capacity(f_count * o);
            for f in 0..f_count {
                for p in 0..o {
                    let mut z = n.bias(biases[f]);
                    for kk in 0..k {
                        z = n.mac(z, weights[f * k + kk], x[p + kk])?;
                    }
                    act.push(n.relu(z));
                }
            }
            let readout = &weights[f_count * k..];
            let mut logit = n.bias(biases[f_count]);
            for (v, a) in readout.iter().zip(&act) {
                logit = n.mac(logit, *v, *a)?;
            }
            Ok(Pass { penultimate: act, logit })
        }
        ModelArch::Rnn { inputs, units, timesteps } => {
            let u_count = *units;
            let d_in = rnn_step_width(*inputs, *timesteps);
            let mut padded = x.to_vec();
            padded.resize(d_in * timesteps, n.zero());
            let (wxh, rest) = weights.split_at(u_count * d_in);
            let (whh, wout) = rest.split_at(u_count * u_count);
            let mut h = vec![n.zero(); u_count];
            for step in padded.chunks(d_in) {
                let mut next = Vec::with_capacity(u_count);
                for u in 0..u_count {
                    let mut z = n.bias(biases[u]);
                    for (j, xj) in step.iter().enumerate() {
                        z = n.mac(z, wxh[u * d_in + j], *xj)?;
                    }
                    for (v, hv) in h.iter().enumerate() {
                        z = n.mac(z, whh[u * u_count + v], *hv)?;
                    }
                    next.push(n.relu(z));
                }
                h = next;
            }
            let mut logit = n.bias(biases[u_count]);
            for (w, hu) in wout.iter().zip(&h) {
                logit = n.mac(logit, *w, *hu)?;
            }
            Ok(Pass { penultimate: h, logit })
        }
        ModelArch::DecisionTree { .. } => Err(InferenceError::ArchMismatch {
            expected: "parametric (non-tree)",
        }),
    }
}

fn fixed_pass(model: &QuantizedModel, x: &[i128]) -> Result<Pass<i128>> {
    dataflow(&FixedLane(model.scale), &model.arch, &model.weights, &model.biases, x)
}

fn expect_arch(model: &QuantizedModel, kind: &'static str) -> Result<()> {
    if model.arch.name() == kind {
        Ok(())
    } else {
        Err(InferenceError::ArchMismatch { expected: kind })
    }
}

/// `b + Σ idiv(θ_i · x_i, S)`, accumulated left to right.
pub fn forward_linear(x: &[i128], model: &QuantizedModel) -> Result<i128> {
    expect_arch(model, "linear")?;
    Ok(fixed_pass(model, x)?.logit)
}

pub fn forward_mlp(x: &[i128], model: &QuantizedModel) -> Result<i128> {
    expect_arch(model, "mlp")?;
    Ok(fixed_pass(model, x)?.logit)
}

pub fn forward_cnn1d(x: &[i128], model: &QuantizedModel) -> Result<i128> {
    expect_arch(model, "cnn1d")?;
    Ok(fixed_pass(model, x)?.logit)
}

pub fn forward_rnn(x: &[i128], model: &QuantizedModel) -> Result<i128> {
    expect_arch(model, "rnn")?;
    Ok(fixed_pass(model, x)?.logit)
}

/// Logit of any parametric model; decision trees have no logit.
pub fn forward(x: &[i128], model: &QuantizedModel) -> Result<i128> {
    Ok(fixed_pass(model, x)?.logit)
}

/// Root-to-leaf descent, going left iff `x[feature] <= threshold`.
pub fn forward_tree(x: &[i128], model: &QuantizedModel) -> Result<u8> {
    let ModelArch::DecisionTree { inputs, nodes } = &model.arch else {
        return Err(InferenceError::ArchMismatch { expected: "decision_tree" });
    };
    descend(*inputs, nodes, &model.weights, x)
}

fn descend<T: PartialOrd + Copy>(inputs: usize, nodes: &[TreeNode], thresholds: &[T], x: &[T]) -> Result<u8> {
    if x.len() != inputs {
        return Err(InferenceError::DimensionMismatch {
            expected: inputs,
            got: x.len(),
        });
    }
    let mut i = 0;
    // children strictly follow parents, so this visits at most nodes.len() nodes
    for _ in 0..nodes.len() {
        match nodes.get(i) {
            Some(TreeNode::Leaf { label }) => return Ok(*label),
            Some(TreeNode::Split { feature, left, right }) => {
                let v = *x
                    .get(*feature)
                    .ok_or_else(|| InferenceError::MalformedTree(format!("feature {feature} out of range")))?;
                i = if v <= thresholds[i] { *left } else { *right };
            }
            None => return Err(InferenceError::MalformedTree(format!("dangling child {i}"))),
        }
    }
    Err(InferenceError::MalformedTree("descent did not reach a leaf".into()))
}

/// 1 if `logit > 0`, else 0. A zero logit is benign.
pub fn classify(logit: i128) -> u8 {
    u8::from(logit > 0)
}

/// Class label for any architecture.
pub fn predict(x: &[i128], model: &QuantizedModel) -> Result<u8> {
    match model.arch {
        ModelArch::DecisionTree { .. } => forward_tree(x, model),
        _ => Ok(classify(forward(x, model)?)),
    }
}

/// The same dataflow in `f64`. For trees, returns `+1.0` or `-1.0` by leaf
/// label so that `reference_classify` stays uniform.
pub fn reference_forward(x: &[f64], m: &FloatModel) -> Result<f64> {
    match &m.arch {
        ModelArch::DecisionTree { inputs, nodes } => {
            let label = descend(*inputs, nodes, &m.weights, x)?;
            Ok(if label == 1 { 1.0 } else { -1.0 })
        }
        arch => Ok(dataflow(&FloatLane, arch, &m.weights, &m.biases, x)?.logit),
    }
}

pub fn reference_classify(x: &[f64], m: &FloatModel) -> Result<u8> {
    Ok(u8::from(reference_forward(x, m)? > 0.0))
}

/// Single-sample mistake-driven integer update of the output layer.
///
/// When the sample is misclassified, every output weight moves by
/// `idiv(eta · (2y − 1) · a_i, S)` along its input activation `a_i` and the
/// output bias by `eta · (2y − 1)`; the version is bumped. A correctly
/// classified sample returns the model unchanged.
pub fn micro_train_step(model: &QuantizedModel, x: &[i128], label: u8, eta: ScaledInt) -> Result<QuantizedModel> {
    let (range, bias_idx) = model.arch.output_layer().ok_or(InferenceError::NotTrainable)?;
    if eta.scale != model.scale {
        return Err(FixedError::ScaleMismatch(eta.scale.exponent(), model.scale.exponent()).into());
    }
    let pass = fixed_pass(model, x)?;
    if classify(pass.logit) == label {
        return Ok(model.clone());
    }
    let step = if label == 1 { eta.raw } else { -eta.raw };
    let mut next = model.clone();
    for (w, a) in next.weights[range].iter_mut().zip(&pass.penultimate) {
        *w = fixedpoint::mac(*w, step, *a, model.scale)?;
    }
    next.biases[bias_idx] = next.biases[bias_idx]
        .checked_add(step)
        .filter(|b| *b != i128::MIN)
        .ok_or(FixedError::Overflow)?;
    next.version += 1;
    Ok(next)
}

/// Outcome of the `γ > Δ` check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignConsistencyReport {
    /// Smallest absolute float logit over the validation set.
    pub gamma: f64,
    /// Largest certified distance between float and fixed logits.
    pub delta: f64,
    pub holds: bool,
}

/// Worst-case distance between the float reference logit and the
/// fixed-point logit at input `x` and scale `s`, alongside the float logit.
pub fn quantization_error_bound(m: &FloatModel, s: Scale, x: &[f64]) -> Result<(f64, f64)> {
    if matches!(m.arch, ModelArch::DecisionTree { .. }) {
        return Err(InferenceError::ArchMismatch {
            expected: "parametric (non-tree)",
        });
    }
    let lane = ErrorLane {
        resolution: s.resolution(),
    };
    let inputs: Vec<Bounded> = x.iter().map(|v| lane.input(*v)).collect();
    let pass = dataflow(&lane, &m.arch, &m.weights, &m.biases, &inputs)?;
    Ok((pass.logit.value, pass.logit.err))
}

/// Certifies that quantizing `model` at `s` cannot flip any validation label.
pub fn sign_consistency(model: &FloatModel, s: Scale, validation: &[Vec<f64>]) -> Result<SignConsistencyReport> {
    if validation.is_empty() {
        return Err(InferenceError::EmptyValidationSet);
    }
    model.validate()?;
    let mut gamma = f64::INFINITY;
    let mut delta: f64 = 0.0;
    for x in validation {
        let (logit, err) = quantization_error_bound(model, s, x)?;
        gamma = gamma.min(logit.abs());
        delta = delta.max(err);
    }
    Ok(SignConsistencyReport {
        gamma,
        delta,
        holds: gamma > delta,
    })
}

/// The smallest scale at which [`sign_consistency`] holds, if any.
pub fn min_certified_scale(model: &FloatModel, validation: &[Vec<f64>]) -> Result<Option<Scale>> {
    for s in Scale::all() {
        if sign_consistency(model, s, validation)?.holds {
            return Ok(Some(s));
        }
    }
    Ok(None)
}
