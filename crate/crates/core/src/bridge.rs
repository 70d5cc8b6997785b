//! Moving an accepted L2 model onto L1.
//!
//! L2 commits `keccak256(serialize(model))`; a later transfer carries the
//! serialized bytes, which L1 re-hashes against the commitment before
//! installing. The `check_*` functions are the four consistency checks
//! run at genesis, after a rejected update, after a transfer and on
//! inference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{FixedError, Scale};
use crate::inference::{self, InferenceError, ModelArch, QuantizedModel, TreeNode};
use crate::keccak::{self, Hash32};
use crate::poim::{self, ClassCounts, Metrics, PoimError, PoimParams, PoimState, TestSet};

pub const MAGIC: &[u8; 4] = b"PIM1";
const WORD: usize = 32;
/// Upper bound on any single dimension word, to keep decoding allocation-safe.
const MAX_DIM: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BridgeError {
    #[error("malformed model bytes: {0}")]
    MalformedBytes(String),
    #[error("no commitment on L1")]
    NoCommitment,
    #[error("payload hash {got} does not match commitment {committed}")]
    HashMismatch { committed: Hash32, got: Hash32 },
    #[error("no model installed on L1")]
    NoModelInstalled,
    #[error("L1 and L2 disagree on {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Poim(#[from] PoimError),
}

impl From<FixedError> for BridgeError {
    fn from(e: FixedError) -> Self {
        BridgeError::Inference(e.into())
    }
}

pub type Result<T> = std::result::Result<T, BridgeError>;

fn malformed(msg: impl Into<String>) -> BridgeError {
    BridgeError::MalformedBytes(msg.into())
}

fn arch_tag(arch: &ModelArch) -> u8 {
    match arch {
        ModelArch::Linear { .. } => 1,
        ModelArch::Mlp { .. } => 2,
        ModelArch::Cnn1d { .. } => 3,
        ModelArch::Rnn { .. } => 4,
        ModelArch::DecisionTree { .. } => 5,
    }
}

fn arch_dims(arch: &ModelArch) -> Vec<u64> {
    match arch {
        ModelArch::Linear { inputs } => vec![*inputs as u64],
        ModelArch::Mlp { inputs, layers } => {
            let mut dims = vec![*inputs as u64, layers.len() as u64];
            dims.extend(layers.iter().map(|l| *l as u64));
            dims
        }
        ModelArch::Cnn1d { inputs, filters, kernel } => vec![*inputs as u64, *filters as u64, *kernel as u64],
        ModelArch::Rnn { inputs, units, timesteps } => vec![*inputs as u64, *units as u64, *timesteps as u64],
        ModelArch::DecisionTree { inputs, nodes } => {
            let mut dims = vec![*inputs as u64, nodes.len() as u64];
            for node in nodes {
                dims.extend(match *node {
                    TreeNode::Split { feature, left, right } => [0, feature as u64, left as u64, right as u64],
                    TreeNode::Leaf { label } => [1, label as u64, 0, 0],
                });
            }
            dims
        }
    }
}

fn push_uint(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&[0u8; WORD - 8]);
    out.extend_from_slice(&v.to_be_bytes());
}

fn push_int(out: &mut Vec<u8>, v: i128) {
    let fill = if v < 0 { 0xff } else { 0x00 };
    out.extend_from_slice(&[fill; WORD - 16]);
    out.extend_from_slice(&v.to_be_bytes());
}

/// Canonical byte layout of a quantized model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SerializedModel {
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

impl SerializedModel {
    pub fn hash(&self) -> Hash32 {
        keccak::keccak256(&self.bytes)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s.trim_start_matches("0x")).map_err(serde::de::Error::custom)
    }
}

/// `"PIM1" | version | arch tag | dims… | scale | weights… | biases…`, every
/// integer a 32-byte big-endian word except the tag and scale octets.
pub fn serialize(model: &QuantizedModel) -> Result<SerializedModel> {
    model.validate()?;
    let dims = arch_dims(&model.arch);
    let words = 1 + dims.len() + model.weights.len() + model.biases.len();
    let mut out = Vec::with_capacity(MAGIC.len() + 2 + words * WORD);
    out.extend_from_slice(MAGIC);
    push_uint(&mut out, model.version);
    out.push(arch_tag(&model.arch));
    for d in dims {
        push_uint(&mut out, d);
    }
    out.push(model.scale.exponent());
    for r in model.weights.iter().chain(&model.biases) {
        push_int(&mut out, *r);
    }
    Ok(SerializedModel { bytes: out })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| malformed(format!("truncated at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn uint(&mut self) -> Result<u64> {
        let at = self.pos;
        let w = self.take(WORD)?;
        if w[..WORD - 8].iter().any(|b| *b != 0) {
            return Err(malformed(format!("unsigned word at offset {at} exceeds 64 bits")));
        }
        Ok(u64::from_be_bytes(w[WORD - 8..].try_into().expect("8 bytes")))
    }

    fn dim(&mut self) -> Result<usize> {
        let v = self.uint()?;
        if v > MAX_DIM {
            return Err(malformed(format!("dimension {v} exceeds {MAX_DIM}")));
        }
        Ok(v as usize)
    }

    fn int(&mut self) -> Result<i128> {
        let at = self.pos;
        let w = self.take(WORD)?;
        let v = i128::from_be_bytes(w[WORD - 16..].try_into().expect("16 bytes"));
        let fill = if v < 0 { 0xff } else { 0x00 };
        if w[..WORD - 16].iter().any(|b| *b != fill) {
            return Err(malformed(format!("signed word at offset {at} exceeds 128 bits")));
        }
        Ok(v)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn read_arch(r: &mut Reader) -> Result<ModelArch> {
    let tag = r.byte()?;
    let arch = match tag {
        1 => ModelArch::Linear { inputs: r.dim()? },
        2 => {
            let inputs = r.dim()?;
            let n = r.dim()?;
            if n * WORD > r.remaining() {
                return Err(malformed("layer count exceeds payload"));
            }
            let layers = (0..n).map(|_| r.dim()).collect::<Result<_>>()?;
            ModelArch::Mlp { inputs, layers }
        }
        3 => ModelArch::Cnn1d {
            inputs: r.dim()?,
            filters: r.dim()?,
            kernel: r.dim()?,
        },
        4 => ModelArch::Rnn {
            inputs: r.dim()?,
            units: r.dim()?,
            timesteps: r.dim()?,
        },
        5 => {
            let inputs = r.dim()?;
            let n = r.dim()?;
            if n * 4 * WORD > r.remaining() {
                return Err(malformed("node count exceeds payload"));
            }
            let mut nodes = Vec::with_capacity(n);
            for i in 0..n {
                let (kind, a, left, right) = (r.uint()?, r.dim()?, r.dim()?, r.dim()?);
                nodes.push(match kind {
                    0 => TreeNode::Split { feature: a, left, right },
                    1 if a <= 1 && left == 0 && right == 0 => TreeNode::Leaf { label: a as u8 },
                    _ => return Err(malformed(format!("node {i} is neither split nor leaf"))),
                });
            }
            ModelArch::DecisionTree { inputs, nodes }
        }
        t => return Err(malformed(format!("unknown arch tag {t}"))),
    };
    arch.validate().map_err(|e| malformed(format!("invalid architecture: {e}")))?;
    Ok(arch)
}

pub fn deserialize(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| malformed("missing magic"))? != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = r.uint()?;
    let arch = read_arch(&mut r)?;
    let scale = Scale::try_from(r.byte()?).map_err(|e| malformed(e.to_string()))?;
    let (wc, bc) = (arch.weight_count(), arch.bias_count());
    let expected = (wc + bc) * WORD;
    if r.remaining() != expected {
        return Err(malformed(format!("expected {expected} parameter bytes, found {}", r.remaining())));
    }
    let weights = (0..wc).map(|_| r.int()).collect::<Result<_>>()?;
    let biases = (0..bc).map(|_| r.int()).collect::<Result<_>>()?;
    let mut model = QuantizedModel::new(arch, weights, biases, scale).map_err(|e| malformed(format!("invalid parameters: {e}")))?;
    model.version = version;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Commitment {
    pub hash: Hash32,
    /// L1 block number.
    pub committed_at: u64,
}

/// L1 inference contract storage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1State {
    pub commitment: Option<Commitment>,
    pub model: Option<QuantizedModel>,
}

impl L1State {
    pub fn digest(&self) -> Hash32 {
        keccak::keccak256(&serde_json::to_vec(self).expect("L1 state serializes"))
    }

    pub fn installed(&self) -> Result<&QuantizedModel> {
        self.model.as_ref().ok_or(BridgeError::NoModelInstalled)
    }

    /// Records the commitment for `model`, replacing any earlier one.
    pub fn commit(&mut self, model: &QuantizedModel, block: u64) -> Result<Commitment> {
        let c = Commitment {
            hash: serialize(model)?.hash(),
            committed_at: block,
        };
        self.commitment = Some(c);
        Ok(c)
    }

    /// Hash-checks `payload` against the commitment and installs it.
    /// Leaves the state untouched on any error.
    pub fn install(&mut self, payload: &[u8]) -> Result<&QuantizedModel> {
        let c = self.commitment.ok_or(BridgeError::NoCommitment)?;
        let got = keccak::keccak256(payload);
        if got != c.hash {
            return Err(BridgeError::HashMismatch { committed: c.hash, got });
        }
        let model = deserialize(payload)?;
        Ok(self.model.insert(model))
    }
}

/// Commits the current L2 model on L1.
pub fn commit(l1: &mut L1State, l2: &PoimState, block: u64) -> Result<Commitment> {
    l1.commit(l2.model(), block)
}

/// Installs `payload` and then checks the installed parameters against the
/// L2 model they came from. Any failure restores the previous L1 state.
pub fn transfer_and_verify(l1: &mut L1State, payload: &[u8], l2_source: &QuantizedModel) -> Result<()> {
    let snapshot = l1.clone();
    let result = l1.install(payload).and_then(|installed| check_transfer(installed, l2_source));
    if result.is_err() {
        *l1 = snapshot;
    }
    result
}

/// Genesis: quantize, install, evaluate, then check that what was stored
/// matches an independent quantization and evaluation.
pub fn init_l2(
    model0: &inference::FloatModel,
    weight_scale: Scale,
    metric_scale: i64,
    test_set: TestSet,
    params: PoimParams,
    class_counts: ClassCounts,
) -> Result<PoimState> {
    let quantized = inference::quantize(model0, weight_scale)?;
    let params = PoimParams { metric_scale, ..params };
    let state = PoimState::new(quantized, test_set, params, class_counts)?;
    check_genesis(&state, model0, weight_scale)?;
    Ok(state)
}

/// Stored parameters equal a fresh quantization of the source model and
/// stored metrics equal a fresh evaluation.
pub fn check_genesis(state: &PoimState, model0: &inference::FloatModel, weight_scale: Scale) -> Result<()> {
    let fresh = inference::quantize(model0, weight_scale)?;
    compare_params(state.model(), &fresh, false)?;
    state.verify_metrics()?;
    Ok(())
}

/// After a rejected proposal the governed state must be unchanged.
pub fn check_rejected_unchanged(before: Hash32, after: &PoimState) -> Result<()> {
    if after.core_digest() != before {
        return Err(BridgeError::ParamMismatch("state digest changed across a rejected update".into()));
    }
    after.verify_metrics()?;
    Ok(())
}

/// Field-by-field equality of the installed L1 model and its L2 source.
pub fn check_transfer(l1_model: &QuantizedModel, l2_source: &QuantizedModel) -> Result<()> {
    compare_params(l1_model, l2_source, true)
}

fn compare_params(a: &QuantizedModel, b: &QuantizedModel, with_version: bool) -> Result<()> {
    let mismatch = |f: String| Err(BridgeError::ParamMismatch(f));
    if a.arch != b.arch {
        return mismatch("architecture".into());
    }
    if a.scale != b.scale {
        return mismatch("scale".into());
    }
    if with_version && a.version != b.version {
        return mismatch("version".into());
    }
    for (i, (x, y)) in a.weights.iter().zip(&b.weights).enumerate() {
        if x != y {
            return mismatch(format!("weight {i}"));
        }
    }
    for (i, (x, y)) in a.biases.iter().zip(&b.biases).enumerate() {
        if x != y {
            return mismatch(format!("bias {i}"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum InferenceVerdict {
    /// Labels agree and the sample is certified.
    Pass,
    /// Labels disagree on a certified sample.
    Fail,
    /// The sample sits inside the quantization margin.
    OutOfGuarantee { agreed: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceCheck {
    pub on_chain: u8,
    pub off_chain: u8,
    /// Float reference logit, or distance to the nearest threshold for trees.
    pub margin: f64,
    /// Certified error bound on the margin.
    pub bound: f64,
    #[serde(flatten)]
    pub verdict: InferenceVerdict,
}

/// Compares the L1 integer label of `x` against the float reference built
/// from the dequantized L1 parameters.
pub fn verify_l1_inference(x: &[f64], l1: &L1State) -> Result<InferenceCheck> {
    let model = l1.installed()?;
    let reference = inference::dequantize(model);
    let off_chain = inference::reference_classify(x, &reference)?;
    let on_chain = inference::predict(&inference::quantize_input(x, model.scale)?, model)?;

    let (margin, bound) = match &model.arch {
        ModelArch::DecisionTree { nodes, .. } => {
            // x is truncated to the grid, so any threshold within one step is ambiguous
            let nearest = nodes
                .iter()
                .zip(&reference.weights)
                .filter_map(|(n, t)| match n {
                    TreeNode::Split { feature, .. } => Some((x[*feature] - t).abs()),
                    TreeNode::Leaf { .. } => None,
                })
                .fold(f64::INFINITY, f64::min);
            (nearest, model.scale.resolution())
        }
        _ => {
            let (logit, err) = inference::quantization_error_bound(&reference, model.scale, x)?;
            (logit, err)
        }
    };
    let certified = margin.abs() > bound;
    let agreed = on_chain == off_chain;
    let verdict = match (certified, agreed) {
        (true, true) => InferenceVerdict::Pass,
        (true, false) => InferenceVerdict::Fail,
        (false, agreed) => InferenceVerdict::OutOfGuarantee { agreed },
    };
    Ok(InferenceCheck {
        on_chain,
        off_chain,
        margin,
        bound,
        verdict,
    })
}

/// Metrics a fresh L1 evaluation would report, for cross-layer checks.
pub fn l1_metrics(l1: &L1State, test_set: &TestSet) -> Result<Metrics> {
    Ok(poim::evaluate(l1.installed()?, test_set)?)
}
