//! Analytic gas model for on-chain inference.
//!
//! Every multiply-accumulate costs one warm `SLOAD` of the weight, a
//! `CALLDATALOAD` of the input, `MUL`, `DIV`, `ADD` and loop bookkeeping.
//! Architecture bounds are closed-form sums of MACs, ReLUs and bias loads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{rnn_step_width, ModelArch, QuantizedModel};

pub const BLOCK_GAS_LIMIT: u64 = 30_000_000;
pub const BASE_TX_GAS: u64 = 21_000;

/// Per-opcode gas charges (Berlin schedule, warm storage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpcodeBudget {
    pub sload: u64,
    pub calldataload: u64,
    pub mul: u64,
    pub div: u64,
    pub add: u64,
    pub loop_overhead: u64,
    pub relu: u64,
}

impl OpcodeBudget {
    pub const BERLIN: OpcodeBudget = OpcodeBudget {
        sload: 100,
        calldataload: 3,
        mul: 5,
        div: 5,
        add: 3,
        loop_overhead: 8,
        relu: 5,
    };

    /// `g_MAC`, 124 gas under the Berlin schedule.
    pub const fn mac(&self) -> u64 {
        self.sload + self.calldataload + self.mul + self.div + self.add + self.loop_overhead
    }

    /// Loading and adding one bias, 103 gas under the Berlin schedule.
    pub const fn bias_init(&self) -> u64 {
        self.sload + self.add
    }
}

impl Default for OpcodeBudget {
    fn default() -> Self {
        Self::BERLIN
    }
}

const BUDGET: OpcodeBudget = OpcodeBudget::BERLIN;

/// Fixed overhead per RNN unit-step, charged as a lump sum.
pub const RNN_STEP_OVERHEAD: u64 = 15;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GasError {
    #[error("kernel size {kernel} exceeds input dimension {inputs}")]
    KernelTooLarge { kernel: u64, inputs: u64 },
    #[error("dimension must be positive: {0}")]
    ZeroDimension(&'static str),
}

/// `124 d + 103`.
pub fn gas_linear(d: u64) -> u64 {
    BUDGET.mac() * d + BUDGET.bias_init()
}

/// `g_MAC F o (K+1) + G_R F o + 103 F` with `o = d − K + 1`.
pub fn gas_cnn(d: u64, kernel: u64, filters: u64) -> Result<u64, GasError> {
    if kernel == 0 {
        return Err(GasError::ZeroDimension("kernel"));
    }
    if kernel > d {
        return Err(GasError::KernelTooLarge { kernel, inputs: d });
    }
    let o = d - kernel + 1;
    Ok(BUDGET.mac() * filters * o * (kernel + 1) + BUDGET.relu * filters * o + BUDGET.bias_init() * filters)
}

/// `g_MAC T U (d_in + U + 1) + 15 T U` with `d_in = ceil(d / T)`.
pub fn gas_rnn(d: u64, units: u64, timesteps: u64) -> Result<u64, GasError> {
    if timesteps == 0 {
        return Err(GasError::ZeroDimension("timesteps"));
    }
    let d_in = rnn_step_width(d as usize, timesteps as usize) as u64;
    Ok(BUDGET.mac() * timesteps * units * (d_in + units + 1) + RNN_STEP_OVERHEAD * timesteps * units)
}

/// Dense layers: one linear unit per neuron, plus a ReLU per hidden activation.
pub fn gas_mlp(inputs: u64, layers: &[u64]) -> u64 {
    let mut prev = inputs;
    let mut total = 0;
    for (i, &width) in layers.iter().enumerate() {
        total += width * gas_linear(prev);
        if i + 1 < layers.len() {
            total += width * BUDGET.relu;
        }
        prev = width;
    }
    total
}

/// Per level: threshold `SLOAD`, feature `CALLDATALOAD`, compare, bookkeeping;
/// then one `SLOAD` of the leaf label.
pub fn gas_tree(depth: u64) -> u64 {
    depth * (BUDGET.sload + BUDGET.calldataload + BUDGET.add + BUDGET.loop_overhead) + BUDGET.sload
}

/// Analytic inference gas for an architecture (no base transaction cost).
pub fn analytic_gas(arch: &ModelArch) -> u64 {
    let d = arch.input_dim() as u64;
    match arch {
        ModelArch::Linear { .. } => gas_linear(d),
        ModelArch::Mlp { layers, .. } => {
            let layers: Vec<u64> = layers.iter().map(|l| *l as u64).collect();
            gas_mlp(d, &layers)
        }
        ModelArch::Cnn1d { filters, kernel, .. } => gas_cnn(d, *kernel as u64, *filters as u64).expect("validated arch has kernel <= d"),
        ModelArch::Rnn { units, timesteps, .. } => gas_rnn(d, *units as u64, *timesteps as u64).expect("validated arch has timesteps >= 1"),
        ModelArch::DecisionTree { .. } => gas_tree(arch.tree_depth() as u64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasReport {
    pub model_id: String,
    pub analytic_gas: u64,
    pub base_tx_gas: u64,
    pub total: u64,
    pub within_block_limit: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub usd_cost: Option<f64>,
}

impl GasReport {
    pub fn for_arch(arch: &ModelArch) -> Self {
        Self::from_analytic(arch.label(), analytic_gas(arch))
    }

    pub fn from_analytic(model_id: String, analytic_gas: u64) -> Self {
        let total = analytic_gas + BASE_TX_GAS;
        Self {
            model_id,
            analytic_gas,
            base_tx_gas: BASE_TX_GAS,
            total,
            within_block_limit: total <= BLOCK_GAS_LIMIT,
            usd_cost: None,
        }
    }

    pub fn with_usd(mut self, gas_price_gwei: f64, token_usd: f64) -> Self {
        self.usd_cost = Some(gas_to_usd(self.total, gas_price_gwei, token_usd));
        self
    }

    /// One JSON object on a single line.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn gas_for_model(model: &QuantizedModel) -> GasReport {
    GasReport::for_arch(&model.arch)
}

/// `gas · price[gwei] · 10⁻⁹ · token price[USD]`.
pub fn gas_to_usd(gas: u64, gas_price_gwei: f64, token_usd: f64) -> f64 {
    gas as f64 * gas_price_gwei * 1e-9 * token_usd
}
