//! Deterministic two-ledger simulation.
//!
//! A [`Ledger`] owns token balances, a block clock, an event log and one
//! contract. Transactions are metered up front, executed against a
//! snapshot and either committed whole or rolled back. One transaction per
//! block.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bridge::{self, BridgeError, Commitment, L1State, SerializedModel};
use crate::gascost::{self, BASE_TX_GAS, BLOCK_GAS_LIMIT};
use crate::inference::{self, InferenceError, ModelArch, QuantizedModel, Sample};
use crate::keccak::{self, Hash32};
use crate::poim::{AccountId, Decision, Metrics, PoimError, PoimState, Proposal, Resolution, TestSetChange, Tokens};

/// Governance calls other than proposals (storage writes plus bookkeeping).
pub const GOVERNANCE_CALL_GAS: u64 = 25_000;
/// Cold `SSTORE` of one word.
pub const SSTORE_GAS: u64 = 20_000;
/// `KECCAK256` base and per-word charges.
pub const KECCAK_BASE_GAS: u64 = 30;
pub const KECCAK_WORD_GAS: u64 = 6;
/// Reference single-sample latency reported alongside benchmark output.
pub const REFERENCE_BATCH1_SECONDS: f64 = 0.0680;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("{account} holds {balance}, needs {needed}")]
    InsufficientBalance {
        account: AccountId,
        balance: Tokens,
        needed: Tokens,
    },
    #[error("operation is not read-only")]
    NotAView,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Poim(#[from] PoimError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError<E> {
    #[error("unknown sender {0}")]
    UnknownSender(AccountId),
    #[error("declared gas {declared} exceeds the block limit")]
    AboveBlockLimit { declared: u64 },
    #[error("out of gas: declared {declared}, needs {required}")]
    OutOfGas { declared: u64, required: u64 },
    #[error("time must advance by at least one second")]
    ZeroAdvance,
    #[error("target reverted: {0}")]
    Target(E),
}

/// Execution context handed to a contract: the caller, the clock, and the
/// balance table.
pub struct TxContext<'a> {
    pub sender: &'a str,
    pub block: u64,
    pub timestamp: u64,
    accounts: &'a mut BTreeMap<AccountId, Tokens>,
    emitted: Vec<(String, Value)>,
}

impl TxContext<'_> {
    pub fn balance(&self, account: &str) -> Tokens {
        self.accounts.get(account).copied().unwrap_or(0)
    }

    pub fn debit(&mut self, account: &str, amount: Tokens) -> Result<(), ChainError> {
        let balance = self.balance(account);
        if balance < amount {
            return Err(ChainError::InsufficientBalance {
                account: account.to_string(),
                balance,
                needed: amount,
            });
        }
        self.accounts.insert(account.to_string(), balance - amount);
        Ok(())
    }

    /// Takes up to `amount`, returning what was actually taken.
    pub fn debit_up_to(&mut self, account: &str, amount: Tokens) -> Tokens {
        let taken = self.balance(account).min(amount);
        if taken > 0 {
            *self.accounts.get_mut(account).expect("positive balance") -= taken;
        }
        taken
    }

    pub fn credit(&mut self, account: &str, amount: Tokens) {
        if amount > 0 {
            *self.accounts.entry(account.to_string()).or_default() += amount;
        }
    }

    pub fn emit(&mut self, kind: &str, data: impl Serialize) {
        let value = serde_json::to_value(data).expect("event payload serializes");
        self.emitted.push((kind.to_string(), value));
    }
}

/// A contract hosted by a [`Ledger`].
pub trait Contract: Clone {
    type Call: Serialize + fmt::Debug;
    type Output: Serialize + fmt::Debug;

    /// Metered execution gas, excluding the base transaction charge.
    fn gas(&self, call: &Self::Call) -> u64;

    fn execute(&mut self, call: &Self::Call, ctx: &mut TxContext) -> Result<Self::Output, ContractError>;

    /// Read-only evaluation; mutating calls fail with [`ChainError::NotAView`].
    fn query(&self, call: &Self::Call) -> Result<Self::Output, ContractError>;

    fn digest(&self) -> Hash32;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTx<C> {
    pub sender: AccountId,
    pub call: C,
    pub gas_limit: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub chain_id: u64,
    pub block: u64,
    pub timestamp: u64,
    pub sender: AccountId,
    pub kind: String,
    pub data: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TxStatus {
    Success,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt<O> {
    pub block: u64,
    pub status: TxStatus,
    pub gas_used: u64,
    pub output: Option<O>,
    pub events: Vec<Event>,
}

impl<O> Receipt<O> {
    pub fn succeeded(&self) -> bool {
        self.status == TxStatus::Success
    }
}

#[derive(Serialize)]
struct StateView<'a> {
    chain_id: u64,
    block_number: u64,
    timestamp: u64,
    accounts: &'a BTreeMap<AccountId, Tokens>,
    contract: Hash32,
}

#[derive(Debug, Clone)]
pub struct Ledger<C> {
    pub chain_id: u64,
    block_number: u64,
    timestamp: u64,
    block_time: u64,
    accounts: BTreeMap<AccountId, Tokens>,
    events: Vec<Event>,
    contract: C,
}

impl<C: Contract> Ledger<C> {
    pub fn new(chain_id: u64, genesis_time: u64, block_time: u64, contract: C) -> Self {
        Self {
            chain_id,
            block_number: 0,
            timestamp: genesis_time,
            block_time: block_time.max(1),
            accounts: BTreeMap::new(),
            events: Vec::new(),
            contract,
        }
    }

    pub fn block_number(&self) -> u64 {
        self.block_number
    }
    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }
    pub fn contract(&self) -> &C {
        &self.contract
    }
    pub fn events(&self) -> &[Event] {
        &self.events
    }
    pub fn accounts(&self) -> &BTreeMap<AccountId, Tokens> {
        &self.accounts
    }
    pub fn balance(&self, account: &str) -> Tokens {
        self.accounts.get(account).copied().unwrap_or(0)
    }

    /// Creates an account, or tops it up, with freshly minted tokens.
    pub fn mint(&mut self, account: &str, amount: Tokens) {
        *self.accounts.entry(account.to_string()).or_default() += amount;
    }

    /// Hash of balances, clock and contract state. Events are excluded.
    pub fn state_hash(&self) -> Hash32 {
        let view = StateView {
            chain_id: self.chain_id,
            block_number: self.block_number,
            timestamp: self.timestamp,
            accounts: &self.accounts,
            contract: self.contract.digest(),
        };
        keccak::keccak256(&serde_json::to_vec(&view).expect("state serializes"))
    }

    /// Total gas `submit` would meter for `call`.
    pub fn estimate_gas(&self, call: &C::Call) -> u64 {
        BASE_TX_GAS + self.contract.gas(call)
    }

    fn push_event(&mut self, sender: &str, kind: String, data: Value) -> Event {
        let event = Event {
            seq: self.events.len() as u64,
            chain_id: self.chain_id,
            block: self.block_number,
            timestamp: self.timestamp,
            sender: sender.to_string(),
            kind,
            data,
        };
        self.events.push(event.clone());
        event
    }

    fn fail(
        &mut self,
        tx: &SimTx<C::Call>,
        gas_used: u64,
        error: SimError<ContractError>,
    ) -> (Receipt<C::Output>, SimError<ContractError>) {
        let event = self.push_event(
            &tx.sender,
            "tx_failed".into(),
            serde_json::json!({ "call": tx.call, "error": error.to_string() }),
        );
        let receipt = Receipt {
            block: self.block_number,
            status: TxStatus::Failed { error: error.to_string() },
            gas_used,
            output: None,
            events: vec![event],
        };
        (receipt, error)
    }

    /// Executes `tx` atomically in a new block. On failure the only
    /// change is a `tx_failed` event.
    pub fn submit(&mut self, tx: SimTx<C::Call>) -> Result<Receipt<C::Output>, (Receipt<C::Output>, SimError<ContractError>)> {
        if !self.accounts.contains_key(&tx.sender) {
            return Err(self.fail(&tx, 0, SimError::UnknownSender(tx.sender.clone())));
        }
        if tx.gas_limit > BLOCK_GAS_LIMIT {
            return Err(self.fail(&tx, 0, SimError::AboveBlockLimit { declared: tx.gas_limit }));
        }
        let required = self.estimate_gas(&tx.call);
        if required > tx.gas_limit {
            let err = SimError::OutOfGas {
                declared: tx.gas_limit,
                required,
            };
            return Err(self.fail(&tx, tx.gas_limit, err));
        }

        let snapshot = (self.contract.clone(), self.accounts.clone());
        let next_block = self.block_number + 1;
        let next_time = self.timestamp + self.block_time;
        let mut ctx = TxContext {
            sender: &tx.sender,
            block: next_block,
            timestamp: next_time,
            accounts: &mut self.accounts,
            emitted: Vec::new(),
        };
        match self.contract.execute(&tx.call, &mut ctx) {
            Ok(output) => {
                let emitted = std::mem::take(&mut ctx.emitted);
                self.block_number = next_block;
                self.timestamp = next_time;
                let events = emitted
                    .into_iter()
                    .map(|(kind, data)| self.push_event(&tx.sender, kind, data))
                    .collect();
                Ok(Receipt {
                    block: next_block,
                    status: TxStatus::Success,
                    gas_used: required,
                    output: Some(output),
                    events,
                })
            }
            Err(e) => {
                (self.contract, self.accounts) = snapshot;
                Err(self.fail(&tx, required, SimError::Target(e)))
            }
        }
    }

    /// Read-only execution at zero gas.
    pub fn call_view(&self, call: &C::Call) -> Result<C::Output, ContractError> {
        self.contract.query(call)
    }

    /// Closes an empty block `seconds` later.
    pub fn advance_time(&mut self, seconds: u64) -> Result<(), SimError<ContractError>> {
        if seconds == 0 {
            return Err(SimError::ZeroAdvance);
        }
        self.timestamp += seconds;
        self.block_number += 1;
        Ok(())
    }

    /// Events as JSON lines.
    pub fn event_lines(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    /// Raw logit; absent for decision trees.
    pub logit: Option<i128>,
}

fn predict(model: &QuantizedModel, x: &[i128]) -> Result<Prediction, ContractError> {
    let logit = match model.arch {
        ModelArch::DecisionTree { .. } => None,
        _ => Some(inference::forward(x, model)?),
    };
    Ok(Prediction {
        label: inference::predict(x, model)?,
        logit,
    })
}

/// Calls accepted by the L2 governance contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PoimCall {
    Propose { sample: Sample, stake: Tokens },
    FundVault { amount: Tokens },
    Bond { amount: Tokens },
    Challenge { version: u64, stake: Tokens },
    ChangeTestSet { change: TestSetChange, stake: Tokens },
    Vote { challenge: u64, weight: Tokens, yes: bool },
    Resolve { challenge: u64 },
    Infer { features: Vec<i128> },
    Metrics,
    ModelHash,
    ExportModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "output", rename_all = "snake_case")]
pub enum PoimOutput {
    Decision { decision: Decision },
    ChallengeOpened { challenge: u64 },
    Resolved { resolution: Resolution },
    Prediction { prediction: Prediction },
    Metrics { metrics: Metrics },
    ModelHash { hash: Hash32 },
    Model { payload: SerializedModel },
    Done,
}

/// L2 host for [`PoimState`]. Tokens held by the contract are the vault,
/// bonded governance stake and open challenge stakes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoimContract {
    pub state: PoimState,
}

impl PoimContract {
    pub fn new(state: PoimState) -> Self {
        Self { state }
    }

    pub fn holdings(&self) -> Tokens {
        let open: Tokens = self.state.challenges().values().map(|c| c.stake).sum();
        self.state.vault() + self.state.total_bonded() + open
    }
}

impl Contract for PoimContract {
    type Call = PoimCall;
    type Output = PoimOutput;

    fn gas(&self, call: &PoimCall) -> u64 {
        let inference = gascost::analytic_gas(&self.state.model().arch);
        match call {
            // one forward for the micro-step, one per test sample
            PoimCall::Propose { .. } => inference * (self.state.test_set().len() as u64 + 1),
            PoimCall::Infer { .. } => inference,
            PoimCall::Resolve { .. } => GOVERNANCE_CALL_GAS + inference * self.state.test_set().len() as u64,
            PoimCall::Metrics | PoimCall::ModelHash | PoimCall::ExportModel => 0,
            _ => GOVERNANCE_CALL_GAS,
        }
    }

    fn execute(&mut self, call: &PoimCall, ctx: &mut TxContext) -> Result<PoimOutput, ContractError> {
        let sender = ctx.sender.to_string();
        let out = match call {
            PoimCall::Propose { sample, stake } => {
                ctx.debit(&sender, *stake)?;
                let proposal = Proposal {
                    proposer: sender.clone(),
                    stake: *stake,
                    sample: sample.clone(),
                    eta: self.state.params().eta_at(self.state.model().scale)?,
                    submitted_at: ctx.timestamp,
                };
                let decision = self.state.propose_update(&proposal)?;
                ctx.credit(&sender, decision.payout());
                ctx.emit("proposal", decision);
                PoimOutput::Decision { decision }
            }
            PoimCall::FundVault { amount } => {
                ctx.debit(&sender, *amount)?;
                self.state.fund_vault(*amount);
                ctx.emit("vault_funded", amount);
                PoimOutput::Done
            }
            PoimCall::Bond { amount } => {
                ctx.debit(&sender, *amount)?;
                self.state.bond(&sender, *amount);
                ctx.emit("bonded", amount);
                PoimOutput::Done
            }
            PoimCall::Challenge { version, stake } => {
                ctx.debit(&sender, *stake)?;
                let challenge = self.state.open_challenge(*version, &sender, *stake, ctx.timestamp)?;
                ctx.emit("challenge_opened", challenge);
                PoimOutput::ChallengeOpened { challenge }
            }
            PoimCall::ChangeTestSet { change, stake } => {
                ctx.debit(&sender, *stake)?;
                let challenge = self.state.propose_testset_change(change.clone(), &sender, *stake, ctx.timestamp)?;
                ctx.emit("testset_change_opened", challenge);
                PoimOutput::ChallengeOpened { challenge }
            }
            PoimCall::Vote { challenge, weight, yes } => {
                self.state.vote(*challenge, &sender, *weight, *yes, ctx.timestamp)?;
                ctx.emit("vote", (challenge, weight, yes));
                PoimOutput::Done
            }
            PoimCall::Resolve { challenge } => {
                let now = ctx.timestamp;
                let resolution = self
                    .state
                    .resolve_challenge(*challenge, now, |who, amount| ctx.debit_up_to(who, amount))?;
                for (who, amount) in &resolution.payouts {
                    ctx.credit(who, *amount);
                }
                ctx.emit("challenge_resolved", &resolution);
                PoimOutput::Resolved { resolution }
            }
            view => self.query(view)?,
        };
        Ok(out)
    }

    fn query(&self, call: &PoimCall) -> Result<PoimOutput, ContractError> {
        match call {
            PoimCall::Infer { features } => Ok(PoimOutput::Prediction {
                prediction: predict(self.state.model(), features)?,
            }),
            PoimCall::Metrics => Ok(PoimOutput::Metrics {
                metrics: self.state.metrics(),
            }),
            PoimCall::ModelHash => Ok(PoimOutput::ModelHash {
                hash: bridge::serialize(self.state.model())?.hash(),
            }),
            PoimCall::ExportModel => Ok(PoimOutput::Model {
                payload: bridge::serialize(self.state.model())?,
            }),
            _ => Err(ChainError::NotAView.into()),
        }
    }

    fn digest(&self) -> Hash32 {
        self.state.digest()
    }
}

/// Calls accepted by the L1 inference contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum InferenceCall {
    Commit {
        hash: Hash32,
    },
    /// Installs `payload`; `source` is the L2 model it must equal field by field.
    Transfer {
        payload: SerializedModel,
        source: QuantizedModel,
    },
    Infer {
        features: Vec<i128>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "output", rename_all = "snake_case")]
pub enum InferenceOutput {
    Committed { commitment: Commitment },
    Installed { version: u64 },
    Prediction { prediction: Prediction },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceContract {
    pub l1: L1State,
}

impl Contract for InferenceContract {
    type Call = InferenceCall;
    type Output = InferenceOutput;

    fn gas(&self, call: &InferenceCall) -> u64 {
        match call {
            InferenceCall::Commit { .. } => SSTORE_GAS,
            InferenceCall::Transfer { payload, .. } => {
                let words = payload.len().div_ceil(32) as u64;
                KECCAK_BASE_GAS + KECCAK_WORD_GAS * words + SSTORE_GAS * words
            }
            InferenceCall::Infer { .. } => self.l1.model.as_ref().map_or(0, |m| gascost::analytic_gas(&m.arch)),
        }
    }

    fn execute(&mut self, call: &InferenceCall, ctx: &mut TxContext) -> Result<InferenceOutput, ContractError> {
        match call {
            InferenceCall::Commit { hash } => {
                let commitment = Commitment {
                    hash: *hash,
                    committed_at: ctx.block,
                };
                self.l1.commitment = Some(commitment);
                ctx.emit("committed", commitment);
                Ok(InferenceOutput::Committed { commitment })
            }
            InferenceCall::Transfer { payload, source } => {
                bridge::transfer_and_verify(&mut self.l1, &payload.bytes, source)?;
                let version = self.l1.installed()?.version;
                ctx.emit("installed", version);
                Ok(InferenceOutput::Installed { version })
            }
            view => self.query(view),
        }
    }

    fn query(&self, call: &InferenceCall) -> Result<InferenceOutput, ContractError> {
        match call {
            InferenceCall::Infer { features } => Ok(InferenceOutput::Prediction {
                prediction: predict(self.l1.installed()?, features)?,
            }),
            _ => Err(ChainError::NotAView.into()),
        }
    }

    fn digest(&self) -> Hash32 {
        self.l1.digest()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch: usize,
    pub total_seconds: f64,
    pub per_sample_seconds: f64,
}

/// Wall-clock timing of view inference over random inputs in `[-1, 1]`.
pub fn throughput_bench(model: &QuantizedModel, batch_sizes: &[usize], seed: u64) -> Result<Vec<BenchRow>, ContractError> {
    let ledger = Ledger::new(
        1,
        0,
        12,
        InferenceContract {
            l1: L1State {
                commitment: None,
                model: Some(model.clone()),
            },
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = model.scale.value();
    let d = model.arch.input_dim();
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &batch in batch_sizes {
        let calls: Vec<InferenceCall> = (0..batch)
            .map(|_| InferenceCall::Infer {
                features: (0..d).map(|_| rng.random_range(-one..=one)).collect(),
            })
            .collect();
        let start = Instant::now();
        for call in &calls {
            ledger.call_view(call)?;
        }
        let total = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            batch,
            total_seconds: total,
            per_sample_seconds: if batch == 0 { 0.0 } else { total / batch as f64 },
        });
    }
    Ok(rows)
}

/// Fixed-width batch table with the reference single-sample latency.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!("{:>8} {:>14} {:>16}\n", "batch", "total_s", "per_sample_s");
    for r in rows {
        out.push_str(&format!(
            "{:>8} {:>14.6} {:>16.9}\n",
            r.batch, r.total_seconds, r.per_sample_seconds
        ));
    }
    out.push_str(&format!("reference batch 1: {REFERENCE_BATCH1_SECONDS:.4} s (report only)\n"));
    out
}
