//! Replayable simulations: a run configuration plus a scripted list of
//! steps against both ledgers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainsim::{ContractError, InferenceCall, InferenceContract, Ledger, PoimCall, PoimContract, PoimOutput, SimError, SimTx};
use crate::dataset::{self, DatasetError, EncodedDataset};
use crate::fixedpoint::{FixedError, Scale};
use crate::inference::{self, FloatModel, InferenceError, ModelArch, QuantizedModel, Sample};
use crate::keccak::{self, Hash32};
use crate::poim::{self, ClassCounts, Metrics, PoimError, PoimParams, PoimState, StressSetup, StressTrace, TestSet, TestSetChange, Tokens};

const RELAYER: &str = "relayer";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(String),
    #[error("step {step}: {message}")]
    Step { step: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Poim(#[from] PoimError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synth { n_normal: usize, n_attack: usize, separation: f64 },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Training samples used to bootstrap the initial model.
    #[serde(default = "default_seed_samples")]
    pub seed_samples: usize,
    #[serde(default = "default_epochs")]
    pub bootstrap_epochs: usize,
}

fn default_test_fraction() -> f64 {
    0.3
}
fn default_seed_samples() -> usize {
    50
}
fn default_epochs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub genesis_time: u64,
    pub l2_block_time: u64,
    pub l1_block_time: u64,
    pub l2_chain_id: u64,
    pub l1_chain_id: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            genesis_time: 1_700_000_000,
            l2_block_time: 2,
            l1_block_time: 12,
            l2_chain_id: 10,
            l1_chain_id: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressConfig {
    pub adversarial_fraction: f64,
    #[serde(default = "default_proposals")]
    pub proposals: usize,
    /// Feature noise standard deviation in standardized units.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn default_proposals() -> usize {
    100
}
fn default_noise() -> f64 {
    3.0
}

/// Everything a run depends on. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Fixed-point scale exponent.
    pub scale: u32,
    #[serde(default = "default_metric_scale")]
    pub metric_scale: i64,
    pub model: ModelArch,
    /// Initial float parameters are uniform in `[-init_bound, init_bound]`.
    #[serde(default)]
    pub init_bound: f64,
    #[serde(default)]
    pub params: PoimParams,
    pub data: DataConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    /// Initial L2 balances.
    #[serde(default)]
    pub accounts: BTreeMap<String, Tokens>,
    pub stress: Option<StressConfig>,
}

fn default_metric_scale() -> i64 {
    poim::METRIC_SCALE
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let DataSource::Csv { path: data } = &mut cfg.data.source {
            if data.is_relative() {
                *data = path.parent().unwrap_or(Path::new(".")).join(&*data);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        Scale::new(self.scale)?;
        self.model.validate()?;
        if self.model.input_dim() != dataset::FEATURES {
            return bad(format!(
                "model must take {} features, takes {}",
                dataset::FEATURES,
                self.model.input_dim()
            ));
        }
        if self.metric_scale <= 0 {
            return bad("metric_scale must be positive".into());
        }
        if !(self.init_bound.is_finite() && self.init_bound >= 0.0) {
            return bad("init_bound must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.data.test_fraction) {
            return bad("test_fraction must lie in [0, 1]".into());
        }
        if !self.params.eta.is_finite() || self.params.eta <= 0.0 {
            return bad("eta must be positive".into());
        }
        if self.params.quorum_bps > 10_000 {
            return bad("quorum_bps must be at most 10000".into());
        }
        if let DataSource::Synth {
            n_normal,
            n_attack,
            separation,
        } = self.data.source
        {
            if n_normal == 0 || n_attack == 0 || separation.is_nan() || separation < 0.0 {
                return bad("synthetic data needs positive counts and separation >= 0".into());
            }
        }
        if let Some(s) = &self.stress {
            if !(0.0..=1.0).contains(&s.adversarial_fraction) {
                return bad("adversarial_fraction must lie in [0, 1]".into());
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> Scale {
        Scale::new(self.scale).expect("validated")
    }
}

/// Picks the sample a step refers to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub train: Option<usize>,
    pub test: Option<usize>,
    /// Standardized real features; requires `label`.
    pub features: Option<Vec<f64>>,
    pub label: Option<u8>,
    #[serde(default)]
    pub flip_label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TestSetOp {
    Add { sample: SampleSpec },
    Modify { index: usize, sample: SampleSpec },
    Remove { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
/// Amounts are u64 because tagged enums cannot buffer u128.
pub enum Step {
    Fund {
        sender: String,
        amount: u64,
    },
    Bond {
        sender: String,
        amount: u64,
    },
    Propose {
        sender: String,
        stake: u64,
        #[serde(flatten)]
        sample: SampleSpec,
        gas_limit: Option<u64>,
    },
    /// `count` proposals over consecutive training samples, of which
    /// `round(adversarial_fraction · count)` are label-flipped.
    Stream {
        count: usize,
        #[serde(default)]
        start: usize,
        stake: u64,
        #[serde(default)]
        adversarial_fraction: f64,
        #[serde(default = "default_prefix")]
        sender_prefix: String,
    },
    Challenge {
        sender: String,
        version: u64,
        stake: u64,
    },
    TestsetChange {
        sender: String,
        stake: u64,
        #[serde(flatten)]
        op: TestSetOp,
    },
    Vote {
        sender: String,
        challenge: u64,
        weight: u64,
        yes: bool,
    },
    Resolve {
        sender: String,
        challenge: u64,
    },
    Advance {
        seconds: u64,
    },
    /// Commits the current L2 model on L1.
    Commit,
    /// Relays the current L2 model to L1, optionally with one byte XOR-ed.
    Transfer {
        tamper_byte: Option<usize>,
    },
    Infer {
        #[serde(flatten)]
        sample: SampleSpec,
        #[serde(default)]
        view: bool,
    },
}

fn default_prefix() -> String {
    "stream".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ScenarioError::Config(format!("scenario: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub final_state_hash: Hash32,
    pub l2_state_hash: Hash32,
    pub l1_state_hash: Hash32,
    pub initial_metrics: Metrics,
    pub final_metrics: Metrics,
    pub model_version: u64,
    pub transactions: usize,
    pub failed_transactions: usize,
    pub vault: Tokens,
    pub vault_conserved: bool,
    pub supply_conserved: bool,
}

/// Outcome of a run: summary plus the exported logs.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub report: Report,
    pub history: String,
    pub l2_events: String,
    pub l1_events: String,
    pub stress: Option<StressTrace>,
    pub l2: Ledger<PoimContract>,
    pub l1: Ledger<InferenceContract>,
}

/// Data and genesis model derived from a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: EncodedDataset,
    pub test_set: TestSet,
    pub seed_samples: Vec<Sample>,
    pub initial: QuantizedModel,
    pub bootstrapped: QuantizedModel,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let records = match &cfg.data.source {
        DataSource::Synth {
            n_normal,
            n_attack,
            separation,
        } => dataset::synth_generate(*n_normal, *n_attack, *separation, cfg.seed),
        DataSource::Csv { path } => dataset::ingest(path)?,
    };
    let split = dataset::temporal_split(&records, cfg.data.test_fraction)?;
    let data = dataset::standardize_encode(&split, cfg.scale())?;
    let test_set = TestSet::new(data.test.clone()).map_err(|e| ScenarioError::Config(format!("test split unusable: {e}")))?;
    let seed_samples: Vec<Sample> = data.train.iter().take(cfg.data.seed_samples).cloned().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model0 = if cfg.init_bound > 0.0 {
        FloatModel::random(cfg.model.clone(), cfg.init_bound, &mut rng)?
    } else {
        FloatModel::zeros(cfg.model.clone())?
    };
    let initial = inference::quantize(&model0, cfg.scale())?;
    let eta = cfg.params.eta_at(cfg.scale())?;
    let mut bootstrapped = poim::bootstrap(&initial, &seed_samples, eta, cfg.data.bootstrap_epochs)?;
    bootstrapped.version = 0;
    Ok(Prepared {
        data,
        test_set,
        seed_samples,
        initial,
        bootstrapped,
    })
}

fn resolve_sample(sel: &SampleSpec, data: &EncodedDataset, step: usize) -> Result<Sample> {
    let err = |message: String| ScenarioError::Step { step, message };
    let mut sample = match (sel.train, sel.test, &sel.features) {
        (Some(i), None, None) => data
            .train
            .get(i)
            .cloned()
            .ok_or_else(|| err(format!("train index {i} out of range")))?,
        (None, Some(i), None) => data
            .test
            .get(i)
            .cloned()
            .ok_or_else(|| err(format!("test index {i} out of range")))?,
        (None, None, Some(x)) => {
            let label = sel.label.ok_or_else(|| err("features need a label".into()))?;
            Sample::new(inference::quantize_input(x, data.scale)?, label)
        }
        _ => return Err(err("give exactly one of train, test or features".into())),
    };
    if let (Some(l), None) = (sel.label, &sel.features) {
        sample.label = l;
    }
    if sel.flip_label {
        sample.label = 1 - sample.label.min(1);
    }
    Ok(sample)
}

struct Runner<'a> {
    data: &'a EncodedDataset,
    l2: Ledger<PoimContract>,
    l1: Ledger<InferenceContract>,
    transactions: usize,
    failed: usize,
}

impl Runner<'_> {
    fn l2_tx(&mut self, sender: &str, call: PoimCall, gas_limit: Option<u64>) -> Option<PoimOutput> {
        let gas_limit = gas_limit.unwrap_or_else(|| self.l2.estimate_gas(&call));
        self.transactions += 1;
        match self.l2.submit(SimTx {
            sender: sender.to_string(),
            call,
            gas_limit,
        }) {
            Ok(r) => r.output,
            Err(_) => {
                self.failed += 1;
                None
            }
        }
    }

    fn l1_tx(&mut self, call: InferenceCall) {
        let gas_limit = self.l1.estimate_gas(&call);
        self.transactions += 1;
        if self
            .l1
            .submit(SimTx {
                sender: RELAYER.into(),
                call,
                gas_limit,
            })
            .is_err()
        {
            self.failed += 1;
        }
    }

    fn step(&mut self, i: usize, step: &Step, rng: &mut ChaCha8Rng) -> Result<()> {
        let step_err = |e: SimError<ContractError>| ScenarioError::Step {
            step: i,
            message: e.to_string(),
        };
        match step {
            Step::Fund { sender, amount } => {
                self.l2_tx(sender, PoimCall::FundVault { amount: (*amount).into() }, None);
            }
            Step::Bond { sender, amount } => {
                self.l2_tx(sender, PoimCall::Bond { amount: (*amount).into() }, None);
            }
            Step::Propose {
                sender,
                stake,
                sample,
                gas_limit,
            } => {
                let sample = resolve_sample(sample, self.data, i)?;
                self.l2_tx(
                    sender,
                    PoimCall::Propose {
                        sample,
                        stake: (*stake).into(),
                    },
                    *gas_limit,
                );
            }
            Step::Stream {
                count,
                start,
                stake,
                adversarial_fraction,
                sender_prefix,
            } => {
                if self.data.train.is_empty() {
                    return Err(ScenarioError::Step {
                        step: i,
                        message: "no training samples".into(),
                    });
                }
                let n_bad = (adversarial_fraction.clamp(0.0, 1.0) * *count as f64).round() as usize;
                let mut order: Vec<usize> = (0..*count).collect();
                order.shuffle(rng);
                let mut flip = vec![false; *count];
                order[..n_bad].iter().for_each(|j| flip[*j] = true);
                for (j, flip) in flip.into_iter().enumerate() {
                    let mut sample = self.data.train[(start + j) % self.data.train.len()].clone();
                    if flip {
                        sample.label = 1 - sample.label;
                    }
                    let sender = format!("{sender_prefix}{}", rng.random_range(0..8u8));
                    self.l2_tx(
                        &sender,
                        PoimCall::Propose {
                            sample,
                            stake: (*stake).into(),
                        },
                        None,
                    );
                }
            }
            Step::Challenge { sender, version, stake } => {
                self.l2_tx(
                    sender,
                    PoimCall::Challenge {
                        version: *version,
                        stake: (*stake).into(),
                    },
                    None,
                );
            }
            Step::TestsetChange { sender, stake, op } => {
                let change = match op {
                    TestSetOp::Add { sample } => TestSetChange::Add {
                        sample: resolve_sample(sample, self.data, i)?,
                    },
                    TestSetOp::Modify { index, sample } => TestSetChange::Modify {
                        index: *index,
                        sample: resolve_sample(sample, self.data, i)?,
                    },
                    TestSetOp::Remove { index } => TestSetChange::Remove { index: *index },
                };
                self.l2_tx(
                    sender,
                    PoimCall::ChangeTestSet {
                        change,
                        stake: (*stake).into(),
                    },
                    None,
                );
            }
            Step::Vote {
                sender,
                challenge,
                weight,
                yes,
            } => {
                self.l2_tx(
                    sender,
                    PoimCall::Vote {
                        challenge: *challenge,
                        weight: (*weight).into(),
                        yes: *yes,
                    },
                    None,
                );
            }
            Step::Resolve { sender, challenge } => {
                self.l2_tx(sender, PoimCall::Resolve { challenge: *challenge }, None);
            }
            Step::Advance { seconds } => {
                self.l2.advance_time(*seconds).map_err(step_err)?;
                self.l1.advance_time(*seconds).map_err(step_err)?;
            }
            Step::Commit => {
                let PoimOutput::ModelHash { hash } = self.l2.call_view(&PoimCall::ModelHash).map_err(|e| step_err(SimError::Target(e)))?
                else {
                    unreachable!("model hash view returns a hash")
                };
                self.l1_tx(InferenceCall::Commit { hash });
            }
            Step::Transfer { tamper_byte } => {
                let PoimOutput::Model { mut payload } = self
                    .l2
                    .call_view(&PoimCall::ExportModel)
                    .map_err(|e| step_err(SimError::Target(e)))?
                else {
                    unreachable!("export view returns a payload")
                };
                if let Some(b) = tamper_byte {
                    let at = b % payload.bytes.len();
                    payload.bytes[at] ^= 0x01;
                }
                let source = self.l2.contract().state.model().clone();
                self.l1_tx(InferenceCall::Transfer { payload, source });
            }
            Step::Infer { sample, view } => {
                let sample = resolve_sample(sample, self.data, i)?;
                let call = InferenceCall::Infer { features: sample.features };
                if *view {
                    let _ = self.l1.call_view(&call);
                } else {
                    self.l1_tx(call);
                }
            }
        }
        Ok(())
    }
}

/// Runs `scenario` under `cfg`. Failed transactions are recorded and the
/// run continues; malformed steps abort it.
pub fn simulate(cfg: &RunConfig, scenario: &Scenario) -> Result<Simulation> {
    let prepared = prepare(cfg)?;
    let state = PoimState::new(
        prepared.bootstrapped.clone(),
        prepared.test_set.clone(),
        PoimParams {
            metric_scale: cfg.metric_scale,
            ..cfg.params.clone()
        },
        ClassCounts::of(&prepared.seed_samples),
    )?;
    state.verify_metrics()?;
    let initial_metrics = state.metrics();
    let chain = &cfg.chain;
    let mut l2 = Ledger::new(chain.l2_chain_id, chain.genesis_time, chain.l2_block_time, PoimContract::new(state));
    for (who, amount) in &cfg.accounts {
        l2.mint(who, *amount);
    }
    let mut l1 = Ledger::new(
        chain.l1_chain_id,
        chain.genesis_time,
        chain.l1_block_time,
        InferenceContract::default(),
    );
    l1.mint(RELAYER, 0);
    let supply: Tokens = cfg.accounts.values().sum();

    let mut runner = Runner {
        data: &prepared.data,
        l2,
        l1,
        transactions: 0,
        failed: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ce0_a110);
    for (i, step) in scenario.steps.iter().enumerate() {
        runner.step(i, step, &mut rng)?;
    }

    let stress = match &cfg.stress {
        Some(s) => Some(run_stress(cfg, &prepared, s)?),
        None => None,
    };

    let Runner {
        l2,
        l1,
        transactions,
        failed,
        ..
    } = runner;
    let contract = l2.contract();
    let held: Tokens = l2.accounts().values().sum();
    let l2_hash = l2.state_hash();
    let l1_hash = l1.state_hash();
    let mut both = Vec::with_capacity(64);
    both.extend_from_slice(l2_hash.as_bytes());
    both.extend_from_slice(l1_hash.as_bytes());
    let report = Report {
        final_state_hash: keccak::keccak256(&both),
        l2_state_hash: l2_hash,
        l1_state_hash: l1_hash,
        initial_metrics,
        final_metrics: contract.state.metrics(),
        model_version: contract.state.model().version,
        transactions,
        failed_transactions: failed,
        vault: contract.state.vault(),
        vault_conserved: contract.state.vault_conserved(),
        supply_conserved: held + contract.holdings() == supply,
    };
    Ok(Simulation {
        report,
        history: contract.state.history_lines(),
        l2_events: l2.event_lines(),
        l1_events: l1.event_lines(),
        stress,
        l2,
        l1,
    })
}

fn run_stress(cfg: &RunConfig, prepared: &Prepared, s: &StressConfig) -> Result<StressTrace> {
    let train = &prepared.data.train;
    let rest = &train[prepared.seed_samples.len().min(train.len())..];
    let pool = if rest.is_empty() { train.as_slice() } else { rest };
    if pool.is_empty() {
        return Err(ScenarioError::Config("no training samples for the stress stream".into()));
    }
    let honest_stream = pool.iter().cycle().take(s.proposals).cloned().collect();
    let setup = StressSetup {
        initial: prepared.initial.clone(),
        seed_samples: prepared.seed_samples.clone(),
        honest_stream,
        test_set: prepared.test_set.clone(),
        params: PoimParams {
            metric_scale: cfg.metric_scale,
            ..cfg.params.clone()
        },
        bootstrap_epochs: cfg.data.bootstrap_epochs,
        noise_std: s.noise_std * cfg.scale().value() as f64,
    };
    Ok(poim::stress_test(&setup, s.adversarial_fraction, cfg.seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const CONFIG: &str = r#"
seed = 7
scale = 6

[model]
kind = "linear"
inputs = 7

[params]
min_stake = 10
eta = 0.05
alpha = { acc = 1, f1 = 1 }

[data]
source = "synth"
n_normal = 120
n_attack = 80
separation = 4.0
seed_samples = 20

[accounts]
treasury = 1000000
alice = 10000
v1 = 5000
v2 = 5000
stream0 = 1000
stream1 = 1000
stream2 = 1000
stream3 = 1000
stream4 = 1000
stream5 = 1000
stream6 = 1000
stream7 = 1000
"#;

    const SCENARIO: &str = r#"
[[step]]
action = "fund"
sender = "treasury"
amount = 500000

[[step]]
action = "bond"
sender = "v1"
amount = 3000

[[step]]
action = "bond"
sender = "v2"
amount = 2000

[[step]]
action = "stream"
count = 60
start = 20
stake = 10
adversarial_fraction = 0.5

[[step]]
action = "propose"
sender = "alice"
stake = 10
train = 3
flip_label = true

[[step]]
action = "commit"

[[step]]
action = "transfer"
tamper_byte = 40

[[step]]
action = "transfer"

[[step]]
action = "infer"
test = 0

[[step]]
action = "advance"
seconds = 3600
"#;

    #[test]
    fn config_parses_and_validates() {
        let cfg = RunConfig::from_toml(CONFIG).unwrap();
        assert_eq!(cfg.params.imbalance_ratio, 5);
        assert_eq!(cfg.params.alpha.f1, 1);
        assert!(RunConfig::from_toml(&CONFIG.replace("scale = 6", "scale = 19")).is_err());
        assert!(RunConfig::from_toml(&CONFIG.replace("inputs = 7", "inputs = 3")).is_err());
        assert!(RunConfig::from_toml(&CONFIG.replace("seed = 7", "seed = 7\nbogus = 1")).is_err());
    }

    #[test]
    fn empty_scenario_reports_genesis() {
        let cfg = RunConfig::from_toml(CONFIG).unwrap();
        let sim = simulate(&cfg, &Scenario::default()).unwrap();
        assert_eq!(sim.report.transactions, 0);
        assert_eq!(sim.report.initial_metrics, sim.report.final_metrics);
        assert!(sim.history.is_empty());
        assert_eq!(simulate(&cfg, &Scenario::default()).unwrap().report, sim.report);
    }

    #[test]
    fn scripted_run_is_deterministic_and_conserving() {
        let cfg = RunConfig::from_toml(CONFIG).unwrap();
        let scenario = Scenario::from_toml(SCENARIO).unwrap();
        let a = simulate(&cfg, &scenario).unwrap();
        let b = simulate(&cfg, &scenario).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.history, b.history);
        assert_eq!(a.l2_events, b.l2_events);
        assert!(a.report.vault_conserved && a.report.supply_conserved);
        assert_eq!(a.report.transactions, 3 + 60 + 1 + 1 + 2 + 1);
        // the tampered transfer fails, the clean one installs the L2 model
        assert!(a.report.failed_transactions >= 1);
        assert_eq!(a.l1.contract().l1.model.as_ref(), Some(a.l2.contract().state.model()));
        let other = RunConfig { seed: 8, ..cfg };
        assert_ne!(
            simulate(&other, &scenario).unwrap().report.final_state_hash,
            a.report.final_state_hash
        );
    }

    #[test]
    fn stress_section_produces_trace() {
        let text = format!("{CONFIG}\n[stress]\nadversarial_fraction = 0.5\nproposals = 40\n");
        let cfg = RunConfig::from_toml(&text).unwrap();
        let sim = simulate(&cfg, &Scenario::default()).unwrap();
        let trace = sim.stress.unwrap();
        assert_eq!(trace.steps.len(), 40);
        assert_eq!(trace.steps.iter().filter(|s| s.poison.is_some()).count(), 20);
    }

    #[test]
    fn bad_steps_abort() {
        let cfg = RunConfig::from_toml(CONFIG).unwrap();
        let s = Scenario::from_toml("[[step]]\naction = \"propose\"\nsender = \"alice\"\nstake = 10\ntrain = 100000\n").unwrap();
        assert!(matches!(simulate(&cfg, &s), Err(ScenarioError::Step { step: 0, .. })));
        let s = Scenario::from_toml("[[step]]\naction = \"advance\"\nseconds = 0\n").unwrap();
        assert!(matches!(simulate(&cfg, &s), Err(ScenarioError::Step { step: 0, .. })));
        assert!(Scenario::from_toml("[[step]]\naction = \"dance\"\n").is_err());
    }
}
