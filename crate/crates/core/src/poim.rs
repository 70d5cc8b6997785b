//! Proof-of-Improvement governance.
//!
//! A proposal is one labelled training sample plus a stake. The contract
//! applies a micro-step, re-evaluates the candidate on the canonical test
//! set and keeps it only if no metric drops and at least one rises.
//! Accepted proposers get their stake back plus a bonus from the vault;
//! rejected stakes are slashed into the vault. Stakers can vote to roll an
//! accepted update back within the challenge window, and to edit the test
//! set itself.
//!
//! `PoimState` is a single-writer state machine. Token balances live with
//! the caller (the chain simulator): stakes arrive already escrowed, and
//! every operation reports what must be paid back out.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{self, FixedError, Scale, ScaledInt};
use crate::inference::{self, InferenceError, QuantizedModel, Sample};
use crate::keccak::{self, Hash32};

/// Basis-point precision for metrics.
pub const METRIC_SCALE: i64 = 10_000;

pub type AccountId = String;
pub type Tokens = u128;
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoimError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("test set must contain both classes")]
    MissingClass,
    #[error("stake {stake} below minimum {min}")]
    InsufficientStake { stake: Tokens, min: Tokens },
    #[error("sample label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("version {0} was never accepted or is no longer reversible")]
    UnknownVersion(u64),
    #[error("challenge window for version {0} has expired")]
    WindowExpired(u64),
    #[error("version {0} already has an open challenge")]
    DuplicateChallenge(u64),
    #[error("unknown challenge {0}")]
    UnknownChallenge(u64),
    #[error("voting on challenge {0} has closed")]
    VotingClosed(u64),
    #[error("challenge {0} cannot be resolved before its deadline")]
    DeadlineNotReached(u64),
    #[error("{0} already voted")]
    DoubleVote(AccountId),
    #[error("{account} has {bonded} bonded, cannot vote with {requested}")]
    InsufficientVotingPower {
        account: AccountId,
        bonded: Tokens,
        requested: Tokens,
    },
    #[error("change would leave a class without test samples")]
    WouldEmptyClass,
    #[error("test sample index {0} out of range")]
    BadSampleIndex(usize),
    #[error("sample has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invariant violated: {0}")]
    Consistency(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

impl From<FixedError> for PoimError {
    fn from(e: FixedError) -> Self {
        PoimError::Inference(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PoimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    F1,
    Precision,
    Recall,
}

/// Accuracy, precision, recall and F1 as integers at the metric scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: i64,
    pub prec: i64,
    pub rec: i64,
    pub f1: i64,
}

impl Metrics {
    pub fn new(acc: i64, prec: i64, rec: i64, f1: i64) -> Self {
        Self { acc, prec, rec, f1 }
    }

    pub fn components(&self) -> [(MetricKind, i64); 4] {
        [
            (MetricKind::Accuracy, self.acc),
            (MetricKind::F1, self.f1),
            (MetricKind::Precision, self.prec),
            (MetricKind::Recall, self.rec),
        ]
    }

    /// Acceptance predicate: no component lower, at least one higher.
    pub fn improves_on(&self, old: &Metrics) -> Verdict {
        let mut strict = false;
        for ((kind, new), (_, prev)) in self.components().into_iter().zip(old.components()) {
            if new < prev {
                return Verdict::Degraded(kind);
            }
            strict |= new > prev;
        }
        if strict {
            Verdict::Improved
        } else {
            Verdict::NoImprovement
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Degraded(MetricKind),
}

/// Confusion counts over a test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: i64,
    pub fp: i64,
    pub tn: i64,
    pub fn_: i64,
}

impl Confusion {
    pub fn metrics(&self, metric_scale: i64) -> Metrics {
        let ratio = |num: i64, den: i64| if den == 0 { 0 } else { num * metric_scale / den };
        let n = self.tp + self.fp + self.tn + self.fn_;
        let acc = ratio(self.tp + self.tn, n);
        let prec = ratio(self.tp, self.tp + self.fp);
        let rec = ratio(self.tp, self.tp + self.fn_);
        let f1 = if prec + rec == 0 { 0 } else { 2 * prec * rec / (prec + rec) };
        Metrics { acc, prec, rec, f1 }
    }
}

/// The canonical evaluation set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestSet {
    pub samples: Vec<Sample>,
    pub revision: u64,
}

impl TestSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        check_samples(&samples)?;
        Ok(Self { samples, revision: 0 })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> ClassCounts {
        ClassCounts::of(&self.samples)
    }
}

fn check_samples(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(PoimError::EmptyTestSet);
    }
    if let Some(s) = samples.iter().find(|s| s.label > 1) {
        return Err(PoimError::BadLabel(s.label));
    }
    let counts = ClassCounts::of(samples);
    if counts.normal == 0 || counts.attack == 0 {
        return Err(PoimError::MissingClass);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: u64,
    pub attack: u64,
}

impl ClassCounts {
    pub fn of(samples: &[Sample]) -> Self {
        let attack = samples.iter().filter(|s| s.label == 1).count() as u64;
        Self {
            normal: samples.len() as u64 - attack,
            attack,
        }
    }

    fn add(&mut self, label: u8) {
        if label == 1 {
            self.attack += 1;
        } else {
            self.normal += 1;
        }
    }

    fn remove(&mut self, label: u8) {
        if label == 1 {
            self.attack = self.attack.saturating_sub(1);
        } else {
            self.normal = self.normal.saturating_sub(1);
        }
    }
}

/// Confusion counts of `model` over `test_set`.
pub fn confusion(model: &QuantizedModel, test_set: &TestSet) -> Result<Confusion> {
    let mut c = Confusion::default();
    for s in &test_set.samples {
        let pred = inference::predict(&s.features, model)?;
        match (pred, s.label) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Deterministic metrics at the default basis-point scale.
pub fn evaluate(model: &QuantizedModel, test_set: &TestSet) -> Result<Metrics> {
    evaluate_at(model, test_set, METRIC_SCALE)
}

pub fn evaluate_at(model: &QuantizedModel, test_set: &TestSet, metric_scale: i64) -> Result<Metrics> {
    if test_set.is_empty() {
        return Err(PoimError::EmptyTestSet);
    }
    Ok(confusion(model, test_set)?.metrics(metric_scale))
}

/// Reward weights, in tokens per metric unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricWeights {
    pub acc: u64,
    pub f1: u64,
    pub prec: u64,
    pub rec: u64,
}

impl MetricWeights {
    /// `Σ α_k (M'_k − M_k)`, clipped at zero.
    pub fn bonus(&self, old: &Metrics, new: &Metrics) -> Tokens {
        let terms = [
            (self.acc, new.acc - old.acc),
            (self.f1, new.f1 - old.f1),
            (self.prec, new.prec - old.prec),
            (self.rec, new.rec - old.rec),
        ];
        let total: i128 = terms.iter().map(|(a, d)| *a as i128 * *d as i128).sum();
        total.max(0) as Tokens
    }
}

/// Protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoimParams {
    pub min_stake: Tokens,
    pub alpha: MetricWeights,
    /// Normal samples are blocked once `normal >= ratio * attack`.
    pub imbalance_ratio: u64,
    /// Challenge window and voting period, in seconds.
    pub challenge_window: u64,
    /// Share of total bonded stake that must vote yes, in basis points.
    pub quorum_bps: u64,
    /// Learning rate as a real number; quantized at the model scale.
    pub eta: f64,
    pub prior_depth: usize,
    pub metric_scale: i64,
}

impl Default for PoimParams {
    fn default() -> Self {
        Self {
            min_stake: 1,
            alpha: MetricWeights::default(),
            imbalance_ratio: 5,
            challenge_window: 86_400,
            quorum_bps: 5_000,
            eta: 0.1,
            prior_depth: 16,
            metric_scale: METRIC_SCALE,
        }
    }
}

impl PoimParams {
    pub fn eta_at(&self, scale: Scale) -> Result<ScaledInt> {
        Ok(fixedpoint::to_fixed(self.eta, scale)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub proposer: AccountId,
    pub stake: Tokens,
    pub sample: Sample,
    pub eta: ScaledInt,
    pub submitted_at: Timestamp,
}

impl Proposal {
    pub fn digest(&self) -> Hash32 {
        keccak::keccak256(&serde_json::to_vec(self).expect("proposal serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    NoImprovement,
    Degraded { metric: MetricKind },
    ImbalanceBlocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Accepted {
        metrics: Metrics,
        reward: Tokens,
        bonus: Tokens,
        version: u64,
    },
    /// `refund` is owed back to the proposer (non-zero only for guard blocks).
    Rejected { reason: RejectReason, refund: Tokens },
}

impl Decision {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Decision::Accepted { .. })
    }

    /// Tokens owed to the proposer.
    pub fn payout(&self) -> Tokens {
        match self {
            Decision::Accepted { reward, .. } => *reward,
            Decision::Rejected { refund, .. } => *refund,
        }
    }
}

/// Governance actions decided by stake-weighted vote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum GovernanceAction {
    Rollback { target_version: u64 },
    TestSet { change: TestSetChange },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TestSetChange {
    Add { sample: Sample },
    Modify { index: usize, sample: Sample },
    Remove { index: usize },
}

impl TestSetChange {
    fn apply(&self, samples: &[Sample]) -> Result<Vec<Sample>> {
        let mut next = samples.to_vec();
        match self {
            TestSetChange::Add { sample } => next.push(sample.clone()),
            TestSetChange::Modify { index, sample } => {
                *next.get_mut(*index).ok_or(PoimError::BadSampleIndex(*index))? = sample.clone();
            }
            TestSetChange::Remove { index } => {
                if *index >= next.len() {
                    return Err(PoimError::BadSampleIndex(*index));
                }
                next.remove(*index);
            }
        }
        match check_samples(&next) {
            Err(PoimError::MissingClass | PoimError::EmptyTestSet) => Err(PoimError::WouldEmptyClass),
            other => other.map(|_| next),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ballot {
    pub weight: Tokens,
    pub yes: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub id: u64,
    pub action: GovernanceAction,
    pub opened_by: AccountId,
    pub stake: Tokens,
    pub opened_at: Timestamp,
    pub deadline: Timestamp,
    pub votes: BTreeMap<AccountId, Ballot>,
}

impl Challenge {
    pub fn tally(&self) -> (Tokens, Tokens) {
        self.votes.values().fold(
            (0, 0),
            |(yes, no), b| {
                if b.yes {
                    (yes + b.weight, no)
                } else {
                    (yes, no + b.weight)
                }
            },
        )
    }
}

/// A model replaced by an accepted update, kept for rollback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorModel {
    pub model: QuantizedModel,
    pub metrics: Metrics,
    pub replaced_by: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedUpdate {
    pub proposer: AccountId,
    pub accepted_at: Timestamp,
    pub bonus: Tokens,
    pub label: u8,
}

/// Running totals for the vault conservation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VaultAccounts {
    pub funded: Tokens,
    pub stakes_in: Tokens,
    pub clawed_back: Tokens,
    pub paid_out: Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryEvent {
    Proposal {
        proposer: AccountId,
        digest: Hash32,
        decision: Decision,
        before: Metrics,
        after: Metrics,
        reward_paid: Tokens,
    },
    ChallengeOpened {
        challenge: u64,
        action: GovernanceAction,
    },
    Vote {
        challenge: u64,
        account: AccountId,
        ballot: Ballot,
    },
    RolledBack {
        challenge: u64,
        target_version: u64,
        new_version: u64,
        before: Metrics,
        after: Metrics,
        clawed_back: Tokens,
    },
    TestSetChanged {
        challenge: u64,
        revision: u64,
        before: Metrics,
        after: Metrics,
    },
    ChallengeDismissed {
        challenge: u64,
        yes: Tokens,
        no: Tokens,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub seq: u64,
    pub at: Timestamp,
    pub model_version: u64,
    #[serde(flatten)]
    pub event: HistoryEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub approved: bool,
    /// Tokens owed back to accounts (the challenger's stake on approval).
    pub payouts: Vec<(AccountId, Tokens)>,
    pub clawed_back: Tokens,
}

/// Everything except history and token accounting; this is what must stay
/// bit-identical across a rejected proposal.
#[derive(Serialize)]
struct CoreView<'a> {
    model: &'a QuantizedModel,
    metrics: &'a Metrics,
    test_set: &'a TestSet,
    prior_models: &'a VecDeque<PriorModel>,
    class_counts: &'a ClassCounts,
    challenges: &'a BTreeMap<u64, Challenge>,
    accepted: &'a BTreeMap<u64, AcceptedUpdate>,
    bonded: &'a BTreeMap<AccountId, Tokens>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoimState {
    params: PoimParams,
    model: QuantizedModel,
    metrics: Metrics,
    test_set: TestSet,
    vault: Tokens,
    accounts: VaultAccounts,
    history: Vec<HistoryRecord>,
    prior_models: VecDeque<PriorModel>,
    class_counts: ClassCounts,
    challenges: BTreeMap<u64, Challenge>,
    next_challenge: u64,
    accepted: BTreeMap<u64, AcceptedUpdate>,
    bonded: BTreeMap<AccountId, Tokens>,
}

impl PoimState {
    /// Installs `model` and evaluates it on `test_set` for the initial metrics.
    pub fn new(model: QuantizedModel, test_set: TestSet, params: PoimParams, class_counts: ClassCounts) -> Result<Self> {
        model.validate()?;
        check_samples(&test_set.samples)?;
        check_dims(&model, &test_set.samples)?;
        let metrics = evaluate_at(&model, &test_set, params.metric_scale)?;
        Ok(Self {
            params,
            model,
            metrics,
            test_set,
            vault: 0,
            accounts: VaultAccounts::default(),
            history: Vec::new(),
            prior_models: VecDeque::new(),
            class_counts,
            challenges: BTreeMap::new(),
            next_challenge: 0,
            accepted: BTreeMap::new(),
            bonded: BTreeMap::new(),
        })
    }

    pub fn params(&self) -> &PoimParams {
        &self.params
    }
    pub fn model(&self) -> &QuantizedModel {
        &self.model
    }
    pub fn metrics(&self) -> Metrics {
        self.metrics
    }
    pub fn test_set(&self) -> &TestSet {
        &self.test_set
    }
    pub fn vault(&self) -> Tokens {
        self.vault
    }
    pub fn vault_accounts(&self) -> VaultAccounts {
        self.accounts
    }
    pub fn history(&self) -> &[HistoryRecord] {
        &self.history
    }
    pub fn prior_models(&self) -> &VecDeque<PriorModel> {
        &self.prior_models
    }
    pub fn class_counts(&self) -> ClassCounts {
        self.class_counts
    }
    pub fn challenges(&self) -> &BTreeMap<u64, Challenge> {
        &self.challenges
    }
    pub fn bonded(&self, account: &str) -> Tokens {
        self.bonded.get(account).copied().unwrap_or(0)
    }
    pub fn total_bonded(&self) -> Tokens {
        self.bonded.values().sum()
    }

    /// Stakes held by challenges that have not been resolved yet.
    pub fn escrowed(&self) -> Tokens {
        self.challenges.values().map(|c| c.stake).sum()
    }

    /// `funded + stakes_in + clawed_back == paid_out + vault + escrowed`.
    pub fn vault_conserved(&self) -> bool {
        let a = self.accounts;
        a.funded + a.stakes_in + a.clawed_back == a.paid_out + self.vault + self.escrowed()
    }

    /// Digest of the governed state, excluding history and vault accounting.
    pub fn core_digest(&self) -> Hash32 {
        let view = CoreView {
            model: &self.model,
            metrics: &self.metrics,
            test_set: &self.test_set,
            prior_models: &self.prior_models,
            class_counts: &self.class_counts,
            challenges: &self.challenges,
            accepted: &self.accepted,
            bonded: &self.bonded,
        };
        keccak::keccak256(&serde_json::to_vec(&view).expect("state serializes"))
    }

    /// Digest of the complete state.
    pub fn digest(&self) -> Hash32 {
        keccak::keccak256(&serde_json::to_vec(self).expect("state serializes"))
    }

    /// Re-evaluates the installed model and checks it against the stored metrics.
    pub fn verify_metrics(&self) -> Result<()> {
        let fresh = evaluate_at(&self.model, &self.test_set, self.params.metric_scale)?;
        if fresh != self.metrics {
            return Err(PoimError::Consistency(format!(
                "stored metrics {:?} differ from fresh evaluation {fresh:?}",
                self.metrics
            )));
        }
        Ok(())
    }

    pub fn fund_vault(&mut self, amount: Tokens) {
        self.vault += amount;
        self.accounts.funded += amount;
    }

    /// Locks governance stake that grants voting power.
    pub fn bond(&mut self, account: &str, amount: Tokens) {
        *self.bonded.entry(account.to_string()).or_default() += amount;
    }

    fn log(&mut self, at: Timestamp, event: HistoryEvent) {
        let record = HistoryRecord {
            seq: self.history.len() as u64,
            at,
            model_version: self.model.version,
            event,
        };
        self.history.push(record);
    }

    /// Bonus actually payable: `Σ α_k ΔM_k`, clamped to the vault.
    pub fn reward(&self, stake: Tokens, old: &Metrics, new: &Metrics) -> (Tokens, Tokens) {
        let bonus = self.params.alpha.bonus(old, new).min(self.vault);
        (stake + bonus, bonus)
    }

    /// Runs one proposal through guard, micro-step, evaluation and the
    /// acceptance rule. The stake is taken as escrowed by the caller; the
    /// returned decision says how much to pay back out.
    pub fn propose_update(&mut self, p: &Proposal) -> Result<Decision> {
        if p.stake < self.params.min_stake || p.stake == 0 {
            return Err(PoimError::InsufficientStake {
                stake: p.stake,
                min: self.params.min_stake.max(1),
            });
        }
        if p.sample.label > 1 {
            return Err(PoimError::BadLabel(p.sample.label));
        }
        check_dims(&self.model, std::slice::from_ref(&p.sample))?;
        let before = self.metrics;

        if p.sample.label == 0 && self.class_counts.normal >= self.params.imbalance_ratio.saturating_mul(self.class_counts.attack) {
            self.accounts.stakes_in += p.stake;
            self.accounts.paid_out += p.stake;
            let decision = Decision::Rejected {
                reason: RejectReason::ImbalanceBlocked,
                refund: p.stake,
            };
            self.log_proposal(p, decision, before, before);
            return Ok(decision);
        }

        let candidate = inference::micro_train_step(&self.model, &p.sample.features, p.sample.label, p.eta)?;
        let after = evaluate_at(&candidate, &self.test_set, self.params.metric_scale)?;
        self.accounts.stakes_in += p.stake;

        let decision = match after.improves_on(&before) {
            Verdict::Improved => {
                let version = self.model.version + 1;
                let (reward, bonus) = self.reward(p.stake, &before, &after);
                self.prior_models.push_back(PriorModel {
                    model: self.model.clone(),
                    metrics: before,
                    replaced_by: version,
                });
                while self.prior_models.len() > self.params.prior_depth {
                    self.prior_models.pop_front();
                }
                self.model = QuantizedModel { version, ..candidate };
                self.metrics = after;
                self.class_counts.add(p.sample.label);
                self.vault -= bonus;
                self.accounts.paid_out += reward;
                self.accepted.insert(
                    version,
                    AcceptedUpdate {
                        proposer: p.proposer.clone(),
                        accepted_at: p.submitted_at,
                        bonus,
                        label: p.sample.label,
                    },
                );
                Decision::Accepted {
                    metrics: after,
                    reward,
                    bonus,
                    version,
                }
            }
            verdict => {
                self.vault += p.stake;
                let reason = match verdict {
                    Verdict::Degraded(metric) => RejectReason::Degraded { metric },
                    _ => RejectReason::NoImprovement,
                };
                Decision::Rejected { reason, refund: 0 }
            }
        };
        self.log_proposal(p, decision, before, after);
        Ok(decision)
    }

    fn log_proposal(&mut self, p: &Proposal, decision: Decision, before: Metrics, after: Metrics) {
        self.log(
            p.submitted_at,
            HistoryEvent::Proposal {
                proposer: p.proposer.clone(),
                digest: p.digest(),
                decision,
                before,
                after,
                reward_paid: decision.payout(),
            },
        );
    }

    /// Opens a rollback vote on an update accepted within the window.
    pub fn open_challenge(&mut self, version: u64, challenger: &str, stake: Tokens, now: Timestamp) -> Result<u64> {
        self.check_stake(stake)?;
        let update = self.accepted.get(&version).ok_or(PoimError::UnknownVersion(version))?;
        if now > update.accepted_at.saturating_add(self.params.challenge_window) {
            return Err(PoimError::WindowExpired(version));
        }
        if !self.prior_models.iter().any(|p| p.replaced_by == version) {
            return Err(PoimError::UnknownVersion(version));
        }
        let duplicate = self
            .challenges
            .values()
            .any(|c| matches!(c.action, GovernanceAction::Rollback { target_version } if target_version == version));
        if duplicate {
            return Err(PoimError::DuplicateChallenge(version));
        }
        Ok(self.open(GovernanceAction::Rollback { target_version: version }, challenger, stake, now))
    }

    /// Opens a vote on editing the test set.
    pub fn propose_testset_change(&mut self, change: TestSetChange, proposer: &str, stake: Tokens, now: Timestamp) -> Result<u64> {
        self.check_stake(stake)?;
        let next = change.apply(&self.test_set.samples)?;
        check_dims(&self.model, &next)?;
        Ok(self.open(GovernanceAction::TestSet { change }, proposer, stake, now))
    }

    fn check_stake(&self, stake: Tokens) -> Result<()> {
        if stake < self.params.min_stake || stake == 0 {
            return Err(PoimError::InsufficientStake {
                stake,
                min: self.params.min_stake.max(1),
            });
        }
        Ok(())
    }

    fn open(&mut self, action: GovernanceAction, by: &str, stake: Tokens, now: Timestamp) -> u64 {
        let id = self.next_challenge;
        self.next_challenge += 1;
        self.accounts.stakes_in += stake;
        self.challenges.insert(
            id,
            Challenge {
                id,
                action: action.clone(),
                opened_by: by.to_string(),
                stake,
                opened_at: now,
                deadline: now.saturating_add(self.params.challenge_window),
                votes: BTreeMap::new(),
            },
        );
        self.log(now, HistoryEvent::ChallengeOpened { challenge: id, action });
        id
    }

    /// Casts a stake-weighted ballot; weight is capped by the bonded stake.
    pub fn vote(&mut self, id: u64, account: &str, weight: Tokens, yes: bool, now: Timestamp) -> Result<()> {
        let bonded = self.bonded(account);
        let challenge = self.challenges.get_mut(&id).ok_or(PoimError::UnknownChallenge(id))?;
        if now > challenge.deadline {
            return Err(PoimError::VotingClosed(id));
        }
        if challenge.votes.contains_key(account) {
            return Err(PoimError::DoubleVote(account.to_string()));
        }
        if weight == 0 || weight > bonded {
            return Err(PoimError::InsufficientVotingPower {
                account: account.to_string(),
                bonded,
                requested: weight,
            });
        }
        let ballot = Ballot { weight, yes };
        challenge.votes.insert(account.to_string(), ballot);
        self.log(
            now,
            HistoryEvent::Vote {
                challenge: id,
                account: account.to_string(),
                ballot,
            },
        );
        Ok(())
    }

    /// Closes a vote at or after its deadline. Approval needs a yes majority
    /// holding at least the quorum share of all bonded stake.
    ///
    /// `recover` is asked to take back each undone proposer's bonus and
    /// returns how much it could actually recover.
    pub fn resolve_challenge(
        &mut self,
        id: u64,
        now: Timestamp,
        mut recover: impl FnMut(&AccountId, Tokens) -> Tokens,
    ) -> Result<Resolution> {
        let challenge = self.challenges.get(&id).ok_or(PoimError::UnknownChallenge(id))?;
        if now < challenge.deadline {
            return Err(PoimError::DeadlineNotReached(id));
        }
        let (yes, no) = challenge.tally();
        let quorum = yes * 10_000 >= self.params.quorum_bps as Tokens * self.total_bonded();
        let approved = yes > no && quorum;
        let challenge = self.challenges.remove(&id).expect("checked above");

        if !approved {
            self.vault += challenge.stake;
            self.log(now, HistoryEvent::ChallengeDismissed { challenge: id, yes, no });
            return Ok(Resolution {
                approved: false,
                payouts: vec![],
                clawed_back: 0,
            });
        }

        let before = self.metrics;
        let mut clawed = 0;
        match &challenge.action {
            GovernanceAction::Rollback { target_version } => {
                let target = *target_version;
                if !self.prior_models.iter().any(|p| p.replaced_by == target) {
                    // a deeper rollback already undid it; refund and record
                    self.challenges.insert(id, challenge);
                    return Err(PoimError::UnknownVersion(target));
                }
                let restored = loop {
                    let prior = self.prior_models.pop_back().expect("target is on the stack");
                    if let Some(update) = self.accepted.remove(&prior.replaced_by) {
                        self.class_counts.remove(update.label);
                        if update.bonus > 0 {
                            let got = recover(&update.proposer, update.bonus).min(update.bonus);
                            clawed += got;
                        }
                    }
                    if prior.replaced_by == target {
                        break prior;
                    }
                };
                self.vault += clawed;
                self.accounts.clawed_back += clawed;
                let new_version = self.model.version + 1;
                self.model = QuantizedModel {
                    version: new_version,
                    ..restored.model
                };
                self.metrics = evaluate_at(&self.model, &self.test_set, self.params.metric_scale)?;
                let after = self.metrics;
                self.log(
                    now,
                    HistoryEvent::RolledBack {
                        challenge: id,
                        target_version: target,
                        new_version,
                        before,
                        after,
                        clawed_back: clawed,
                    },
                );
            }
            GovernanceAction::TestSet { change } => {
                let samples = change.apply(&self.test_set.samples)?;
                self.test_set = TestSet {
                    samples,
                    revision: self.test_set.revision + 1,
                };
                self.metrics = evaluate_at(&self.model, &self.test_set, self.params.metric_scale)?;
                let after = self.metrics;
                self.log(
                    now,
                    HistoryEvent::TestSetChanged {
                        challenge: id,
                        revision: self.test_set.revision,
                        before,
                        after,
                    },
                );
            }
        }
        self.accounts.paid_out += challenge.stake;
        Ok(Resolution {
            approved: true,
            payouts: vec![(challenge.opened_by.clone(), challenge.stake)],
            clawed_back: clawed,
        })
    }

    /// History as JSON lines, one record per line.
    pub fn history_lines(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn check_dims(model: &QuantizedModel, samples: &[Sample]) -> Result<()> {
    let expected = model.arch.input_dim();
    match samples.iter().find(|s| s.features.len() != expected) {
        Some(s) => Err(PoimError::DimensionMismatch {
            expected,
            got: s.features.len(),
        }),
        None => Ok(()),
    }
}

/// Inputs to an adversarial stress run.
#[derive(Debug, Clone)]
pub struct StressSetup {
    /// Starting model before bootstrapping (usually all zeros).
    pub initial: QuantizedModel,
    pub seed_samples: Vec<Sample>,
    pub honest_stream: Vec<Sample>,
    pub test_set: TestSet,
    pub params: PoimParams,
    /// Passes over the seed samples when bootstrapping.
    pub bootstrap_epochs: usize,
    /// Standard deviation of injected feature noise, in raw units.
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Poison {
    LabelFlip,
    FeatureNoise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressStep {
    pub step: usize,
    pub poison: Option<Poison>,
    pub accepted: bool,
    pub poim: Metrics,
    pub unfiltered: Metrics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressTrace {
    pub initial: Metrics,
    pub steps: Vec<StressStep>,
}

impl StressTrace {
    pub fn final_poim(&self) -> Metrics {
        self.steps.last().map_or(self.initial, |s| s.poim)
    }

    pub fn final_unfiltered(&self) -> Metrics {
        self.steps.last().map_or(self.initial, |s| s.unfiltered)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,poison,accepted,poim_acc,poim_prec,poim_rec,poim_f1,raw_acc,raw_prec,raw_rec,raw_f1\n");
        for s in &self.steps {
            let poison = match s.poison {
                None => "",
                Some(Poison::LabelFlip) => "label_flip",
                Some(Poison::FeatureNoise) => "feature_noise",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                s.step,
                poison,
                s.accepted,
                s.poim.acc,
                s.poim.prec,
                s.poim.rec,
                s.poim.f1,
                s.unfiltered.acc,
                s.unfiltered.prec,
                s.unfiltered.rec,
                s.unfiltered.f1
            ));
        }
        out
    }
}

/// Mistake-driven passes over `samples` without any filtering.
pub fn bootstrap(model: &QuantizedModel, samples: &[Sample], eta: ScaledInt, epochs: usize) -> Result<QuantizedModel> {
    let mut model = model.clone();
    for _ in 0..epochs {
        let before = model.version;
        for s in samples {
            model = inference::micro_train_step(&model, &s.features, s.label, eta)?;
        }
        if model.version == before {
            break;
        }
    }
    Ok(model)
}

/// Replays a partly poisoned proposal stream against a PoIm-governed model
/// and an unfiltered twin that applies every step.
///
/// `round(adversarial_fraction · n)` stream positions, chosen by
/// `rng_seed`, are poisoned by either flipping the label or adding
/// Gaussian feature noise.
pub fn stress_test(setup: &StressSetup, adversarial_fraction: f64, rng_seed: u64) -> Result<StressTrace> {
    let fraction = adversarial_fraction.clamp(0.0, 1.0);
    let scale = setup.initial.scale;
    let eta = setup.params.eta_at(scale)?;
    let start = bootstrap(&setup.initial, &setup.seed_samples, eta, setup.bootstrap_epochs)?;
    let mut state = PoimState::new(
        start.clone(),
        setup.test_set.clone(),
        setup.params.clone(),
        ClassCounts::of(&setup.seed_samples),
    )?;
    let mut raw_model = start;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n = setup.honest_stream.len();
    let n_bad = (fraction * n as f64).round() as usize;
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    let mut poisoned = vec![false; n];
    for &i in &positions[..n_bad] {
        poisoned[i] = true;
    }
    let noise = Normal::new(0.0, setup.noise_std.max(0.0)).expect("finite std");

    let initial = state.metrics();
    let mut steps = Vec::with_capacity(n);
    for (i, honest) in setup.honest_stream.iter().enumerate() {
        let (sample, poison) = if poisoned[i] {
            if rng.random_bool(0.5) {
                (Sample::new(honest.features.clone(), 1 - honest.label), Some(Poison::LabelFlip))
            } else {
                let features = honest
                    .features
                    .iter()
                    .map(|x| x.saturating_add(noise.sample(&mut rng) as i128))
                    .collect();
                (Sample::new(features, honest.label), Some(Poison::FeatureNoise))
            }
        } else {
            (honest.clone(), None)
        };
        let proposal = Proposal {
            proposer: format!("p{i}"),
            stake: setup.params.min_stake.max(1),
            sample: sample.clone(),
            eta,
            submitted_at: i as Timestamp,
        };
        let decision = state.propose_update(&proposal)?;
        raw_model = inference::micro_train_step(&raw_model, &sample.features, sample.label, eta)?;
        let unfiltered = evaluate_at(&raw_model, &setup.test_set, setup.params.metric_scale)?;
        steps.push(StressStep {
            step: i,
            poison,
            accepted: decision.is_accepted(),
            poim: state.metrics(),
            unfiltered,
        });
    }
    Ok(StressTrace { initial, steps })
}
