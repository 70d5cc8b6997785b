//! Transaction feature vectors: CSV ingestion, temporal splitting with
//! attack grouping, standardization, and a synthetic generator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{self, FixedError, Scale};
use crate::inference::Sample;

pub const FEATURE_NAMES: [&str; 7] = [
    "gas",
    "block_timestamp",
    "func_selector_encoded",
    "chain_id_encoded",
    "sender_encoded",
    "origin_encoded",
    "to_encoded",
];
pub const FEATURES: usize = FEATURE_NAMES.len();
const TIMESTAMP: usize = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("no records")]
    EmptyInput,
    #[error("training split is empty")]
    EmptyTrain,
    #[error("test fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RootCause {
    AccessControl,
    BusinessLogic,
    OracleManipulation,
    UncheckedExternalCall,
    StorageCollision,
}

impl RootCause {
    pub const ALL: [RootCause; 5] = [
        RootCause::AccessControl,
        RootCause::BusinessLogic,
        RootCause::OracleManipulation,
        RootCause::UncheckedExternalCall,
        RootCause::StorageCollision,
    ];

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| format!("{c:?}") == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxFeatureVector {
    pub gas: u64,
    pub block_timestamp: u64,
    pub func_selector_encoded: u64,
    pub chain_id_encoded: u64,
    pub sender_encoded: u64,
    pub origin_encoded: u64,
    pub to_encoded: u64,
    pub label: u8,
    pub attack_group_id: Option<u64>,
    pub root_cause: Option<RootCause>,
}

impl TxFeatureVector {
    pub fn features(&self) -> [u64; FEATURES] {
        [
            self.gas,
            self.block_timestamp,
            self.func_selector_encoded,
            self.chain_id_encoded,
            self.sender_encoded,
            self.origin_encoded,
            self.to_encoded,
        ]
    }

    fn from_features(f: [u64; FEATURES], label: u8) -> Self {
        Self {
            gas: f[0],
            block_timestamp: f[1],
            func_selector_encoded: f[2],
            chain_id_encoded: f[3],
            sender_encoded: f[4],
            origin_encoded: f[5],
            to_encoded: f[6],
            label,
            attack_group_id: None,
            root_cause: None,
        }
    }

    fn sort_key(&self) -> (u64, &Self) {
        (self.block_timestamp, self)
    }
}

/// Reads the comma-separated record format. Required columns are the seven
/// feature names and `label`; `attack_group_id` and `root_cause` are optional
/// and may be left empty.
pub fn ingest(path: impl AsRef<Path>) -> Result<Vec<TxFeatureVector>> {
    ingest_reader(std::fs::File::open(path)?)
}

pub fn ingest_reader(reader: impl Read) -> Result<Vec<TxFeatureVector>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| col(name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()));
    let feature_cols = FEATURE_NAMES.map(&required);
    let mut cols = [0usize; FEATURES];
    for (slot, c) in cols.iter_mut().zip(feature_cols) {
        *slot = c?;
    }
    let label_col = required("label")?;
    let group_col = col("attack_group_id");
    let cause_col = col("root_cause");

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |message: String| DatasetError::ParseError { line, message };
        let field = |i: usize| row.get(i).unwrap_or("");
        let mut f = [0u64; FEATURES];
        for (j, c) in cols.iter().enumerate() {
            f[j] = field(*c)
                .parse()
                .map_err(|_| err(format!("{} is not a non-negative integer: {:?}", FEATURE_NAMES[j], field(*c))))?;
        }
        let label: u8 = match field(label_col) {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        let mut rec = TxFeatureVector::from_features(f, label);
        if let Some(c) = group_col.map(field).filter(|s| !s.is_empty()) {
            rec.attack_group_id = Some(c.parse().map_err(|_| err(format!("bad attack_group_id {c:?}")))?);
            if label != 1 {
                return Err(err("attack group member must have label 1".into()));
            }
        }
        if let Some(c) = cause_col.map(field).filter(|s| !s.is_empty()) {
            rec.root_cause = Some(RootCause::parse(c).ok_or_else(|| err(format!("unknown root cause {c:?}")))?);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Writes records in the ingestion format.
pub fn write_records(records: &[TxFeatureVector], w: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
    header.extend(["label", "attack_group_id", "root_cause"]);
    wtr.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = r.features().iter().map(u64::to_string).collect();
        row.push(r.label.to_string());
        row.push(r.attack_group_id.map(|g| g.to_string()).unwrap_or_default());
        row.push(r.root_cause.map(|c| format!("{c:?}")).unwrap_or_default());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Chronological train/test partition before encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<TxFeatureVector>,
    pub test: Vec<TxFeatureVector>,
}

/// Sorts by timestamp and puts the latest `round(n · test_fraction)` records
/// in the test split. If an attack group straddles the cut, the cut moves
/// later until the whole group is on the training side.
pub fn temporal_split(records: &[TxFeatureVector], test_fraction: f64) -> Result<Split> {
    if records.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(DatasetError::BadFraction(test_fraction));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let n = sorted.len();
    let mut cut = n - (n as f64 * test_fraction).round() as usize;

    let mut last_of_group: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, r) in sorted.iter().enumerate() {
        if let Some(g) = r.attack_group_id {
            last_of_group.insert(g, i);
        }
    }
    loop {
        let train_groups: BTreeSet<u64> = sorted[..cut].iter().filter_map(|r| r.attack_group_id).collect();
        let mut next = train_groups.iter().map(|g| last_of_group[g] + 1).fold(cut, usize::max);
        // records sharing the cut timestamp stay together on the training side
        while next > 0 && next < n && sorted[next].block_timestamp == sorted[next - 1].block_timestamp {
            next += 1;
        }
        if next == cut {
            break;
        }
        cut = next;
    }
    let test = sorted.split_off(cut);
    Ok(Split { train: sorted, test })
}

/// Fixed-point samples plus the training statistics used to produce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub means: [f64; FEATURES],
    pub stds: [f64; FEATURES],
    pub scale: Scale,
}

impl EncodedDataset {
    /// Z-scores a raw record with the stored training statistics.
    pub fn zscore(&self, r: &TxFeatureVector) -> [f64; FEATURES] {
        zscore(r, &self.means, &self.stds)
    }

    pub fn encode(&self, r: &TxFeatureVector) -> Result<Sample> {
        encode(r, &self.means, &self.stds, self.scale)
    }

    /// CSV of fixed-point raws, one row per sample, with a `split` column.
    pub fn to_csv(&self) -> String {
        let mut out = format!("split,{},label\n", FEATURE_NAMES.join(","));
        for (name, part) in [("train", &self.train), ("test", &self.test)] {
            for s in part {
                let raws: Vec<String> = s.features.iter().map(i128::to_string).collect();
                out.push_str(&format!("{name},{},{}\n", raws.join(","), s.label));
            }
        }
        out
    }
}

fn zscore(r: &TxFeatureVector, means: &[f64; FEATURES], stds: &[f64; FEATURES]) -> [f64; FEATURES] {
    let f = r.features();
    std::array::from_fn(|j| if stds[j] == 0.0 { 0.0 } else { (f[j] as f64 - means[j]) / stds[j] })
}

fn encode(r: &TxFeatureVector, means: &[f64; FEATURES], stds: &[f64; FEATURES], s: Scale) -> Result<Sample> {
    let features = zscore(r, means, stds)
        .iter()
        .map(|z| Ok(fixedpoint::to_fixed(*z, s)?.raw))
        .collect::<Result<_>>()?;
    Ok(Sample::new(features, r.label))
}

/// Per-feature mean and population standard deviation.
pub fn feature_stats(records: &[TxFeatureVector]) -> ([f64; FEATURES], [f64; FEATURES]) {
    let n = records.len() as f64;
    let mut means = [0.0; FEATURES];
    for r in records {
        for (m, v) in means.iter_mut().zip(r.features()) {
            *m += v as f64;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut vars = [0.0; FEATURES];
    for r in records {
        for j in 0..FEATURES {
            let d = r.features()[j] as f64 - means[j];
            vars[j] += d * d;
        }
    }
    let stds = vars.map(|v| {
        let sd = (v / n).sqrt();
        // guard constant columns against rounding residue
        if sd <= 1e-12 * means.iter().fold(1.0f64, |a, m| a.max(m.abs())) {
            0.0
        } else {
            sd
        }
    });
    (means, stds)
}

/// Z-scores every feature with training-split statistics and quantizes at `s`.
pub fn standardize_encode(split: &Split, s: Scale) -> Result<EncodedDataset> {
    if split.train.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    let (means, stds) = feature_stats(&split.train);
    let enc = |rs: &[TxFeatureVector]| rs.iter().map(|r| encode(r, &means, &stds, s)).collect::<Result<Vec<_>>>();
    Ok(EncodedDataset {
        train: enc(&split.train)?,
        test: enc(&split.test)?,
        means,
        stds,
        scale: s,
    })
}

/// Baseline means and within-class standard deviations of the synthetic
/// features (timestamp handled separately).
const SYNTH_MEANS: [f64; FEATURES] = [150_000.0, 0.0, 500.0, 50.0, 10_000.0, 10_000.0, 10_000.0];
const SYNTH_STDS: [f64; FEATURES] = [20_000.0, 0.0, 40.0, 4.0, 800.0, 800.0, 800.0];
const SYNTH_START: u64 = 1_700_000_000;
const SYNTH_SPAN: u64 = 30 * 86_400;
/// Largest number of transactions in one synthetic attack group.
const MAX_GROUP: usize = 4;

/// Two Gaussian classes over the six non-time features. In units of each
/// feature's within-class standard deviation the class means are
/// `separation` apart, shifted equally along every non-time axis.
/// Timestamps are uniform over thirty days for both classes. Attacks come
/// in groups of up to four transactions within ten minutes of each other.
pub fn synth_generate(n_normal: usize, n_attack: usize, separation: f64, rng_seed: u64) -> Vec<TxFeatureVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let shift = separation.max(0.0) / ((FEATURES - 1) as f64).sqrt();
    let draw = |rng: &mut ChaCha8Rng, label: u8, timestamp: u64| {
        let f: [u64; FEATURES] = std::array::from_fn(|j| {
            if j == TIMESTAMP {
                return timestamp;
            }
            let offset = if label == 1 { shift } else { 0.0 };
            let v = SYNTH_MEANS[j] + SYNTH_STDS[j] * (offset + unit.sample(rng));
            v.round().max(0.0) as u64
        });
        TxFeatureVector::from_features(f, label)
    };

    let mut out = Vec::with_capacity(n_normal + n_attack);
    for _ in 0..n_normal {
        let t = SYNTH_START + rng.random_range(0..SYNTH_SPAN);
        out.push(draw(&mut rng, 0, t));
    }
    let mut made = 0;
    let mut group = 0u64;
    while made < n_attack {
        let size = rng.random_range(1..=MAX_GROUP).min(n_attack - made);
        let anchor = SYNTH_START + rng.random_range(0..SYNTH_SPAN);
        let cause = RootCause::ALL[rng.random_range(0..RootCause::ALL.len())];
        for _ in 0..size {
            let t = anchor + rng.random_range(0..600);
            let mut r = draw(&mut rng, 1, t);
            r.attack_group_id = Some(group);
            r.root_cause = Some(cause);
            out.push(r);
        }
        made += size;
        group += 1;
    }
    out
}

/// Feature vectors as reals, for the clustering pipeline.
pub fn as_points(records: &[TxFeatureVector]) -> Vec<Vec<f64>> {
    records.iter().map(|r| r.features().iter().map(|v| *v as f64).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CSV: &str = "gas,block_timestamp,func_selector_encoded,chain_id_encoded,sender_encoded,origin_encoded,to_encoded,label,attack_group_id,root_cause
21000,100,1,1,5,5,9,0,,
90000,200,2,1,6,6,9,1,7,BusinessLogic
50000,150,3,2,7,7,8,0,,
";

    fn rec(t: u64, label: u8, group: Option<u64>) -> TxFeatureVector {
        let mut r = TxFeatureVector::from_features([1, t, 0, 0, 0, 0, 0], label);
        r.attack_group_id = group;
        r
    }

    #[test]
    fn ingest_well_formed() {
        let rs = ingest_reader(CSV.as_bytes()).unwrap();
        assert_eq!(rs.len(), 3);
        assert_eq!(rs[1].attack_group_id, Some(7));
        assert_eq!(rs[1].root_cause, Some(RootCause::BusinessLogic));
        assert_eq!(rs[0].root_cause, None);
        let mut buf = Vec::new();
        write_records(&rs, &mut buf).unwrap();
        assert_eq!(ingest_reader(buf.as_slice()).unwrap(), rs);
    }

    #[test]
    fn ingest_errors() {
        let no_label = CSV.replace(",label,", ",lbl,");
        assert!(matches!(ingest_reader(no_label.as_bytes()), Err(DatasetError::MissingColumn(c)) if c == "label"));
        let bad_gas = CSV.replace("50000,150", "5e4,150");
        assert!(matches!(
            ingest_reader(bad_gas.as_bytes()),
            Err(DatasetError::ParseError { line: 4, .. })
        ));
        let bad_group = CSV.replace("21000,100,1,1,5,5,9,0,,", "21000,100,1,1,5,5,9,0,3,");
        assert!(matches!(
            ingest_reader(bad_group.as_bytes()),
            Err(DatasetError::ParseError { line: 2, .. })
        ));
    }

    #[test]
    fn split_by_time() {
        let rs: Vec<_> = (0..10).map(|t| rec(t * 10, 0, None)).collect();
        let s = temporal_split(&rs, 0.3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
        assert!(s.train.iter().all(|r| r.block_timestamp < 70));
        let mut shuffled = rs.clone();
        shuffled.reverse();
        shuffled.swap(2, 7);
        assert_eq!(temporal_split(&shuffled, 0.3).unwrap(), s);
        assert!(matches!(temporal_split(&[], 0.3), Err(DatasetError::EmptyInput)));
    }

    #[test]
    fn straddling_group_stays_on_earlier_side() {
        let mut rs: Vec<_> = (0..10).map(|t| rec(t * 10, 0, None)).collect();
        rs[6] = rec(60, 1, Some(1));
        rs[8] = rec(80, 1, Some(1));
        let s = temporal_split(&rs, 0.3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (9, 1));
        assert!(s.test.iter().all(|r| r.attack_group_id.is_none()));
    }

    fn arb_records() -> impl Strategy<Value = Vec<TxFeatureVector>> {
        prop::collection::vec((0u64..50, any::<bool>(), prop::option::of(0u64..5)), 1..40)
            .prop_map(|v| v.into_iter().map(|(t, _, g)| rec(t, u8::from(g.is_some()), g)).collect())
    }

    proptest! {
        #[test]
        fn split_invariants(rs in arb_records(), f in 0.0f64..=1.0) {
            let s = temporal_split(&rs, f).unwrap();
            prop_assert_eq!(s.train.len() + s.test.len(), rs.len());
            let max_train = s.train.iter().map(|r| r.block_timestamp).max();
            let min_test = s.test.iter().map(|r| r.block_timestamp).min();
            if let (Some(a), Some(b)) = (max_train, min_test) {
                prop_assert!(a <= b);
            }
            let train_groups: BTreeSet<_> = s.train.iter().filter_map(|r| r.attack_group_id).collect();
            prop_assert!(s.test.iter().all(|r| r.attack_group_id.is_none_or(|g| !train_groups.contains(&g))));
        }
    }

    #[test]
    fn standardize_uses_train_stats() {
        let train = vec![
            TxFeatureVector::from_features([1, 10, 5, 0, 0, 0, 0], 0),
            TxFeatureVector::from_features([2, 20, 5, 0, 0, 0, 0], 1),
            TxFeatureVector::from_features([3, 30, 5, 0, 0, 0, 0], 0),
        ];
        let test = vec![TxFeatureVector::from_features([5, 40, 9, 0, 0, 0, 0], 1)];
        let s = Scale::new(6).unwrap();
        let ds = standardize_encode(&Split { train, test }, s).unwrap();
        let sd = (2.0f64 / 3.0).sqrt();
        assert_eq!(ds.means[0], 2.0);
        assert!((ds.stds[0] - sd).abs() < 1e-15);
        // z of gas=1 is -1/sd = -1.2247448713915890...
        assert_eq!(ds.train[0].features[0], -1_224_744);
        assert_eq!(ds.train[1].features[0], 0);
        assert_eq!(ds.train[2].features[0], 1_224_744);
        // constant feature maps to zero, including for unseen test values
        assert_eq!(ds.stds[2], 0.0);
        assert!(ds.train.iter().chain(&ds.test).all(|x| x.features[2] == 0));
        // test uses train statistics: gas 5 is (5-2)/sd
        assert_eq!(ds.test[0].features[0], fixedpoint::to_fixed(3.0 / sd, s).unwrap().raw);
        assert!(matches!(
            standardize_encode(
                &Split {
                    train: vec![],
                    test: vec![]
                },
                s
            ),
            Err(DatasetError::EmptyTrain)
        ));
    }

    #[test]
    fn synth_is_deterministic_and_grouped() {
        let a = synth_generate(50, 30, 5.0, 7);
        assert_eq!(a, synth_generate(50, 30, 5.0, 7));
        assert_ne!(a, synth_generate(50, 30, 5.0, 8));
        assert_eq!(a.iter().filter(|r| r.label == 1).count(), 30);
        assert!(a.iter().all(|r| (r.label == 1) == r.attack_group_id.is_some()));
        let mut spans: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
        for r in &a {
            if let Some(g) = r.attack_group_id {
                let e = spans.entry(g).or_insert((u64::MAX, 0));
                *e = (e.0.min(r.block_timestamp), e.1.max(r.block_timestamp));
            }
        }
        assert!(spans.values().all(|(lo, hi)| hi - lo < 600));
    }

    #[test]
    fn synth_attacks_interleave_in_time() {
        let rs = synth_generate(200, 200, 10.0, 1);
        let s = temporal_split(&rs, 0.3).unwrap();
        for part in [&s.train, &s.test] {
            assert!(part.iter().any(|r| r.label == 0) && part.iter().any(|r| r.label == 1));
        }
    }
}
