mod parse;

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use poimlab::analysis;
use poimlab::bridge::{self, L1State};
use poimlab::chainsim;
use poimlab::dataset;
use poimlab::fixedpoint::{self, ScaledInt};
use poimlab::gascost::{self, GasReport};
use poimlab::inference::{self, FloatModel, ModelArch, QuantizedModel};
use poimlab::scenario::{self, RunConfig, Scenario};
use serde_json::json;

/// Exit status for a bridge transfer that was checked and refused.
const EXIT_REJECTED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "poimlab",
    version,
    about = "Quantized on-chain inference, gas costing and governance simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a float model (JSON) into a serialized model file.
    Quantize {
        model: PathBuf,
        /// Scale exponent or power of ten, e.g. `6`, `1e6`, `10^6`.
        #[arg(long, value_parser = parse::scale)]
        scale: poimlab::fixedpoint::Scale,
        #[arg(short, long)]
        out: PathBuf,
        /// JSON array of input vectors to certify sign consistency on.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Print a serialized model as JSON.
    Inspect { model: PathBuf },
    /// Classify one input vector.
    Infer {
        model: PathBuf,
        /// Comma-separated real features, quantized at the model scale.
        #[arg(long, allow_hyphen_values = true, conflicts_with = "raw")]
        x: Option<String>,
        /// Comma-separated fixed-point raws.
        #[arg(long, allow_hyphen_values = true)]
        raw: Option<String>,
    },
    /// Analytic inference gas, one JSON line per architecture or model.
    Gascost {
        /// `linear:D`, `mlp:D:W1,W2,..`, `cnn:D:K:F`, `rnn:D:U:T` or `tree:DEPTH`.
        #[arg(long)]
        arch: Vec<String>,
        /// Serialized model files.
        #[arg(long)]
        model: Vec<PathBuf>,
        #[arg(long, requires = "token_usd")]
        gas_price_gwei: Option<f64>,
        #[arg(long, requires = "gas_price_gwei")]
        token_usd: Option<f64>,
    },
    /// Keccak-256 commitment of a serialized model.
    Commit { model: PathBuf },
    /// Check an L1 import against the L2 export it claims to be.
    BridgeVerify {
        #[arg(long)]
        l2_export: PathBuf,
        #[arg(long)]
        l1_import: PathBuf,
        /// Commitment to check against; defaults to the hash of the export.
        #[arg(long)]
        commitment: Option<String>,
    },
    /// Run a scripted scenario over both ledgers.
    Simulate {
        #[arg(long, env = "POIMLAB_CONFIG")]
        config: PathBuf,
        /// Scenario file; omit for a genesis-only run.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Directory for logs, the report and any stress trajectory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Standardize, project, cluster and score a transaction file.
    Cluster {
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `report.json` and `projected.csv`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic labelled transaction file.
    Synth {
        #[arg(long, default_value_t = 200)]
        n_normal: usize,
        #[arg(long, default_value_t = 200)]
        n_attack: usize,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Time view inference over batches of random inputs.
    Bench {
        model: PathBuf,
        #[arg(long, default_value = "1,10,100,1000")]
        batches: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_model(path: &Path) -> Result<QuantizedModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    bridge::deserialize(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Quantize {
            model,
            scale,
            out,
            validation,
        } => {
            let text = fs::read_to_string(&model).with_context(|| format!("reading {}", model.display()))?;
            let float: FloatModel = serde_json::from_str(&text).context("parsing float model")?;
            let q = inference::quantize(&float, scale)?;
            let payload = bridge::serialize(&q)?;
            write(&out, &payload.bytes)?;
            let mut summary = json!({
                "model": q.arch.label(),
                "scale": scale.exponent(),
                "bytes": payload.len(),
                "hash": payload.hash(),
            });
            if let Some(path) = validation {
                let xs: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(&path)?).context("parsing validation set")?;
                let report = inference::sign_consistency(&float, scale, &xs)?;
                let min = inference::min_certified_scale(&float, &xs)?.map(|s| s.exponent());
                summary["sign_consistency"] = json!({ "report": report, "min_certified_exponent": min });
            }
            print_json(&summary)?;
        }
        Command::Inspect { model } => {
            let q = read_model(&model)?;
            let payload = bridge::serialize(&q)?;
            print_json(&json!({
                "hash": payload.hash(),
                "bytes": payload.len(),
                "gas": gascost::gas_for_model(&q),
                "model": q,
            }))?;
        }
        Command::Infer { model, x, raw } => {
            let q = read_model(&model)?;
            let features = match (x, raw) {
                (Some(x), None) => inference::quantize_input(&parse::vector::<f64>(&x)?, q.scale)?,
                (None, Some(raw)) => parse::vector::<i128>(&raw)?,
                _ => bail!("give the input with --x or --raw"),
            };
            let label = inference::predict(&features, &q)?;
            let logit = match q.arch {
                ModelArch::DecisionTree { .. } => None,
                _ => Some(inference::forward(&features, &q)?),
            };
            print_json(&json!({
                "label": label,
                "logit_raw": logit.map(|l| l.to_string()),
                "logit": logit.map(|l| fixedpoint::from_fixed(ScaledInt { raw: l, scale: q.scale })),
                "gas": gascost::gas_for_model(&q),
            }))?;
        }
        Command::Gascost {
            arch,
            model,
            gas_price_gwei,
            token_usd,
        } => {
            if arch.is_empty() && model.is_empty() {
                bail!("give at least one --arch or --model");
            }
            let mut reports: Vec<GasReport> = arch.iter().map(|a| parse::arch_gas(a)).collect::<Result<_>>()?;
            for path in &model {
                reports.push(gascost::gas_for_model(&read_model(path)?));
            }
            for r in reports {
                let r = match (gas_price_gwei, token_usd) {
                    (Some(g), Some(t)) => r.with_usd(g, t),
                    _ => r,
                };
                emit(&format!("{}\n", r.to_line()))?;
            }
        }
        Command::Commit { model } => {
            let q = read_model(&model)?;
            let mut l1 = L1State::default();
            let c = l1.commit(&q, 0)?;
            print_json(&json!({ "hash": c.hash, "version": q.version }))?;
        }
        Command::BridgeVerify {
            l2_export,
            l1_import,
            commitment,
        } => {
            let source = read_model(&l2_export)?;
            let payload = fs::read(&l1_import).with_context(|| format!("reading {}", l1_import.display()))?;
            let mut l1 = L1State::default();
            l1.commit(&source, 0)?;
            if let Some(h) = commitment {
                let c = l1.commitment.as_mut().expect("just committed");
                c.hash = h.parse().map_err(|e| anyhow::anyhow!("bad commitment {h:?}: {e}"))?;
            }
            return Ok(match bridge::transfer_and_verify(&mut l1, &payload, &source) {
                Ok(()) => {
                    print_json(&json!({ "verdict": "accepted", "hash": l1.commitment.map(|c| c.hash) }))?;
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    print_json(&json!({ "verdict": "rejected", "reason": e.to_string() }))?;
                    ExitCode::from(EXIT_REJECTED)
                }
            });
        }
        Command::Simulate {
            config,
            scenario: scenario_path,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let sc = match scenario_path {
                Some(p) => Scenario::load(&p)?,
                None => Scenario::default(),
            };
            let sim = scenario::simulate(&cfg, &sc)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write(&out.join("history.jsonl"), &sim.history)?;
            write(&out.join("l2_events.jsonl"), &sim.l2_events)?;
            write(&out.join("l1_events.jsonl"), &sim.l1_events)?;
            let report = serde_json::to_string_pretty(&sim.report)?;
            write(&out.join("report.json"), &report)?;
            if let Some(trace) = &sim.stress {
                write(&out.join("stress.csv"), trace.to_csv())?;
            }
            emit(&format!("{report}\n"))?;
        }
        Command::Cluster { data, k, seed, out } => {
            let records = dataset::ingest(&data)?;
            let report = analysis::cluster_report(&dataset::as_points(&records), k, seed)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write(&dir.join("report.json"), serde_json::to_string_pretty(&report.summary())?)?;
                write(&dir.join("projected.csv"), report.to_csv())?;
            }
            print_json(&report.summary())?;
        }
        Command::Synth {
            n_normal,
            n_attack,
            separation,
            seed,
            out,
        } => {
            if n_normal == 0 || n_attack == 0 || separation.is_nan() || separation < 0.0 {
                bail!("counts must be positive and separation non-negative");
            }
            let records = dataset::synth_generate(n_normal, n_attack, separation, seed);
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            dataset::write_records(&records, file)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Bench { model, batches, seed } => {
            let q = read_model(&model)?;
            let rows = chainsim::throughput_bench(&q, &parse::vector::<usize>(&batches)?, seed)?;
            emit(&chainsim::bench_table(&rows))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
