//! Parsers for the compact command-line argument forms.

use anyhow::{anyhow, bail, Context, Result};
use poimlab::fixedpoint::Scale;
use poimlab::gascost::{self, GasReport};
use poimlab::inference::ModelArch;

/// A scale given as an exponent (`6`) or a power of ten (`1e6`, `10^6`,
/// `1000000`).
pub fn scale(text: &str) -> Result<Scale> {
    let t = text.trim();
    let exponent: u32 = if let Some(e) = t.strip_prefix("10^").or_else(|| t.strip_prefix("1e")) {
        e.parse().with_context(|| format!("bad scale {text:?}"))?
    } else {
        let n: u128 = t.parse().with_context(|| format!("bad scale {text:?}"))?;
        if n < 100 {
            n as u32
        } else {
            let digits = n.to_string();
            if !digits.starts_with('1') || digits[1..].bytes().any(|b| b != b'0') {
                bail!("scale {text} is not a power of ten");
            }
            (digits.len() - 1) as u32
        }
    };
    Ok(Scale::new(exponent)?)
}

/// Comma-separated numbers.
pub fn vector<T: std::str::FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    text.split(',')
        .map(|v| v.trim().parse::<T>().with_context(|| format!("bad number {v:?}")))
        .collect()
}

fn dims(parts: &[&str], want: usize, form: &str) -> Result<Vec<u64>> {
    if parts.len() != want {
        bail!("expected {form}");
    }
    parts
        .iter()
        .map(|p| p.parse::<u64>().with_context(|| format!("bad dimension {p:?} in {form}")))
        .collect()
}

/// Gas report for `linear:D`, `mlp:D:W1,W2,..`, `cnn:D:K:F`, `rnn:D:U:T` or
/// `tree:DEPTH`.
pub fn arch_gas(text: &str) -> Result<GasReport> {
    let parts: Vec<&str> = text.split(':').collect();
    let kind = parts[0].to_ascii_lowercase();
    let rest = &parts[1..];
    let arch = match kind.as_str() {
        "linear" => {
            let d = dims(rest, 1, "linear:D")?;
            ModelArch::Linear { inputs: d[0] as usize }
        }
        "mlp" => {
            if rest.len() != 2 {
                bail!("expected mlp:D:W1,W2,...");
            }
            let d = dims(&rest[..1], 1, "mlp:D:W1,W2,...")?;
            ModelArch::Mlp {
                inputs: d[0] as usize,
                layers: vector(rest[1])?,
            }
        }
        "cnn" => {
            let d = dims(rest, 3, "cnn:D:K:F")?;
            let gas = gascost::gas_cnn(d[0], d[1], d[2])?;
            return Ok(GasReport::from_analytic(format!("cnn(d={},k={},f={})", d[0], d[1], d[2]), gas));
        }
        "rnn" => {
            let d = dims(rest, 3, "rnn:D:U:T")?;
            let gas = gascost::gas_rnn(d[0], d[1], d[2])?;
            return Ok(GasReport::from_analytic(format!("rnn(d={},u={},t={})", d[0], d[1], d[2]), gas));
        }
        "tree" => {
            let d = dims(rest, 1, "tree:DEPTH")?;
            return Ok(GasReport::from_analytic(format!("tree(depth={})", d[0]), gascost::gas_tree(d[0])));
        }
        other => return Err(anyhow!("unknown architecture {other:?}")),
    };
    arch.validate()?;
    Ok(GasReport::for_arch(&arch))
}
