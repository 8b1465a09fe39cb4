//! Serialization: C99 hex floats, CSV tensors and JSON result payloads.
//!
//! Input tensors and observations share the CSV layout `mu,c,i,value` with
//! 1-based indices. Matrices in JSON carry hex-float strings so that every
//! bit survives a round trip.

use crate::error::{Error, Result};
use crate::gauss::{Mat, PsdMatrix};
use crate::kernel::{InputBatch, KernelChain, Provenance};
use crate::ldp::{ChainRate, EmpiricalRow, RateResult};
use crate::posterior::Observations;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// `x` as a C99 hex float, e.g. `0x1.8p+0`.
pub fn to_hex(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let mut digits = format!("{mant:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let frac = if digits.is_empty() { String::new() } else { format!(".{digits}") };
    let esign = if e >= 0 { "+" } else { "-" };
    format!("{sign}0x{lead}{frac}p{esign}{}", e.abs())
}

/// Parses a hex float as written by [`to_hex`]; decimal input is accepted too.
pub fn from_hex(s: &str) -> Result<f64> {
    let t = s.trim();
    let bad = || Error::Parse(format!("not a hex float: {s:?}"));
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let lower = body.to_ascii_lowercase();
    let value = match lower.as_str() {
        "inf" | "infinity" => f64::INFINITY,
        "nan" => f64::NAN,
        _ => match lower.strip_prefix("0x") {
            None => body.parse::<f64>().map_err(|_| bad())?,
            Some(hex) => {
                let (m, e) = hex.split_once('p').ok_or_else(bad)?;
                let exp: i64 = e.parse().map_err(|_| bad())?;
                let (int, frac) = m.split_once('.').unwrap_or((m, ""));
                if int.is_empty() && frac.is_empty() || frac.len() > 13 {
                    return Err(bad());
                }
                let mut mant: u64 = 0;
                for ch in int.chars().chain(frac.chars()) {
                    mant = mant
                        .checked_mul(16)
                        .and_then(|v| v.checked_add(ch.to_digit(16)? as u64))
                        .ok_or_else(bad)?;
                }
                // exact as long as the mantissa fits in 53 bits
                if mant >> 53 != 0 {
                    return Err(bad());
                }
                let shift = exp - 4 * frac.len() as i64;
                let mut v = mant as f64;
                // scale in two steps to stay exact across the subnormal range
                let half = shift / 2;
                v *= 2f64.powi(half as i32);
                v *= 2f64.powi((shift - half) as i32);
                v
            }
        },
    };
    Ok(if neg { -value } else { value })
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    /// Row-major hex floats.
    values: Vec<String>,
}

fn matrix_json(m: &Mat) -> MatrixJson {
    let mut values = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            values.push(to_hex(m[(r, c)]));
        }
    }
    MatrixJson {
        rows: m.nrows(),
        cols: m.ncols(),
        values,
    }
}

fn matrix_from_json(j: &MatrixJson) -> Result<Mat> {
    if j.values.len() != j.rows * j.cols {
        return Err(Error::Parse(format!("{}x{} matrix with {} values", j.rows, j.cols, j.values.len())));
    }
    let vals = j.values.iter().map(|s| from_hex(s)).collect::<Result<Vec<_>>>()?;
    Ok(Mat::from_row_slice(j.rows, j.cols, &vals))
}

#[derive(Debug, Serialize, Deserialize)]
struct ChainJson {
    provenance: Provenance,
    inputs: usize,
    kernels: Vec<MatrixJson>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    standard_errors: Option<Vec<MatrixJson>>,
}

pub fn chain_to_json(chain: &KernelChain) -> serde_json::Value {
    let j = ChainJson {
        provenance: chain.provenance,
        inputs: chain.kernels.first().map_or(1, |k| k.inputs()),
        kernels: chain.kernels.iter().map(|k| matrix_json(k.matrix())).collect(),
        standard_errors: chain.standard_errors.as_ref().map(|v| v.iter().map(matrix_json).collect()),
    };
    serde_json::to_value(j).expect("chain JSON")
}

pub fn chain_from_json(v: &serde_json::Value) -> Result<KernelChain> {
    let j: ChainJson = serde_json::from_value(v.clone())?;
    let kernels = j
        .kernels
        .iter()
        .map(|m| PsdMatrix::new(matrix_from_json(m)?, j.inputs))
        .collect::<Result<Vec<_>>>()?;
    let standard_errors = j
        .standard_errors
        .map(|v| v.iter().map(matrix_from_json).collect::<Result<Vec<_>>>())
        .transpose()?;
    Ok(KernelChain {
        kernels,
        provenance: j.provenance,
        standard_errors,
    })
}

pub fn matrix_to_json(m: &Mat) -> serde_json::Value {
    serde_json::to_value(matrix_json(m)).expect("matrix JSON")
}

pub fn rate_to_json(r: &RateResult) -> serde_json::Value {
    serde_json::json!({
        "value": r.value,
        "value_hex": to_hex(r.value),
        "tilt": matrix_to_json(r.tilt.matrix()),
        "iterations": r.iterations,
        "grad_norm": r.grad_norm,
        "domain_limited": r.domain_limited,
        "converged": r.converged,
        "stages": r.stages,
        "ess": r.ess,
        "samples": r.samples,
        "trust_radius": r.trust_radius,
    })
}

pub fn chain_rate_to_json(r: &ChainRate) -> serde_json::Value {
    serde_json::json!({
        "total": r.total,
        "total_hex": to_hex(r.total),
        "domain_limited": r.domain_limited,
        "terms": r.terms.iter().map(rate_to_json).collect::<Vec<_>>(),
    })
}

/// CSV table of empirical rates; infinite rates are written as `inf`.
pub fn write_empirical_csv(rows: &[EmpiricalRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "replicas", "hits", "probability", "rate", "rate_low", "rate_high", "undersampled"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.replicas.to_string(),
            r.hits.to_string(),
            r.probability.to_string(),
            r.rate.to_string(),
            r.rate_low.to_string(),
            r.rate_high.to_string(),
            r.undersampled.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRow {
    mu: usize,
    c: usize,
    i: usize,
    value: f64,
}

/// Reads `(μ, c, i) → value` rows (1-based) into a dense `P × C × N` array
/// indexed `(μ·C + c)·N + i`. Every cell must appear exactly once.
fn read_tensor(input: impl Read, inputs: usize, channels: usize, sites: usize) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut data = vec![f64::NAN; inputs * channels * sites];
    let mut seen = vec![false; data.len()];
    for row in rdr.deserialize() {
        let r: TensorRow = row?;
        if r.mu == 0 || r.mu > inputs || r.c == 0 || r.c > channels || r.i == 0 || r.i > sites {
            return Err(Error::Parse(format!(
                "row (mu={}, c={}, i={}) outside {inputs}x{channels}x{sites}",
                r.mu, r.c, r.i
            )));
        }
        let k = ((r.mu - 1) * channels + r.c - 1) * sites + r.i - 1;
        if seen[k] {
            return Err(Error::Parse(format!("duplicate row (mu={}, c={}, i={})", r.mu, r.c, r.i)));
        }
        seen[k] = true;
        data[k] = r.value;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        let (mu, rest) = (k / (channels * sites), k % (channels * sites));
        return Err(Error::Parse(format!(
            "missing row (mu={}, c={}, i={})",
            mu + 1,
            rest / sites + 1,
            rest % sites + 1
        )));
    }
    Ok(data)
}

fn write_tensor(data: &[f64], inputs: usize, channels: usize, sites: usize, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for mu in 0..inputs {
        for c in 0..channels {
            for i in 0..sites {
                w.serialize(TensorRow {
                    mu: mu + 1,
                    c: c + 1,
                    i: i + 1,
                    value: data[(mu * channels + c) * sites + i],
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_input_batch(input: impl Read, inputs: usize, channels: usize, sites: usize) -> Result<InputBatch> {
    InputBatch::new(inputs, channels, sites, read_tensor(input, inputs, channels, sites)?)
}

pub fn write_input_batch(batch: &InputBatch, out: impl Write) -> Result<()> {
    write_tensor(batch.values(), batch.inputs(), batch.channels(), batch.sites(), out)
}

/// Observations in the input layout; `c` is the output channel.
pub fn read_observations(input: impl Read, inputs: usize, channels: usize, sites: usize, beta: f64) -> Result<Observations> {
    let t = read_tensor(input, inputs, channels, sites)?;
    let mut y = vec![0.0; t.len()];
    for mu in 0..inputs {
        for c in 0..channels {
            for i in 0..sites {
                y[(c * sites + i) * inputs + mu] = t[(mu * channels + c) * sites + i];
            }
        }
    }
    Observations::new(y, channels, sites * inputs, beta)
}

pub fn write_observations(y: &Observations, inputs: usize, out: impl Write) -> Result<()> {
    let sites = y.dim() / inputs;
    let channels = y.channels();
    let mut t = vec![0.0; y.values().len()];
    for mu in 0..inputs {
        for c in 0..channels {
            for i in 0..sites {
                t[(mu * channels + c) * sites + i] = y.values()[(c * sites + i) * inputs + mu];
            }
        }
    }
    write_tensor(&t, inputs, channels, sites, out)
}
