//! Transcripts: the ordered round history of a run, and their line-delimited
//! persistence format.
//!
//! One record per round with fields `t x_ref q q2 tau p y`; the header
//! carries the kernel config hash and the seed. Floats are written with
//! Rust's shortest round-trip formatting, so write -> read is bit-exact.

use std::fmt::Write as _;

use crate::dist::PredictionDistribution;
use crate::error::{Error, Result};

pub const TRANSCRIPT_HEADER: &str = "#koi-transcript v1";

/// One binary round: features, forecast distribution, sampled prediction,
/// observed outcome.
#[derive(Clone, Debug)]
pub struct BinaryRound<X> {
    pub features: X,
    pub x_ref: u64,
    pub dist: PredictionDistribution,
    pub sampled: f64,
    pub outcome: u8,
}

#[derive(Clone, Debug)]
pub struct QuantileRound<X> {
    pub features: X,
    pub x_ref: u64,
    pub dist: PredictionDistribution,
    pub sampled: f64,
    pub outcome: f64,
}

#[derive(Clone, Debug)]
pub struct VectorRound<X> {
    pub features: X,
    pub x_ref: u64,
    pub prediction: Vec<f64>,
    pub outcome: Vec<f64>,
    /// Achieved variational-inequality residual for the round.
    pub residual: f64,
    pub approximate: bool,
}

#[derive(Clone, Debug)]
pub struct BinaryTranscript<X> {
    pub rounds: Vec<BinaryRound<X>>,
    pub seed: u64,
    pub kernel_desc: String,
    pub kernel_hash: u64,
}

#[derive(Clone, Debug)]
pub struct QuantileTranscript<X> {
    pub rounds: Vec<QuantileRound<X>>,
    pub seed: u64,
    pub kernel_desc: String,
    pub kernel_hash: u64,
    pub q: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Clone, Debug)]
pub struct VectorTranscript<X> {
    pub rounds: Vec<VectorRound<X>>,
    pub seed: u64,
    pub kernel_desc: String,
    pub kernel_hash: u64,
    pub dim: usize,
}

impl<X> BinaryTranscript<X> {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TRANSCRIPT_HEADER}");
        let _ = writeln!(s, "#mode binary");
        let _ = writeln!(s, "#kernel {:016x} {}", self.kernel_hash, self.kernel_desc);
        let _ = writeln!(s, "#seed {}", self.seed);
        let _ = writeln!(s, "#columns t x_ref q q2 tau p y");
        for (i, r) in self.rounds.iter().enumerate() {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                i + 1,
                r.x_ref,
                r.dist.first,
                r.dist.second,
                r.dist.weight,
                r.sampled,
                r.outcome
            );
        }
        s
    }
}

impl<X> QuantileTranscript<X> {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TRANSCRIPT_HEADER}");
        let _ = writeln!(s, "#mode quantile");
        let _ = writeln!(s, "#kernel {:016x} {}", self.kernel_hash, self.kernel_desc);
        let _ = writeln!(s, "#seed {}", self.seed);
        let _ = writeln!(s, "#quantile {} {} {}", self.q, self.y_min, self.y_max);
        let _ = writeln!(s, "#columns t x_ref q q2 tau p y");
        for (i, r) in self.rounds.iter().enumerate() {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                i + 1,
                r.x_ref,
                r.dist.first,
                r.dist.second,
                r.dist.weight,
                r.sampled,
                r.outcome
            );
        }
        s
    }
}

impl<X> VectorTranscript<X> {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TRANSCRIPT_HEADER}");
        let _ = writeln!(s, "#mode vector");
        let _ = writeln!(s, "#kernel {:016x} {}", self.kernel_hash, self.kernel_desc);
        let _ = writeln!(s, "#seed {}", self.seed);
        let _ = writeln!(s, "#dim {}", self.dim);
        let _ = writeln!(s, "#columns t x_ref p y residual approx");
        for (i, r) in self.rounds.iter().enumerate() {
            let p: Vec<String> = r.prediction.iter().map(|v| v.to_string()).collect();
            let y: Vec<String> = r.outcome.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                i + 1,
                r.x_ref,
                p.join(","),
                y.join(","),
                r.residual,
                u8::from(r.approximate)
            );
        }
        s
    }

    /// Flattened CSV with per-component column suffixes.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let mut header = vec!["t".to_string(), "x_ref".to_string()];
        for k in 0..self.dim {
            header.push(format!("p_{k}"));
        }
        for k in 0..self.dim {
            header.push(format!("y_{k}"));
        }
        header.push("residual".into());
        header.push("approx".into());
        let _ = writeln!(s, "{}", header.join(","));
        for (i, r) in self.rounds.iter().enumerate() {
            let mut row = vec![(i + 1).to_string(), r.x_ref.to_string()];
            row.extend(r.prediction.iter().map(|v| v.to_string()));
            row.extend(r.outcome.iter().map(|v| v.to_string()));
            row.push(r.residual.to_string());
            row.push(u8::from(r.approximate).to_string());
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Header fields shared by all transcript modes.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptHeader {
    pub mode: String,
    pub kernel_hash: u64,
    pub kernel_desc: String,
    pub seed: u64,
    /// (q, y_min, y_max) when mode == "quantile".
    pub quantile: Option<(f64, f64, f64)>,
    pub dim: Option<usize>,
}

fn parse_header(text: &str) -> Result<(TranscriptHeader, usize)> {
    let mut mode = None;
    let mut kernel_hash = 0u64;
    let mut kernel_desc = String::new();
    let mut seed = 0u64;
    let mut quantile = None;
    let mut dim = None;
    let mut body_start = 0;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if idx == 0 {
            if line.trim() != TRANSCRIPT_HEADER {
                return Err(Error::Parse { line: 1, msg: format!("unrecognized header {line:?}") });
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.splitn(2, ' ');
            match parts.next() {
                Some("mode") => mode = parts.next().map(|s| s.trim().to_string()),
                Some("kernel") => {
                    let rest = parts.next().unwrap_or_default();
                    let mut kp = rest.splitn(2, ' ');
                    kernel_hash = kp
                        .next()
                        .and_then(|h| u64::from_str_radix(h, 16).ok())
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "bad kernel hash".into() })?;
                    kernel_desc = kp.next().unwrap_or_default().trim().to_string();
                }
                Some("seed") => {
                    seed = parts
                        .next()
                        .and_then(|v| v.trim().parse().ok())
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "bad seed".into() })?;
                }
                Some("quantile") => {
                    let vals: Vec<f64> = parts
                        .next()
                        .unwrap_or_default()
                        .split_whitespace()
                        .filter_map(|v| v.parse().ok())
                        .collect();
                    if vals.len() != 3 {
                        return Err(Error::Parse { line: lineno, msg: "bad quantile header".into() });
                    }
                    quantile = Some((vals[0], vals[1], vals[2]));
                }
                Some("dim") => {
                    dim = parts.next().and_then(|v| v.trim().parse().ok());
                }
                Some("columns") => {}
                other => {
                    return Err(Error::Parse { line: lineno, msg: format!("unknown header record {other:?}") });
                }
            }
        } else {
            body_start = idx;
            break;
        }
    }
    let mode = mode.ok_or_else(|| Error::Parse { line: 1, msg: "missing #mode header".into() })?;
    Ok((TranscriptHeader { mode, kernel_hash, kernel_desc, seed, quantile, dim }, body_start))
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse().map_err(|_| Error::Parse { line, msg: format!("bad float {tok:?}") })
}

/// Parses a binary transcript; features are not persisted, so they come back
/// as the unit type and rounds keep only their `x_ref`.
pub fn parse_binary(text: &str) -> Result<BinaryTranscript<()>> {
    let (header, body_start) = parse_header(text)?;
    if header.mode != "binary" {
        return Err(Error::Parse { line: 2, msg: format!("expected binary mode, got {}", header.mode) });
    }
    let mut rounds = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(body_start) {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 7 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 7 fields, got {}", tok.len()) });
        }
        let t: usize = tok[0].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad round index".into() })?;
        if t != rounds.len() + 1 {
            return Err(Error::Parse { line: lineno, msg: format!("round index {t} out of order") });
        }
        let x_ref = tok[1].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad x_ref".into() })?;
        let outcome: u8 = tok[6].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad outcome".into() })?;
        if outcome > 1 {
            return Err(Error::Parse { line: lineno, msg: format!("binary outcome must be 0/1, got {outcome}") });
        }
        rounds.push(BinaryRound {
            features: (),
            x_ref,
            dist: PredictionDistribution {
                first: parse_f64(tok[2], lineno)?,
                second: parse_f64(tok[3], lineno)?,
                weight: parse_f64(tok[4], lineno)?,
            },
            sampled: parse_f64(tok[5], lineno)?,
            outcome,
        });
    }
    Ok(BinaryTranscript { rounds, seed: header.seed, kernel_desc: header.kernel_desc, kernel_hash: header.kernel_hash })
}

pub fn parse_quantile(text: &str) -> Result<QuantileTranscript<()>> {
    let (header, body_start) = parse_header(text)?;
    if header.mode != "quantile" {
        return Err(Error::Parse { line: 2, msg: format!("expected quantile mode, got {}", header.mode) });
    }
    let (q, y_min, y_max) =
        header.quantile.ok_or_else(|| Error::Parse { line: 2, msg: "missing #quantile header".into() })?;
    let mut rounds = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(body_start) {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 7 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 7 fields, got {}", tok.len()) });
        }
        let x_ref = tok[1].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad x_ref".into() })?;
        rounds.push(QuantileRound {
            features: (),
            x_ref,
            dist: PredictionDistribution {
                first: parse_f64(tok[2], lineno)?,
                second: parse_f64(tok[3], lineno)?,
                weight: parse_f64(tok[4], lineno)?,
            },
            sampled: parse_f64(tok[5], lineno)?,
            outcome: parse_f64(tok[6], lineno)?,
        });
    }
    Ok(QuantileTranscript {
        rounds,
        seed: header.seed,
        kernel_desc: header.kernel_desc,
        kernel_hash: header.kernel_hash,
        q,
        y_min,
        y_max,
    })
}

pub fn parse_vector(text: &str) -> Result<VectorTranscript<()>> {
    let (header, body_start) = parse_header(text)?;
    if header.mode != "vector" {
        return Err(Error::Parse { line: 2, msg: format!("expected vector mode, got {}", header.mode) });
    }
    let dim = header.dim.ok_or_else(|| Error::Parse { line: 2, msg: "missing #dim header".into() })?;
    let parse_vec = |tok: &str, lineno: usize| -> Result<Vec<f64>> {
        let vals: std::result::Result<Vec<f64>, _> = tok.split(',').map(|v| v.parse()).collect();
        let vals = vals.map_err(|_| Error::Parse { line: lineno, msg: format!("bad vector {tok:?}") })?;
        if vals.len() != dim {
            return Err(Error::Parse { line: lineno, msg: format!("expected {dim} components, got {}", vals.len()) });
        }
        Ok(vals)
    };
    let mut rounds = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(body_start) {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 6 {
            return Err(Error::Parse { line: lineno, msg: format!("expected 6 fields, got {}", tok.len()) });
        }
        rounds.push(VectorRound {
            features: (),
            x_ref: tok[1].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad x_ref".into() })?,
            prediction: parse_vec(tok[2], lineno)?,
            outcome: parse_vec(tok[3], lineno)?,
            residual: parse_f64(tok[4], lineno)?,
            approximate: tok[5] == "1",
        });
    }
    Ok(VectorTranscript {
        rounds,
        seed: header.seed,
        kernel_desc: header.kernel_desc,
        kernel_hash: header.kernel_hash,
        dim,
    })
}

/// Reads just the header of any transcript file.
pub fn peek_header(text: &str) -> Result<TranscriptHeader> {
    parse_header(text).map(|(h, _)| h)
}
