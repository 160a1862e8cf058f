//! Erasure-tolerant Tardos fingerprinting codes.
//!
//! Column biases follow the cutoff arcsine law. Tracing uses the asymmetric
//! Tardos score over the positions where the pirate word holds a `1`;
//! erased positions contribute nothing and the accusation threshold shrinks
//! with the observed erasure fraction.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbit::{erasure_budget, Message, PartialMessage, Symbol};

/// Threshold scale used with length scale `A = 10`.
///
/// From `cargo run --release -p markbench --example calibrate_tardos`, whose
/// output is kept in `calibration/tardos.json`: over 10⁴ block-splice
/// collusions at `n = 16, c = 2, δ = 0.2, λ = 3` the largest normalized
/// innocent score was 3.41 and a colluder cleared 3.6 in 94.8% of trials.
pub const Z_SCALE_A10: f64 = 3.6;

/// The threshold scale paired with a length scale: the classical Tardos
/// ratio `A / 5`, except at `A = 10` where that ratio is too small and the
/// calibrated value is used.
pub fn default_z_scale(length_scale: f64) -> f64 {
    if length_scale == 10.0 {
        Z_SCALE_A10
    } else {
        length_scale / 5.0
    }
}

/// Public parameters of a fingerprinting code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpParams {
    pub lambda: u32,
    pub n: usize,
    pub c: usize,
    pub delta: f64,
    /// Length scale `A` in `L = ⌈A·c²·ln(n+1)·λ/(1−δ)⌉`.
    pub length_scale: f64,
    /// Threshold scale in `Z = z_scale·c·ln(n+1)·λ`.
    pub z_scale: f64,
    /// Overrides the computed code length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
}

impl FpParams {
    pub fn new(lambda: u32, n: usize, c: usize, delta: f64) -> Self {
        Self::with_scale(lambda, n, c, delta, 100.0)
    }

    pub fn with_scale(lambda: u32, n: usize, c: usize, delta: f64, length_scale: f64) -> Self {
        Self {
            lambda,
            n,
            c,
            delta,
            length_scale,
            z_scale: default_z_scale(length_scale),
            length: None,
        }
    }

    pub fn with_length(mut self, len: usize) -> Self {
        self.length = Some(len);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0 {
            return Err(Error::param("lambda must be at least 1"));
        }
        if self.c == 0 || self.n < self.c {
            return Err(Error::param(format!("need n >= c >= 1, got n={} c={}", self.n, self.c)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::param(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        if !(self.length_scale > 0.0) || !(self.z_scale > 0.0) {
            return Err(Error::param("length and threshold scales must be positive"));
        }
        if self.length == Some(0) {
            return Err(Error::param("code length must be at least 1"));
        }
        Ok(())
    }

    /// Code length `L`.
    pub fn code_length(&self) -> usize {
        self.length.unwrap_or_else(|| {
            fp_length_scaled(self.n, self.c, self.lambda, self.delta, self.length_scale)
        })
    }

    /// Bias cutoff `t = 1/(300c)`.
    pub fn cutoff(&self) -> f64 {
        1.0 / (300.0 * self.c as f64)
    }

    /// Normalizer `c·ln(n+1)·λ` shared by the threshold.
    pub fn score_unit(&self) -> f64 {
        self.c as f64 * ((self.n + 1) as f64).ln() * f64::from(self.lambda)
    }

    /// Accusation threshold `Z` before the erasure adjustment.
    pub fn threshold(&self) -> f64 {
        self.z_scale * self.score_unit()
    }
}

/// `L = ⌈100·c²·ln(n+1)·λ/(1−δ)⌉`.
pub fn fp_length(n: usize, c: usize, lambda: u32, delta: f64) -> usize {
    fp_length_scaled(n, c, lambda, delta, 100.0)
}

/// `L = ⌈A·c²·ln(n+1)·λ/(1−δ)⌉`.
pub fn fp_length_scaled(n: usize, c: usize, lambda: u32, delta: f64, length_scale: f64) -> usize {
    let c = c as f64;
    let raw = length_scale * c * c * ((n + 1) as f64).ln() * f64::from(lambda) / (1.0 - delta);
    // Guard against float noise pushing an exact integer up by one.
    ((raw - 1e-9).ceil() as usize).max(1)
}

/// The `n × L` code matrix; row `u` is user `u`'s codeword.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Codebook {
    len: usize,
    rows: Vec<Message>,
}

impl Codebook {
    pub fn from_rows(rows: Vec<Message>) -> Result<Self> {
        let len = rows.first().map_or(0, Message::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != len) {
            return Err(Error::LengthMismatch {
                expected: len,
                found: bad.len(),
            });
        }
        Ok(Self { len, rows })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Code length `L`.
    pub fn code_length(&self) -> usize {
        self.len
    }

    pub fn row(&self, u: usize) -> &Message {
        &self.rows[u]
    }

    pub fn rows(&self) -> &[Message] {
        &self.rows
    }

    /// Writes a JSON header line followed by the rows as packed bits
    /// (row-major, most significant bit first, each row padded to a byte).
    pub fn write_packed<W: Write>(&self, header: &CodebookHeader, mut w: W) -> Result<()> {
        if header.n != self.n() || header.len != self.len {
            return Err(Error::usage("codebook header does not match the matrix"));
        }
        serde_json::to_writer(&mut w, header)?;
        w.write_all(b"\n")?;
        for row in &self.rows {
            w.write_all(&pack_bits(row.bits()))?;
        }
        Ok(())
    }

    pub fn read_packed<R: BufRead>(mut r: R) -> Result<(CodebookHeader, Codebook)> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CodebookHeader = serde_json::from_str(line.trim_end())?;
        let row_bytes = header.len.div_ceil(8);
        let mut buf = vec![0u8; row_bytes];
        let mut rows = Vec::with_capacity(header.n);
        for _ in 0..header.n {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("codebook body truncated: {e}")))?;
            rows.push(Message::new(unpack_bits(&buf, header.len)));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after codebook", rest.len())));
        }
        let book = Codebook {
            len: header.len,
            rows,
        };
        Ok((header, book))
    }
}

/// Header of a packed codebook file: `{n, L, params}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookHeader {
    pub n: usize,
    #[serde(rename = "L")]
    pub len: usize,
    pub params: FpParams,
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|ch| ch.iter().enumerate().fold(0u8, |acc, (k, &b)| acc | (u8::from(b) << (7 - k))))
        .collect()
}

fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1).collect()
}

/// Column biases and the accusation threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracingKey {
    pub p: Vec<f64>,
    #[serde(rename = "Z")]
    pub z: f64,
    pub params: FpParams,
}

impl TracingKey {
    pub fn code_length(&self) -> usize {
        self.p.len()
    }
}

/// Draws a bias from the arcsine law restricted to `[t, 1-t]`.
pub fn sample_bias<R: Rng + ?Sized>(cutoff: f64, rng: &mut R) -> f64 {
    let lo = cutoff.sqrt().asin();
    let r = rng.gen_range(lo..=FRAC_PI_2 - lo);
    r.sin().powi(2)
}

pub fn fp_gen<R: Rng + ?Sized>(params: &FpParams, rng: &mut R) -> Result<(Codebook, TracingKey)> {
    params.validate()?;
    let len = params.code_length();
    let t = params.cutoff();
    let p: Vec<f64> = (0..len).map(|_| sample_bias(t, rng)).collect();
    let rows = (0..params.n)
        .map(|_| Message::new(p.iter().map(|&pi| rng.gen::<f64>() < pi).collect()))
        .collect();
    let tk = TracingKey {
        p,
        z: params.threshold(),
        params: params.clone(),
    };
    Ok((Codebook { len, rows }, tk))
}

/// Result of tracing a pirate word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub accused: BTreeSet<usize>,
    /// Score of every checked user, by id.
    pub scores: Vec<(usize, f64)>,
    pub erasures: usize,
    /// `Z·(1 − δ_eff)`.
    pub threshold: f64,
    /// Number of per-position score terms evaluated.
    pub score_evals: usize,
}

/// Accuses every checked user whose score exceeds `Z·(1 − δ_eff)`. Words
/// with more than `⌊δL⌋` erasures accuse nobody.
///
/// `suspects` restricts the check to the given user ids.
pub fn fp_trace(
    y: &PartialMessage,
    codebook: &Codebook,
    tk: &TracingKey,
    suspects: Option<&[usize]>,
) -> Result<TraceOutcome> {
    let len = tk.code_length();
    if y.len() != len || codebook.code_length() != len {
        return Err(Error::LengthMismatch {
            expected: len,
            found: if y.len() != len { y.len() } else { codebook.code_length() },
        });
    }
    if y.symbols().contains(&Symbol::Both) {
        return Err(Error::usage("pirate words are over {0, 1, ⊥}"));
    }
    let users: Vec<usize> = match suspects {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&u| u >= codebook.n()) {
                return Err(Error::usage(format!("unknown user {bad}")));
            }
            let set: BTreeSet<usize> = s.iter().copied().collect();
            set.into_iter().collect()
        }
        None => (0..codebook.n()).collect(),
    };
    let erasures = y.count(Symbol::Erased);
    let threshold = tk.z * (1.0 - erasures as f64 / len as f64);
    // Score terms for the positions that count.
    let terms: Vec<(usize, f64, f64)> = y
        .symbols()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == Symbol::One)
        .map(|(i, _)| {
            let p = tk.p[i];
            (i, ((1.0 - p) / p).sqrt(), -(p / (1.0 - p)).sqrt())
        })
        .collect();
    let scores: Vec<(usize, f64)> = users
        .par_iter()
        .map(|&u| {
            let row = codebook.row(u).bits();
            let s = terms.iter().map(|&(i, g1, g0)| if row[i] { g1 } else { g0 }).sum();
            (u, s)
        })
        .collect();
    // Outside the erasure ball the code promises nothing, so abstain.
    let accused = if erasures > erasure_budget(len, tk.params.delta) {
        BTreeSet::new()
    } else {
        scores.iter().filter(|(_, s)| *s > threshold).map(|(u, _)| *u).collect()
    };
    Ok(TraceOutcome {
        accused,
        scores,
        erasures,
        threshold,
        score_evals: users.len() * terms.len(),
    })
}

/// Whether `y` is feasible for `rows`: every position agrees with some row.
pub fn feasible(y: &Message, rows: &[Message]) -> bool {
    (0..y.len()).all(|i| rows.iter().any(|x| x.bit(i) == y.bit(i)))
}

/// Whether `y` lies in the `δ`-feasible ball: at most `⌊δL⌋` erasures and
/// every unerased position agrees with some row.
pub fn feasible_delta(y: &PartialMessage, rows: &[Message], delta: f64) -> bool {
    if y.count(Symbol::Erased) > erasure_budget(y.len(), delta) {
        return false;
    }
    y.symbols().iter().enumerate().all(|(i, s)| match s {
        Symbol::Erased => true,
        Symbol::Both => false,
        s => rows.iter().any(|x| Some(x.bit(i)) == s.bit()),
    })
}
