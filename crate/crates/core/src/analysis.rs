//! Balls-and-bins bounds behind robust extraction, their Monte Carlo checks,
//! the detection-only robustness condition, and a bigram homogeneity test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::attacks::block_splice_word;
use crate::error::{Error, Result};
use crate::fpcode::{fp_gen, fp_trace, FpParams};
use crate::tokens::{TokenSeq, ToyModel};
use crate::zerobit::{blocks_parse, AebCondition, ApproxRelation, BlockPolicy, Transcript};

/// Which term of the block-count bound attains the minimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KStarBranch {
    /// `L·(ln L + λ)`: enough balls that no bin stays empty.
    NoEmptyBins,
    /// `L·ln(1/d)` with `d = δ − √((λ + ln 2)/2L)`.
    FewEmptyBins,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KStar {
    pub value: usize,
    pub branch: KStarBranch,
}

fn check_bins(len: usize, delta: f64) -> Result<()> {
    if len == 0 {
        return Err(Error::param("L must be at least 1"));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::param(format!("delta must lie in [0, 1), got {delta}")));
    }
    Ok(())
}

/// Number of blocks after which fewer than `δL` of `L` bins stay empty,
/// except with probability `e^{-λ}`. The second branch only counts when
/// `d > 0`.
pub fn k_star_detail(len: usize, delta: f64, lambda: u32) -> Result<KStar> {
    check_bins(len, delta)?;
    if lambda == 0 {
        return Err(Error::param("lambda must be at least 1"));
    }
    let l = len as f64;
    let lam = f64::from(lambda);
    let first = l * (l.ln() + lam);
    let d = delta - ((lam + std::f64::consts::LN_2) / (2.0 * l)).sqrt();
    let (raw, branch) = if d > 0.0 && l * (1.0 / d).ln() < first {
        (l * (1.0 / d).ln(), KStarBranch::FewEmptyBins)
    } else {
        (first, KStarBranch::NoEmptyBins)
    };
    Ok(KStar {
        value: (raw.ceil() as usize).max(1),
        branch,
    })
}

pub fn k_star(len: usize, delta: f64, lambda: u32) -> Result<usize> {
    Ok(k_star_detail(len, delta, lambda)?.value)
}

/// Outcome of a balls-and-bins simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinsResult {
    pub trials: usize,
    /// Trials that ended with more than `δL` empty bins.
    pub empties_exceeded: usize,
    pub failure_rate: f64,
}

impl BinsResult {
    /// Monte Carlo standard error at failure probability `p`.
    pub fn sigma(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Per-trial generators derived from one master seed, so results do not
/// depend on how trials are scheduled.
fn trial_rng(master: u64, trial: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(trial as u64);
    r
}

fn throw(balls: usize, bins: usize, rng: &mut ChaCha8Rng, loads: &mut Vec<usize>) {
    loads.clear();
    loads.resize(bins, 0);
    for _ in 0..balls {
        loads[rng.gen_range(0..bins)] += 1;
    }
}

/// Throws `k` balls into `L` bins per trial and counts trials with more than
/// `δL` empty bins.
pub fn simulate_empty_bins<R: Rng + ?Sized>(
    k: usize,
    len: usize,
    delta: f64,
    trials: usize,
    rng: &mut R,
) -> Result<BinsResult> {
    check_bins(len, delta)?;
    if trials == 0 {
        return Err(Error::usage("trials must be at least 1"));
    }
    let master: u64 = rng.gen();
    let limit = delta * len as f64;
    let empties_exceeded = (0..trials)
        .into_par_iter()
        .map_init(Vec::new, |loads, t| {
            throw(k, len, &mut trial_rng(master, t), loads);
            let empty = loads.iter().filter(|&&x| x == 0).count();
            usize::from(empty as f64 > limit)
        })
        .sum();
    Ok(BinsResult {
        trials,
        empties_exceeded,
        failure_rate: empties_exceeded as f64 / trials as f64,
    })
}

/// A load `s` such that, with `B` balls in `L` bins, the `⌊δL⌋` lightest bins
/// together hold at least `s` balls in all but an `e^{-λ}` fraction of
/// trials. Clamped to stay strictly below `δB`.
pub fn s_bound<R: Rng + ?Sized>(
    balls: usize,
    len: usize,
    delta: f64,
    lambda: u32,
    trials: usize,
    rng: &mut R,
) -> Result<usize> {
    check_bins(len, delta)?;
    if trials == 0 {
        return Err(Error::usage("trials must be at least 1"));
    }
    let light = crate::lbit::erasure_budget(len, delta);
    let cap = delta * balls as f64;
    if light == 0 || cap <= 0.0 {
        return Ok(0);
    }
    let master: u64 = rng.gen();
    let mut light_loads: Vec<usize> = (0..trials)
        .into_par_iter()
        .map_init(Vec::new, |loads, t| {
            throw(balls, len, &mut trial_rng(master, t), loads);
            loads.sort_unstable();
            loads[..light].iter().sum()
        })
        .collect();
    light_loads.sort_unstable();
    let idx = ((-f64::from(lambda)).exp() * trials as f64).floor() as usize;
    let s = light_loads[idx.min(trials - 1)];
    // Largest integer strictly below δB.
    let max_s = (cap.ceil() as usize).saturating_sub(1);
    Ok(s.min(max_s))
}

/// Seed and trial count used by [`r_det`] so that the condition is a
/// deterministic function of its inputs.
pub const R_DET_SEED: u64 = 0x5EED_0B0B;
pub const R_DET_TRIALS: usize = 10_000;

/// The detection-only robustness condition: the transcript holds at least
/// `L(ln L + λ)` blocks in total and all but `s_bound` of them survive in `t_hat`.
#[allow(clippy::too_many_arguments)]
pub fn r_det(
    lambda: u32,
    len: usize,
    delta: f64,
    transcript: &Transcript,
    t_hat: &TokenSeq,
    rel: ApproxRelation,
    model: &ToyModel,
    policy: &BlockPolicy,
) -> Result<bool> {
    check_bins(len, delta)?;
    let total: usize = transcript
        .entries()
        .iter()
        .map(|(q, t)| blocks_parse(model, policy, q, t).len())
        .sum();
    let l = len as f64;
    if (total as f64) < l * (l.ln() + f64::from(lambda)) {
        return Ok(false);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(R_DET_SEED);
    let s = s_bound(total, len, delta, lambda, R_DET_TRIALS, &mut rng)?;
    let kept = AebCondition::new(model, policy, rel).total_blocks(transcript, t_hat);
    Ok(kept + s >= total)
}

/// Counts of the bigrams `00, 01, 10, 11` over each text.
pub fn bigram_counts<'a, I: IntoIterator<Item = &'a TokenSeq>>(texts: I) -> [u64; 4] {
    let mut counts = [0u64; 4];
    for t in texts {
        for w in t.as_bytes().windows(2) {
            counts[usize::from(w[0] * 2 + w[1])] += 1;
        }
    }
    counts
}

/// Result of a chi-square homogeneity test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Chi-square test that two count vectors come from the same categorical
/// distribution. Categories empty in both samples are dropped.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<ChiSquare> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return Err(Error::usage("both samples need at least one observation"));
    }
    let total = (na + nb) as f64;
    let mut stat = 0.0;
    let mut cats = 0;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        cats += 1;
        for (obs, n) in [(x, na), (y, nb)] {
            let expected = col * n as f64 / total;
            stat += (obs as f64 - expected).powi(2) / expected;
        }
    }
    let df = cats.max(2) - 1;
    let p_value = ChiSquared::new(df as f64)
        .map_err(|e| Error::param(e.to_string()))?
        .sf(stat);
    Ok(ChiSquare {
        statistic: stat,
        df,
        p_value,
    })
}

/// Normalized tracing scores from simulated block-splice collusions, used
/// to pick the threshold scale for a given code length scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TardosCalibration {
    pub params: FpParams,
    pub trials: usize,
    pub blocks_per_colluder: usize,
    pub kept_blocks: usize,
    /// Largest `score / (c·ln(n+1)·λ·(1 − δ_eff))` over all innocent users and trials.
    pub max_innocent: f64,
    /// Per trial, the largest normalized score among the colluders, sorted.
    pub colluder_best: Vec<f64>,
}

impl TardosCalibration {
    /// Fraction of trials in which some colluder clears `z_scale`.
    pub fn colluder_hit_rate(&self, z_scale: f64) -> f64 {
        let hits = self.colluder_best.iter().filter(|&&s| s > z_scale).count();
        hits as f64 / self.trials as f64
    }

    pub fn colluder_quantile(&self, q: f64) -> f64 {
        let idx = ((self.colluder_best.len() - 1) as f64 * q).round() as usize;
        self.colluder_best[idx]
    }
}

/// Runs `trials` block-splice collusions by the first `params.c` users.
/// Each colluder contributes `blocks_per_colluder` blocks and `kept_blocks`
/// of the pooled blocks survive into the pirate text.
pub fn calibrate_tardos<R: Rng + ?Sized>(
    params: &FpParams,
    blocks_per_colluder: usize,
    kept_blocks: usize,
    trials: usize,
    rng: &mut R,
) -> Result<TardosCalibration> {
    params.validate()?;
    let master: u64 = rng.gen();
    let unit = params.score_unit();
    let per_trial: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = trial_rng(master, t);
            let (book, tk) = fp_gen(params, &mut r)?;
            let colluders = &book.rows()[..params.c];
            let y = block_splice_word(colluders, blocks_per_colluder, kept_blocks, &mut r)?;
            let out = fp_trace(&y, &book, &tk, None)?;
            let keep = 1.0 - out.erasures as f64 / y.len() as f64;
            let norm = |s: f64| if keep > 0.0 { s / (unit * keep) } else { 0.0 };
            let (mut innocent, mut guilty) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &(u, s) in &out.scores {
                if u < params.c {
                    guilty = guilty.max(norm(s));
                } else {
                    innocent = innocent.max(norm(s));
                }
            }
            Ok((innocent, guilty))
        })
        .collect::<Result<_>>()?;
    let max_innocent = per_trial.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut colluder_best: Vec<f64> = per_trial.iter().map(|p| p.1).collect();
    colluder_best.sort_by(f64::total_cmp);
    Ok(TardosCalibration {
        params: params.clone(),
        trials,
        blocks_per_colluder,
        kept_blocks,
        max_innocent,
        colluder_best,
    })
}
