//! Window scanning for the zero-bit detector.
//!
//! Every position `j ≥ CONTEXT_LEN` whose preceding context appears for the
//! first time in the text contributes a score `-ln w_j`, where `w_j` is `u_j`
//! for a `1` and `1 - u_j` for a `0`. On text independent of the key these
//! scores are i.i.d. `Exp(1)`; on generated text they are biased upward.
//! Sums over a fixed grid of windows are compared against a tail bound that
//! is union-bounded over the number of windows.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::prf::{Prf, CONTEXT_LEN};

/// Window lengths (in positions) checked by the detector. Shorter windows
/// cannot clear the threshold even on a fully marked stretch of a
/// one-bit-per-token model, so they would only inflate the union bound.
pub const WINDOW_LENGTHS: [usize; 8] = [128, 160, 192, 256, 320, 384, 448, 512];

const MAX_WINDOW: usize = 512;
const MIN_WEIGHT: f64 = 1.0 / (1u64 << 54) as f64;
/// Window boundaries fall on multiples of this many positions, so scores can
/// be accumulated per group with one logarithm per group.
const GROUP: usize = 8;
/// Positions scored between window sweeps; bounds the work wasted after the
/// first firing window.
const CHUNK: usize = 4096;

/// Distance between consecutive window starts: about `len / 8`, rounded down
/// to a whole number of groups.
fn stride(len: usize) -> usize {
    (len / 8 / GROUP * GROUP).max(GROUP)
}

/// The key-independent part of a scan: contexts, first-occurrence filter and
/// the window grid. Built once per text and shared across keys.
#[derive(Clone, Debug)]
pub(crate) struct ScanPlan {
    len: usize,
    /// Contexts and tokens at first-occurrence positions, in text order.
    contexts: Vec<u64>,
    bits: Vec<u8>,
    /// `scored[j]` = number of scored positions before `j`.
    scored: Vec<u32>,
    windows: usize,
}

impl ScanPlan {
    pub(crate) fn new(text: &[u8]) -> Self {
        let n = text.len();
        let mut contexts = Vec::new();
        let mut bits = Vec::new();
        let mut scored = Vec::with_capacity(n + 1);
        scored.push(0u32);
        let mut seen = HashSet::new();
        let mut ctx = 0u64;
        for j in 0..n {
            if j >= CONTEXT_LEN && seen.insert(ctx) {
                contexts.push(ctx);
                bits.push(text[j]);
            }
            scored.push(contexts.len() as u32);
            ctx = (ctx << 1) | u64::from(text[j]);
        }
        let windows = WINDOW_LENGTHS.iter().map(|&len| window_starts(n, len)).sum();
        Self {
            len: n,
            contexts,
            bits,
            scored,
            windows,
        }
    }

    /// Number of windows in the grid; the union bound runs over this count.
    pub(crate) fn window_count(&self) -> usize {
        self.windows
    }

    /// Number of scored (first-occurrence) positions.
    #[cfg(test)]
    pub(crate) fn scored_positions(&self) -> usize {
        self.contexts.len()
    }

    /// Scans every window; stops at the first that clears its threshold
    /// when `early_exit` is set.
    pub(crate) fn scan(&self, prf: &Prf, lambda: u32, early_exit: bool) -> DetectionReport {
        let mut report = DetectionReport::unmarked();
        if self.windows == 0 || self.contexts.is_empty() {
            return report;
        }
        let th = Thresholds::new(lambda, self.window_count());
        let theta: Vec<f64> = (0..=MAX_WINDOW).map(|m| th.theta(m)).collect();
        // Windows end on group boundaries, so a trailing partial group is never needed.
        let usable = self.len / GROUP * GROUP;
        // group_prefix[q] = total score of the scored positions before q·GROUP.
        let mut group_prefix = Vec::with_capacity(usable / GROUP + 1);
        group_prefix.push(0.0);
        let mut units = Vec::with_capacity(CHUNK);
        let mut next_start = [CONTEXT_LEN; WINDOW_LENGTHS.len()];
        let mut best_margin = f64::NEG_INFINITY;
        let mut done = 0;
        while done < usable {
            let upto = (done + CHUNK).min(usable);
            let k0 = self.scored[done] as usize;
            prf.units(&self.contexts[k0..self.scored[upto] as usize], &mut units);
            let mut acc = *group_prefix.last().expect("prefix starts non-empty");
            for g in (done..upto).step_by(GROUP) {
                let (a, b) = (self.scored[g] as usize, self.scored[g + GROUP] as usize);
                let mut product = 1.0;
                for (&u, &bit) in units[a - k0..b - k0].iter().zip(&self.bits[a..b]) {
                    // w = u for a 1 and 1 - u for a 0, without a data-dependent branch.
                    let flip = f64::from(1 - bit);
                    product *= (flip + u - 2.0 * flip * u).max(MIN_WEIGHT);
                }
                acc -= product.ln();
                group_prefix.push(acc);
            }
            done = upto;
            for (g, &len) in WINDOW_LENGTHS.iter().enumerate() {
                let start = &mut next_start[g];
                while *start + len <= done {
                    let end = *start + len;
                    let m = (self.scored[end] - self.scored[*start]) as usize;
                    if m > 0 {
                        let score = group_prefix[end / GROUP] - group_prefix[*start / GROUP];
                        let margin = score - theta[m];
                        if margin > best_margin {
                            best_margin = margin;
                            report = DetectionReport {
                                marked: margin >= 0.0,
                                best_score: score,
                                window: Some([*start, end]),
                                threshold: Some(theta[m]),
                            };
                            if early_exit && report.marked {
                                return report;
                            }
                        }
                    }
                    *start += stride(len);
                }
            }
        }
        report
    }
}

fn window_starts(n: usize, len: usize) -> usize {
    if n < CONTEXT_LEN + len {
        0
    } else {
        (n - CONTEXT_LEN - len) / stride(len) + 1
    }
}

/// `θ(m) = m + 2√(λ′m) + 2λ′` with `λ′ = (λ + ln N)·ln 2` for `N` windows.
#[derive(Clone, Copy, Debug)]
pub struct Thresholds {
    lambda_eff: f64,
}

impl Thresholds {
    pub fn new(lambda: u32, windows: usize) -> Self {
        let n = windows.max(1) as f64;
        Self {
            lambda_eff: (f64::from(lambda) + n.ln()) * std::f64::consts::LN_2,
        }
    }

    pub fn theta(&self, m: usize) -> f64 {
        let m = m as f64;
        m + 2.0 * (self.lambda_eff * m).sqrt() + 2.0 * self.lambda_eff
    }
}

/// Detection report: `{marked, best_score, window, threshold}`.
///
/// `window` is the half-open token range of the window with the largest
/// margin over its threshold (the first firing window under early exit).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub marked: bool,
    pub best_score: f64,
    pub window: Option<[usize; 2]>,
    pub threshold: Option<f64>,
}

impl DetectionReport {
    fn unmarked() -> Self {
        Self {
            marked: false,
            best_score: 0.0,
            window: None,
            threshold: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn window_count_matches_enumeration() {
        for n in [0, 63, 191, 192, 200, 1000, 4097] {
            let text = vec![0u8; n];
            let plan = ScanPlan::new(&text);
            let mut count = 0;
            for &len in &WINDOW_LENGTHS {
                let mut s = CONTEXT_LEN;
                while s + len <= n {
                    count += 1;
                    s += stride(len);
                }
            }
            assert_eq!(plan.window_count(), count, "n = {n}");
        }
    }

    #[test]
    fn repeated_contexts_are_scored_once() {
        let plan = ScanPlan::new(&[0u8; 300]);
        assert_eq!(plan.scored_positions(), 1);
        assert_eq!(plan.scored[CONTEXT_LEN + 1], 1);
        let alt: Vec<u8> = (0..300).map(|i| (i % 2) as u8).collect();
        assert_eq!(ScanPlan::new(&alt).scored_positions(), 2);
    }

    #[test]
    fn threshold_dominates_gamma_tail() {
        // A sum of m Exp(1) scores is Gamma(m, 1) = χ²(2m) / 2.
        for lambda in [4, 8, 16] {
            for windows in [1, 100, 10_000] {
                let th = Thresholds::new(lambda, windows);
                let target = (-(f64::from(lambda) + (windows as f64).ln()) * std::f64::consts::LN_2).exp();
                for m in [1, 8, 32, 128, 512] {
                    let chi = ChiSquared::new(2.0 * m as f64).unwrap();
                    let tail = chi.sf(2.0 * th.theta(m));
                    assert!(tail <= target, "λ={lambda} N={windows} m={m}: {tail} > {target}");
                }
            }
        }
    }
}
