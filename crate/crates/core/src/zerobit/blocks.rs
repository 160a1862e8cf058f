//! Blocks, block parsing, and the AEB robustness condition `R_k`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tokens::{token_surprisal, Prompt, ToyModel, TokenSeq};
use crate::zerobit::prf::CONTEXT_LEN;

/// Decides which strings are blocks, and how the zero-bit generator splits
/// each block into a freshly random seed and a derandomized body.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPolicy {
    /// Empirical entropy (bits) a string needs to count as a block.
    pub entropy_threshold: f64,
    /// Entropy (bits) the random seed of each block must reach before the
    /// body starts. The seed is also at least [`CONTEXT_LEN`] tokens long.
    pub seed_entropy: f64,
    /// Coefficient of the substring-completeness bound `b(ℓ) = b_coeff · √ℓ`.
    pub b_coeff: f64,
}

impl BlockPolicy {
    /// The policy used by the zero-bit scheme at security parameter `lambda`.
    ///
    /// On a 1-bit-per-token model a block is a 64-token seed followed by a
    /// `min(256 + 16λ, 512)`-token body.
    pub fn for_lambda(lambda: u32) -> Self {
        let body = (256.0 + 16.0 * f64::from(lambda)).min(512.0);
        Self {
            entropy_threshold: CONTEXT_LEN as f64 + body,
            seed_entropy: f64::from(lambda),
            b_coeff: 8.0 / std::f64::consts::LN_2 * f64::from(lambda),
        }
    }

    pub fn new(entropy_threshold: f64, seed_entropy: f64, b_coeff: f64) -> Result<Self> {
        if !(entropy_threshold > 0.0) || !(seed_entropy >= 0.0) || !(b_coeff >= 0.0) {
            return Err(Error::param("block thresholds must be positive"));
        }
        Ok(Self {
            entropy_threshold,
            seed_entropy,
            b_coeff,
        })
    }

    /// Entropy a length-`ell` substring needs for substring completeness.
    pub fn b(&self, ell: usize) -> f64 {
        self.b_coeff * (ell as f64).sqrt()
    }
}

/// The parse `T = β₁‖…‖β_B‖σ` into minimal blocks and a non-block remainder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blocks {
    pub blocks: Vec<Range<usize>>,
    pub remainder: Range<usize>,
}

impl Blocks {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block<'t>(&self, t: &'t TokenSeq, i: usize) -> &'t [u8] {
        &t.as_bytes()[self.blocks[i].clone()]
    }
}

/// Greedy left-to-right parse: each block is the shortest prefix of what is
/// left whose entropy (relative to everything before it) reaches the
/// policy threshold. The terminator is never part of a block.
pub fn blocks_parse(model: &ToyModel, policy: &BlockPolicy, q: &Prompt, t: &TokenSeq) -> Blocks {
    let mut ctx = q.as_bytes().to_vec();
    ctx.reserve(t.len());
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut acc = 0.0;
    for (i, &b) in t.as_bytes().iter().enumerate() {
        // An impossible token has infinite surprisal and closes the block.
        acc += token_surprisal(model.dist_at(&ctx), b);
        ctx.push(b);
        if acc >= policy.entropy_threshold {
            blocks.push(start..i + 1);
            start = i + 1;
            acc = 0.0;
        }
    }
    Blocks {
        blocks,
        remainder: start..t.len(),
    }
}

/// The relation `≂` deciding when a substring of the candidate text
/// approximates a block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ApproxRelation {
    Equality,
    /// Equal length and normalized Hamming distance at most the bound.
    Hamming(f64),
}

impl ApproxRelation {
    pub fn hamming(delta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::param(format!("Hamming bound must lie in [0, 1), got {delta}")));
        }
        Ok(if delta == 0.0 {
            ApproxRelation::Equality
        } else {
            ApproxRelation::Hamming(delta)
        })
    }

    pub fn approximates(&self, candidate: &[u8], block: &[u8]) -> bool {
        match *self {
            ApproxRelation::Equality => candidate == block,
            ApproxRelation::Hamming(d) => {
                candidate.len() == block.len()
                    && normalized_hamming(candidate, block) <= d
            }
        }
    }

    /// Whether some substring of `text` approximates `block`.
    pub fn occurs_in(&self, text: &[u8], block: &[u8]) -> bool {
        if block.len() > text.len() {
            return false;
        }
        match *self {
            ApproxRelation::Equality => memchr::memmem::find(text, block).is_some(),
            ApproxRelation::Hamming(d) => {
                let budget = (d * block.len() as f64).floor() as usize;
                text.windows(block.len()).any(|w| {
                    let mut misses = 0;
                    for (a, b) in w.iter().zip(block) {
                        if a != b {
                            misses += 1;
                            if misses > budget {
                                return false;
                            }
                        }
                    }
                    true
                })
            }
        }
    }
}

/// `Δ(a, b)`: the fraction of positions where equal-length strings differ.
pub fn normalized_hamming(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len(), "normalized Hamming distance needs equal lengths");
    if a.is_empty() {
        return 0.0;
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    diff as f64 / a.len() as f64
}

/// Every `(prompt, generation)` pair an adversary received from the oracle, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    entries: Vec<(Prompt, TokenSeq)>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, prompt: Prompt, generation: TokenSeq) {
        self.entries.push((prompt, generation));
    }

    pub fn entries(&self) -> &[(Prompt, TokenSeq)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Counts approximated blocks: `NumBlocks` and the condition `R_k`.
#[derive(Clone, Copy, Debug)]
pub struct AebCondition<'a> {
    pub model: &'a ToyModel,
    pub policy: &'a BlockPolicy,
    pub rel: ApproxRelation,
}

impl<'a> AebCondition<'a> {
    pub fn new(model: &'a ToyModel, policy: &'a BlockPolicy, rel: ApproxRelation) -> Self {
        Self { model, policy, rel }
    }

    /// Number of blocks of `Blocks(T; Q)` approximated by some substring of `t_hat`.
    ///
    /// Blocks are counted by position in the parse; the approximating
    /// substrings are allowed to overlap.
    pub fn num_blocks(&self, t_hat: &TokenSeq, q: &Prompt, t: &TokenSeq) -> usize {
        let parsed = blocks_parse(self.model, self.policy, q, t);
        parsed
            .blocks
            .iter()
            .filter(|r| self.rel.occurs_in(t_hat.as_bytes(), &t.as_bytes()[(*r).clone()]))
            .count()
    }

    /// Total approximated blocks across every transcript entry.
    pub fn total_blocks(&self, transcript: &Transcript, t_hat: &TokenSeq) -> usize {
        transcript
            .entries()
            .iter()
            .map(|(q, t)| self.num_blocks(t_hat, q, t))
            .sum()
    }

    /// `R_k`: at least `k` blocks of the transcript are approximated in `t_hat`.
    pub fn r_k(&self, transcript: &Transcript, t_hat: &TokenSeq, k: usize) -> Result<bool> {
        if k == 0 {
            return Err(Error::usage("R_k needs k >= 1"));
        }
        Ok(self.total_blocks(transcript, t_hat) >= k)
    }
}
