//! Zero-bit block-by-block watermarking.
//!
//! Each block starts with a seed drawn with true randomness: at least
//! [`CONTEXT_LEN`] tokens carrying at least `seed_entropy` bits. The rest of
//! the block is sampled by inverse transform against `u = PRF(k, ctx)`,
//! where `ctx` is the preceding [`CONTEXT_LEN`] tokens. A block ends when its
//! empirical entropy reaches the block threshold and the next block reseeds.
//! Because every block carries its own seed, any single block found in a text
//! is detectable on its own, whatever surrounds it.

mod blocks;
mod detect;
mod prf;

use std::fmt;
use std::ops::Range;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{token_surprisal, Prompt, TokenSeq, ToyModel};

pub use blocks::{
    blocks_parse, normalized_hamming, AebCondition, ApproxRelation, BlockPolicy, Blocks, Transcript,
};
pub use detect::{DetectionReport, Thresholds, WINDOW_LENGTHS};
pub use prf::CONTEXT_LEN;

pub(crate) use detect::ScanPlan;
pub(crate) use prf::{pack_context, Prf};

/// Secret key of the zero-bit scheme.
#[derive(Clone)]
pub struct ZeroBitKey {
    lambda: u32,
    prf_key: Vec<u8>,
    prf: Prf,
}

impl ZeroBitKey {
    pub fn from_bytes(lambda: u32, prf_key: Vec<u8>) -> Result<Self> {
        if lambda == 0 {
            return Err(Error::param("lambda must be at least 1"));
        }
        let expected = key_size(lambda);
        if prf_key.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: prf_key.len(),
            });
        }
        let prf = Prf::new(&prf_key);
        Ok(Self { lambda, prf_key, prf })
    }

    pub fn lambda(&self) -> u32 {
        self.lambda
    }

    pub fn prf_key(&self) -> &[u8] {
        &self.prf_key
    }

    /// The default block policy for this key's security parameter.
    pub fn policy(&self) -> BlockPolicy {
        BlockPolicy::for_lambda(self.lambda)
    }

    pub(crate) fn prf(&self) -> &Prf {
        &self.prf
    }

    pub fn to_file(&self) -> ZeroBitKeyFile {
        ZeroBitKeyFile {
            lambda: self.lambda,
            prf_key_hex: hex::encode(&self.prf_key),
        }
    }

    pub fn from_file(file: &ZeroBitKeyFile) -> Result<Self> {
        let bytes = hex::decode(&file.prf_key_hex).map_err(|e| Error::Format(format!("prf_key_hex: {e}")))?;
        Self::from_bytes(file.lambda, bytes)
    }
}

impl PartialEq for ZeroBitKey {
    fn eq(&self, other: &Self) -> bool {
        self.lambda == other.lambda && self.prf_key == other.prf_key
    }
}

impl Eq for ZeroBitKey {}

impl fmt::Debug for ZeroBitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ZeroBitKey")
            .field("lambda", &self.lambda)
            .field("prf_key", &"<redacted>")
            .finish()
    }
}

/// On-disk zero-bit key: `{lambda, prf_key_hex}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroBitKeyFile {
    pub lambda: u32,
    pub prf_key_hex: String,
}

/// Key length in bytes: `2·⌈λ/8⌉`, at least 16.
pub fn key_size(lambda: u32) -> usize {
    (2 * (lambda as usize).div_ceil(8)).max(16)
}

pub fn keygen0<R: RngCore + ?Sized>(lambda: u32, rng: &mut R) -> Result<ZeroBitKey> {
    if lambda == 0 {
        return Err(Error::param("lambda must be at least 1"));
    }
    let mut bytes = vec![0u8; key_size(lambda)];
    rng.fill_bytes(&mut bytes);
    ZeroBitKey::from_bytes(lambda, bytes)
}

/// Stopping rules for [`generate`] beyond model termination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenLimits {
    /// Token cap for this call; `None` uses the model's `max_len`.
    pub max_tokens: Option<usize>,
    /// Return as soon as this many blocks have completed.
    pub max_blocks: Option<usize>,
}

impl GenLimits {
    pub const NONE: GenLimits = GenLimits {
        max_tokens: None,
        max_blocks: None,
    };

    pub fn blocks(n: usize) -> Self {
        GenLimits {
            max_tokens: None,
            max_blocks: Some(n),
        }
    }
}

/// A completed block inside a generation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkedBlock {
    pub range: Range<usize>,
    /// Start of the PRF-driven part; tokens before it were truly random.
    pub body_start: usize,
}

/// A generation together with where its blocks are.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub text: TokenSeq,
    pub blocks: Vec<MarkedBlock>,
    /// Body start of an unfinished trailing block, if it got that far.
    pub trailing_body_start: Option<usize>,
}

impl Generation {
    pub fn block_ranges(&self) -> Vec<Range<usize>> {
        self.blocks.iter().map(|b| b.range.clone()).collect()
    }

    /// Packed PRF contexts evaluated while generating block bodies.
    pub fn prf_contexts(&self, q: &Prompt) -> Vec<u64> {
        let full = [q.as_bytes(), self.text.as_bytes()].concat();
        let off = q.len();
        let mut out = Vec::new();
        let mut push_range = |from: usize, to: usize| {
            for j in from..to {
                out.push(pack_context(&full[off + j - CONTEXT_LEN..off + j]));
            }
        };
        let mut last_end = 0;
        for b in &self.blocks {
            push_range(b.body_start, b.range.end);
            last_end = b.range.end;
        }
        // A partial trailing block may already be in its body phase.
        if let Some(start) = self.trailing_body_start {
            push_range(start.max(last_end), self.text.len());
        }
        out
    }
}

/// Samples `Wat_sk(Q)` with the key's default block policy.
pub fn wat0<R: Rng + ?Sized>(key: &ZeroBitKey, model: &ToyModel, q: &Prompt, rng: &mut R) -> TokenSeq {
    generate(key, model, &key.policy(), q, rng, GenLimits::NONE).text
}

/// Block-by-block generation under an explicit policy and limits.
///
/// The output is marked terminated when the model stops or the token cap is
/// reached, and left open when the call returns because of `max_blocks`.
/// Randomness is consumed exactly as [`crate::tokens::sample`] does, so on a
/// deterministic model the output matches an unmarked sample.
pub fn generate<R: Rng + ?Sized>(
    key: &ZeroBitKey,
    model: &ToyModel,
    policy: &BlockPolicy,
    q: &Prompt,
    rng: &mut R,
    limits: GenLimits,
) -> Generation {
    let cap = limits.max_tokens.unwrap_or(model.max_len()).min(model.max_len());
    let mut buf = q.as_bytes().to_vec();
    let off = buf.len();
    let mut blocks = Vec::new();
    let mut block_start = 0;
    let mut body_start = None;
    let mut acc = 0.0;
    let mut terminated = true;
    let prf = key.prf();
    while buf.len() - off < cap {
        if model.draw_stop(rng) {
            break;
        }
        let dist = model.dist_at(&buf);
        let draw = rng.gen::<f64>();
        let u = if body_start.is_some() {
            prf.unit(pack_context(&buf[buf.len() - CONTEXT_LEN..]))
        } else {
            draw
        };
        let bit = u8::from(u < dist.p1);
        acc += token_surprisal(dist, bit);
        buf.push(bit);
        let pos = buf.len() - off;
        if acc >= policy.entropy_threshold {
            blocks.push(MarkedBlock {
                range: block_start..pos,
                body_start: body_start.unwrap_or(pos),
            });
            block_start = pos;
            body_start = None;
            acc = 0.0;
            if limits.max_blocks.is_some_and(|m| blocks.len() >= m) {
                terminated = false;
                break;
            }
        } else if body_start.is_none() && pos - block_start >= CONTEXT_LEN && acc >= policy.seed_entropy {
            body_start = Some(pos);
        }
    }
    let text = TokenSeq::from_raw(buf.split_off(off), terminated);
    Generation {
        text,
        blocks,
        trailing_body_start: body_start,
    }
}

/// `Detect_sk(T̂)`: true if some window of `t_hat` scores above its threshold.
pub fn detect0(key: &ZeroBitKey, t_hat: &TokenSeq) -> bool {
    ScanPlan::new(t_hat.as_bytes()).scan(key.prf(), key.lambda, true).marked
}

/// Full scan reporting the best window.
pub fn detect_report(key: &ZeroBitKey, t_hat: &TokenSeq) -> DetectionReport {
    ScanPlan::new(t_hat.as_bytes()).scan(key.prf(), key.lambda, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{empirical_entropy, sample, Profile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn key_sizes() {
        assert_eq!(key_size(1), 16);
        assert_eq!(key_size(64), 16);
        assert_eq!(key_size(72), 18);
        assert_eq!(key_size(128), 32);
        let k = keygen0(128, &mut rng(0)).unwrap();
        assert_eq!(k.prf_key().len(), 32);
        assert!(keygen0(0, &mut rng(0)).is_err());
    }

    #[test]
    fn keygen_reproducible_and_distinct() {
        assert_eq!(keygen0(8, &mut rng(1)).unwrap(), keygen0(8, &mut rng(1)).unwrap());
        let mut r = rng(2);
        assert_ne!(keygen0(8, &mut r).unwrap(), keygen0(8, &mut r).unwrap());
    }

    #[test]
    fn key_file_round_trip() {
        let k = keygen0(8, &mut rng(3)).unwrap();
        let f = k.to_file();
        assert_eq!(ZeroBitKey::from_file(&f).unwrap(), k);
        let bad = ZeroBitKeyFile {
            lambda: 8,
            prf_key_hex: "00".into(),
        };
        assert!(ZeroBitKey::from_file(&bad).is_err());
        assert!(!format!("{k:?}").contains(&f.prf_key_hex));
    }

    #[test]
    fn deterministic_model_matches_sample() {
        let key = keygen0(8, &mut rng(4)).unwrap();
        for stop in [0.0, 0.01] {
            let m = ToyModel::new(Profile::Constant(1.0), stop, 700, 0).unwrap();
            let g = generate(&key, &m, &key.policy(), &Prompt::empty(), &mut rng(5), GenLimits::NONE);
            assert_eq!(g.text, sample(&m, &Prompt::empty(), &mut rng(5)));
            if stop == 0.0 {
                assert!(g.blocks.is_empty());
            }
        }
    }

    #[test]
    fn uniform_blocks_reach_threshold() {
        let key = keygen0(16, &mut rng(6)).unwrap();
        let m = ToyModel::uniform(2000);
        let q = Prompt::empty();
        let g = generate(&key, &m, &key.policy(), &q, &mut rng(7), GenLimits::NONE);
        let first = &g.blocks[0];
        let h = empirical_entropy(&m, &q, &g.text.slice(first.range.clone())).unwrap();
        assert!(h >= 16.0);
        assert_eq!(first.range.len(), 64 + 256 + 256);
        assert_eq!(first.body_start, 64);
        let parsed = blocks_parse(&m, &key.policy(), &q, &g.text);
        assert_eq!(parsed.blocks, g.block_ranges());
    }

    #[test]
    fn body_is_a_function_of_key_and_context() {
        let key = keygen0(8, &mut rng(8)).unwrap();
        let m = ToyModel::new(Profile::SeededHash { order: 6, lo: 0.1, hi: 0.9 }, 0.0, 1500, 2).unwrap();
        let q = Prompt::empty();
        let a = generate(&key, &m, &key.policy(), &q, &mut rng(9), GenLimits::NONE);
        let b = &a.blocks[0];
        // Replaying the body from the seed reproduces it token for token.
        let mut replay = a.text.as_bytes()[..b.body_start].to_vec();
        for _ in b.body_start..b.range.end {
            let p1 = m.p1_at(&replay);
            let u = key.prf().unit(pack_context(&replay[replay.len() - CONTEXT_LEN..]));
            replay.push(u8::from(u < p1));
        }
        assert_eq!(&replay[..], &a.text.as_bytes()[..b.range.end]);
    }

    #[test]
    fn block_limit_leaves_text_open() {
        let key = keygen0(8, &mut rng(10)).unwrap();
        let m = ToyModel::uniform(4000);
        let g = generate(&key, &m, &key.policy(), &Prompt::empty(), &mut rng(11), GenLimits::blocks(2));
        assert_eq!(g.blocks.len(), 2);
        assert_eq!(g.text.len(), g.blocks[1].range.end);
        assert!(!g.text.is_terminated());
    }

    #[test]
    fn empty_and_short_texts_are_unmarked() {
        let key = keygen0(8, &mut rng(12)).unwrap();
        assert!(!detect0(&key, &TokenSeq::new()));
        let r = detect_report(&key, &"0101".parse().unwrap());
        assert!(!r.marked);
        assert_eq!(r.window, None);
    }

    #[test]
    fn detects_single_block_and_rejects_other_keys() {
        let mut r = rng(13);
        let key = keygen0(8, &mut r).unwrap();
        let other = keygen0(8, &mut r).unwrap();
        let m = ToyModel::uniform(4000);
        let g = generate(&key, &m, &key.policy(), &Prompt::empty(), &mut r, GenLimits::blocks(3));
        let block = g.text.slice(g.blocks[1].range.clone());
        assert!(detect0(&key, &block));
        assert!(!detect0(&other, &block));
        let report = detect_report(&key, &g.text);
        assert!(report.marked);
        assert!(report.best_score >= report.threshold.unwrap());
    }

    #[test]
    fn prf_contexts_cover_body_positions() {
        let key = keygen0(8, &mut rng(14)).unwrap();
        let m = ToyModel::uniform(1000);
        let q = Prompt::empty();
        let g = generate(&key, &m, &key.policy(), &q, &mut rng(15), GenLimits::NONE);
        let body: usize = g.blocks.iter().map(|b| b.range.end - b.body_start).sum();
        let trailing = g.trailing_body_start.map_or(0, |s| g.text.len() - s);
        assert_eq!(g.prf_contexts(&q).len(), body + trailing);
    }
}
