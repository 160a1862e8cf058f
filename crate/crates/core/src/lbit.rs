//! L-bit watermarking from `2L` zero-bit keys.
//!
//! Encoding repeatedly picks a uniformly random index `i`, runs the zero-bit
//! generator under key `k[i][m_i]` on the prompt extended by everything
//! produced so far, and keeps only the first completed block. Extraction runs
//! the zero-bit detector once per key.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{prefix_specify, Prompt, TokenSeq, ToyModel};
use crate::zerobit::{self, BlockPolicy, GenLimits, ScanPlan, ZeroBitKey, ZeroBitKeyFile};

/// A binary message of fixed length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Message(Vec<bool>);

impl Message {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        Self((0..len).map(|_| rng.gen()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i]
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Message {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("message symbol {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Message)
    }
}

/// One symbol of an extracted message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Zero,
    One,
    /// `⊥`: neither key of the index fired.
    Erased,
    /// Both keys fired (only produced by [`extract_star`]).
    Both,
}

impl Symbol {
    pub fn from_bit(b: bool) -> Self {
        if b {
            Symbol::One
        } else {
            Symbol::Zero
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::Zero => '0',
            Symbol::One => '1',
            Symbol::Erased => '-',
            Symbol::Both => '*',
        }
    }

    pub fn bit(self) -> Option<bool> {
        match self {
            Symbol::Zero => Some(false),
            Symbol::One => Some(true),
            _ => None,
        }
    }
}

/// An extracted message over `{0, 1, ⊥, *}`, rendered as `0`, `1`, `-`, `*`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialMessage(Vec<Symbol>);

impl PartialMessage {
    pub fn new(symbols: Vec<Symbol>) -> Self {
        Self(symbols)
    }

    pub fn erased(len: usize) -> Self {
        Self(vec![Symbol::Erased; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }

    pub fn count(&self, s: Symbol) -> usize {
        self.0.iter().filter(|&&x| x == s).count()
    }

    pub fn is_all_erased(&self) -> bool {
        self.0.iter().all(|&s| s == Symbol::Erased)
    }
}

impl From<&Message> for PartialMessage {
    fn from(m: &Message) -> Self {
        Self(m.bits().iter().map(|&b| Symbol::from_bit(b)).collect())
    }
}

impl fmt::Display for PartialMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|s| write!(f, "{}", s.as_char()))
    }
}

impl FromStr for PartialMessage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(Symbol::Zero),
                '1' => Ok(Symbol::One),
                '-' | '⊥' => Ok(Symbol::Erased),
                '*' => Ok(Symbol::Both),
                other => Err(Error::Format(format!("partial-message symbol {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(PartialMessage)
    }
}

/// Whether `m_hat` lies in the `δ`-erasure ball around `m`: at most `⌊δL⌋`
/// erasures and agreement everywhere else.
pub fn erasure_ball_contains(m: &Message, m_hat: &PartialMessage, delta: f64) -> Result<bool> {
    if m.len() != m_hat.len() {
        return Err(Error::LengthMismatch {
            expected: m.len(),
            found: m_hat.len(),
        });
    }
    let budget = erasure_budget(m.len(), delta);
    let mut erasures = 0;
    for (&b, &s) in m.bits().iter().zip(m_hat.symbols()) {
        match s {
            Symbol::Erased => erasures += 1,
            other if other.bit() == Some(b) => {}
            _ => return Ok(false),
        }
    }
    Ok(erasures <= budget)
}

/// `⌊δL⌋`, robust to `δL` landing a hair below an integer.
pub fn erasure_budget(len: usize, delta: f64) -> usize {
    (delta * len as f64 + 1e-9).floor() as usize
}

/// `2L` zero-bit keys indexed by `(i, b)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LBitKey {
    lambda: u32,
    keys: Vec<[ZeroBitKey; 2]>,
}

impl LBitKey {
    pub fn from_keys(lambda: u32, keys: Vec<[ZeroBitKey; 2]>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::param("message length must be at least 1"));
        }
        if keys.iter().flatten().any(|k| k.lambda() != lambda) {
            return Err(Error::param("every zero-bit key must share lambda"));
        }
        Ok(Self { lambda, keys })
    }

    pub fn lambda(&self) -> u32 {
        self.lambda
    }

    /// Message length `L`.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, i: usize, b: bool) -> &ZeroBitKey {
        &self.keys[i][usize::from(b)]
    }

    pub fn policy(&self) -> BlockPolicy {
        BlockPolicy::for_lambda(self.lambda)
    }

    pub fn to_file(&self) -> LBitKeyFile {
        LBitKeyFile {
            lambda: self.lambda,
            len: self.len(),
            keys: self
                .keys
                .iter()
                .map(|[a, b]| [hex::encode(a.prf_key()), hex::encode(b.prf_key())])
                .collect(),
        }
    }

    pub fn from_file(file: &LBitKeyFile) -> Result<Self> {
        if file.keys.len() != file.len {
            return Err(Error::LengthMismatch {
                expected: file.len,
                found: file.keys.len(),
            });
        }
        let decode = |h: &String| {
            ZeroBitKey::from_file(&ZeroBitKeyFile {
                lambda: file.lambda,
                prf_key_hex: h.clone(),
            })
        };
        let keys = file
            .keys
            .iter()
            .map(|[a, b]| Ok([decode(a)?, decode(b)?]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_keys(file.lambda, keys)
    }
}

/// On-disk L-bit key: `{lambda, L, keys: [[hex, hex], …]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LBitKeyFile {
    pub lambda: u32,
    #[serde(rename = "L")]
    pub len: usize,
    pub keys: Vec<[String; 2]>,
}

pub fn keygen_l<R: RngCore + ?Sized>(lambda: u32, len: usize, rng: &mut R) -> Result<LBitKey> {
    if len == 0 {
        return Err(Error::param("message length must be at least 1"));
    }
    let keys = (0..len)
        .map(|_| Ok([zerobit::keygen0(lambda, rng)?, zerobit::keygen0(lambda, rng)?]))
        .collect::<Result<Vec<_>>>()?;
    LBitKey::from_keys(lambda, keys)
}

/// Options for [`encode_with`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeOptions {
    /// Stop after this many blocks. `None` runs until the model stops.
    pub block_budget: Option<usize>,
    /// Block policy override; defaults to the key's.
    pub policy: Option<BlockPolicy>,
}

/// An encoding with the index used for each block.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub text: TokenSeq,
    /// Each kept block and the message index whose key produced it.
    pub blocks: Vec<(Range<usize>, usize)>,
    pub budget_exhausted: bool,
}

impl Encoding {
    pub fn block_ranges(&self) -> Vec<Range<usize>> {
        self.blocks.iter().map(|(r, _)| r.clone()).collect()
    }
}

pub fn encode<R: Rng + ?Sized>(
    key: &LBitKey,
    m: &Message,
    model: &ToyModel,
    q: &Prompt,
    rng: &mut R,
) -> Result<TokenSeq> {
    Ok(encode_with(key, m, model, q, rng, &EncodeOptions::default())?.text)
}

pub fn encode_with<R: Rng + ?Sized>(
    key: &LBitKey,
    m: &Message,
    model: &ToyModel,
    q: &Prompt,
    rng: &mut R,
    opts: &EncodeOptions,
) -> Result<Encoding> {
    if m.len() != key.len() {
        return Err(Error::LengthMismatch {
            expected: key.len(),
            found: m.len(),
        });
    }
    let policy = opts.policy.clone().unwrap_or_else(|| key.policy());
    let mut text = TokenSeq::new();
    let mut blocks = Vec::new();
    loop {
        if opts.block_budget.is_some_and(|b| blocks.len() >= b) {
            return Ok(Encoding {
                text: text.with_terminated(true),
                blocks,
                budget_exhausted: true,
            });
        }
        let i = rng.gen_range(0..key.len());
        let prompt = prefix_specify(q, &text)?;
        let limits = GenLimits {
            max_tokens: Some(model.max_len() - text.len()),
            max_blocks: Some(1),
        };
        let g = zerobit::generate(key.key(i, m.bit(i)), model, &policy, &prompt, rng, limits);
        match g.blocks.first() {
            Some(b) => {
                let start = text.len();
                text.extend_from(&g.text.slice(b.range.clone()));
                blocks.push((start..text.len(), i));
            }
            None => {
                text.extend_from(&g.text);
                return Ok(Encoding {
                    text: text.with_terminated(g.text.is_terminated()),
                    blocks,
                    budget_exhausted: false,
                });
            }
        }
    }
}

/// Per-key detector outcomes for one text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detections {
    /// `fired[i][b]` is the zero-bit detector's verdict under `k[i][b]`.
    pub fired: Vec<[bool; 2]>,
    pub detect_calls: usize,
}

impl Detections {
    /// The `(T, T) → 0` rule.
    pub fn message(&self) -> PartialMessage {
        PartialMessage(
            self.fired
                .iter()
                .map(|z| match z {
                    [true, _] => Symbol::Zero,
                    [false, true] => Symbol::One,
                    [false, false] => Symbol::Erased,
                })
                .collect(),
        )
    }

    /// The `(T, T) → *` rule.
    pub fn message_star(&self) -> PartialMessage {
        PartialMessage(
            self.fired
                .iter()
                .map(|z| match z {
                    [true, true] => Symbol::Both,
                    [true, false] => Symbol::Zero,
                    [false, true] => Symbol::One,
                    [false, false] => Symbol::Erased,
                })
                .collect(),
        )
    }
}

/// Runs the zero-bit detector under all `2L` keys.
pub fn detect_all(key: &LBitKey, t_hat: &TokenSeq) -> Detections {
    let plan = ScanPlan::new(t_hat.as_bytes());
    let calls = AtomicUsize::new(0);
    let fired = key
        .keys
        .par_iter()
        .map(|pair| {
            pair.each_ref().map(|k| {
                calls.fetch_add(1, Ordering::Relaxed);
                plan.scan(k.prf(), key.lambda, true).marked
            })
        })
        .collect();
    Detections {
        fired,
        detect_calls: calls.into_inner(),
    }
}

pub fn extract(key: &LBitKey, t_hat: &TokenSeq) -> PartialMessage {
    detect_all(key, t_hat).message()
}

pub fn extract_star(key: &LBitKey, t_hat: &TokenSeq) -> PartialMessage {
    detect_all(key, t_hat).message_star()
}
