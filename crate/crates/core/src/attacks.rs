//! Adversaries: edit channels, collusion strategies, adaptive prompting
//! scripts, and a wrapper scheme that is robust only against non-adaptive
//! adversaries.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbit::{erasure_budget, Message, PartialMessage, Symbol};
use crate::tokens::{sample, Prompt, TokenSeq, ToyModel};
use crate::zerobit::{self, Transcript, ZeroBitKey};

/// An edit applied to one text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Flip each token independently with this probability.
    Substitute(f64),
    /// Drop each token independently with this probability.
    Delete(f64),
    /// Keep only this token range.
    Crop(Range<usize>),
    /// Keep the blocks only, in uniformly random order.
    ShuffleBlocks,
    /// Keep the blocks in order, with random chunks of `filler` between them.
    Interleave(TokenSeq),
}

/// What a channel did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditStats {
    pub len_in: usize,
    pub len_out: usize,
    /// Fraction of positions changed, for length-preserving channels.
    pub hamming_fraction: Option<f64>,
    /// Input blocks that still occur verbatim in the output.
    pub blocks_retained: usize,
}

pub fn apply_channel<R: Rng + ?Sized>(
    ch: &Channel,
    t: &TokenSeq,
    blocks: &[Range<usize>],
    rng: &mut R,
) -> Result<(TokenSeq, EditStats)> {
    let bits = t.as_bytes();
    let mut hamming = None;
    let out: Vec<u8> = match ch {
        Channel::Substitute(rate) => {
            check_rate(*rate)?;
            let out: Vec<u8> = bits.iter().map(|&b| if rng.gen::<f64>() < *rate { 1 - b } else { b }).collect();
            let flips = out.iter().zip(bits).filter(|(a, b)| a != b).count();
            hamming = Some(if bits.is_empty() { 0.0 } else { flips as f64 / bits.len() as f64 });
            out
        }
        Channel::Delete(rate) => {
            check_rate(*rate)?;
            bits.iter().copied().filter(|_| rng.gen::<f64>() >= *rate).collect()
        }
        Channel::Crop(range) => {
            if range.start > range.end || range.end > bits.len() {
                return Err(Error::usage(format!("crop {range:?} outside 0..{}", bits.len())));
            }
            if range.len() == bits.len() {
                hamming = Some(0.0);
            }
            bits[range.clone()].to_vec()
        }
        Channel::ShuffleBlocks => {
            let mut order: Vec<&Range<usize>> = blocks.iter().collect();
            order.shuffle(rng);
            order.into_iter().flat_map(|r| bits[r.clone()].iter().copied()).collect()
        }
        Channel::Interleave(filler) => {
            let pieces: Vec<TokenSeq> = blocks.iter().map(|r| t.slice(r.clone())).collect();
            interleave(&pieces, filler, rng).into_bytes()
        }
    };
    let retained = blocks
        .iter()
        .filter(|r| !r.is_empty() && memchr::memmem::find(&out, &bits[(*r).clone()]).is_some())
        .count();
    let stats = EditStats {
        len_in: bits.len(),
        len_out: out.len(),
        hamming_fraction: hamming,
        blocks_retained: retained,
    };
    Ok((TokenSeq::from_raw(out, false), stats))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::usage(format!("edit rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// `f₀‖p₁‖f₁‖…‖p_n‖f_n` where the `f` are consecutive chunks of `filler`
/// split at uniformly random cut points.
pub fn interleave<R: Rng + ?Sized>(pieces: &[TokenSeq], filler: &TokenSeq, rng: &mut R) -> TokenSeq {
    let mut cuts: Vec<usize> = (0..pieces.len()).map(|_| rng.gen_range(0..=filler.len())).collect();
    cuts.sort_unstable();
    let mut out = TokenSeq::new();
    let mut prev = 0;
    for (p, &cut) in pieces.iter().zip(&cuts) {
        out.extend_from(&filler.slice(prev..cut));
        out.extend_from(p);
        prev = cut;
    }
    out.extend_from(&filler.slice(prev..filler.len()));
    out
}

/// How colluders combine their material.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollusionStrategy {
    /// Whole blocks from the colluders' generations.
    BlockSplice,
    /// Per position, the bit most colluders hold (ties by coin).
    BitMajority,
    /// Per position, the bit fewest colluders hold (ties by coin).
    BitMinority,
    /// Per position, the bit of a uniformly random colluder.
    UniformPick,
    /// Copy runs from one colluder, switching to a random colluder with
    /// probability 1/8 after each position.
    CoinInterleave,
}

/// Pirate word from colluders' codewords, then exactly `⌊δL⌋` uniformly
/// placed erasures. Positions where all colluders agree keep that bit.
pub fn collude_word<R: Rng + ?Sized>(
    strategy: CollusionStrategy,
    codewords: &[Message],
    delta: f64,
    rng: &mut R,
) -> Result<PartialMessage> {
    let len = codewords.first().map(Message::len).ok_or_else(|| Error::usage("no colluders"))?;
    if codewords.iter().any(|x| x.len() != len) {
        return Err(Error::usage("colluder codewords differ in length"));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::usage(format!("delta must lie in [0, 1), got {delta}")));
    }
    let c = codewords.len();
    let mut current = rng.gen_range(0..c);
    let mut symbols = Vec::with_capacity(len);
    for i in 0..len {
        let ones = codewords.iter().filter(|x| x.bit(i)).count();
        let bit = if ones == 0 || ones == c {
            ones == c
        } else {
            match strategy {
                CollusionStrategy::BitMajority => tie_break(ones * 2, c, rng),
                CollusionStrategy::BitMinority => !tie_break(ones * 2, c, rng),
                CollusionStrategy::UniformPick | CollusionStrategy::BlockSplice => {
                    codewords[rng.gen_range(0..c)].bit(i)
                }
                CollusionStrategy::CoinInterleave => codewords[current].bit(i),
            }
        };
        if strategy == CollusionStrategy::CoinInterleave && rng.gen_ratio(1, 8) {
            current = rng.gen_range(0..c);
        }
        symbols.push(Symbol::from_bit(bit));
    }
    erase_uniform(&mut symbols, erasure_budget(len, delta), rng);
    Ok(PartialMessage::new(symbols))
}

/// `true` when ones are in the majority; a coin on ties.
fn tie_break<R: Rng + ?Sized>(twice_ones: usize, c: usize, rng: &mut R) -> bool {
    match twice_ones.cmp(&c) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => rng.gen(),
    }
}

fn erase_uniform<R: Rng + ?Sized>(symbols: &mut [Symbol], count: usize, rng: &mut R) {
    let idx: Vec<usize> = (0..symbols.len()).collect();
    for &i in idx.choose_multiple(rng, count) {
        symbols[i] = Symbol::Erased;
    }
}

/// A block of some colluder's generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub colluder: usize,
    pub block: usize,
}

/// Picks `keep` blocks uniformly without replacement from all colluders'
/// generations and concatenates them in random order, optionally with
/// unmarked filler between them.
pub fn block_splice<R: Rng + ?Sized>(
    generations: &[(TokenSeq, Vec<Range<usize>>)],
    keep: usize,
    filler: Option<&TokenSeq>,
    rng: &mut R,
) -> Result<(TokenSeq, Vec<BlockRef>)> {
    let pool: Vec<BlockRef> = generations
        .iter()
        .enumerate()
        .flat_map(|(c, (_, blocks))| (0..blocks.len()).map(move |b| BlockRef { colluder: c, block: b }))
        .collect();
    if keep > pool.len() {
        return Err(Error::usage(format!("cannot keep {keep} of {} blocks", pool.len())));
    }
    let mut chosen: Vec<BlockRef> = pool.choose_multiple(rng, keep).copied().collect();
    chosen.shuffle(rng);
    let pieces: Vec<TokenSeq> = chosen
        .iter()
        .map(|r| {
            let (t, blocks) = &generations[r.colluder];
            t.slice(blocks[r.block].clone())
        })
        .collect();
    let text = match filler {
        Some(f) => interleave(&pieces, f, rng),
        None => pieces.iter().fold(TokenSeq::new(), |mut acc, p| {
            acc.extend_from(p);
            acc
        }),
    };
    Ok((text, chosen))
}

/// The extracted word a block splice yields when every kept block is
/// detected: colluders' blocks land on uniformly random indices, and an
/// index reads `⊥` with no kept block, `0` if any kept block there carries a
/// `0`, else `1`.
pub fn block_splice_word<R: Rng + ?Sized>(
    codewords: &[Message],
    blocks_per_colluder: usize,
    keep: usize,
    rng: &mut R,
) -> Result<PartialMessage> {
    let len = codewords.first().map(Message::len).ok_or_else(|| Error::usage("no colluders"))?;
    let pool: Vec<(usize, usize)> = (0..codewords.len())
        .flat_map(|c| (0..blocks_per_colluder).map(move |_| c))
        .map(|c| (c, rng.gen_range(0..len)))
        .collect();
    if keep > pool.len() {
        return Err(Error::usage(format!("cannot keep {keep} of {} blocks", pool.len())));
    }
    let mut symbols = vec![Symbol::Erased; len];
    for &(c, i) in pool.choose_multiple(rng, keep) {
        let b = codewords[c].bit(i);
        symbols[i] = match (symbols[i], b) {
            (Symbol::Zero, _) | (_, false) => Symbol::Zero,
            _ => Symbol::One,
        };
    }
    Ok(PartialMessage::new(symbols))
}

/// A zero-bit scheme an adversary can query.
pub trait ZeroBitScheme {
    fn generate(&self, q: &Prompt, rng: &mut dyn RngCore) -> Result<TokenSeq>;
    fn detect(&self, t: &TokenSeq) -> bool;
}

/// The block-by-block zero-bit scheme on a fixed model.
#[derive(Clone, Debug)]
pub struct Marked {
    pub key: ZeroBitKey,
    pub model: ToyModel,
}

impl ZeroBitScheme for Marked {
    fn generate(&self, q: &Prompt, rng: &mut dyn RngCore) -> Result<TokenSeq> {
        Ok(zerobit::wat0(&self.key, &self.model, q, rng))
    }

    fn detect(&self, t: &TokenSeq) -> bool {
        zerobit::detect0(&self.key, t)
    }
}

/// Answers marked prompts with plain model output and everything else with
/// the inner scheme. Detection is the inner scheme's.
#[derive(Clone, Debug)]
pub struct Wrapper<S> {
    pub inner: S,
    pub model: ToyModel,
}

pub fn wrapper_scheme<S: ZeroBitScheme>(inner: S, model: ToyModel) -> Wrapper<S> {
    Wrapper { inner, model }
}

impl<S: ZeroBitScheme> ZeroBitScheme for Wrapper<S> {
    fn generate(&self, q: &Prompt, rng: &mut dyn RngCore) -> Result<TokenSeq> {
        if self.inner.detect(q.tokens()) {
            Ok(sample(&self.model, q, rng))
        } else {
            self.inner.generate(q, rng)
        }
    }

    fn detect(&self, t: &TokenSeq) -> bool {
        self.inner.detect(t)
    }
}

type PromptBuilder = Box<dyn Fn(&Transcript) -> Prompt>;
type Finisher = Box<dyn Fn(&Transcript, &mut dyn RngCore) -> Result<TokenSeq>>;

/// An adaptive adversary: each prompt may depend on every earlier answer;
/// the final text is built from the whole transcript.
pub struct AdaptiveScript {
    steps: Vec<PromptBuilder>,
    finish: Finisher,
}

impl AdaptiveScript {
    pub fn new(finish: impl Fn(&Transcript, &mut dyn RngCore) -> Result<TokenSeq> + 'static) -> Self {
        Self {
            steps: Vec::new(),
            finish: Box::new(finish),
        }
    }

    pub fn step(mut self, prompt: impl Fn(&Transcript) -> Prompt + 'static) -> Self {
        self.steps.push(Box::new(prompt));
        self
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One query with prompt `q`; outputs the answer unchanged.
    pub fn single_query(q: Prompt) -> Self {
        Self::new(|tr, _| Ok(tr.entries()[0].1.clone())).step(move |_| q.clone())
    }

    /// Asks with `q`, feeds the answer back as the next prompt, and outputs
    /// the second answer.
    pub fn feedback(q: Prompt) -> Self {
        Self::new(|tr, _| Ok(tr.entries()[1].1.clone()))
            .step(move |_| q.clone())
            .step(|tr| Prompt::from_text(&tr.entries()[0].1))
    }

    /// Two independent queries; outputs the first block-sized prefix of each
    /// answer, concatenated.
    pub fn splice_two(q: Prompt, piece: usize) -> Self {
        let q2 = q.clone();
        Self::new(move |tr, _| {
            let mut out = TokenSeq::new();
            for (_, t) in tr.entries() {
                out.extend_from(&t.slice(0..piece.min(t.len())));
            }
            Ok(out)
        })
        .step(move |_| q.clone())
        .step(move |_| q2.clone())
    }
}

/// Runs `script` against `oracle`, recording every query in order.
pub fn run_adaptive<S: ZeroBitScheme + ?Sized>(
    script: &AdaptiveScript,
    oracle: &S,
    rng: &mut dyn RngCore,
) -> Result<(Transcript, TokenSeq)> {
    let mut transcript = Transcript::new();
    for build in &script.steps {
        let q = build(&transcript);
        let t = oracle.generate(&q, rng)?;
        transcript.record(q, t);
    }
    let t_hat = (script.finish)(&transcript, rng)?;
    Ok((transcript, t_hat))
}
