//! Binary token sequences and prefix-specifiable toy language models.
//!
//! The token alphabet is `{0, 1}`. Termination is carried as a flag on
//! [`TokenSeq`] rather than as an in-band symbol, so substring scans and
//! Hamming distances never see it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite binary token string with an explicit termination flag.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    bits: Vec<u8>,
    terminated: bool,
}

impl TokenSeq {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        Self {
            bits: bits.into_iter().map(u8::from).collect(),
            terminated: false,
        }
    }

    /// Builds a sequence from bytes that must all be `0` or `1`.
    pub fn from_bytes(bits: Vec<u8>) -> Result<Self> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Format(format!("token {} at position {pos} is not binary", bits[pos])));
        }
        Ok(Self { bits, terminated: false })
    }

    pub(crate) fn from_raw(bits: Vec<u8>, terminated: bool) -> Self {
        debug_assert!(bits.iter().all(|&b| b <= 1));
        Self { bits, terminated }
    }

    pub fn with_terminated(mut self, terminated: bool) -> Self {
        self.terminated = terminated;
        self
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// The tokens as `0`/`1` bytes.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bits
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        self.bits.get(i).map(|&b| b == 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().map(|&b| b == 1)
    }

    pub fn push(&mut self, bit: bool) {
        debug_assert!(!self.terminated, "push onto a terminated sequence");
        self.bits.push(u8::from(bit));
    }

    pub fn extend_from(&mut self, other: &TokenSeq) {
        self.bits.extend_from_slice(&other.bits);
    }

    /// `self ‖ other`. A terminated sequence can only be followed by the empty
    /// sequence; the result is terminated iff the last non-empty part was.
    pub fn concat(&self, other: &TokenSeq) -> Result<TokenSeq> {
        if self.terminated && !other.is_empty() {
            return Err(Error::usage("cannot extend a terminated sequence"));
        }
        let mut bits = Vec::with_capacity(self.len() + other.len());
        bits.extend_from_slice(&self.bits);
        bits.extend_from_slice(&other.bits);
        Ok(TokenSeq {
            bits,
            terminated: self.terminated || other.terminated,
        })
    }

    /// The (unterminated) substring at `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenSeq {
        TokenSeq::from_raw(self.bits[range].to_vec(), false)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
        f.write_str(&s)?;
        if self.terminated {
            f.write_str("$")?;
        }
        Ok(())
    }
}

impl FromStr for TokenSeq {
    type Err = Error;

    /// Parses one line of `0`/`1` characters with an optional trailing `$`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim_end_matches(['\n', '\r']);
        let (body, terminated) = match s.strip_suffix('$') {
            Some(body) => (body, true),
            None => (s, false),
        };
        let bits = body
            .chars()
            .enumerate()
            .map(|(i, c)| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Format(format!("unexpected character {other:?} at column {i}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(TokenSeq { bits, terminated })
    }
}

impl Serialize for TokenSeq {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenSeq {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A prompt `Q`. Prompts are never terminated.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Prompt(TokenSeq);

impl Prompt {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(bits: TokenSeq) -> Result<Self> {
        if bits.is_terminated() {
            return Err(Error::usage("a prompt cannot be terminated"));
        }
        Ok(Prompt(bits))
    }

    /// Uses a (possibly terminated) generation as the text of a new prompt.
    pub fn from_text(text: &TokenSeq) -> Self {
        Prompt(text.clone().with_terminated(false))
    }

    pub fn tokens(&self) -> &TokenSeq {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `Q‖T`: the prompt that asks the model to continue `t` after `q`.
pub fn prefix_specify(q: &Prompt, t: &TokenSeq) -> Result<Prompt> {
    if t.is_terminated() {
        return Err(Error::usage("cannot prefix-specify with a terminated generation"));
    }
    Ok(Prompt(q.0.concat(t)?))
}

/// One step of a piecewise entropy profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub len: usize,
    pub p: f64,
}

/// How the probability of emitting a `1` depends on the context.
#[derive(Clone, Debug, PartialEq)]
pub enum Profile {
    /// `p1 = 1/2` everywhere.
    Uniform,
    Constant(f64),
    /// `p1` in `[lo, hi]`, chosen by hashing the model seed with the last `order` tokens.
    SeededHash { order: usize, lo: f64, hi: f64 },
    /// `p1` depends only on the absolute position in `Q‖T`, cycling through the segments.
    Piecewise(Vec<Segment>),
}

/// The next-token distribution: probability of a `1`, and of stopping instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NextDist {
    pub p1: f64,
    pub p_stop: f64,
}

pub const DEFAULT_MAX_LEN: usize = 4096;

/// A prefix-specifiable binary language model.
///
/// The next-token distribution is a pure function of the concatenated
/// context `Q‖T`, so re-prompting with `Q‖T` continues exactly where a
/// generation left off.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    profile: Profile,
    stop_prob: f64,
    max_len: usize,
    seed: u64,
}

impl ToyModel {
    pub fn new(profile: Profile, stop_prob: f64, max_len: usize, seed: u64) -> Result<Self> {
        // stop_prob = 1 is allowed as the degenerate "always stop" model.
        if !(0.0..=1.0).contains(&stop_prob) {
            return Err(Error::param(format!("stop_prob must lie in [0, 1], got {stop_prob}")));
        }
        let check_p = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::param(format!("probability {p} outside [0, 1]")))
            }
        };
        match &profile {
            Profile::Uniform => {}
            Profile::Constant(p) => check_p(*p)?,
            Profile::SeededHash { order, lo, hi } => {
                check_p(*lo)?;
                check_p(*hi)?;
                if lo > hi || *order == 0 || *order > 64 {
                    return Err(Error::param("hash profile needs lo <= hi and 1 <= order <= 64"));
                }
            }
            Profile::Piecewise(segments) => {
                if segments.is_empty() || segments.iter().any(|s| s.len == 0) {
                    return Err(Error::param("piecewise profile needs non-empty segments"));
                }
                for s in segments {
                    check_p(s.p)?;
                }
            }
        }
        Ok(Self {
            profile,
            stop_prob,
            max_len,
            seed,
        })
    }

    /// Uniform bits, never stops on its own, capped at `max_len` tokens.
    pub fn uniform(max_len: usize) -> Self {
        Self::new(Profile::Uniform, 0.0, max_len, 0).expect("valid uniform model")
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn stop_prob(&self) -> f64 {
        self.stop_prob
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Probability that the token following `context` (= `Q‖T`) is a `1`.
    pub(crate) fn p1_at(&self, context: &[u8]) -> f64 {
        match &self.profile {
            Profile::Uniform => 0.5,
            Profile::Constant(p) => *p,
            Profile::SeededHash { order, lo, hi } => {
                let take = context.len().min(*order);
                let tail = &context[context.len() - take..];
                let packed = tail.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b));
                // Mixing in `take` separates short contexts from zero-padded ones.
                let h = splitmix64(self.seed ^ splitmix64(packed ^ ((take as u64) << 56)));
                let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
                lo + (hi - lo) * unit
            }
            Profile::Piecewise(segments) => {
                let period: usize = segments.iter().map(|s| s.len).sum();
                let mut offset = context.len() % period;
                for s in segments {
                    if offset < s.len {
                        return s.p;
                    }
                    offset -= s.len;
                }
                unreachable!("offset is reduced modulo the period")
            }
        }
    }

    pub(crate) fn dist_at(&self, context: &[u8]) -> NextDist {
        NextDist {
            p1: self.p1_at(context),
            p_stop: self.stop_prob,
        }
    }

    /// Draws the stop event for one step; consumes randomness only when stopping is possible.
    pub(crate) fn draw_stop<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        self.stop_prob > 0.0 && rng.gen::<f64>() < self.stop_prob
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// The model's next-token distribution after `q‖prefix`.
pub fn next_dist(model: &ToyModel, q: &Prompt, prefix: &TokenSeq) -> Result<NextDist> {
    let context = prefix_specify(q, prefix)?;
    Ok(model.dist_at(context.as_bytes()))
}

/// Samples a generation token by token until the model stops or hits `max_len`.
pub fn sample<R: Rng + ?Sized>(model: &ToyModel, q: &Prompt, rng: &mut R) -> TokenSeq {
    let mut buf = q.as_bytes().to_vec();
    let start = buf.len();
    while buf.len() - start < model.max_len {
        if model.draw_stop(rng) {
            break;
        }
        let p1 = model.p1_at(&buf);
        buf.push(u8::from(rng.gen::<f64>() < p1));
    }
    TokenSeq::from_raw(buf.split_off(start), true)
}

/// Bits of surprisal for emitting `bit` (including the "did not stop" factor).
pub(crate) fn token_surprisal(dist: NextDist, bit: u8) -> f64 {
    let p = if bit == 1 { dist.p1 } else { 1.0 - dist.p1 };
    -((1.0 - dist.p_stop) * p).log2()
}

/// Empirical entropy `H(τ; Q) = -log2 Pr[Model(Q) starts with τ]`, in bits.
///
/// A terminated `τ` also pays for the stop event, which is free when `τ`
/// already has `max_len` tokens.
pub fn empirical_entropy(model: &ToyModel, q: &Prompt, tau: &TokenSeq) -> Result<f64> {
    let mut buf = q.as_bytes().to_vec();
    let mut bits = 0.0;
    for (i, &b) in tau.as_bytes().iter().enumerate() {
        if i >= model.max_len {
            return Err(Error::ZeroProbability { position: i });
        }
        let s = token_surprisal(model.dist_at(&buf), b);
        if !s.is_finite() {
            return Err(Error::ZeroProbability { position: i });
        }
        bits += s;
        buf.push(b);
    }
    if tau.is_terminated() && tau.len() < model.max_len {
        if model.stop_prob == 0.0 {
            return Err(Error::ZeroProbability { position: tau.len() });
        }
        bits -= model.stop_prob.log2();
    }
    Ok(bits)
}

/// JSON model configuration: `{profile, p, seed, stop_prob, max_len}` plus
/// profile-specific extras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `uniform`, `constant`, `hash` or `piecewise`.
    pub profile: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stop_prob: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Segment>>,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl TryFrom<&ModelConfig> for ToyModel {
    type Error = Error;

    fn try_from(cfg: &ModelConfig) -> Result<Self> {
        let profile = match cfg.profile.as_str() {
            "uniform" => Profile::Uniform,
            "constant" => Profile::Constant(
                cfg.p.ok_or_else(|| Error::param("constant profile requires `p`"))?,
            ),
            "hash" => Profile::SeededHash {
                order: cfg.order.unwrap_or(4),
                lo: cfg.lo.unwrap_or(0.1),
                hi: cfg.hi.unwrap_or(0.9),
            },
            "piecewise" => Profile::Piecewise(
                cfg.segments
                    .clone()
                    .ok_or_else(|| Error::param("piecewise profile requires `segments`"))?,
            ),
            other => return Err(Error::param(format!("unknown profile {other:?}"))),
        };
        ToyModel::new(profile, cfg.stop_prob, cfg.max_len, cfg.seed)
    }
}

impl From<&ToyModel> for ModelConfig {
    fn from(m: &ToyModel) -> Self {
        let mut cfg = ModelConfig {
            profile: String::new(),
            p: None,
            seed: m.seed,
            stop_prob: m.stop_prob,
            max_len: m.max_len,
            order: None,
            lo: None,
            hi: None,
            segments: None,
        };
        match &m.profile {
            Profile::Uniform => cfg.profile = "uniform".into(),
            Profile::Constant(p) => {
                cfg.profile = "constant".into();
                cfg.p = Some(*p);
            }
            Profile::SeededHash { order, lo, hi } => {
                cfg.profile = "hash".into();
                cfg.order = Some(*order);
                cfg.lo = Some(*lo);
                cfg.hi = Some(*hi);
            }
            Profile::Piecewise(segments) => {
                cfg.profile = "piecewise".into();
                cfg.segments = Some(segments.clone());
            }
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn seq(s: &str) -> TokenSeq {
        s.parse().unwrap()
    }

    #[test]
    fn text_format_round_trip() {
        let t = seq("0110$");
        assert!(t.is_terminated());
        assert_eq!(t.len(), 4);
        assert_eq!(t.to_string(), "0110$");
        assert_eq!(seq("").to_string(), "");
        assert!("01x".parse::<TokenSeq>().is_err());
        assert!(TokenSeq::from_bytes(vec![0, 2]).is_err());
    }

    #[test]
    fn next_dist_examples() {
        let q = Prompt::new(seq("0101")).unwrap();
        let uni = ToyModel::new(Profile::Uniform, 0.25, 16, 0).unwrap();
        assert_eq!(next_dist(&uni, &q, &seq("11")).unwrap(), NextDist { p1: 0.5, p_stop: 0.25 });
        let det = ToyModel::new(Profile::Constant(1.0), 0.1, 16, 0).unwrap();
        assert_eq!(next_dist(&det, &q, &seq("")).unwrap().p1, 1.0);
        assert!(next_dist(&uni, &q, &seq("1$")).is_err());
    }

    #[test]
    fn hash_profile_is_reproducible_and_context_dependent() {
        let profile = Profile::SeededHash { order: 8, lo: 0.05, hi: 0.95 };
        let a = ToyModel::new(profile.clone(), 0.0, 64, 42).unwrap();
        let b = ToyModel::new(profile, 0.0, 64, 42).unwrap();
        let q = Prompt::empty();
        let d1 = next_dist(&a, &q, &seq("00110101")).unwrap();
        let d2 = next_dist(&a, &q, &seq("00110111")).unwrap();
        assert_ne!(d1.p1, d2.p1);
        assert_eq!(d1, next_dist(&b, &q, &seq("00110101")).unwrap());
        assert!((0.05..=0.95).contains(&d1.p1));
    }

    #[test]
    fn sample_respects_stop_and_cap() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let always_stop = ToyModel::new(Profile::Uniform, 1.0, 16, 0).unwrap();
        let t = sample(&always_stop, &Prompt::empty(), &mut rng);
        assert!(t.is_terminated());
        assert!(t.is_empty());

        let capped = ToyModel::uniform(16);
        let t = sample(&capped, &Prompt::empty(), &mut rng);
        assert_eq!(t.len(), 16);
        assert!(t.is_terminated());
    }

    #[test]
    fn stop_prob_out_of_range_is_rejected() {
        assert!(ToyModel::new(Profile::Uniform, 1.5, 16, 0).is_err());
        assert!(ToyModel::new(Profile::Uniform, -0.1, 16, 0).is_err());
    }

    #[test]
    fn prefix_specify_identities() {
        let q = Prompt::new(seq("101")).unwrap();
        assert_eq!(prefix_specify(&q, &seq("")).unwrap(), q);
        assert_eq!(prefix_specify(&Prompt::empty(), &seq("0011")).unwrap().tokens(), &seq("0011"));
        let ab = prefix_specify(&prefix_specify(&q, &seq("01")).unwrap(), &seq("11")).unwrap();
        assert_eq!(ab, prefix_specify(&q, &seq("0111")).unwrap());
        assert!(prefix_specify(&q, &seq("1$")).is_err());
    }

    #[test]
    fn empirical_entropy_examples() {
        let q = Prompt::empty();
        let uni = ToyModel::uniform(4096);
        let h = empirical_entropy(&uni, &q, &seq("01101001")).unwrap();
        assert!((h - 8.0).abs() < 1e-12);

        let det = ToyModel::new(Profile::Constant(1.0), 0.0, 4096, 0).unwrap();
        assert_eq!(empirical_entropy(&det, &q, &seq("1111")).unwrap(), 0.0);
        assert!(matches!(
            empirical_entropy(&det, &q, &seq("110")),
            Err(Error::ZeroProbability { position: 2 })
        ));

        let skew = ToyModel::new(Profile::Constant(0.75), 0.0, 4096, 0).unwrap();
        let h = empirical_entropy(&skew, &q, &seq("11")).unwrap();
        // -log2(0.75^2)
        assert!((h - 0.830_074_998_557_688_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_terminated_sequences() {
        let q = Prompt::empty();
        let m = ToyModel::new(Profile::Uniform, 0.5, 4, 0).unwrap();
        // two tokens, each (1/2)(1/2), then stop with 1/2
        let h = empirical_entropy(&m, &q, &seq("01$")).unwrap();
        assert!((h - 5.0).abs() < 1e-12);
        // hitting the cap makes the stop free
        let h = empirical_entropy(&m, &q, &seq("0101$")).unwrap();
        assert!((h - 8.0).abs() < 1e-12);
        let never = ToyModel::uniform(8);
        assert!(empirical_entropy(&never, &q, &seq("01$")).is_err());
    }

    #[test]
    fn model_config_round_trip() {
        let json = r#"{"profile":"hash","seed":7,"stop_prob":0.01,"max_len":512,"order":6}"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        let model = ToyModel::try_from(&cfg).unwrap();
        assert_eq!(model.max_len(), 512);
        let again = ToyModel::try_from(&ModelConfig::from(&model)).unwrap();
        assert_eq!(model, again);
        let bad: ModelConfig = serde_json::from_str(r#"{"profile":"constant"}"#).unwrap();
        assert!(ToyModel::try_from(&bad).is_err());
    }
}
