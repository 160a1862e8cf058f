//! Multi-user watermarking: each user's fingerprint codeword is embedded as
//! the message of the L-bit scheme, and traced from the extracted word.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpcode::{fp_gen, fp_trace, Codebook, FpParams, TracingKey};
use crate::lbit::{self, detect_all, keygen_l, EncodeOptions, Encoding, LBitKey, PartialMessage, Symbol};
use crate::tokens::{Prompt, TokenSeq, ToyModel};

/// Codebook, tracing key and the L-bit key sized to the code length.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiUserKey {
    pub codebook: Codebook,
    pub tk: TracingKey,
    pub sk: LBitKey,
}

impl MultiUserKey {
    pub fn from_parts(codebook: Codebook, tk: TracingKey, sk: LBitKey) -> Result<Self> {
        let len = codebook.code_length();
        if tk.code_length() != len || sk.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                found: if sk.len() != len { sk.len() } else { tk.code_length() },
            });
        }
        Ok(Self { codebook, tk, sk })
    }

    pub fn n(&self) -> usize {
        self.codebook.n()
    }

    pub fn code_length(&self) -> usize {
        self.codebook.code_length()
    }
}

pub fn mu_keygen<R: Rng + ?Sized>(params: &FpParams, rng: &mut R) -> Result<MultiUserKey> {
    let (codebook, tk) = fp_gen(params, rng)?;
    let sk = keygen_l(params.lambda, codebook.code_length(), rng)?;
    MultiUserKey::from_parts(codebook, tk, sk)
}

pub fn mu_wat<R: Rng + ?Sized>(
    key: &MultiUserKey,
    user: usize,
    q: &Prompt,
    model: &ToyModel,
    rng: &mut R,
) -> Result<TokenSeq> {
    Ok(mu_wat_with(key, user, q, model, rng, &EncodeOptions::default())?.text)
}

pub fn mu_wat_with<R: Rng + ?Sized>(
    key: &MultiUserKey,
    user: usize,
    q: &Prompt,
    model: &ToyModel,
    rng: &mut R,
    opts: &EncodeOptions,
) -> Result<Encoding> {
    if user >= key.n() {
        return Err(Error::usage(format!("unknown user {user} (n = {})", key.n())));
    }
    lbit::encode_with(&key.sk, key.codebook.row(user), model, q, rng, opts)
}

/// Outcome of detection plus tracing on one text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub detected: bool,
    pub accused: BTreeSet<usize>,
    pub erasures: usize,
    /// Extracted word over `{0, 1, -}`.
    pub message: String,
    pub detect_calls: usize,
}

/// True iff extraction yields at least one non-erased symbol.
pub fn mu_detect(key: &MultiUserKey, t_hat: &TokenSeq) -> bool {
    !lbit::extract(&key.sk, t_hat).is_all_erased()
}

pub fn mu_trace(key: &MultiUserKey, t_hat: &TokenSeq) -> Result<BTreeSet<usize>> {
    Ok(mu_trace_report(key, t_hat, None)?.accused)
}

/// Detects and traces in one extraction. `suspects` restricts who is checked.
pub fn mu_trace_report(key: &MultiUserKey, t_hat: &TokenSeq, suspects: Option<&[usize]>) -> Result<TraceReport> {
    let d = detect_all(&key.sk, t_hat);
    let m_hat = d.message();
    trace_word(key, &m_hat, suspects, d.detect_calls)
}

/// Tracing on an already extracted word: `∅` when it is entirely erased.
pub fn trace_word(
    key: &MultiUserKey,
    m_hat: &PartialMessage,
    suspects: Option<&[usize]>,
    detect_calls: usize,
) -> Result<TraceReport> {
    if let Some(&bad) = suspects.unwrap_or_default().iter().find(|&&u| u >= key.n()) {
        return Err(Error::usage(format!("unknown user {bad}")));
    }
    let detected = !m_hat.is_all_erased();
    let accused = if detected {
        fp_trace(m_hat, &key.codebook, &key.tk, suspects)?.accused
    } else {
        BTreeSet::new()
    };
    Ok(TraceReport {
        detected,
        accused,
        erasures: m_hat.count(Symbol::Erased),
        message: m_hat.to_string(),
        detect_calls,
    })
}

/// Maps external account names to dense user ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRegistry {
    capacity: usize,
    users: BTreeMap<String, usize>,
}

impl UserRegistry {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            users: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Id of `name`, assigning the next free id on first sight.
    pub fn register(&mut self, name: &str) -> Result<usize> {
        if let Some(&id) = self.users.get(name) {
            return Ok(id);
        }
        let id = self.users.len();
        if id >= self.capacity {
            return Err(Error::usage(format!("registry is full ({} users)", self.capacity)));
        }
        self.users.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.users.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.users.iter().find(|(_, &v)| v == id).map(|(k, _)| k.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn small_key(seed: u64) -> MultiUserKey {
        mu_keygen(&FpParams::with_scale(4, 2, 2, 0.0, 1.0), &mut rng(seed)).unwrap()
    }

    #[test]
    fn keygen_shapes() {
        let k = small_key(0);
        assert_eq!(k.n(), 2);
        assert_eq!(k.sk.len(), k.code_length());
        assert_eq!(k.code_length(), crate::fpcode::fp_length_scaled(2, 2, 4, 0.0, 1.0));
        assert_eq!(small_key(0), k);
    }

    #[test]
    fn unknown_user_is_rejected() {
        let k = small_key(1);
        assert!(mu_wat(&k, 2, &Prompt::empty(), &ToyModel::uniform(10), &mut rng(2)).is_err());
    }

    #[test]
    fn empty_and_random_text_are_clean() {
        let k = small_key(3);
        assert!(!mu_detect(&k, &TokenSeq::new()));
        let mut r = rng(4);
        let t = TokenSeq::from_bits((0..2000).map(|_| r.gen()));
        let rep = mu_trace_report(&k, &t, None).unwrap();
        assert!(!rep.detected);
        assert!(rep.accused.is_empty());
        assert_eq!(rep.detect_calls, 2 * k.code_length());
    }

    #[test]
    fn single_block_is_detected() {
        let k = small_key(5);
        let model = ToyModel::uniform(100_000);
        let opts = EncodeOptions {
            block_budget: Some(3),
            policy: None,
        };
        let e = mu_wat_with(&k, 1, &Prompt::empty(), &model, &mut rng(6), &opts).unwrap();
        let block = e.text.slice(e.blocks[1].0.clone());
        assert!(mu_detect(&k, &block));
    }

    #[test]
    fn registry_assigns_dense_ids() {
        let mut reg = UserRegistry::new(2);
        assert_eq!(reg.register("alice").unwrap(), 0);
        assert_eq!(reg.register("bob").unwrap(), 1);
        assert_eq!(reg.register("alice").unwrap(), 0);
        assert!(reg.register("carol").is_err());
        assert_eq!(reg.name(1), Some("bob"));
        let json = serde_json::to_string(&reg).unwrap();
        assert_eq!(serde_json::from_str::<UserRegistry>(&json).unwrap(), reg);
    }
}
