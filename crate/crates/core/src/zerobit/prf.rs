//! The pseudorandom function that derandomizes sampling.
//!
//! `u = PRF(k, ctx)` is computed as AES-128 under `K = SHA-256("markbench/prf/v1" ‖ k)[..16]`
//! applied to the block `ctx_le64 ‖ CONTEXT_LEN_le64`, where `ctx` packs the
//! preceding [`CONTEXT_LEN`] tokens (most recent token in the low bit). The top
//! 53 bits of the first eight output bytes (big-endian) are mapped to `[0, 1)`.

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;
use sha2::{Digest, Sha256};

/// Number of preceding tokens that feed the PRF.
pub const CONTEXT_LEN: usize = 64;

const DOMAIN: &[u8] = b"markbench/prf/v1";
const BATCH: usize = 128;

#[derive(Clone)]
pub(crate) struct Prf {
    cipher: Aes128,
}

impl Prf {
    pub(crate) fn new(key: &[u8]) -> Self {
        let digest = Sha256::new().chain_update(DOMAIN).chain_update(key).finalize();
        Self {
            cipher: Aes128::new(GenericArray::from_slice(&digest[..16])),
        }
    }

    fn block(ctx: u64) -> aes::Block {
        let mut b = aes::Block::default();
        b[..8].copy_from_slice(&ctx.to_le_bytes());
        b[8..].copy_from_slice(&(CONTEXT_LEN as u64).to_le_bytes());
        b
    }

    fn to_unit(b: &aes::Block) -> f64 {
        let hi = u64::from_be_bytes(b[..8].try_into().expect("8 bytes"));
        (hi >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub(crate) fn unit(&self, ctx: u64) -> f64 {
        let mut b = Self::block(ctx);
        self.cipher.encrypt_block(&mut b);
        Self::to_unit(&b)
    }

    /// `out[i] = unit(ctxs[i])`, batched so the cipher can pipeline.
    pub(crate) fn units(&self, ctxs: &[u64], out: &mut Vec<f64>) {
        out.clear();
        out.reserve(ctxs.len());
        let mut blocks = [aes::Block::default(); BATCH];
        for chunk in ctxs.chunks(BATCH) {
            let blocks = &mut blocks[..chunk.len()];
            for (b, &c) in blocks.iter_mut().zip(chunk) {
                *b = Self::block(c);
            }
            self.cipher.encrypt_blocks(blocks);
            out.extend(blocks.iter().map(Self::to_unit));
        }
    }
}

/// Packs `bits` (oldest first) into a context word, newest bit lowest.
pub(crate) fn pack_context(bits: &[u8]) -> u64 {
    debug_assert!(bits.len() <= 64);
    bits.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b))
}
