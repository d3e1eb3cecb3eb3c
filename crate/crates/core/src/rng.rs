//! Key-addressed random streams.
//!
//! Gate noise for a given (run seed, step, layer, slot) is drawn from its own
//! ChaCha8 stream, so the uniforms a token sees never depend on how many
//! draws happened elsewhere or in which order layers were evaluated.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Identifies one independent noise stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
    pub layer: u32,
    /// Position of the example inside its batch, or a replication index.
    pub slot: u32,
}

const STEP_BITS: u32 = 40;

impl NoiseKey {
    pub fn new(seed: u64, step: u64, layer: u32, slot: u32) -> Self {
        Self {
            seed,
            step,
            layer,
            slot,
        }
    }

    fn stream(&self) -> Result<u64> {
        if self.step >= 1 << STEP_BITS || self.layer >= 1 << 8 || self.slot >= 1 << 16 {
            return Err(Error::contract(format!("noise key out of range: {self:?}")));
        }
        Ok(self.step << 24 | (self.layer as u64) << 16 | self.slot as u64)
    }

    fn rng(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream()?);
        Ok(rng)
    }

    /// `n` uniforms in the open interval (0, 1); entry `t` is the draw for
    /// token `t`.
    pub fn uniforms(&self, n: usize) -> Result<Vec<f64>> {
        let mut rng = self.rng()?;
        Ok((0..n).map(|_| open_unit(rng.next_u64())).collect())
    }

    /// The draw for a single token, computed without generating the others.
    pub fn uniform_at(&self, token: usize) -> Result<f64> {
        let mut rng = self.rng()?;
        rng.set_word_pos(2 * token as u128);
        Ok(open_unit(rng.next_u64()))
    }
}

/// Maps 52 random bits to the midpoint grid of (0, 1); never returns 0 or 1.
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Deterministic child seed for replication `index` of a run seeded `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_order_independent() {
        let key = NoiseKey::new(7, 3, 1, 2);
        let all = key.uniforms(16).unwrap();
        for t in (0..16).rev() {
            assert_eq!(key.uniform_at(t).unwrap().to_bits(), all[t].to_bits());
        }
    }

    #[test]
    fn distinct_keys_give_distinct_streams() {
        let a = NoiseKey::new(7, 3, 1, 2).uniforms(4).unwrap();
        let b = NoiseKey::new(7, 3, 2, 2).uniforms(4).unwrap();
        let c = NoiseKey::new(7, 4, 1, 2).uniforms(4).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&u| u > 0.0 && u < 1.0));
    }

    #[test]
    fn open_unit_endpoints() {
        assert!(open_unit(0) > 0.0);
        assert!(open_unit(u64::MAX) < 1.0);
    }

    #[test]
    fn out_of_range_key_rejected() {
        assert!(NoiseKey::new(0, 0, 300, 0).uniforms(1).is_err());
    }
}
