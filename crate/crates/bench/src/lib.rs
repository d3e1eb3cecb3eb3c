//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retention_core::encoder::{EncoderConfig, EncoderParams};

/// Uniform values in [-1, 1).
pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Uniforms strictly inside (0, 1), as the gate sampler expects.
pub fn open_uniforms(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect()
}

/// Encoder with freshly initialised weights and one random sequence of
/// `config.max_seq_len` tokens.
pub fn encoder_fixture(config: &EncoderConfig, seed: u64) -> (EncoderParams, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EncoderParams::init(config, &mut rng).expect("valid bench config");
    let tokens = (0..config.max_seq_len)
        .map(|_| rng.gen_range(0..config.vocab_size))
        .collect();
    (params, tokens)
}
