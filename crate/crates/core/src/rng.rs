//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator
//! (`rand_chacha::ChaCha8Rng`, a value-stable PRNG). A run has one 64-bit seed;
//! each consumer gets its own stream, selected by hashing a fixed label into
//! the ChaCha stream id. Adding a new consumer therefore never shifts the draws
//! of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SYNTH_SHADOWING: &str = "synth.shadowing";
pub const CAT_DECISIONS: &str = "cat.decisions";
pub const CV_SHUFFLE: &str = "predictor.cv_shuffle";
pub const SYNTHETIC_PAYLOAD: &str = "predictor.synthetic_payload";

/// Deterministic generator for `label` under the run `seed`.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(label.as_bytes()));
    rng
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
