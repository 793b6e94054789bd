//! Deterministic, independently seeded random streams.
//!
//! Every consumer of randomness (weight init, batch order, CPC offsets, data
//! generation) draws from its own named stream so that switching one feature
//! off never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn stream(seed: u64, tag: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(tag));
    rng
}
