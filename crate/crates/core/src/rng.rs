//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `&mut Rng`; nothing reads
//! thread-local or OS entropy, so runs are reproducible from a single seed.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// An independent stream derived from `seed`; distinct `stream` ids never
/// overlap.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}
