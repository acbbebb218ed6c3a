//! Seeded counter-based random streams. Nothing in the crate touches a
//! global generator; every consumer receives one of these explicitly.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child stream; `tag` separates consumers sharing one seed.
pub fn derive(seed: u64, tag: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

pub fn normal<T: Scalar>(rng: &mut Rng) -> T {
    let v: f64 = rng.sample(StandardNormal);
    T::lit(v)
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}
