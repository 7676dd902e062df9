//! Keyed random streams. Every consumer of randomness derives its own
//! generator from `(seed, epoch, batch, purpose)`, so adding a draw in one
//! place never shifts the numbers seen anywhere else, and a resumed run sees
//! the same streams as an uninterrupted one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Shuffle,
    Binarize,
    Noise,
    CriticNoise,
    Eval,
    Data,
    Oracle,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Shuffle => 2,
            Purpose::Binarize => 3,
            Purpose::Noise => 4,
            Purpose::CriticNoise => 5,
            Purpose::Eval => 6,
            Purpose::Data => 7,
            Purpose::Oracle => 8,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, epoch: u64, batch: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [epoch, batch, purpose.tag()] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}
