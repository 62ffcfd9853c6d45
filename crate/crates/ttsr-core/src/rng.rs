//! Seeded RNG with per-purpose sub-streams so augmentation, shuffling and
//! gradient-penalty mixing are independently reproducible.

use rand_xoshiro::rand_core::SeedableRng;

pub type Rng = rand_xoshiro::Xoshiro256PlusPlus;

/// Independent randomness consumers within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    GpMix = 4,
    Data = 5,
    Eval = 6,
}

/// Sub-stream RNG for `(seed, stream)`; SplitMix64 over the combined word
/// decorrelates nearby seeds before seeding xoshiro.
pub fn seeded(seed: u64, stream: Stream) -> Rng {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    Rng::seed_from_u64(z)
}
