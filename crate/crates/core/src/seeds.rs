//! Independent, reproducible random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    TrainPool = 1,
    TestPool = 2,
    Resplit = 3,
    Pose = 4,
    Subset = 5,
    Training = 6,
    Init = 7,
    Resample = 8,
    Holdout = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for `purpose` under the run seed `seed`.
pub fn derive(seed: u64, purpose: Purpose) -> u64 {
    splitmix64(seed ^ splitmix64(purpose as u64))
}

/// Stream `index` of `purpose`; e.g. one stream per cloud or per epoch.
pub fn rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(derive(seed, purpose));
    r.set_stream(index);
    r
}
