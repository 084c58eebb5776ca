//! Counter-based seeding: every random draw is a pure function of a seed and
//! a tuple of counters, so results do not depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with counters into a new seed.
pub fn stream_seed(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix(seed), |acc, &c| splitmix(acc ^ splitmix(c)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Field index in `0..m` and time in `[0, 1)` for one training sample.
pub fn field_and_time(seed: u64, m: usize) -> (usize, f64) {
    let mut r = rng(seed);
    let i = r.gen_range(0..m);
    let t = r.gen::<f64>();
    (i, t)
}

/// Seeds for the samples of one minibatch.
pub fn sample_seeds(step_seed: u64, len: usize) -> Vec<u64> {
    (0..len as u64)
        .map(|k| stream_seed(step_seed, &[k]))
        .collect()
}
