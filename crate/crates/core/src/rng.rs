//! Seeded random streams and the stationary bootstrap index generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for `seed`.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator keyed by `seed`.
///
/// Streams are disjoint ChaCha streams, so work split by stream index gives
/// the same draws regardless of how it is scheduled.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// splitmix64 finalizer, used to derive child seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Politis-Romano stationary bootstrap: `len` indices into a series of length
/// `n`, built from blocks with geometric lengths of mean `mean_block` and
/// wrap-around at the end of the series.
pub fn stationary_bootstrap_indices<R: Rng + ?Sized>(
    n: usize,
    len: usize,
    mean_block: f64,
    rng: &mut R,
) -> Vec<usize> {
    assert!(n > 0, "stationary bootstrap needs a nonempty series");
    let p_new = 1.0 / mean_block.max(1.0);
    let mut out = Vec::with_capacity(len);
    let mut cur = rng.random_range(0..n);
    for i in 0..len {
        if i > 0 {
            if rng.random::<f64>() < p_new {
                cur = rng.random_range(0..n);
            } else {
                cur = (cur + 1) % n;
            }
        }
        out.push(cur);
    }
    out
}
