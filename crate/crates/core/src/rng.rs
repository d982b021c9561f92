//! Counter-based random streams. A stream is addressed by a 64-bit key and a
//! stream index, so sample `i` of a run draws the same numbers whatever the
//! worker that evaluates it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream `index` of the generator keyed by `key`.
pub fn stream(key: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Key of sample `index` within a run seeded with `seed`.
pub fn sample_key(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = stream(7, 3).random_iter().take(4).collect();
        let b: Vec<u64> = stream(7, 3).random_iter().take(4).collect();
        let c: Vec<u64> = stream(7, 4).random_iter().take(4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(sample_key(1, 0), sample_key(1, 1));
        assert_ne!(sample_key(1, 0), sample_key(2, 0));
    }
}
