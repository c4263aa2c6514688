//! Named deterministic RNG streams.
//!
//! Every source of randomness in a run (batch choice, mask placement,
//! replacement sampling, dropout, each parameter's init) draws from its own
//! stream, derived from the master seed by hashing the stream name and, where
//! it applies, the step index. Streams therefore never shift against each
//! other when some other consumer draws more or fewer numbers. That is what
//! makes NES and GDES runs bitwise comparable: their generators consume
//! identical streams no matter what the discriminator side does.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct StreamSeeds {
    master: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl StreamSeeds {
    pub fn new(master: u64) -> Self {
        StreamSeeds { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, name: &str) -> u64 {
        mix(self.master ^ fnv1a(name.as_bytes()))
    }

    /// Stream for a named purpose, independent of any step counter.
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(name))
    }

    /// Per-step stream: reseeded each step so the draw count in one step can
    /// never leak into the next.
    pub fn rng_at(&self, name: &str, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.seed(name) ^ mix(step ^ 0x517c_c1b7_2722_0a95)))
    }
}
