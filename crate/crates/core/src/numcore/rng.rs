use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A seedable, splittable source of random streams.
///
/// Child streams are derived by name or index, so independent consumers
/// never share state and adding a consumer never perturbs another.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, name: &str) -> Self {
        Self { seed: splitmix64(self.seed ^ splitmix64(fnv1a(name.as_bytes()))) }
    }

    pub fn split_index(&self, index: u64) -> Self {
        Self { seed: splitmix64(self.seed.wrapping_add(splitmix64(index ^ 0x5eed))) }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}
