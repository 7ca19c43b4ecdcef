//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(run seed, purpose tag, index)`. The seed and tag form the 256-bit key and
//! the index selects the ChaCha stream, so data sampling, forward noise,
//! backward noise and Monte Carlo draws can each be regenerated on their own,
//! independently of thread count or evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Root of a family of independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The stream for `tag` at position `index`.
    pub fn rng(&self, tag: &str, index: u64) -> StreamRng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
        key[16..24].copy_from_slice(&splitmix(self.seed ^ 0x5eed_0f_5c0e_1ab5).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    /// A child family, e.g. one per grid cell or per Monte Carlo term.
    pub fn derive(&self, tag: &str, index: u64) -> Streams {
        Streams::new(splitmix(self.seed ^ fnv1a(tag.as_bytes()).rotate_left(17) ^ splitmix(index)))
    }
}

/// Fill `out` with i.i.d. standard normal draws.
pub fn fill_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    fill_normal(rng, &mut v);
    v
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
