use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Array;

/// Seeded random stream with labelled splitting.
///
/// A child produced by [`Rng::split`] depends only on the parent seed and the
/// label, never on how much of the parent stream has been consumed. The
/// stream position is exposed as `(seed, counter)` so it can be checkpointed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Two streams are equal when they will produce the same values.
impl PartialEq for Rng {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.counter() == other.counter()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(fnv1a(label))))
    }

    /// Child stream keyed by an integer (chain index, step number).
    pub fn split_index(&self, label: &str, index: u64) -> Rng {
        Rng::new(splitmix64(self.split(label).seed ^ splitmix64(index.wrapping_add(1))))
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn restore(seed: u64, counter: u128) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_word_pos(counter);
        rng
    }

    pub fn uniform(&mut self) -> f32 {
        self.inner.gen::<f32>()
    }

    /// Double-precision uniform draw in `[0, 1)`.
    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f32 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_array(&mut self, shape: &[usize]) -> Array {
        Array::from_fn(shape, |_| self.normal())
    }

    pub fn uniform_array(&mut self, shape: &[usize], lo: f32, hi: f32) -> Array {
        Array::from_fn(shape, |_| self.uniform_range(lo, hi))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
