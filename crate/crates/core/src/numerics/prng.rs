use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded, splittable random source. Every stochastic routine takes one of these
/// explicitly so runs are reproducible from a single seed.
///
/// Backed by the ChaCha8 stream cipher (a counter-based generator); children are
/// keyed off the parent's seed and a stream id, so deriving never perturbs the
/// parent's sequence.
#[derive(Clone, Debug)]
pub struct Prng {
    rng: ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent child stream identified by `key`. Does not advance `self`.
    pub fn derive(&self, key: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(self.rng.get_seed());
        rng.set_stream(key.wrapping_add(1));
        // Fold the parent position in so children of an advanced parent differ.
        let offset = self.rng.get_word_pos();
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        for (i, b) in offset.to_le_bytes().iter().enumerate() {
            seed[i] ^= b;
        }
        Self { rng: ChaCha8Rng::from_seed(seed) }
    }

    /// Child stream that also advances `self`, so repeated splits differ.
    pub fn split(&mut self) -> Self {
        let key = self.rng.next_u64();
        self.derive(key)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform direction on the unit sphere.
    pub fn unit_vector(&mut self) -> [f64; 3] {
        loop {
            let v = [self.normal(), self.normal(), self.normal()];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }
}
