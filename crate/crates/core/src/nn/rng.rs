use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic counter-based generator (ChaCha8). The full state is the
/// 64-bit seed, a stream id and the word position, so it can be checkpointed
/// and split into independent streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn from_parts(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Self { seed, rng }
    }

    /// `(seed, stream, word position)`
    pub fn parts(&self) -> (u64, u64, u128) {
        (self.seed, self.rng.get_stream(), self.rng.get_word_pos())
    }

    /// Independent generator on another stream of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        Self::from_parts(self.seed, stream, 0)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}
