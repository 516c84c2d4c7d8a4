//! Seeded, checkpointable random stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A ChaCha8 stream identified by its seed and word position.
///
/// Identical seeds and identical draw sequences give bit-identical values,
/// and `(seed, word_pos)` is enough to restore the stream exactly.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut state = Self::new(seed);
        state.inner.set_word_pos(word_pos);
        state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }

    /// An independent child stream, for work that must not perturb this one.
    pub fn derive(&self, salt: u64) -> RngState {
        RngState::new(
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03))
                ^ salt,
        )
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}
