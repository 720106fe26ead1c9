//! Seeded random streams. Every stochastic component draws from a ChaCha8
//! stream selected by `(seed, stream key)`, so results never depend on the
//! order in which independent consumers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SleRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SleRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `key` under `seed`.
pub fn substream(seed: u64, key: u64) -> SleRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Exact position of a stream, enough to resume it bit-for-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngCursor {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngCursor {
    pub fn capture(rng: &SleRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> SleRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
