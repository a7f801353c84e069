//! Named random streams derived from one run seed.
//!
//! Every source of randomness pulls from its own ChaCha stream keyed by the
//! run seed, so toggling one stage (say, turning splitting on) never
//! perturbs the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init,
    /// Split-state perturbation.
    SplitNoise,
    /// Held-out set selection.
    Heldout,
    /// Per-epoch corpus shuffle; one stream per epoch.
    Shuffle(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::SplitNoise => 2,
            Stream::Heldout => 3,
            // Epoch streams live above 2^32 to stay clear of the fixed ids.
            Stream::Shuffle(epoch) => (1u64 << 32) + epoch,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
