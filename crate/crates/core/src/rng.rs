//! Seeded random streams. All randomness in the crate flows from a root seed
//! through named sub-streams so components can be re-seeded independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Named sub-streams of a root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Pretrain,
    Train,
    Eval,
    Aggregate,
    Verify,
    Diagnostics,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Pretrain => 3,
            Stream::Train => 4,
            Stream::Eval => 5,
            Stream::Aggregate => 6,
            Stream::Verify => 7,
            Stream::Diagnostics => 8,
        }
    }
}

/// RNG for the given stream of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// RNG for an indexed child of `seed` (e.g. one per prompt or per ablation cell).
pub fn child_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream.id() | (index << 8));
    rng
}

pub fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
