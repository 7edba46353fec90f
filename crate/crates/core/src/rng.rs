//! Seeded random streams.
//!
//! One experiment seed fans out into independent named streams so that, for
//! example, changing the number of training steps never shifts the data
//! that was generated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Generator = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Mask,
    Init,
    Training,
    Eval,
    Split,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Mask => 2,
            Stream::Init => 3,
            Stream::Training => 4,
            Stream::Eval => 5,
            Stream::Split => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Generator {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    g.set_stream(which.id());
    g
}

/// Stream for a sub-component, e.g. one cell of an experiment grid.
pub fn substream(seed: u64, which: Stream, index: u64) -> Generator {
    let mut g = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    g.set_stream(which.id());
    g
}

pub fn standard_normal(rng: &mut Generator) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut Generator, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}
