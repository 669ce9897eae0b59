//! Seeded, splittable randomness.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream keyed by the
//! run seed and a substream name, so the weights, the initial latent and the
//! k-means seeding never perturb one another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const WEIGHTS: &str = "weights";
pub const LATENT: &str = "latent";
pub const KMEANS_INIT: &str = "kmeans-init";
pub const TARGET: &str = "target";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream for `name`. Calling this twice with the same
    /// name restarts the stream from the beginning.
    pub fn substream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
