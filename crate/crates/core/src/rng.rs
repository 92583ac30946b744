//! Seeded random streams.
//!
//! Every random quantity in the engine comes from a ChaCha8 generator keyed by
//! a root seed plus a stream id, so parallel work gets independent streams
//! whose contents do not depend on how the work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type EngineRng = ChaCha8Rng;

/// Stream-id namespaces so the same (seed, index) pair never collides
/// between unrelated uses.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Purpose {
    Trajectory = 1,
    Dataset = 2,
    Training = 3,
    Sampling = 4,
    Init = 5,
    Evaluation = 6,
    GradCheck = 7,
}

pub fn root_rng(seed: u64) -> EngineRng {
    EngineRng::seed_from_u64(seed)
}

/// Independent generator for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: Purpose, index: u64) -> EngineRng {
    let mut rng = EngineRng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

pub fn standard_normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
