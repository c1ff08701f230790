//! Deterministic random streams.
//!
//! Every draw in this crate comes from a ChaCha8 generator keyed by a `u64`
//! seed. Independent purposes use distinct ChaCha stream ids, so consuming
//! draws for one purpose never shifts the sequence of another. Sweeps derive
//! per-run seeds as `base_seed + run_index`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids, one per purpose. Scenario streams are keyed by the scenario
/// seed, training streams by the run seed.
pub(crate) mod stream {
    pub const SCENARIO_MEANS: u64 = 0;
    pub const SCENARIO_LABELED: u64 = 1;
    pub const SCENARIO_UNLABELED: u64 = 2;
    pub const SCENARIO_TEST: u64 = 3;
    pub const SCENARIO_PROBE: u64 = 4;
    pub const BACKGROUND: u64 = 5;

    pub const PARAM_INIT: u64 = 8;
    pub const LABELED_BATCHES: u64 = 9;
    pub const UNLABELED_BATCHES: u64 = 10;
    pub const JITTER: u64 = 11;
    pub const OOD_INIT: u64 = 12;
    pub const OOD_BATCHES: u64 = 13;
    pub const ONLINE_BACKGROUND_BATCHES: u64 = 14;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
