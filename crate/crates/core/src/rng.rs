//! Seed management for replicated experiments.
//!
//! Every randomized routine takes an explicit seed. Replicas derive
//! independent generators from a base seed by the splitting rule
//! `(seed, replica) -> ChaCha8(seed, stream = replica)`: same keystream
//! family, disjoint streams, so results are reproducible per `(seed, M,
//! replica)` and independent of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Deterministic per-replica generator: ChaCha8 keyed by `base_seed` on
/// stream `replica`.
pub fn replica_rng(base_seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(replica);
    rng
}

/// Run `m` replicas in parallel, each with its own derived generator.
/// Results come back in replica order regardless of scheduling.
pub fn run_replicas<T, F>(base_seed: u64, m: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, ChaCha8Rng) -> T + Sync,
{
    (0..m as u64)
        .into_par_iter()
        .map(|i| f(i, replica_rng(base_seed, i)))
        .collect()
}
