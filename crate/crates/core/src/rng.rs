//! Counter-based substream RNG.
//!
//! Every random draw in a simulated world is addressed by
//! `(seed, person_id, node)`. Each structural node gets its own ChaCha
//! stream, so forcing one node (an intervention) leaves every other
//! node's draws untouched, and parallel per-person simulation agrees
//! bit-for-bit with the serial order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Structural nodes with dedicated random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Exogenous = 0,
    PrePregnancy = 1,
    Encounters = 2,
    EarlyTreatment = 3,
    Loss = 4,
    LateTreatment = 5,
    Outcome = 6,
    Adherence = 7,
    TermWeek = 8,
    Proxy = 9,
}

const NODE_SLOTS: u64 = 16;

/// RNG for one `(seed, person, node)` address.
pub fn substream(seed: u64, person_id: u64, node: Node) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(person_id * NODE_SLOTS + node as u64);
    rng
}

/// RNG for replicate-level machinery (bootstrap resamples, repeat runs).
/// Kept in a stream band far above any person id.
pub fn task_stream(seed: u64, task: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (task.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng.set_stream(u64::MAX - index);
    rng
}

/// Deterministic derived seed for repeat `k` of a master-seeded experiment.
pub fn repeat_seed(master: u64, k: u64) -> u64 {
    master
        .wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .rotate_left(17)
        ^ 0xD1B5_4A32_D192_ED03u64.wrapping_mul(k | 1)
}
