//! Seed plumbing: one root seed, split per subsystem by fixed labels so a
//! change in one consumer never perturbs another's random stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; the standard avalanche mix.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a subsystem seed from a root seed and a fixed label.
pub fn split(root: u64, label: &str) -> u64 {
    mix(root ^ label_hash(label))
}

/// Derive a per-item seed (example index, restart, epoch, ...) from a
/// subsystem seed. Counter-based: parallel and serial consumers agree.
pub fn split_index(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index))
}

/// Deterministic generator for a seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
