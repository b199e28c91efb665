//! Deterministic seed derivation.
//!
//! Every experiment owns one master seed. All randomness downstream (data
//! generation, parameter init, batch shuffling, attack choices, defense
//! optimizers) consumes a sub-seed derived from the master seed and a short
//! domain label, so that two runs with the same master seed are bit-identical
//! while the individual stages stay statistically independent.

/// Domain labels for the standard sub-seeds of an experiment.
pub mod domain {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const TRAIN: &str = "train";
    pub const ATTACK: &str = "attack";
    pub const DEFENSE: &str = "defense";
    pub const GAME: &str = "game";
}

/// Derive a sub-seed from `master` and a domain label.
pub fn derive(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix64 to decorrelate.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(master ^ h)
}

/// Derive an indexed sub-seed, e.g. for the i-th repeat of a sweep.
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(master, label) ^ splitmix64(index.wrapping_add(0x9e3779b97f4a7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_across_calls() {
        assert_eq!(derive(42, domain::DATA), derive(42, domain::DATA));
        assert_eq!(derive_indexed(7, "repeat", 3), derive_indexed(7, "repeat", 3));
    }

    #[test]
    fn domains_decorrelate() {
        let seeds: Vec<u64> = [domain::DATA, domain::INIT, domain::TRAIN, domain::ATTACK]
            .iter()
            .map(|d| derive(0, d))
            .collect();
        for i in 0..seeds.len() {
            for j in (i + 1)..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn indexed_seeds_differ() {
        assert_ne!(derive_indexed(0, "r", 0), derive_indexed(0, "r", 1));
    }
}
