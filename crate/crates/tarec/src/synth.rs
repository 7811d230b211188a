//! Built-in synthetic interaction generator: a Markov preference process
//! over user clusters.
//!
//! Items are partitioned into clusters; each cluster owns two successor
//! permutations over its items. A user belongs to one cluster and walks the
//! chain: from item `i` the next item is `succ1(i)` or `succ2(i)` with high
//! probability, otherwise a uniform item from the cluster. Timestamps
//! strictly increase within a user and user start offsets interleave, so the
//! chronological split sees a stationary process.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Interaction;
use crate::seeding::component_rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// probability of following the primary successor
    pub p_primary: f64,
    /// probability of following the secondary successor
    pub p_secondary: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 3000,
            items: 200,
            clusters: 4,
            min_len: 5,
            max_len: 15,
            p_primary: 0.45,
            p_secondary: 0.35,
            seed: 17,
        }
    }
}

/// Generates the full interaction log, in user order with interleaved
/// timestamps. Deterministic in the seed.
pub fn generate(cfg: &SynthConfig) -> Vec<Interaction> {
    assert!(cfg.clusters >= 1 && cfg.items >= cfg.clusters);
    assert!(cfg.min_len >= 1 && cfg.min_len <= cfg.max_len);
    assert!(cfg.p_primary + cfg.p_secondary <= 1.0);
    let mut rng = component_rng(cfg.seed, "synth");

    // round-robin cluster membership
    let members: Vec<Vec<u32>> = (0..cfg.clusters)
        .map(|c| {
            (0..cfg.items)
                .filter(|i| i % cfg.clusters == c)
                .map(|i| i as u32)
                .collect()
        })
        .collect();

    // two successor permutations per cluster
    let succs: Vec<[Vec<u32>; 2]> = members
        .iter()
        .map(|m| {
            let mut s1 = m.clone();
            s1.shuffle(&mut rng);
            let mut s2 = m.clone();
            s2.shuffle(&mut rng);
            [s1, s2]
        })
        .collect();

    let mut out = Vec::new();
    for u in 0..cfg.users {
        let cluster = rng.random_range(0..cfg.clusters);
        let m = &members[cluster];
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut pos = rng.random_range(0..m.len());
        // interleave users along the global timeline
        let mut ts: i64 = (u % 97) as i64 * 1000 + u as i64;
        for _ in 0..len {
            let item = m[pos];
            out.push(Interaction {
                user: format!("u{u}"),
                item: format!("i{item}"),
                timestamp: ts,
            });
            ts += 1 + rng.random_range(0..5) as i64;
            let draw: f64 = rng.random();
            let next_item = if draw < cfg.p_primary {
                succs[cluster][0][pos]
            } else if draw < cfg.p_primary + cfg.p_secondary {
                succs[cluster][1][pos]
            } else {
                m[rng.random_range(0..m.len())]
            };
            pos = m.iter().position(|&x| x == next_item).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            users: 20,
            items: 24,
            ..Default::default()
        };
        assert_eq!(generate(&cfg), generate(&cfg));
    }

    #[test]
    fn timestamps_increase_within_users() {
        let cfg = SynthConfig {
            users: 10,
            items: 20,
            ..Default::default()
        };
        let rows = generate(&cfg);
        let mut last: std::collections::HashMap<&str, i64> = Default::default();
        for r in &rows {
            if let Some(&prev) = last.get(r.user.as_str()) {
                assert!(r.timestamp > prev);
            }
            last.insert(&r.user, r.timestamp);
        }
    }

    #[test]
    fn walks_stay_inside_the_users_cluster() {
        let cfg = SynthConfig {
            users: 30,
            items: 40,
            clusters: 4,
            ..Default::default()
        };
        let rows = generate(&cfg);
        let mut per_user: std::collections::HashMap<&str, Vec<usize>> = Default::default();
        for r in &rows {
            let idx: usize = r.item[1..].parse().unwrap();
            per_user.entry(r.user.as_str()).or_default().push(idx % 4);
        }
        for (_, clusters) in per_user {
            assert!(clusters.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
