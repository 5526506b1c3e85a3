//! Bundled synthetic dataset: planted user-cluster affinity over items with
//! cluster-marker tokens in their titles, so the whole pipeline can run and
//! be tested hermetically.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Interaction;

/// One marker word per cluster; these are what the attribute predictor
/// should surface as the top categories.
pub const CLUSTER_MARKERS: [&str; 5] = ["saga", "gadget", "recipe", "workout", "melody"];

const FILLERS: [&str; 24] = [
    "amber", "bright", "copper", "dusty", "ember", "frosty", "golden", "hazel", "ivory", "jade",
    "keen", "lunar", "misty", "noble", "ocean", "pale", "quiet", "rustic", "silver", "tidal",
    "umber", "velvet", "wild", "zesty",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Positive interactions per user, drawn uniformly from this range.
    pub min_events: usize,
    pub max_events: usize,
    /// Probability an interaction stays within the user's own cluster.
    pub in_cluster_prob: f64,
    /// Fraction of extra low-rating noise events (filtered out downstream).
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 120,
            clusters: CLUSTER_MARKERS.len(),
            min_events: 8,
            max_events: 16,
            in_cluster_prob: 0.9,
            noise_fraction: 0.08,
            seed: 17,
        }
    }
}

pub fn item_id(i: usize) -> String {
    format!("i{i:04}")
}

pub fn user_id(u: usize) -> String {
    format!("u{u:04}")
}

/// Deterministic title with the cluster marker first and two filler words.
pub fn item_title(i: usize, clusters: usize) -> String {
    let cluster = i % clusters.max(1);
    let marker = CLUSTER_MARKERS[cluster % CLUSTER_MARKERS.len()];
    let f1 = FILLERS[(i * 7 + 3) % FILLERS.len()];
    let f2 = FILLERS[(i * 13 + 5) % FILLERS.len()];
    format!("{marker} {f1} {f2}")
}

/// Generate interactions: each user prefers one item cluster; timestamps
/// increase along each user's sequence; a small fraction of rating-2 noise
/// events is interleaved for the preprocessing filter to drop.
pub fn generate(cfg: &SynthConfig) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clusters = cfg.clusters.max(1);
    let items_of_cluster: Vec<Vec<usize>> = (0..clusters)
        .map(|c| (0..cfg.items).filter(|i| i % clusters == c).collect())
        .collect();

    let mut out = Vec::new();
    for u in 0..cfg.users {
        let own = u % clusters;
        let n_events = rng.random_range(cfg.min_events..=cfg.max_events);
        let mut t = (u as i64) * 10_000;
        for _ in 0..n_events {
            let cluster = if rng.random::<f64>() < cfg.in_cluster_prob {
                own
            } else {
                rng.random_range(0..clusters)
            };
            let pool = &items_of_cluster[cluster];
            let item = pool[rng.random_range(0..pool.len())];
            t += rng.random_range(1..100);
            out.push(Interaction {
                user_id: user_id(u),
                item_id: item_id(item),
                rating: 5,
                timestamp: t,
                title: item_title(item, clusters),
            });
            if rng.random::<f64>() < cfg.noise_fraction {
                let noise_item = rng.random_range(0..cfg.items);
                t += rng.random_range(1..100);
                out.push(Interaction {
                    user_id: user_id(u),
                    item_id: item_id(noise_item),
                    rating: 2,
                    timestamp: t,
                    title: item_title(noise_item, clusters),
                });
            }
        }
    }
    out
}

/// The cluster a user prefers, for tests that check planted structure.
pub fn user_cluster(u: usize, clusters: usize) -> usize {
    u % clusters.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn timestamps_increase_per_user() {
        let data = generate(&SynthConfig::default());
        let mut last: std::collections::BTreeMap<&str, i64> = Default::default();
        for r in &data {
            if let Some(&prev) = last.get(r.user_id.as_str()) {
                assert!(r.timestamp > prev);
            }
            last.insert(&r.user_id, r.timestamp);
        }
    }

    #[test]
    fn positives_mostly_stay_in_cluster() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg);
        let mut own = 0usize;
        let mut total = 0usize;
        for r in data.iter().filter(|r| r.rating == 5) {
            let u: usize = r.user_id[1..].parse().unwrap();
            let i: usize = r.item_id[1..].parse().unwrap();
            total += 1;
            if i % cfg.clusters == user_cluster(u, cfg.clusters) {
                own += 1;
            }
        }
        let frac = own as f64 / total as f64;
        assert!(frac > 0.85, "in-cluster fraction {frac}");
    }

    #[test]
    fn titles_carry_cluster_markers() {
        let cfg = SynthConfig::default();
        for i in 0..cfg.items {
            let title = item_title(i, cfg.clusters);
            let marker = CLUSTER_MARKERS[i % cfg.clusters];
            assert!(title.starts_with(marker));
        }
    }
}
