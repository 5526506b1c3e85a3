//! Leave-one-out splitting with per-user seeded negative sampling.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::derive_seed;

use super::{DataError, UserHistory};

/// One ranking instance: a history, its next-item target, and sampled
/// negatives the user never interacted with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSample {
    pub user_id: String,
    pub history: Vec<String>,
    pub history_titles: Vec<String>,
    pub target: String,
    pub target_title: String,
    pub negatives: Vec<String>,
    pub negative_titles: Vec<String>,
}

impl SplitSample {
    /// Candidate item ids: the positive first, then the negatives.
    pub fn candidates(&self) -> Vec<&str> {
        let mut out = vec![self.target.as_str()];
        out.extend(self.negatives.iter().map(|s| s.as_str()));
        out
    }
}

/// For each user: the last interaction becomes the test target; every
/// earlier position from `min_prefix` onward becomes a training target with
/// its prefix as history. Negatives are drawn uniformly (without
/// replacement) from catalog items the user never touched, with a per-user
/// generator seeded from `(seed, user_id)` so per-user draws are stable
/// regardless of processing order.
pub fn split_leave_one_out(
    histories: &[UserHistory],
    n_neg: usize,
    min_prefix: usize,
    seed: u64,
) -> Result<(Vec<SplitSample>, Vec<SplitSample>), DataError> {
    let mut catalog: Vec<(&str, &str)> = Vec::new();
    {
        let mut seen = BTreeSet::new();
        for h in histories {
            for (i, t) in h.items.iter().zip(&h.titles) {
                if seen.insert(i.as_str()) {
                    catalog.push((i.as_str(), t.as_str()));
                }
            }
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for h in histories {
        if h.len() < 3 {
            return Err(DataError::Sampling(format!(
                "history for '{}' has {} items; need >= 3",
                h.user_id,
                h.len()
            )));
        }
        let user_items: BTreeSet<&str> = h.items.iter().map(|s| s.as_str()).collect();
        let pool: Vec<usize> = (0..catalog.len())
            .filter(|&k| !user_items.contains(catalog[k].0))
            .collect();
        if pool.len() < n_neg {
            return Err(DataError::Sampling(format!(
                "catalog leaves only {} candidates for '{}'; need {}",
                pool.len(),
                h.user_id,
                n_neg
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &h.user_id));
        let n = h.len();

        let make = |target_pos: usize, rng: &mut ChaCha8Rng| -> SplitSample {
            let mut chosen: Vec<usize> = pool.clone();
            chosen.shuffle(rng);
            chosen.truncate(n_neg);
            SplitSample {
                user_id: h.user_id.clone(),
                history: h.items[..target_pos].to_vec(),
                history_titles: h.titles[..target_pos].to_vec(),
                target: h.items[target_pos].clone(),
                target_title: h.titles[target_pos].clone(),
                negatives: chosen.iter().map(|&k| catalog[k].0.to_string()).collect(),
                negative_titles: chosen.iter().map(|&k| catalog[k].1.to_string()).collect(),
            }
        };

        // training targets: positions with a prefix of at least min_prefix,
        // up to and including position n-2 (the paper's i_{n-1})
        for pos in min_prefix.max(1)..n - 1 {
            train.push(make(pos, &mut rng));
        }
        test.push(make(n - 1, &mut rng));
    }
    Ok((train, test))
}

pub fn write_split(samples: &[SplitSample], path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)
            .map_err(|e| DataError::Ingest(format!("serialize sample: {e}")))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<SplitSample>, DataError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| DataError::Ingest(format!("parse sample: {e}")))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(u: &str, items: &[&str]) -> UserHistory {
        UserHistory {
            user_id: u.into(),
            items: items.iter().map(|s| s.to_string()).collect(),
            titles: items.iter().map(|s| format!("title {s}")).collect(),
        }
    }

    fn corpus() -> Vec<UserHistory> {
        let mut hs = vec![history("u0", &["a", "b", "c"])];
        // filler users so the catalog is big enough for 9 negatives
        for k in 0..4 {
            let items: Vec<String> = (0..5).map(|j| format!("x{k}{j}")).collect();
            let refs: Vec<&str> = items.iter().map(|s| s.as_str()).collect();
            hs.push(history(&format!("f{k}"), &refs));
        }
        hs
    }

    #[test]
    fn last_item_is_test_target_and_penultimate_trains() {
        let (train, test) = split_leave_one_out(&corpus(), 9, 1, 7).unwrap();
        let t = test.iter().find(|s| s.user_id == "u0").unwrap();
        assert_eq!(t.target, "c");
        assert_eq!(t.history, vec!["a", "b"]);
        let tr: Vec<&SplitSample> = train.iter().filter(|s| s.user_id == "u0").collect();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].target, "b");
        assert_eq!(tr[0].history, vec!["a"]);
    }

    #[test]
    fn negatives_never_intersect_user_items_and_count_nine() {
        let histories = corpus();
        let mut full: std::collections::BTreeMap<String, BTreeSet<String>> =
            std::collections::BTreeMap::new();
        for h in &histories {
            full.entry(h.user_id.clone())
                .or_default()
                .extend(h.items.iter().cloned());
        }
        let (train, test) = split_leave_one_out(&histories, 9, 1, 7).unwrap();
        for s in train.iter().chain(&test) {
            assert_eq!(s.negatives.len(), 9);
            let user_items = &full[&s.user_id];
            for n in &s.negatives {
                assert!(!user_items.contains(n), "{n} in {}'s items", s.user_id);
            }
            let distinct: BTreeSet<&String> = s.negatives.iter().collect();
            assert_eq!(distinct.len(), 9, "negatives drawn without replacement");
        }
    }

    #[test]
    fn same_seed_reproduces_negative_sets() {
        let (tr1, te1) = split_leave_one_out(&corpus(), 9, 1, 7).unwrap();
        let (tr2, te2) = split_leave_one_out(&corpus(), 9, 1, 7).unwrap();
        for (a, b) in tr1.iter().zip(&tr2).chain(te1.iter().zip(&te2)) {
            assert_eq!(a.negatives, b.negatives);
        }
        let (_, te3) = split_leave_one_out(&corpus(), 9, 1, 8).unwrap();
        assert!(te1.iter().zip(&te3).any(|(a, b)| a.negatives != b.negatives));
    }

    #[test]
    fn short_history_is_rejected() {
        let hs = vec![history("u0", &["a", "b"])];
        assert!(matches!(
            split_leave_one_out(&hs, 9, 1, 7),
            Err(DataError::Sampling(_))
        ));
    }

    #[test]
    fn tiny_catalog_is_a_sampling_error() {
        let hs = vec![
            history("u0", &["a", "b", "c"]),
            history("u1", &["a", "b", "d"]),
        ];
        assert!(matches!(
            split_leave_one_out(&hs, 9, 1, 7),
            Err(DataError::Sampling(_))
        ));
    }

    #[test]
    fn split_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = split_leave_one_out(&corpus(), 9, 1, 7).unwrap();
        let path = dir.path().join("train.jsonl");
        write_split(&train, &path).unwrap();
        let back = read_split(&path).unwrap();
        assert_eq!(back.len(), train.len());
        assert_eq!(back[0].negatives, train[0].negatives);
    }
}
