//! Positive-rating filter, iterative user/item count filter to fixpoint,
//! chronological sort and truncation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Interaction, UserHistory};

pub const TITLE_TOKEN_CAP: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub min_user: usize,
    pub min_item: usize,
    /// Events with rating >= this value are treated as positives.
    pub positive_rating: u8,
    /// Minimum kept history length; must cover a history plus a target.
    pub trunc_lo: usize,
    /// Keep at most this many most-recent events per user.
    pub trunc_hi: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_user: 5,
            min_item: 5,
            positive_rating: 5,
            trunc_lo: 5,
            trunc_hi: 20,
        }
    }
}

fn cap_title(title: &str) -> String {
    let toks: Vec<&str> = title.split_whitespace().take(TITLE_TOKEN_CAP).collect();
    toks.join(" ")
}

/// Filter to positive events, iteratively drop users/items below their
/// count thresholds until a fixpoint, sort each user by (timestamp,
/// item_id), keep the most recent `trunc_hi` events, and drop users with
/// fewer than `trunc_lo`.
pub fn preprocess(
    interactions: &[Interaction],
    cfg: &PreprocessConfig,
) -> Result<Vec<UserHistory>, DataError> {
    if cfg.trunc_lo < 2 {
        return Err(DataError::Preprocess(
            "trunc_lo must be >= 2 (history plus target)".into(),
        ));
    }
    let after_rating: Vec<&Interaction> = interactions
        .iter()
        .filter(|r| r.rating >= cfg.positive_rating)
        .collect();
    let n_rating = after_rating.len();

    // alternate user/item occurrence filters until nothing changes
    let mut kept = after_rating;
    loop {
        let mut user_count: BTreeMap<&str, usize> = BTreeMap::new();
        let mut item_count: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &kept {
            *user_count.entry(&r.user_id).or_default() += 1;
            *item_count.entry(&r.item_id).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|r| {
            user_count[r.user_id.as_str()] >= cfg.min_user
                && item_count[r.item_id.as_str()] >= cfg.min_item
        });
        if kept.len() == before {
            break;
        }
    }
    let n_fixpoint = kept.len();

    let mut per_user: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
    for r in &kept {
        per_user.entry(&r.user_id).or_default().push(r);
    }

    let mut out = Vec::new();
    for (user, mut events) in per_user {
        events.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.item_id.cmp(&b.item_id))
        });
        let start = events.len().saturating_sub(cfg.trunc_hi);
        let events = &events[start..];
        if events.len() < cfg.trunc_lo {
            continue;
        }
        out.push(UserHistory {
            user_id: user.to_string(),
            items: events.iter().map(|r| r.item_id.clone()).collect(),
            titles: events.iter().map(|r| cap_title(&r.title)).collect(),
        });
    }

    if out.is_empty() {
        return Err(DataError::Preprocess(format!(
            "no users survived preprocessing: {} input, {} after rating filter, \
             {} after count fixpoint, 0 after truncation bounds",
            interactions.len(),
            n_rating,
            n_fixpoint
        )));
    }
    Ok(out)
}
