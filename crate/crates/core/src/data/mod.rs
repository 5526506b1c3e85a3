//! Interaction-log ingestion, filtering to a user/item fixpoint,
//! chronological truncation and leave-one-out splitting with seeded
//! negative sampling.

mod ingest;
mod preprocess;
mod split;

pub use ingest::{ingest, ingest_reader, IngestStats};
pub use preprocess::{preprocess, PreprocessConfig};
pub use split::{split_leave_one_out, write_split, read_split, SplitSample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("preprocessing error: {0}")]
    Preprocess(String),
    #[error("sampling error: {0}")]
    Sampling(String),
}

/// One timestamped user-item event with a rating and the item's title text.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: u8,
    pub timestamp: i64,
    pub title: String,
}

impl Interaction {
    /// Rating in [1,5], timestamp non-negative, title non-empty after trim.
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=5).contains(&self.rating) {
            return Err(format!("rating {} outside [1,5]", self.rating));
        }
        if self.timestamp < 0 {
            return Err(format!("negative timestamp {}", self.timestamp));
        }
        if self.title.trim().is_empty() {
            return Err("empty title".into());
        }
        Ok(())
    }
}

/// A user's kept interactions in chronological order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UserHistory {
    pub user_id: String,
    pub items: Vec<String>,
    pub titles: Vec<String>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
