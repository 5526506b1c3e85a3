//! Attribute label prediction, top-k selection with a curation stoplist,
//! and construction of the k+1 class-labeled corpora for adversarial
//! training.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::UserHistory;
use crate::prompt::{render_gan_prompt, PromptError, PromptInstance, Templates, Tokenizer};

pub const ORIGINAL_LABEL: &str = "ORIGINAL";

#[derive(Debug, Error)]
pub enum AttrError {
    #[error("predictor error: {0}")]
    Predictor(String),
    #[error("attribute error: {0}")]
    Attribute(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

const STOP_WORDS: [&str; 28] = [
    "the", "a", "an", "of", "and", "or", "to", "in", "on", "for", "with", "at", "by", "from",
    "is", "are", "was", "were", "it", "this", "that", "as", "its", "be", "vol", "volume", "no",
    "not",
];

fn is_content_token(tok: &str) -> bool {
    tok.chars().any(|c| c.is_alphanumeric()) && !STOP_WORDS.contains(&tok)
}

/// Token -> category co-occurrence scores built over the corpus titles.
/// Categories are the most frequent content tokens; scores count titles
/// containing both tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    pub categories: Vec<String>,
    /// token -> per-category counts, parallel to `categories`
    scores: BTreeMap<String, Vec<u32>>,
}

impl CooccurrenceTable {
    pub fn build(titles: &[String], candidate_pool: usize) -> Result<Self, AttrError> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        let title_tokens: Vec<BTreeSet<String>> = titles
            .iter()
            .map(|t| {
                crate::prompt::tokenizer_split(t)
                    .into_iter()
                    .filter(|tok| is_content_token(tok))
                    .collect::<BTreeSet<String>>()
            })
            .collect();
        for toks in &title_tokens {
            for tok in toks {
                *freq.entry(tok.clone()).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(AttrError::Predictor("empty title vocabulary".into()));
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let categories: Vec<String> = ranked
            .into_iter()
            .take(candidate_pool)
            .map(|(t, _)| t)
            .collect();
        let cat_index: BTreeMap<&str, usize> = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();

        let mut scores: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for toks in &title_tokens {
            for tok in toks {
                let row = scores
                    .entry(tok.clone())
                    .or_insert_with(|| vec![0; categories.len()]);
                for cat in toks {
                    if let Some(&ci) = cat_index.get(cat.as_str()) {
                        row[ci] += 1;
                    }
                }
            }
        }
        Ok(Self { categories, scores })
    }

    /// Candidate labels for one sample's tokens: categories ranked by
    /// accumulated co-occurrence score, ties lexicographic, zero-score
    /// categories dropped.
    pub fn candidates(&self, sample_tokens: &[String], max_candidates: usize) -> Vec<String> {
        let mut acc = vec![0u64; self.categories.len()];
        for tok in sample_tokens {
            if let Some(row) = self.scores.get(tok.as_str()) {
                for (i, &c) in row.iter().enumerate() {
                    acc[i] += c as u64;
                }
            }
        }
        let mut ranked: Vec<(usize, u64)> = acc
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0)
            .collect();
        ranked.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| self.categories[a.0].cmp(&self.categories[b.0]))
        });
        ranked
            .into_iter()
            .take(max_candidates)
            .map(|(i, _)| self.categories[i].clone())
            .collect()
    }
}

/// Per-sample candidate label lists; `None` marks samples with no signal.
pub type Predictions = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone)]
pub enum AttributePredictor {
    /// Default: dataset-level token/category co-occurrence scoring.
    Cooccurrence { candidate_pool: usize },
    /// Labels supplied by an external process as JSONL
    /// `{"sample_id": ..., "labels": [...]}`.
    External(Predictions),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExternalRecord {
    sample_id: String,
    labels: Vec<String>,
}

impl AttributePredictor {
    pub fn external_from_jsonl(path: &Path) -> Result<Self, AttrError> {
        let text = fs::read_to_string(path)?;
        let mut map = Predictions::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExternalRecord = serde_json::from_str(line)
                .map_err(|e| AttrError::Predictor(format!("external predictor line: {e}")))?;
            map.insert(rec.sample_id, rec.labels);
        }
        Ok(Self::External(map))
    }
}

/// Predict candidate attribute labels for every history. Prompts are the
/// rendered attribute templates; the co-occurrence predictor scores the
/// tokens in each prompt's history slot.
pub fn predict_attributes(
    samples: &[(String, PromptInstance)],
    histories_titles: &[String],
    predictor: &AttributePredictor,
    tokenizer: &Tokenizer,
) -> Result<Predictions, AttrError> {
    match predictor {
        AttributePredictor::External(map) => Ok(samples
            .iter()
            .map(|(id, _)| (id.clone(), map.get(id).cloned().unwrap_or_default()))
            .collect()),
        AttributePredictor::Cooccurrence { candidate_pool } => {
            let table = CooccurrenceTable::build(histories_titles, *candidate_pool)?;
            let mut out = Predictions::new();
            for (id, inst) in samples {
                let (start, len) = *inst.slots.get("history").ok_or_else(|| {
                    AttrError::Predictor(format!("prompt for '{id}' has no history slot"))
                })?;
                let toks: Vec<String> = inst.tokens[start..start + len]
                    .iter()
                    .map(|&t| tokenizer.token_of(t).to_string())
                    .collect();
                out.insert(id.clone(), table.candidates(&toks, 5));
            }
            Ok(out)
        }
    }
}

/// The chosen top-k labels plus the per-sample assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSet {
    pub labels: Vec<String>,
    pub assignment: BTreeMap<String, String>,
}

impl AttributeSet {
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), AttrError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| AttrError::Attribute(format!("serialize: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AttrError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| AttrError::Attribute(format!("parse: {e}")))
    }
}

/// Stoplist file: one label per line, '#' comments allowed.
pub fn load_stoplist(path: &Path) -> Result<BTreeSet<String>, AttrError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect())
}

/// Rank labels by how many samples chose them first, drop stoplisted ones,
/// keep the top k (ties lexicographic). Samples whose label was dropped are
/// reassigned to their next kept candidate, or ORIGINAL.
pub fn select_top_k(
    predictions: &Predictions,
    k: usize,
    stoplist: &BTreeSet<String>,
) -> Result<AttributeSet, AttrError> {
    if k == 0 {
        return Err(AttrError::Attribute("k must be >= 1".into()));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for labels in predictions.values() {
        if let Some(first) = labels.first() {
            *freq.entry(first.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(l, _)| !stoplist.contains(*l))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if ranked.len() < k {
        return Err(AttrError::Attribute(format!(
            "only {} labels survive the stoplist; need {k}",
            ranked.len()
        )));
    }
    let labels: Vec<String> = ranked[..k].iter().map(|(l, _)| l.to_string()).collect();
    let kept: BTreeSet<&str> = labels.iter().map(|s| s.as_str()).collect();

    let assignment = predictions
        .iter()
        .map(|(id, cands)| {
            let label = cands
                .iter()
                .find(|c| kept.contains(c.as_str()))
                .cloned()
                .unwrap_or_else(|| ORIGINAL_LABEL.to_string());
            (id.clone(), label)
        })
        .collect();
    Ok(AttributeSet { labels, assignment })
}

/// One record of the augmented corpus: an (attribute-prefixed) prompt and
/// the raw history tokens the decoder must reconstruct.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanRecord {
    pub sample_id: String,
    pub class_id: usize,
    pub prompt_tokens: Vec<usize>,
    /// Raw history token sequence terminated with EOS.
    pub target_tokens: Vec<usize>,
}

/// The k+1 corpora flattened: class 0 is the raw data, classes 1..=k the
/// attribute-prefixed variants; every class has one record per history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanCorpora {
    pub records: Vec<GanRecord>,
    pub n_classes: usize,
}

impl GanCorpora {
    pub fn class_records(&self, class_id: usize) -> impl Iterator<Item = &GanRecord> {
        self.records.iter().filter(move |r| r.class_id == class_id)
    }
}

pub fn build_attribute_datasets(
    histories: &[UserHistory],
    attrs: &AttributeSet,
    tokenizer: &Tokenizer,
    templates: &Templates,
) -> Result<GanCorpora, AttrError> {
    let mut records = Vec::with_capacity(histories.len() * (attrs.k() + 1));
    for h in histories {
        let raw = render_gan_prompt(tokenizer, templates, None, &attrs.labels, &h.titles)?;
        let mut target = raw.tokens.clone();
        target.push(crate::prompt::EOS);
        records.push(GanRecord {
            sample_id: h.user_id.clone(),
            class_id: 0,
            prompt_tokens: raw.tokens,
            target_tokens: target.clone(),
        });
        for (j, label) in attrs.labels.iter().enumerate() {
            let inst =
                render_gan_prompt(tokenizer, templates, Some(label), &attrs.labels, &h.titles)?;
            records.push(GanRecord {
                sample_id: h.user_id.clone(),
                class_id: j + 1,
                prompt_tokens: inst.tokens,
                target_tokens: target.clone(),
            });
        }
    }
    Ok(GanCorpora {
        records,
        n_classes: attrs.k() + 1,
    })
}
