//! Lowercase whitespace+punctuation tokenizer with reserved control tokens
//! and a frequency-capped vocabulary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;

/// Reserved token ids, stable across runs and vocabularies.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const YES: usize = 3;
pub const NO: usize = 4;
pub const USERID: usize = 5;
pub const TARGETID: usize = 6;
pub const GUIDE: usize = 7;
pub const BOS: usize = 8;
pub const EOS: usize = 9;

pub const RESERVED: [(&str, usize); 10] = [
    ("<pad>", PAD),
    ("<unk>", UNK),
    ("<mask>", MASK),
    ("<yes>", YES),
    ("<no>", NO),
    ("<userid>", USERID),
    ("<targetid>", TARGETID),
    ("<guide>", GUIDE),
    ("<bos>", BOS),
    ("<eos>", EOS),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Total vocabulary cap, reserved ids included.
    pub max_vocab: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { max_vocab: 4096 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

/// Split into lowercase word and punctuation tokens.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() || ch == '_' || ch == '\'' || ch == '-' || ch == '<' || ch == '>' {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Tokenizer {
    /// Build from a corpus: reserved tokens first, then corpus tokens by
    /// descending frequency (ties lexicographic) up to the cap.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        cfg: &TokenizerConfig,
    ) -> Result<Self, PromptError> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for tok in split_text(text) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        for (name, _) in RESERVED {
            freq.remove(name);
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|(n, _)| n.to_string()).collect();
        let budget = cfg.max_vocab.saturating_sub(id_to_token.len());
        for (tok, _) in ranked.into_iter().take(budget) {
            id_to_token.push(tok);
        }
        if id_to_token.len() <= RESERVED.len() {
            return Err(PromptError::Vocab("empty corpus vocabulary".into()));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> &str {
        self.id_to_token.get(id).map(|s| s.as_str()).unwrap_or("<unk>")
    }

    /// Total function: out-of-vocabulary tokens map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_text(text)
            .into_iter()
            .map(|tok| self.token_to_id.get(&tok).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of `encode` for in-vocabulary text, up to whitespace
    /// normalization. Control tokens render as their angled names.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token_of(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string(&self)
            .map_err(|e| PromptError::Vocab(format!("serialize: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PromptError::Vocab(format!("parse: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(
            ["the cat sat on the mat", "a dog, a cat!"],
            &TokenizerConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        assert!(tok().encode("").is_empty());
    }

    #[test]
    fn roundtrip_up_to_whitespace() {
        let t = tok();
        let text = "the cat sat on the mat";
        assert_eq!(t.decode(&t.encode(text)), text);
        let punct = "a dog , a cat !";
        assert_eq!(t.decode(&t.encode("a dog, a cat!")), punct);
    }

    #[test]
    fn oov_maps_to_unk() {
        let t = tok();
        let ids = t.encode("zebra");
        assert_eq!(ids, vec![UNK]);
    }

    #[test]
    fn reserved_ids_are_stable() {
        let t1 = tok();
        let t2 = Tokenizer::build(["completely different words here"], &TokenizerConfig::default())
            .unwrap();
        for (name, id) in RESERVED {
            assert_eq!(t1.id_of(name), Some(id));
            assert_eq!(t2.id_of(name), Some(id));
        }
    }

    #[test]
    fn frequency_cap_keeps_most_frequent() {
        let cfg = TokenizerConfig {
            max_vocab: RESERVED.len() + 2,
        };
        let t = Tokenizer::build(["aa aa aa bb bb cc"], &cfg).unwrap();
        assert_eq!(t.vocab_size(), RESERVED.len() + 2);
        assert!(t.id_of("aa").is_some());
        assert!(t.id_of("bb").is_some());
        assert!(t.id_of("cc").is_none());
    }

    #[test]
    fn casing_is_normalized() {
        let t = tok();
        assert_eq!(t.encode("The CAT"), t.encode("the cat"));
    }
}
