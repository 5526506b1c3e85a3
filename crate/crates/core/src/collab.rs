//! Biased matrix factorization trained with BCE over each sample's positive
//! target against its sampled negatives. Supplies the collaborative
//! embeddings and the guidance probability for the recommendation stage,
//! and doubles as the traditional baseline.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SplitSample;
use crate::nn::{Checkpoint, NnError, Param};

#[derive(Debug, Error)]
pub enum CollabError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollabConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Weight positive triples by the negative:positive ratio so predicted
    /// probabilities calibrate around 0.5 despite the 1:n_neg class skew.
    #[serde(default = "default_balanced")]
    pub balanced: bool,
}

fn default_balanced() -> bool {
    true
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 30,
            lr: 0.05,
            l2: 1e-4,
            balanced: true,
        }
    }
}

/// User/item embedding tables plus biases. Unknown ids fall back to the
/// mean embedding and a 0.5 prior.
#[derive(Debug, Clone)]
pub struct CollabParams {
    pub dim: usize,
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
    user_vecs: Vec<f64>,
    item_vecs: Vec<f64>,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    global_bias: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CollabParams {
    fn init(users: Vec<String>, items: Vec<String>, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let scale = 1.0 / (dim as f64).sqrt();
        let user_index: BTreeMap<String, usize> =
            users.into_iter().enumerate().map(|(i, u)| (u, i)).collect();
        let item_index: BTreeMap<String, usize> =
            items.into_iter().enumerate().map(|(i, it)| (it, i)).collect();
        let nu = user_index.len();
        let ni = item_index.len();
        let user_vecs = (0..nu * dim).map(|_| rng.random_range(-scale..scale)).collect();
        let item_vecs = (0..ni * dim).map(|_| rng.random_range(-scale..scale)).collect();
        Self {
            dim,
            user_index,
            item_index,
            user_vecs,
            item_vecs,
            user_bias: vec![0.0; nu],
            item_bias: vec![0.0; ni],
            global_bias: 0.0,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_index.len()
    }

    fn score_idx(&self, u: usize, i: usize) -> f64 {
        let d = self.dim;
        let uv = &self.user_vecs[u * d..(u + 1) * d];
        let iv = &self.item_vecs[i * d..(i + 1) * d];
        let dot: f64 = uv.iter().zip(iv).map(|(a, b)| a * b).sum();
        dot + self.user_bias[u] + self.item_bias[i] + self.global_bias
    }

    fn mean_rows(flat: &[f64], dim: usize) -> Vec<f64> {
        let n = flat.len() / dim;
        let mut out = vec![0.0; dim];
        for r in 0..n {
            for j in 0..dim {
                out[j] += flat[r * dim + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        out
    }

    /// Interaction probability through the sigmoid; cold-start ids get 0.5.
    pub fn predict(&self, user: &str, item: &str) -> f64 {
        match (self.user_index.get(user), self.item_index.get(item)) {
            (Some(&u), Some(&i)) => sigmoid(self.score_idx(u, i)),
            _ => 0.5,
        }
    }

    /// Raw embedding rows; cold-start ids get the table mean.
    pub fn embed(&self, user: &str, item: &str) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let uv = match self.user_index.get(user) {
            Some(&u) => self.user_vecs[u * d..(u + 1) * d].to_vec(),
            None => Self::mean_rows(&self.user_vecs, d),
        };
        let iv = match self.item_index.get(item) {
            Some(&i) => self.item_vecs[i * d..(i + 1) * d].to_vec(),
            None => Self::mean_rows(&self.item_vecs, d),
        };
        (uv, iv)
    }

    /// Bit-exact hash over every table, for freezing contracts.
    pub fn value_hash(&self) -> u64 {
        crate::util::hash_f64s(
            self.user_vecs
                .iter()
                .chain(&self.item_vecs)
                .chain(&self.user_bias)
                .chain(&self.item_bias)
                .chain(std::iter::once(&self.global_bias)),
        )
    }

    /// Table writes for the fine-tuning variants that unfreeze the
    /// collaborative model.
    pub fn set_user_vec(&mut self, user: &str, v: &[f64]) -> bool {
        let d = self.dim;
        match self.user_index.get(user) {
            Some(&u) => {
                self.user_vecs[u * d..(u + 1) * d].copy_from_slice(v);
                true
            }
            None => false,
        }
    }

    pub fn set_item_vec(&mut self, item: &str, v: &[f64]) -> bool {
        let d = self.dim;
        match self.item_index.get(item) {
            Some(&i) => {
                self.item_vecs[i * d..(i + 1) * d].copy_from_slice(v);
                true
            }
            None => false,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let d = self.dim;
        let params = vec![
            Param::from_values(
                "collab.user_vecs",
                self.user_vecs.clone(),
                vec![self.n_users(), d],
            ),
            Param::from_values(
                "collab.item_vecs",
                self.item_vecs.clone(),
                vec![self.n_items(), d],
            ),
            Param::from_values("collab.user_bias", self.user_bias.clone(), vec![self.n_users()]),
            Param::from_values("collab.item_bias", self.item_bias.clone(), vec![self.n_items()]),
            Param::from_values("collab.global_bias", vec![self.global_bias], vec![1]),
        ];
        Checkpoint::from_params(params.iter())
            .with_meta("model", "collab_mf")
            .with_meta("dim", d)
            .with_meta(
                "users",
                serde_json::to_string(&self.user_index).unwrap_or_default(),
            )
            .with_meta(
                "items",
                serde_json::to_string(&self.item_index).unwrap_or_default(),
            )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CollabError> {
        let dim: usize = ck.meta_parse("dim")?;
        let user_index: BTreeMap<String, usize> = serde_json::from_str(
            ck.meta.get("users").ok_or_else(|| {
                CollabError::Contract("checkpoint missing user index".into())
            })?,
        )
        .map_err(|e| CollabError::Contract(format!("user index: {e}")))?;
        let item_index: BTreeMap<String, usize> = serde_json::from_str(
            ck.meta.get("items").ok_or_else(|| {
                CollabError::Contract("checkpoint missing item index".into())
            })?,
        )
        .map_err(|e| CollabError::Contract(format!("item index: {e}")))?;
        let get = |name: &str| -> Result<Vec<f64>, CollabError> {
            ck.params
                .get(name)
                .map(|t| t.values.clone())
                .ok_or_else(|| CollabError::Contract(format!("checkpoint missing '{name}'")))
        };
        Ok(Self {
            dim,
            user_index,
            item_index,
            user_vecs: get("collab.user_vecs")?,
            item_vecs: get("collab.item_vecs")?,
            user_bias: get("collab.user_bias")?,
            item_bias: get("collab.item_bias")?,
            global_bias: get("collab.global_bias")?[0],
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CollabError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, CollabError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// SGD over (user, candidate, label) triples: the positive target and each
/// sampled negative of every training sample, shuffled per epoch.
pub fn train_collab(
    train: &[SplitSample],
    cfg: &CollabConfig,
    seed: u64,
) -> Result<CollabParams, CollabError> {
    if train.is_empty() {
        return Err(CollabError::Contract("no training samples".into()));
    }
    let mut users: Vec<String> = Vec::new();
    let mut items: Vec<String> = Vec::new();
    {
        let mut useen = std::collections::BTreeSet::new();
        let mut iseen = std::collections::BTreeSet::new();
        for s in train {
            if useen.insert(s.user_id.clone()) {
                users.push(s.user_id.clone());
            }
            for it in s
                .history
                .iter()
                .chain(std::iter::once(&s.target))
                .chain(&s.negatives)
            {
                if iseen.insert(it.clone()) {
                    items.push(it.clone());
                }
            }
        }
        users.sort();
        items.sort();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = CollabParams::init(users, items, cfg.dim, &mut rng);

    let mut triples: Vec<(usize, usize, f64)> = Vec::new();
    for s in train {
        let u = *params.user_index.get(&s.user_id).ok_or_else(|| {
            CollabError::Contract(format!("unseen user '{}' during training", s.user_id))
        })?;
        let tgt = *params.item_index.get(&s.target).ok_or_else(|| {
            CollabError::Contract(format!("unseen item '{}' during training", s.target))
        })?;
        triples.push((u, tgt, 1.0));
        for n in &s.negatives {
            let ni = *params.item_index.get(n).ok_or_else(|| {
                CollabError::Contract(format!("unseen item '{n}' during training"))
            })?;
            triples.push((u, ni, 0.0));
        }
    }

    let n_pos = triples.iter().filter(|(_, _, y)| *y == 1.0).count().max(1);
    let n_neg = triples.len() - n_pos;
    let pos_weight = if cfg.balanced {
        n_neg as f64 / n_pos as f64
    } else {
        1.0
    };

    let d = cfg.dim;
    for _ in 0..cfg.epochs {
        triples.shuffle(&mut rng);
        for &(u, i, y) in &triples {
            let p = sigmoid(params.score_idx(u, i));
            let w = if y == 1.0 { pos_weight } else { 1.0 };
            let g = w * (p - y);
            let (us, ie) = (u * d, i * d);
            for j in 0..d {
                let uv = params.user_vecs[us + j];
                let iv = params.item_vecs[ie + j];
                params.user_vecs[us + j] -= cfg.lr * (g * iv + cfg.l2 * uv);
                params.item_vecs[ie + j] -= cfg.lr * (g * uv + cfg.l2 * iv);
            }
            params.user_bias[u] -= cfg.lr * (g + cfg.l2 * params.user_bias[u]);
            params.item_bias[i] -= cfg.lr * (g + cfg.l2 * params.item_bias[i]);
            params.global_bias -= cfg.lr * g;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{auc, RankedSample};
    use crate::synth::{generate, SynthConfig};
    use crate::data::{preprocess, split_leave_one_out, PreprocessConfig};

    fn synthetic_split(seed: u64) -> (Vec<SplitSample>, Vec<SplitSample>) {
        let data = generate(&SynthConfig {
            users: 60,
            items: 40,
            seed,
            ..Default::default()
        });
        let histories = preprocess(
            &data,
            &PreprocessConfig {
                min_user: 3,
                min_item: 2,
                trunc_lo: 4,
                trunc_hi: 12,
                ..Default::default()
            },
        )
        .unwrap();
        split_leave_one_out(&histories, 9, 3, seed).unwrap()
    }

    fn eval_auc(params: &CollabParams, test: &[SplitSample]) -> f64 {
        let samples: Vec<RankedSample> = test
            .iter()
            .map(|s| {
                let scores: Vec<f64> = s
                    .candidates()
                    .iter()
                    .map(|c| params.predict(&s.user_id, c))
                    .collect();
                RankedSample::new(scores, 0).unwrap()
            })
            .collect();
        auc(&samples).unwrap()
    }

    #[test]
    fn block_structured_data_reaches_high_auc() {
        let (train, test) = synthetic_split(5);
        let params = train_collab(&train, &CollabConfig::default(), 5).unwrap();
        let a = eval_auc(&params, &test);
        assert!(a > 0.8, "test auc {a} <= 0.8");
    }

    #[test]
    fn zero_epochs_is_chance_level() {
        let (train, test) = synthetic_split(6);
        let cfg = CollabConfig {
            epochs: 0,
            ..Default::default()
        };
        let params = train_collab(&train, &cfg, 6).unwrap();
        let a = eval_auc(&params, &test);
        assert!((a - 0.5).abs() < 0.05, "untrained auc {a} not within 0.5 +- 0.05");
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let (train, _) = synthetic_split(7);
        let a = train_collab(&train, &CollabConfig::default(), 7).unwrap();
        let b = train_collab(&train, &CollabConfig::default(), 7).unwrap();
        assert_eq!(a.value_hash(), b.value_hash());
    }

    #[test]
    fn predict_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = CollabParams::init(
            vec!["u".into()],
            vec!["i".into()],
            2,
            &mut rng,
        );
        params.user_vecs = vec![1.0, 1.0];
        params.item_vecs = vec![1.0, 1.0];
        // identical embeddings with squared norm 2, zero bias
        let p = params.predict("u", "i");
        assert!((p - sigmoid(2.0)).abs() < 1e-12);
        assert!((p - 0.8808).abs() < 1e-4);

        params.user_vecs = vec![0.0, 0.0];
        params.item_vecs = vec![0.0, 0.0];
        assert_eq!(params.predict("u", "i"), 0.5);
    }

    #[test]
    fn cold_start_returns_mean_embedding_and_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = CollabParams::init(
            vec!["u0".into(), "u1".into()],
            vec!["i0".into()],
            2,
            &mut rng,
        );
        assert_eq!(params.predict("stranger", "i0"), 0.5);
        let (uv, _) = params.embed("stranger", "i0");
        let want: Vec<f64> = (0..2)
            .map(|j| (params.user_vecs[j] + params.user_vecs[2 + j]) / 2.0)
            .collect();
        assert_eq!(uv, want);
    }

    #[test]
    fn ranking_by_probability_equals_ranking_by_raw_score() {
        let (train, test) = synthetic_split(8);
        let params = train_collab(&train, &CollabConfig { epochs: 3, ..Default::default() }, 8).unwrap();
        for s in test.iter().take(20) {
            let u = params.user_index[&s.user_id];
            let mut by_p: Vec<(usize, f64)> = Vec::new();
            let mut by_raw: Vec<(usize, f64)> = Vec::new();
            for (ci, c) in s.candidates().iter().enumerate() {
                let i = params.item_index[*c];
                by_p.push((ci, sigmoid(params.score_idx(u, i))));
                by_raw.push((ci, params.score_idx(u, i)));
            }
            by_p.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            by_raw.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let order_p: Vec<usize> = by_p.iter().map(|(i, _)| *i).collect();
            let order_raw: Vec<usize> = by_raw.iter().map(|(i, _)| *i).collect();
            assert_eq!(order_p, order_raw);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (train, test) = synthetic_split(9);
        let params = train_collab(&train, &CollabConfig { epochs: 2, ..Default::default() }, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("collab.json");
        params.save(&path).unwrap();
        let back = CollabParams::load(&path).unwrap();
        assert_eq!(params.value_hash(), back.value_hash());
        assert_eq!(eval_auc(&params, &test), eval_auc(&back, &test));
    }
}
