//! The recommendation language model: a two-layer recurrent LM over the
//! shared vocabulary with a low-rank adapter on its projection matrices, an
//! MLP mapper injecting collaborative vectors at the id-placeholder
//! positions, and the two-stage fine-tuning schedule with mechanically
//! enforced freezing contracts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collab::CollabParams;
use crate::nn::{
    Activation, Adam, AdamConfig, Checkpoint, LowRankAdapter, Mlp3, NnError, Param, Tape, Var,
};
use crate::prompt::{PromptInstance, NO, YES};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum RecError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which parameter groups the second fine-tuning phase unfreezes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecVariant {
    /// Strict two-stage: stage A trains the adapter, stage B only the mapper.
    #[serde(rename = "rec-ori")]
    RecOri,
    /// No collaborative signal at all: no vectors, no guidance, no stage B.
    #[serde(rename = "rec-col")]
    RecCol,
    /// Stage B trains adapter and mapper together.
    #[serde(rename = "rec-lora")]
    RecLora,
    /// Stage B trains the collaborative tables and the mapper.
    #[serde(rename = "rec-sm")]
    RecSm,
    /// Stage B trains adapter, collaborative tables and mapper.
    #[serde(rename = "rec-lora&sm")]
    RecLoraSm,
}

impl RecVariant {
    pub fn uses_collab(self) -> bool {
        !matches!(self, RecVariant::RecCol)
    }

    /// Parameter groups stage B may modify.
    pub fn stage_b_groups(self) -> &'static [&'static str] {
        match self {
            RecVariant::RecOri => &["mapper"],
            RecVariant::RecCol => &[],
            RecVariant::RecLora => &["adapter", "mapper"],
            RecVariant::RecSm => &["mapper", "collab"],
            RecVariant::RecLoraSm => &["adapter", "mapper", "collab"],
        }
    }
}

impl std::fmt::Display for RecVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RecVariant::RecOri => "rec-ori",
            RecVariant::RecCol => "rec-col",
            RecVariant::RecLora => "rec-lora",
            RecVariant::RecSm => "rec-sm",
            RecVariant::RecLoraSm => "rec-lora&sm",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecConfig {
    pub width: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub variant: RecVariant,
    pub pretrain_epochs: usize,
    pub stage_a_epochs: usize,
    pub stage_b_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_a: f64,
    pub lr_b: f64,
    pub batch: usize,
    /// Negatives sampled per positive when building training instances.
    pub neg_per_pos: usize,
    pub history_cap: usize,
    /// Train and evaluate on reconstructed titles; raw titles isolate the
    /// diversity contribution.
    pub use_reconstructed: bool,
    /// Fraction of training prompts rendered with the guidance slot empty,
    /// so the verdict token cannot become the only feature the readout
    /// uses. Evaluation prompts always carry guidance.
    #[serde(default = "default_guidance_dropout")]
    pub guidance_dropout: f64,
    pub seed: u64,
}

fn default_guidance_dropout() -> f64 {
    0.5
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            width: 64,
            adapter_rank: 4,
            adapter_scale: 1.0,
            variant: RecVariant::RecOri,
            pretrain_epochs: 2,
            stage_a_epochs: 3,
            stage_b_epochs: 3,
            lr_pretrain: 3e-3,
            lr_a: 3e-3,
            lr_b: 3e-3,
            // the full-scale reference setting is batch 64 at lr 2e-4
            batch: 32,
            neg_per_pos: 1,
            history_cap: 10,
            use_reconstructed: true,
            guidance_dropout: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Cell {
    w_ih: Param,
    w_hh: Param,
    b: Param,
}

impl Cell {
    fn new(prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_ih: Param::uniform(format!("{prefix}.w_ih"), vec![d, d], d, rng),
            w_hh: Param::uniform(format!("{prefix}.w_hh"), vec![d, d], d, rng),
            b: Param::zeros(format!("{prefix}.b"), vec![d]),
        }
    }

    fn step(
        &self,
        adapter: &LowRankAdapter,
        tape: &mut Tape,
        x: Var,
        h: Var,
    ) -> Result<Var, NnError> {
        let xi = adapter.matmul(tape, x, &self.w_ih)?;
        let hh = adapter.matmul(tape, h, &self.w_hh)?;
        let b = tape.param(&self.b);
        let z = tape.add(xi, hh)?;
        let z = tape.add_row(z, b)?;
        Ok(tape.tanh(z))
    }
}

/// Yes/no verdict read at the answer slot.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Prediction {
    pub p_yes: f64,
    pub logit_yes: f64,
    pub logit_no: f64,
}

impl Prediction {
    pub fn p_no(&self) -> f64 {
        1.0 - self.p_yes
    }
}

/// One labeled training prompt plus the ids needed to fetch collaborative
/// vectors.
#[derive(Debug, Clone)]
pub struct RecInstance {
    pub user_id: String,
    pub item_id: String,
    pub prompt: PromptInstance,
    pub label: bool,
}

/// Per-stage training log plus the before/after hash of every parameter
/// group, so freezing contracts are checked on every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub epoch_losses: Vec<f64>,
    pub hashes_before: BTreeMap<String, u64>,
    pub hashes_after: BTreeMap<String, u64>,
}

impl StageReport {
    /// Groups whose hash changed during the stage.
    pub fn changed_groups(&self) -> Vec<&str> {
        self.hashes_before
            .iter()
            .filter(|(k, v)| self.hashes_after.get(*k) != Some(v))
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

pub struct RecModel {
    pub width: usize,
    pub vocab_size: usize,
    pub collab_dim: usize,
    embed: Param,
    cells: Vec<Cell>,
    w_out: Param,
    b_out: Param,
    pub adapter: LowRankAdapter,
    pub mapper: Mlp3,
}

impl RecModel {
    pub fn new(cfg: &RecConfig, vocab_size: usize, collab_dim: usize) -> Result<Self, RecError> {
        let d = cfg.width;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "rec.init"));
        let embed = Param::uniform("rec.embed", vec![vocab_size, d], d, &mut rng);
        let cells = vec![
            Cell::new("rec.l0", d, &mut rng),
            Cell::new("rec.l1", d, &mut rng),
        ];
        let w_out = Param::uniform("rec.w_out", vec![d, vocab_size], d, &mut rng);
        let b_out = Param::zeros("rec.b_out", vec![vocab_size]);
        let mut adapter = LowRankAdapter::new(cfg.adapter_rank, cfg.adapter_scale);
        for cell in &cells {
            adapter.attach(&cell.w_ih, &mut rng)?;
            adapter.attach(&cell.w_hh, &mut rng)?;
        }
        adapter.attach(&w_out, &mut rng)?;
        let mapper = Mlp3::new(
            "map",
            [collab_dim, d, d, d],
            [Activation::Relu, Activation::Relu, Activation::Identity],
            &mut rng,
        );
        Ok(Self {
            width: d,
            vocab_size,
            collab_dim,
            embed,
            cells,
            w_out,
            b_out,
            adapter,
            mapper,
        })
    }

    fn base_params(&self) -> Vec<&Param> {
        let mut out = vec![&self.embed];
        for c in &self.cells {
            out.extend([&c.w_ih, &c.w_hh, &c.b]);
        }
        out.push(&self.w_out);
        out.push(&self.b_out);
        out
    }

    pub fn all_params(&self) -> Vec<&Param> {
        let mut out = self.base_params();
        out.extend(self.adapter.params());
        out.extend(self.mapper.params());
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        // split borrows: collect names via two passes
        let mut out: Vec<&mut Param> = Vec::new();
        out.push(&mut self.embed);
        for c in &mut self.cells {
            out.extend([&mut c.w_ih, &mut c.w_hh, &mut c.b]);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out.extend(self.adapter.params_mut());
        out.extend(self.mapper.params_mut());
        out
    }

    /// Bit-exact hash of one parameter group: "base", "adapter" or "mapper".
    pub fn group_hash(&self, group: &str) -> u64 {
        let params: Vec<&Param> = match group {
            "base" => self.base_params(),
            "adapter" => self.adapter.params(),
            "mapper" => self.mapper.params(),
            _ => Vec::new(),
        };
        crate::util::hash_f64s(params.iter().flat_map(|p| p.data.iter()))
    }

    fn group_names(&self, group: &str) -> Vec<String> {
        let params: Vec<&Param> = match group {
            "base" => self.base_params(),
            "adapter" => self.adapter.params(),
            "mapper" => self.mapper.params(),
            _ => Vec::new(),
        };
        params.iter().map(|p| p.name.clone()).collect()
    }

    /// Hidden states over a prompt, optionally with mapped collaborative
    /// vectors overwriting the embedding rows at the `<userid>` and
    /// `<targetid>` positions. Returns the final hidden state as `(1, d)`.
    fn final_hidden(
        &self,
        tape: &mut Tape,
        inst: &PromptInstance,
        vectors: Option<(Var, Var)>,
    ) -> Result<Var, RecError> {
        if inst.tokens.is_empty() {
            return Err(RecError::Contract("empty prompt".into()));
        }
        let d = self.width;
        let (user_pos, target_pos) = match vectors {
            Some(_) => {
                let ups = inst.userid_positions();
                let tps = inst.targetid_positions();
                if ups.len() != 1 || tps.len() != 1 {
                    return Err(RecError::Contract(
                        "vectors supplied but prompt lacks unique <userid>/<targetid> \
                         placeholders"
                            .into(),
                    ));
                }
                (Some(ups[0]), Some(tps[0]))
            }
            None => (None, None),
        };
        let table = tape.param(&self.embed);
        let emb = tape.embed(table, &inst.tokens)?;

        let (mapped_u, mapped_i) = match vectors {
            Some((uv, iv)) => {
                let mu = self.mapper.forward(tape, uv)?;
                let mi = self.mapper.forward(tape, iv)?;
                (Some(mu), Some(mi))
            }
            None => (None, None),
        };

        let mut states: Vec<Var> = self
            .cells
            .iter()
            .map(|_| tape.constant(vec![0.0; d], vec![1, d]))
            .collect();
        for (t, _) in inst.tokens.iter().enumerate() {
            let mut x = if Some(t) == user_pos {
                mapped_u.unwrap()
            } else if Some(t) == target_pos {
                mapped_i.unwrap()
            } else {
                tape.row(emb, t)?
            };
            x = tape.reshape(x, vec![1, d])?;
            for (l, cell) in self.cells.iter().enumerate() {
                let h = cell.step(&self.adapter, tape, x, states[l])?;
                states[l] = h;
                x = h;
            }
        }
        Ok(*states.last().unwrap())
    }

    /// The yes-probability on the tape: softmax over the YES/NO logits read
    /// after the final token, computed as `sigmoid(logit_yes - logit_no)`.
    fn p_yes_var(
        &self,
        tape: &mut Tape,
        inst: &PromptInstance,
        vectors: Option<(Var, Var)>,
    ) -> Result<Var, RecError> {
        let h = self.final_hidden(tape, inst, vectors)?;
        let logits = self.adapter.matmul(tape, h, &self.w_out)?;
        let b = tape.param(&self.b_out);
        let logits = tape.add_row(logits, b)?;
        let flat = tape.reshape(logits, vec![self.vocab_size])?;
        let mut mask_yes = vec![0.0; self.vocab_size];
        mask_yes[YES] = 1.0;
        let mut mask_no = vec![0.0; self.vocab_size];
        mask_no[NO] = 1.0;
        let my = tape.constant(mask_yes, vec![self.vocab_size]);
        let mn = tape.constant(mask_no, vec![self.vocab_size]);
        let ly_v = tape.mul(flat, my)?;
        let ly = tape.sum(ly_v);
        let ln_v = tape.mul(flat, mn)?;
        let ln = tape.sum(ln_v);
        let diff = tape.sub(ly, ln)?;
        Ok(tape.sigmoid(diff))
    }

    /// Score one prompt. Pure in the parameters, instance and vectors.
    pub fn predict(
        &self,
        inst: &PromptInstance,
        vectors: Option<(&[f64], &[f64])>,
    ) -> Result<Prediction, RecError> {
        let mut tape = Tape::new();
        let vec_vars = match vectors {
            Some((u, i)) => {
                if u.len() != self.collab_dim || i.len() != self.collab_dim {
                    return Err(RecError::Contract(format!(
                        "collaborative vectors must have dim {}, got {} and {}",
                        self.collab_dim,
                        u.len(),
                        i.len()
                    )));
                }
                let uv = tape.constant(u.to_vec(), vec![self.collab_dim]);
                let iv = tape.constant(i.to_vec(), vec![self.collab_dim]);
                Some((uv, iv))
            }
            None => None,
        };
        let h = self.final_hidden(&mut tape, inst, vec_vars)?;
        let logits = self.adapter.matmul(&mut tape, h, &self.w_out)?;
        let b = tape.param(&self.b_out);
        let logits = tape.add_row(logits, b)?;
        let row = tape.value(logits);
        let (ly, ln) = (row[YES], row[NO]);
        let p_yes = 1.0 / (1.0 + (ln - ly).exp());
        Ok(Prediction {
            p_yes,
            logit_yes: ly,
            logit_no: ln,
        })
    }

    /// Short next-token language-model pass over raw prompt token streams,
    /// training every base parameter. Runs before stage A so the adapter
    /// starts from a non-degenerate model.
    pub fn pretrain_lm(
        &mut self,
        sequences: &[Vec<usize>],
        cfg: &RecConfig,
    ) -> Result<Vec<f64>, RecError> {
        let seqs: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
        if seqs.is_empty() {
            return Err(RecError::Contract(
                "pretraining needs sequences of length >= 2".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "rec.pretrain"));
        let mut opt = Adam::new(AdamConfig::adam(cfg.lr_pretrain), self.group_names("base"));
        let mut losses = Vec::new();
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        for _ in 0..cfg.pretrain_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch.max(1)) {
                let mut tape = Tape::new();
                let mut per = Vec::with_capacity(chunk.len());
                for &si in chunk {
                    let seq = seqs[si];
                    let d = self.width;
                    let table = tape.param(&self.embed);
                    let emb = tape.embed(table, &seq[..seq.len() - 1])?;
                    let mut states: Vec<Var> = self
                        .cells
                        .iter()
                        .map(|_| tape.constant(vec![0.0; d], vec![1, d]))
                        .collect();
                    let mut rows = Vec::with_capacity(seq.len() - 1);
                    for t in 0..seq.len() - 1 {
                        let mut x = tape.row(emb, t)?;
                        x = tape.reshape(x, vec![1, d])?;
                        for (l, cell) in self.cells.iter().enumerate() {
                            let h = cell.step(&self.adapter, &mut tape, x, states[l])?;
                            states[l] = h;
                            x = h;
                        }
                        let flat = tape.reshape(x, vec![d])?;
                        rows.push(flat);
                    }
                    let hidden = tape.stack_rows(&rows)?;
                    let logits = self.adapter.matmul(&mut tape, hidden, &self.w_out)?;
                    let b = tape.param(&self.b_out);
                    let logits = tape.add_row(logits, b)?;
                    let ce = tape.ce_loss(logits, &seq[1..])?;
                    per.push(ce);
                }
                let stacked = tape.stack_rows(&per)?;
                let loss = tape.mean(stacked);
                total += tape.scalar_value(loss) * chunk.len() as f64;
                let grads = tape.backward(loss)?;
                opt.step(self.all_params_mut(), &grads)?;
            }
            losses.push(total / seqs.len() as f64);
        }
        Ok(losses)
    }

    fn run_stage(
        &mut self,
        stage: &str,
        instances: &[RecInstance],
        collab: Option<&mut CollabParams>,
        trainable_groups: &[&str],
        epochs: usize,
        lr: f64,
        cfg: &RecConfig,
    ) -> Result<StageReport, RecError> {
        if instances.is_empty() {
            return Err(RecError::Contract(format!("{stage}: no instances")));
        }
        let mut collab = collab;
        let collab_hash_before = collab.as_deref().map(|c| c.value_hash()).unwrap_or(0);
        let mut hashes_before: BTreeMap<String, u64> = ["base", "adapter", "mapper"]
            .iter()
            .map(|g| (g.to_string(), self.group_hash(g)))
            .collect();
        hashes_before.insert("collab".into(), collab_hash_before);

        let mut trainable: Vec<String> = Vec::new();
        for g in trainable_groups {
            if *g != "collab" {
                trainable.extend(self.group_names(g));
            }
        }
        let train_collab = trainable_groups.contains(&"collab");
        // lazily materialized collaborative rows bound as tape parameters
        let mut collab_rows: BTreeMap<String, Param> = BTreeMap::new();

        let mut opt = Adam::new(AdamConfig::adam(lr), trainable.iter().cloned());
        let mut collab_opt = Adam::new(AdamConfig::adam(lr), Vec::new());

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage));
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut epoch_losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch.max(1)) {
                let mut tape = Tape::new();
                let mut p_vars = Vec::with_capacity(chunk.len());
                let mut labels = Vec::with_capacity(chunk.len());
                let mut bound_rows: Vec<String> = Vec::new();
                for &ii in chunk {
                    let inst = &instances[ii];
                    let vec_vars = match (&collab, cfg.variant.uses_collab()) {
                        (Some(c), true) => {
                            let (uv, iv) = c.embed(&inst.user_id, &inst.item_id);
                            if train_collab {
                                let ukey = format!("collab.user.{}", inst.user_id);
                                let ikey = format!("collab.item.{}", inst.item_id);
                                for (key, data) in [(&ukey, uv), (&ikey, iv)] {
                                    collab_rows.entry(key.clone()).or_insert_with(|| {
                                        Param::from_values(
                                            key.clone(),
                                            data.clone(),
                                            vec![data.len()],
                                        )
                                    });
                                    if !bound_rows.contains(key) {
                                        bound_rows.push(key.clone());
                                    }
                                }
                                let uvar = tape.param(&collab_rows[&ukey]);
                                let ivar = tape.param(&collab_rows[&ikey]);
                                Some((uvar, ivar))
                            } else {
                                let uvar = tape.constant(uv, vec![self.collab_dim]);
                                let ivar = tape.constant(iv, vec![self.collab_dim]);
                                Some((uvar, ivar))
                            }
                        }
                        _ => None,
                    };
                    let p = self.p_yes_var(&mut tape, &inst.prompt, vec_vars)?;
                    p_vars.push(p);
                    labels.push(if inst.label { 1.0 } else { 0.0 });
                }
                let stacked = tape.stack_rows(&p_vars)?;
                let flat = tape.reshape(stacked, vec![p_vars.len()])?;
                let loss = tape.bce_loss(flat, &labels)?;
                total += tape.scalar_value(loss) * chunk.len() as f64;
                let grads = tape.backward(loss)?;
                opt.step(self.all_params_mut(), &grads)?;
                if train_collab && !bound_rows.is_empty() {
                    for k in bound_rows {
                        collab_opt.add_trainable(k);
                    }
                    collab_opt.step(collab_rows.values_mut(), &grads)?;
                }
            }
            epoch_losses.push(total / instances.len() as f64);
        }

        if train_collab {
            if let Some(c) = collab.as_deref_mut() {
                for (key, p) in &collab_rows {
                    if let Some(uid) = key.strip_prefix("collab.user.") {
                        c.set_user_vec(uid, &p.data);
                    } else if let Some(iid) = key.strip_prefix("collab.item.") {
                        c.set_item_vec(iid, &p.data);
                    }
                }
            }
        }

        let collab_hash_after = collab.as_deref().map(|c| c.value_hash()).unwrap_or(0);
        let mut hashes_after: BTreeMap<String, u64> = ["base", "adapter", "mapper"]
            .iter()
            .map(|g| (g.to_string(), self.group_hash(g)))
            .collect();
        hashes_after.insert("collab".into(), collab_hash_after);

        Ok(StageReport {
            stage: stage.to_string(),
            epoch_losses,
            hashes_before,
            hashes_after,
        })
    }

    /// Stage A: adapter-only BCE fine-tuning on text prompts (guidance
    /// absent, no injected vectors). Base weights, mapper and collaborative
    /// tables stay frozen; the returned report carries the hash evidence.
    pub fn finetune_stage_a(
        &mut self,
        instances: &[RecInstance],
        cfg: &RecConfig,
    ) -> Result<StageReport, RecError> {
        let report = self.run_stage(
            "stage_a",
            instances,
            None,
            &["adapter"],
            cfg.stage_a_epochs,
            cfg.lr_a,
            cfg,
        )?;
        let changed = report.changed_groups();
        if changed.iter().any(|g| *g != "adapter") {
            return Err(RecError::Contract(format!(
                "stage A modified frozen groups: {changed:?}"
            )));
        }
        Ok(report)
    }

    /// Stage B: collaborative-injection fine-tuning. The variant picks the
    /// unfrozen groups; the strict two-stage default trains only the mapper.
    pub fn finetune_stage_b(
        &mut self,
        instances: &[RecInstance],
        collab: Option<&mut CollabParams>,
        cfg: &RecConfig,
    ) -> Result<StageReport, RecError> {
        let groups = cfg.variant.stage_b_groups();
        if groups.is_empty() {
            // Rec-col: stage B is a no-op
            let hashes: BTreeMap<String, u64> = ["base", "adapter", "mapper"]
                .iter()
                .map(|g| (g.to_string(), self.group_hash(g)))
                .chain(std::iter::once(("collab".to_string(), 0)))
                .collect();
            return Ok(StageReport {
                stage: "stage_b".into(),
                epoch_losses: Vec::new(),
                hashes_before: hashes.clone(),
                hashes_after: hashes,
            });
        }
        if cfg.variant.uses_collab() && collab.is_none() {
            return Err(RecError::Contract(
                "stage B requires collaborative parameters".into(),
            ));
        }
        let report = self.run_stage(
            "stage_b",
            instances,
            collab,
            groups,
            cfg.stage_b_epochs,
            cfg.lr_b,
            cfg,
        )?;
        let changed = report.changed_groups();
        if changed.iter().any(|g| !groups.contains(g)) {
            return Err(RecError::Contract(format!(
                "stage B ({}) modified frozen groups: {changed:?}",
                cfg.variant
            )));
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.all_params())
            .with_meta("model", "rec_lm")
            .with_meta("width", self.width)
            .with_meta("vocab_size", self.vocab_size)
            .with_meta("collab_dim", self.collab_dim)
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RecConfig) -> Result<Self, RecError> {
        let width: usize = ck.meta_parse("width")?;
        let vocab_size = ck.meta_parse("vocab_size")?;
        let collab_dim = ck.meta_parse("collab_dim")?;
        if width != cfg.width {
            return Err(RecError::Contract(format!(
                "checkpoint width {width} != config width {}",
                cfg.width
            )));
        }
        let mut model = Self::new(cfg, vocab_size, collab_dim)?;
        ck.restore_into(model.all_params_mut())?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{
        render_rec_prompt, template_corpus, Guidance, Templates, Tokenizer, TokenizerConfig,
    };

    fn toolkit() -> (Tokenizer, Templates) {
        let templates = Templates::default();
        let mut corpus = template_corpus(&templates);
        corpus.push("alpha bravo stone river cloud ember frost gale one two three four".into());
        let refs: Vec<&str> = corpus.iter().map(|s| s.as_str()).collect();
        (
            Tokenizer::build(refs, &TokenizerConfig::default()).unwrap(),
            templates,
        )
    }

    fn small_cfg(seed: u64) -> RecConfig {
        RecConfig {
            width: 16,
            batch: 8,
            pretrain_epochs: 1,
            stage_a_epochs: 2,
            stage_b_epochs: 2,
            seed,
            ..Default::default()
        }
    }

    fn prompt(tok: &Tokenizer, tpl: &Templates, hist: &str, target: &str, g: Guidance) -> PromptInstance {
        render_rec_prompt(tok, tpl, &[hist.to_string()], target, g, 10).unwrap()
    }

    /// Separable toy task: every user likes "alpha" items and passes on
    /// "bravo" items.
    fn toy_instances(tok: &Tokenizer, tpl: &Templates, n: usize) -> Vec<RecInstance> {
        let hists = ["stone river", "cloud ember", "frost gale", "stone gale"];
        let mut out = Vec::new();
        for k in 0..n {
            let hist = hists[k % hists.len()];
            out.push(RecInstance {
                user_id: format!("u{k}"),
                item_id: format!("p{k}"),
                prompt: prompt(tok, tpl, hist, "alpha cloud", Guidance::Absent),
                label: true,
            });
            out.push(RecInstance {
                user_id: format!("u{k}"),
                item_id: format!("n{k}"),
                prompt: prompt(tok, tpl, hist, "bravo ember", Guidance::Absent),
                label: false,
            });
        }
        out
    }

    #[test]
    fn untrained_predictions_hover_near_half() {
        let (tok, tpl) = toolkit();
        let cfg = small_cfg(0);
        let model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let insts = toy_instances(&tok, &tpl, 10);
        let mean: f64 = insts
            .iter()
            .map(|i| model.predict(&i.prompt, None).unwrap().p_yes)
            .sum::<f64>()
            / insts.len() as f64;
        assert!((mean - 0.5).abs() < 0.2, "untrained mean p_yes {mean}");
    }

    #[test]
    fn p_yes_plus_p_no_is_one_and_matches_two_way_softmax() {
        let (tok, tpl) = toolkit();
        let cfg = small_cfg(1);
        let model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let inst = prompt(&tok, &tpl, "alpha stone", "bravo ember", Guidance::Yes);
        let p = model.predict(&inst, None).unwrap();
        assert!((p.p_yes + p.p_no() - 1.0).abs() < 1e-9);
        let e_yes = p.logit_yes.exp();
        let e_no = p.logit_no.exp();
        let softmax_yes = e_yes / (e_yes + e_no);
        assert!((p.p_yes - softmax_yes).abs() < 1e-9);
    }

    #[test]
    fn predict_is_pure_and_order_invariant() {
        let (tok, tpl) = toolkit();
        let cfg = small_cfg(2);
        let model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let a = prompt(&tok, &tpl, "alpha stone", "alpha cloud", Guidance::Absent);
        let b = prompt(&tok, &tpl, "alpha stone", "bravo ember", Guidance::Absent);
        let pa1 = model.predict(&a, None).unwrap().p_yes;
        let pb1 = model.predict(&b, None).unwrap().p_yes;
        let pb2 = model.predict(&b, None).unwrap().p_yes;
        let pa2 = model.predict(&a, None).unwrap().p_yes;
        assert_eq!(pa1, pa2);
        assert_eq!(pb1, pb2);
    }

    #[test]
    fn vectors_without_placeholders_is_contract_error() {
        let (tok, _) = toolkit();
        let cfg = small_cfg(3);
        let model = RecModel::new(&cfg, tok.vocab_size(), 4).unwrap();
        let inst = PromptInstance {
            kind: crate::prompt::TemplateKind::Recommendation,
            tokens: tok.encode("no placeholders here"),
            slots: BTreeMap::new(),
            label: None,
        };
        let u = vec![0.0; 4];
        let i = vec![0.0; 4];
        assert!(matches!(
            model.predict(&inst, Some((&u, &i))),
            Err(RecError::Contract(_))
        ));
    }

    #[test]
    fn pretraining_reduces_lm_loss() {
        let (tok, tpl) = toolkit();
        let mut cfg = small_cfg(4);
        cfg.pretrain_epochs = 4;
        let mut model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let seqs: Vec<Vec<usize>> = toy_instances(&tok, &tpl, 6)
            .into_iter()
            .map(|i| i.prompt.tokens)
            .collect();
        let losses = model.pretrain_lm(&seqs, &cfg).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn stage_a_changes_only_adapter_and_learns() {
        let (tok, tpl) = toolkit();
        let mut cfg = small_cfg(5);
        cfg.stage_a_epochs = 6;
        cfg.lr_a = 1e-2;
        let mut model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let insts = toy_instances(&tok, &tpl, 12);
        let seqs: Vec<Vec<usize>> = insts.iter().map(|i| i.prompt.tokens.clone()).collect();
        model.pretrain_lm(&seqs, &cfg).unwrap();

        let base_before = model.group_hash("base");
        let mapper_before = model.group_hash("mapper");
        let report = model.finetune_stage_a(&insts, &cfg).unwrap();
        assert_eq!(model.group_hash("base"), base_before);
        assert_eq!(model.group_hash("mapper"), mapper_before);
        assert_eq!(report.changed_groups(), vec!["adapter"]);
        // training loss decreases over the first epochs
        assert!(
            report.epoch_losses[report.epoch_losses.len() - 1] < report.epoch_losses[0],
            "losses {:?}",
            report.epoch_losses
        );
    }

    #[test]
    fn trained_model_prefers_liked_candidates() {
        let (tok, tpl) = toolkit();
        let mut cfg = small_cfg(6);
        cfg.pretrain_epochs = 4;
        cfg.stage_a_epochs = 10;
        cfg.lr_pretrain = 5e-3;
        cfg.lr_a = 1e-2;
        let mut model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let insts = toy_instances(&tok, &tpl, 16);
        // language-model pass over the positive prompts only, so histories
        // predict the targets users actually took
        let seqs: Vec<Vec<usize>> = insts
            .iter()
            .filter(|i| i.label)
            .map(|i| i.prompt.tokens.clone())
            .collect();
        model.pretrain_lm(&seqs, &cfg).unwrap();
        model.finetune_stage_a(&insts, &cfg).unwrap();

        // swapping the candidate item swaps which instance scores higher
        let liked = prompt(&tok, &tpl, "stone river", "alpha cloud", Guidance::Absent);
        let passed = prompt(&tok, &tpl, "stone river", "bravo ember", Guidance::Absent);
        let pl = model.predict(&liked, None).unwrap().p_yes;
        let pp = model.predict(&passed, None).unwrap().p_yes;
        assert!(pl > pp, "liked {pl} vs passed {pp}");
    }

    #[test]
    fn stage_b_strict_variant_changes_only_mapper() {
        let (tok, tpl) = toolkit();
        let cfg = small_cfg(7);
        let mut model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let mut insts = toy_instances(&tok, &tpl, 8);
        for inst in &mut insts {
            let g = if inst.label { Guidance::Yes } else { Guidance::No };
            inst.prompt = prompt(&tok, &tpl, "alpha stone", "alpha cloud", g);
        }
        let mut collab = dummy_collab(&insts, 8);
        let adapter_before = model.group_hash("adapter");
        let base_before = model.group_hash("base");
        let collab_before = collab.value_hash();
        let report = model
            .finetune_stage_b(&insts, Some(&mut collab), &cfg)
            .unwrap();
        assert_eq!(model.group_hash("adapter"), adapter_before);
        assert_eq!(model.group_hash("base"), base_before);
        assert_eq!(collab.value_hash(), collab_before);
        assert_eq!(report.changed_groups(), vec!["mapper"]);
    }

    #[test]
    fn stage_b_variants_unfreeze_exactly_their_groups() {
        let (tok, tpl) = toolkit();
        for (variant, expect) in [
            (RecVariant::RecLora, vec!["adapter", "mapper"]),
            (RecVariant::RecSm, vec!["collab", "mapper"]),
            (RecVariant::RecLoraSm, vec!["adapter", "collab", "mapper"]),
        ] {
            let mut cfg = small_cfg(8);
            cfg.variant = variant;
            cfg.lr_b = 5e-2;
            let mut model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
            let mut insts = toy_instances(&tok, &tpl, 8);
            for inst in &mut insts {
                let g = if inst.label { Guidance::Yes } else { Guidance::No };
                inst.prompt = prompt(&tok, &tpl, "alpha stone", "alpha cloud", g);
            }
            let mut collab = dummy_collab(&insts, 8);
            let report = model
                .finetune_stage_b(&insts, Some(&mut collab), &cfg)
                .unwrap();
            let mut changed = report.changed_groups();
            changed.sort();
            assert_eq!(changed, expect, "variant {variant}");
        }
    }

    #[test]
    fn rec_col_stage_b_is_noop() {
        let (tok, tpl) = toolkit();
        let mut cfg = small_cfg(9);
        cfg.variant = RecVariant::RecCol;
        let mut model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let insts = toy_instances(&tok, &tpl, 4);
        let before: Vec<u64> = ["base", "adapter", "mapper"]
            .iter()
            .map(|g| model.group_hash(g))
            .collect();
        let report = model.finetune_stage_b(&insts, None, &cfg).unwrap();
        let after: Vec<u64> = ["base", "adapter", "mapper"]
            .iter()
            .map(|g| model.group_hash(g))
            .collect();
        assert_eq!(before, after);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let (tok, tpl) = toolkit();
        let cfg = small_cfg(10);
        let model = RecModel::new(&cfg, tok.vocab_size(), 8).unwrap();
        let inst = prompt(&tok, &tpl, "alpha stone", "bravo ember", Guidance::Yes);
        let ck = model.to_checkpoint();
        let back = RecModel::from_checkpoint(&ck, &cfg).unwrap();
        let a = model.predict(&inst, None).unwrap();
        let b = back.predict(&inst, None).unwrap();
        assert_eq!(a.p_yes.to_bits(), b.p_yes.to_bits());
    }

    fn dummy_collab(insts: &[RecInstance], dim: usize) -> CollabParams {
        use crate::data::SplitSample;
        // build a tiny split so train_collab can mint tables over these ids
        let mut samples = Vec::new();
        for inst in insts {
            samples.push(SplitSample {
                user_id: inst.user_id.clone(),
                history: vec![inst.item_id.clone()],
                history_titles: vec!["t".into()],
                target: inst.item_id.clone(),
                target_title: "t".into(),
                negatives: insts.iter().map(|i| i.item_id.clone()).take(3).collect(),
                negative_titles: vec!["t".into(); 3],
            });
        }
        crate::collab::train_collab(
            &samples,
            &crate::collab::CollabConfig {
                dim,
                epochs: 0,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }
}
