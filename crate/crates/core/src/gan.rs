//! Adversarial training of the diversity encoder: the sequence autoencoder
//! is the generator, a three-layer MLP over pooled embeddings is the
//! discriminator, and the generator loss couples reconstruction
//! cross-entropy with the weighted diversity constraint over cross-class
//! pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrs::{GanCorpora, GanRecord};
use crate::diversity::{
    batch_diversity_report, constraint_t, DivError, DivergenceConfig, DiversityReport,
    EmbeddingBatch,
};
use crate::nn::{
    Activation, Adam, AdamConfig, Checkpoint, EncoderKind, Mlp3, NnError, Param,
    SeqEncoderDecoder, Tape,
};
use crate::prompt::{Tokenizer, BOS, EOS};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at epoch {epoch}; state restored to the last good checkpoint")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Div(#[from] DivError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    pub encoder: EncoderKind,
    pub width: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub paper_literal_sign: bool,
    /// Adds the non-saturating confusion term so discriminator gradients
    /// reach the generator; off by default.
    #[serde(default)]
    pub adversarial_confusion: bool,
    pub disc_steps: usize,
    pub gen_steps: usize,
    pub epochs: usize,
    /// Autoencoder-only warmup epochs over single titles before the
    /// adversarial phase.
    pub pretrain_epochs: usize,
    pub batch: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    /// Upper bound on cross-class pairs sampled per generator step.
    pub max_pairs: usize,
    /// Held-out fraction of records used as the diversity probe.
    pub probe_fraction: f64,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    pub disc_hidden: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Recurrent,
            width: 64,
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            paper_literal_sign: false,
            adversarial_confusion: false,
            disc_steps: 1,
            gen_steps: 1,
            epochs: 10,
            pretrain_epochs: 20,
            // desk-scale overrides; the full-scale reference settings are
            // batch 256 at lr 1e-5
            batch: 32,
            lr_gen: 1e-3,
            lr_disc: 1e-3,
            max_pairs: 256,
            probe_fraction: 0.15,
            early_stop_delta: 1e-4,
            early_stop_patience: 3,
            disc_hidden: 64,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn divergence(&self) -> DivergenceConfig {
        DivergenceConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            paper_literal_sign: self.paper_literal_sign,
            ..Default::default()
        }
    }
}

/// Generator + discriminator + their optimizers and the training clock.
pub struct GanState {
    pub generator: SeqEncoderDecoder,
    pub discriminator: Mlp3,
    pub cfg: GanConfig,
    pub n_classes: usize,
    pub epochs_trained: usize,
    rng: ChaCha8Rng,
    opt_gen: Adam,
    opt_disc: Adam,
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_g: f64,
    pub l_d: f64,
    pub disc_accuracy: f64,
    pub probe: DiversityReport,
}

/// Everything a training run reports: the untrained baseline probe plus
/// one entry per completed epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanRunReport {
    pub baseline_probe: DiversityReport,
    pub baseline_accuracy: f64,
    pub epochs: Vec<EpochMetrics>,
}

impl GanState {
    pub fn new(cfg: GanConfig, vocab_size: usize, n_classes: usize) -> Result<Self, GanError> {
        if n_classes < 2 {
            return Err(GanError::Contract(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gan.init"));
        let generator = SeqEncoderDecoder::new(
            "gen",
            cfg.encoder,
            vocab_size,
            cfg.width,
            BOS,
            EOS,
            &mut rng,
        );
        let discriminator = Mlp3::new(
            "disc",
            [cfg.width, cfg.disc_hidden, cfg.disc_hidden, n_classes],
            [Activation::Relu, Activation::Relu, Activation::Identity],
            &mut rng,
        );
        let opt_gen = Adam::new(
            AdamConfig::adam(cfg.lr_gen),
            generator.params().iter().map(|p| p.name.clone()),
        );
        let opt_disc = Adam::new(
            AdamConfig::adam(cfg.lr_disc),
            discriminator.params().iter().map(|p| p.name.clone()),
        );
        let train_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gan.train"));
        Ok(Self {
            generator,
            discriminator,
            cfg,
            n_classes,
            epochs_trained: 0,
            rng: train_rng,
            opt_gen,
            opt_disc,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.epochs_trained > 0
    }

    /// Pooled encoder outputs for a list of records, gradient-free.
    pub fn encode_batch(&self, records: &[&GanRecord]) -> Result<EmbeddingBatch, GanError> {
        if records.is_empty() {
            return Err(GanError::Contract("encode_batch of empty batch".into()));
        }
        let mut vectors = Vec::with_capacity(records.len());
        let mut class_ids = Vec::with_capacity(records.len());
        let mut sample_ids = Vec::with_capacity(records.len());
        for r in records {
            vectors.push(self.generator.encode_values(&r.prompt_tokens)?);
            class_ids.push(r.class_id);
            sample_ids.push(format!("{}#{}", r.sample_id, r.class_id));
        }
        Ok(EmbeddingBatch::new(vectors, class_ids, sample_ids))
    }

    /// Mean multiclass cross-entropy of the discriminator on a detached
    /// embedding batch.
    pub fn discriminator_loss(&self, batch: &EmbeddingBatch) -> Result<f64, GanError> {
        let (loss, _, _) = self.disc_loss_tape(batch)?;
        Ok(loss)
    }

    fn disc_loss_tape(
        &self,
        batch: &EmbeddingBatch,
    ) -> Result<(f64, Tape, crate::nn::Var), GanError> {
        for &c in &batch.class_ids {
            if c >= self.n_classes {
                return Err(GanError::Nn(NnError::Index {
                    what: "class id".into(),
                    index: c,
                    bound: self.n_classes,
                }));
            }
        }
        let mut tape = Tape::new();
        let d = self.cfg.width;
        let n = batch.len();
        let flat: Vec<f64> = batch.vectors.iter().flatten().copied().collect();
        let x = tape.constant(flat, vec![n, d]);
        let logits = self.discriminator.forward(&mut tape, x)?;
        let loss = tape.ce_loss(logits, &batch.class_ids)?;
        let v = tape.scalar_value(loss);
        Ok((v, tape, loss))
    }

    /// Discriminator classification accuracy on a batch.
    pub fn discriminator_accuracy(&self, batch: &EmbeddingBatch) -> Result<f64, GanError> {
        let mut tape = Tape::new();
        let d = self.cfg.width;
        let n = batch.len();
        let flat: Vec<f64> = batch.vectors.iter().flatten().copied().collect();
        let x = tape.constant(flat, vec![n, d]);
        let logits = self.discriminator.forward(&mut tape, x)?;
        let vals = tape.value(logits);
        let k = self.n_classes;
        let mut correct = 0usize;
        for i in 0..n {
            let row = &vals[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == batch.class_ids[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / n as f64)
    }

    /// Generator loss over a batch: teacher-forced reconstruction CE plus
    /// `gamma` times the mean constraint over sampled cross-class pairs,
    /// plus the optional confusion term. Returns the loss value, the tape,
    /// and whether any cross-class pair existed.
    fn gen_loss_tape(
        &mut self,
        records: &[&GanRecord],
    ) -> Result<(f64, Tape, crate::nn::Var), GanError> {
        if records.is_empty() {
            return Err(GanError::Contract("generator step on empty batch".into()));
        }
        let mut tape = Tape::new();
        let mut pooled_vars = Vec::with_capacity(records.len());
        let mut recon_losses = Vec::with_capacity(records.len());
        for r in records {
            let pooled = self.generator.encode(&mut tape, &r.prompt_tokens)?;
            let ce = self
                .generator
                .decode_loss(&mut tape, pooled, &r.target_tokens)?;
            pooled_vars.push(pooled);
            recon_losses.push(ce);
        }
        let stacked = tape.stack_rows(&recon_losses)?;
        let mut loss = tape.mean(stacked);

        // cross-class pairs, subsampled
        let mut pairs = Vec::new();
        for i in 0..records.len() {
            for j in (i + 1)..records.len() {
                if records[i].class_id != records[j].class_id {
                    pairs.push((i, j));
                }
            }
        }
        let had_pairs = !pairs.is_empty();
        if had_pairs && self.cfg.gamma > 0.0 && (self.cfg.alpha > 0.0 || self.cfg.beta > 0.0) {
            pairs.shuffle(&mut self.rng);
            pairs.truncate(self.cfg.max_pairs);
            let div_cfg = self.cfg.divergence();
            let mut terms = Vec::with_capacity(pairs.len());
            for &(i, j) in &pairs {
                let t = constraint_t(&mut tape, pooled_vars[i], pooled_vars[j], &div_cfg)?;
                terms.push(t);
            }
            let stacked = tape.stack_rows(&terms)?;
            let mean_term = tape.mean(stacked);
            let weighted = tape.scale(mean_term, self.cfg.gamma);
            loss = tape.add(loss, weighted)?;
        }

        if self.cfg.adversarial_confusion {
            // non-saturating confusion: push the true-class probability down
            let mut conf_terms = Vec::with_capacity(records.len());
            for (r, &pooled) in records.iter().zip(&pooled_vars) {
                let row = tape.reshape(pooled, vec![1, self.cfg.width])?;
                let logits = self.discriminator.forward(&mut tape, row)?;
                let probs = tape.softmax_rows(logits);
                let flat = tape.reshape(probs, vec![self.n_classes])?;
                // select the true-class probability with a constant mask
                let mut mask = vec![0.0; self.n_classes];
                mask[r.class_id] = 1.0;
                let mv = tape.constant(mask, vec![self.n_classes]);
                let sel = tape.mul(flat, mv)?;
                let p = tape.sum(sel);
                let np = tape.neg(p);
                let one_minus = tape.add_const(np, 1.0);
                let ln = tape.ln_clamped(one_minus, 1e-7);
                let term = tape.neg(ln);
                conf_terms.push(term);
            }
            let stacked = tape.stack_rows(&conf_terms)?;
            let mean_conf = tape.mean(stacked);
            loss = tape.add(loss, mean_conf)?;
        }

        let _ = had_pairs;
        let v = tape.scalar_value(loss);
        Ok((v, tape, loss))
    }

    /// Public wrapper: the generator loss value for a batch of records.
    pub fn generator_loss(&mut self, records: &[&GanRecord]) -> Result<f64, GanError> {
        let (v, _, _) = self.gen_loss_tape(records)?;
        Ok(v)
    }

    /// Greedy reconstruction of a single title through the trained encoder
    /// and decoder. An empty title reconstructs to an empty string. Callers
    /// should surface a warning (not an error) when the state is untrained;
    /// see [`GanState::is_trained`].
    pub fn reconstruct(&self, tokenizer: &Tokenizer, title: &str) -> Result<String, GanError> {
        let ids = tokenizer.encode(title);
        if ids.is_empty() {
            return Ok(String::new());
        }
        let capped = &ids[..ids.len().min(20)];
        let pooled = self.generator.encode_values(capped)?;
        let out = self.generator.greedy_decode(&pooled, 20)?;
        Ok(tokenizer.decode(&out))
    }

    /// Autoencoder-only warmup: teacher-forced reconstruction of raw token
    /// sequences, no discriminator, no constraint. Returns per-epoch mean
    /// losses.
    pub fn pretrain_autoencoder(
        &mut self,
        sequences: &[Vec<usize>],
        epochs: usize,
    ) -> Result<Vec<f64>, GanError> {
        let seqs: Vec<&Vec<usize>> = sequences.iter().filter(|s| !s.is_empty()).collect();
        if seqs.is_empty() {
            return Err(GanError::Contract("no non-empty sequences".into()));
        }
        let mut losses = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.cfg.batch.max(1)) {
                let mut tape = Tape::new();
                let mut per = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let pooled = self.generator.encode(&mut tape, seqs[i])?;
                    let mut target = seqs[i].clone();
                    target.push(EOS);
                    let ce = self.generator.decode_loss(&mut tape, pooled, &target)?;
                    per.push(ce);
                }
                let stacked = tape.stack_rows(&per)?;
                let loss = tape.mean(stacked);
                let v = tape.scalar_value(loss);
                if !v.is_finite() {
                    return Err(GanError::NonFinite { epoch: losses.len() });
                }
                total += v * chunk.len() as f64;
                let grads = tape.backward(loss)?;
                self.opt_gen.step(self.generator.params_mut(), &grads)?;
            }
            losses.push(total / seqs.len() as f64);
        }
        Ok(losses)
    }

    /// Greedy token accuracy of reconstructing each sequence, for the
    /// autoencoder sanity bound.
    pub fn reconstruction_accuracy(&self, sequences: &[Vec<usize>]) -> Result<f64, GanError> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for seq in sequences.iter().filter(|s| !s.is_empty()) {
            let pooled = self.generator.encode_values(seq)?;
            let out = self.generator.greedy_decode(&pooled, seq.len())?;
            total += seq.len();
            correct += seq
                .iter()
                .zip(&out)
                .filter(|(a, b)| a == b)
                .count();
        }
        if total == 0 {
            return Err(GanError::Contract("no tokens to score".into()));
        }
        Ok(correct as f64 / total as f64)
    }

    fn snapshot(&self) -> Checkpoint {
        let mut params: Vec<&Param> = self.generator.params();
        params.extend(self.discriminator.params());
        Checkpoint::from_params(params)
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<(), GanError> {
        let mut params = self.generator.params_mut();
        params.extend(self.discriminator.params_mut());
        ck.restore_into(params)?;
        Ok(())
    }

    /// Alternating optimization over the augmented corpora. Each batch
    /// takes `disc_steps` discriminator updates on detached embeddings then
    /// `gen_steps` generator updates. A held-out probe per class tracks
    /// diversity; training stops early when the probe JS improves less
    /// than `early_stop_delta` for `early_stop_patience` consecutive
    /// epochs.
    pub fn train_gan(
        &mut self,
        corpora: &GanCorpora,
        epochs: usize,
        mut on_epoch: impl FnMut(&EpochMetrics, &GanState),
    ) -> Result<GanRunReport, GanError> {
        if corpora.n_classes != self.n_classes {
            return Err(GanError::Contract(format!(
                "corpora have {} classes, state expects {}",
                corpora.n_classes, self.n_classes
            )));
        }
        // deterministic probe split: every ceil(1/fraction)-th record per class
        let stride = if self.cfg.probe_fraction > 0.0 {
            (1.0 / self.cfg.probe_fraction).ceil() as usize
        } else {
            usize::MAX
        };
        let mut probe: Vec<&GanRecord> = Vec::new();
        let mut train: Vec<&GanRecord> = Vec::new();
        let mut per_class_seen = vec![0usize; corpora.n_classes];
        for r in &corpora.records {
            let k = per_class_seen[r.class_id];
            per_class_seen[r.class_id] += 1;
            if stride != usize::MAX && k % stride == 0 {
                probe.push(r);
            } else {
                train.push(r);
            }
        }
        if probe.is_empty() || train.is_empty() {
            return Err(GanError::Contract(
                "probe split left train or probe empty; adjust probe_fraction".into(),
            ));
        }

        let baseline_batch = self.encode_batch(&probe)?;
        let baseline_probe = batch_diversity_report(&baseline_batch)?;
        let baseline_accuracy = self.discriminator_accuracy(&baseline_batch)?;
        let mut report = GanRunReport {
            baseline_probe,
            baseline_accuracy,
            epochs: Vec::new(),
        };

        let mut best_js = report.baseline_probe.mean("js");
        let mut stale = 0usize;
        let mut last_good = self.snapshot();

        for epoch in 1..=epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut self.rng);
            let mut l_d_sum = 0.0;
            let mut l_g_sum = 0.0;
            let mut n_batches = 0usize;

            for chunk in order.chunks(self.cfg.batch.max(2)) {
                let batch_records: Vec<&GanRecord> = chunk.iter().map(|&i| train[i]).collect();

                for _ in 0..self.cfg.disc_steps {
                    let detached = self.encode_batch(&batch_records)?;
                    let (l_d, mut tape, loss_var) = self.disc_loss_tape(&detached)?;
                    if !l_d.is_finite() {
                        self.restore(&last_good)?;
                        return Err(GanError::NonFinite { epoch });
                    }
                    l_d_sum += l_d;
                    let grads = tape.backward(loss_var)?;
                    self.opt_disc.step(self.discriminator.params_mut(), &grads)?;
                }

                for _ in 0..self.cfg.gen_steps {
                    let (l_g, mut tape, loss_var) = self.gen_loss_tape(&batch_records)?;
                    if !l_g.is_finite() {
                        self.restore(&last_good)?;
                        return Err(GanError::NonFinite { epoch });
                    }
                    l_g_sum += l_g;
                    let grads = tape.backward(loss_var)?;
                    self.opt_gen.step(self.generator.params_mut(), &grads)?;
                }
                n_batches += 1;
            }

            self.epochs_trained += 1;
            let probe_batch = self.encode_batch(&probe)?;
            let probe_report = batch_diversity_report(&probe_batch)?;
            let disc_accuracy = self.discriminator_accuracy(&probe_batch)?;
            let metrics = EpochMetrics {
                epoch,
                l_g: l_g_sum / (n_batches.max(1) * self.cfg.gen_steps.max(1)) as f64,
                l_d: l_d_sum / (n_batches.max(1) * self.cfg.disc_steps.max(1)) as f64,
                disc_accuracy,
                probe: probe_report,
            };
            on_epoch(&metrics, self);
            let js_now = metrics.probe.mean("js");
            report.epochs.push(metrics);
            last_good = self.snapshot();

            if js_now - best_js < self.cfg.early_stop_delta {
                stale += 1;
                if stale >= self.cfg.early_stop_patience {
                    break;
                }
            } else {
                stale = 0;
            }
            best_js = best_js.max(js_now);
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = self.generator.params();
        params.extend(self.discriminator.params());
        Checkpoint::from_params(params)
            .with_meta("model", "gan")
            .with_meta("kind", self.cfg.encoder)
            .with_meta("vocab_size", self.generator.vocab_size)
            .with_meta("width", self.cfg.width)
            .with_meta("n_classes", self.n_classes)
            .with_meta("disc_hidden", self.cfg.disc_hidden)
            .with_meta("epochs_trained", self.epochs_trained)
            .with_meta("seed", self.cfg.seed)
            .with_meta(
                "cfg",
                serde_json::to_string(&self.cfg).unwrap_or_default(),
            )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GanError> {
        let cfg: GanConfig = serde_json::from_str(
            ck.meta
                .get("cfg")
                .ok_or_else(|| GanError::Contract("checkpoint missing cfg".into()))?,
        )
        .map_err(|e| GanError::Contract(format!("cfg parse: {e}")))?;
        let vocab_size = ck.meta_parse("vocab_size")?;
        let n_classes = ck.meta_parse("n_classes")?;
        let epochs_trained = ck.meta_parse("epochs_trained")?;
        let mut state = Self::new(cfg, vocab_size, n_classes)?;
        let mut params = state.generator.params_mut();
        params.extend(state.discriminator.params_mut());
        ck.restore_into(params)?;
        state.epochs_trained = epochs_trained;
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs::{build_attribute_datasets, AttributeSet};
    use crate::data::UserHistory;
    use crate::prompt::{template_corpus, Templates, TokenizerConfig};
    use std::collections::BTreeMap;

    fn marker_corpus(n_per_class: usize) -> (Tokenizer, GanCorpora) {
        let templates = Templates::default();
        let markers = ["alpha", "bravo"];
        let mut titles = Vec::new();
        let fillers = ["stone", "river", "cloud", "ember", "frost", "gale"];
        for u in 0..n_per_class {
            let t = format!(
                "{} {} {}",
                fillers[u % 6],
                fillers[(u + 2) % 6],
                fillers[(u + 4) % 6]
            );
            titles.push(t);
        }
        let mut corpus_text = template_corpus(&templates);
        corpus_text.extend(titles.iter().cloned());
        corpus_text.push(markers.join(" "));
        let refs: Vec<&str> = corpus_text.iter().map(|s| s.as_str()).collect();
        let tok = Tokenizer::build(refs, &TokenizerConfig::default()).unwrap();

        let histories: Vec<UserHistory> = (0..n_per_class)
            .map(|u| UserHistory {
                user_id: format!("u{u}"),
                items: vec![format!("i{u}"), format!("i{}", u + 1)],
                titles: vec![titles[u].clone(), titles[(u + 1) % n_per_class].clone()],
            })
            .collect();
        let attrs = AttributeSet {
            labels: markers.iter().map(|s| s.to_string()).collect(),
            assignment: BTreeMap::new(),
        };
        let corpora = build_attribute_datasets(&histories, &attrs, &tok, &templates).unwrap();
        (tok, corpora)
    }

    fn small_cfg(seed: u64) -> GanConfig {
        GanConfig {
            width: 16,
            disc_hidden: 16,
            batch: 8,
            epochs: 3,
            pretrain_epochs: 0,
            probe_fraction: 0.25,
            early_stop_patience: 100,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn encode_batch_shapes_and_determinism() {
        let (tok, corpora) = marker_corpus(8);
        let state = GanState::new(small_cfg(1), tok.vocab_size(), corpora.n_classes).unwrap();
        let recs: Vec<&GanRecord> = corpora.records.iter().take(6).collect();
        let b1 = state.encode_batch(&recs).unwrap();
        let b2 = state.encode_batch(&recs).unwrap();
        assert_eq!(b1.len(), 6);
        assert_eq!(b1.vectors, b2.vectors);
        assert_eq!(b1.class_ids, recs.iter().map(|r| r.class_id).collect::<Vec<_>>());
        // permuting the batch permutes rows identically
        let mut rev = recs.clone();
        rev.reverse();
        let b3 = state.encode_batch(&rev).unwrap();
        assert_eq!(b3.vectors[0], b1.vectors[5]);
    }

    #[test]
    fn empty_batch_is_contract_error() {
        let (tok, corpora) = marker_corpus(8);
        let state = GanState::new(small_cfg(1), tok.vocab_size(), corpora.n_classes).unwrap();
        assert!(matches!(
            state.encode_batch(&[]),
            Err(GanError::Contract(_))
        ));
    }

    #[test]
    fn uniform_discriminator_loss_is_ln_k_plus_one() {
        let (tok, corpora) = marker_corpus(8);
        let mut state = GanState::new(small_cfg(2), tok.vocab_size(), corpora.n_classes).unwrap();
        // zero weights and biases give uniform logits
        for p in state.discriminator.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let recs: Vec<&GanRecord> = corpora.records.iter().collect();
        let batch = state.encode_batch(&recs).unwrap();
        let loss = state.discriminator_loss(&batch).unwrap();
        let want = (corpora.n_classes as f64).ln();
        assert!((loss - want).abs() < 1e-9, "{loss} vs ln({})", corpora.n_classes);
    }

    #[test]
    fn class_id_out_of_range_is_index_error() {
        let (tok, corpora) = marker_corpus(8);
        let state = GanState::new(small_cfg(2), tok.vocab_size(), corpora.n_classes).unwrap();
        let batch = EmbeddingBatch::new(
            vec![vec![0.0; 16]],
            vec![corpora.n_classes],
            vec!["x".into()],
        );
        assert!(matches!(
            state.discriminator_loss(&batch),
            Err(GanError::Nn(NnError::Index { .. }))
        ));
    }

    #[test]
    fn gamma_zero_reduces_to_reconstruction_ce() {
        let (tok, corpora) = marker_corpus(8);
        let mut cfg = small_cfg(3);
        cfg.gamma = 0.0;
        let mut state = GanState::new(cfg, tok.vocab_size(), corpora.n_classes).unwrap();
        let recs: Vec<&GanRecord> = corpora.records.iter().take(6).collect();
        let with_gamma_zero = state.generator_loss(&recs).unwrap();

        // pure reconstruction CE computed independently
        let mut tape = Tape::new();
        let mut per = Vec::new();
        for r in &recs {
            let pooled = state.generator.encode(&mut tape, &r.prompt_tokens).unwrap();
            let ce = state
                .generator
                .decode_loss(&mut tape, pooled, &r.target_tokens)
                .unwrap();
            per.push(ce);
        }
        let stacked = tape.stack_rows(&per).unwrap();
        let mean = tape.mean(stacked);
        assert!((with_gamma_zero - tape.scalar_value(mean)).abs() < 1e-12);
    }

    #[test]
    fn single_class_batch_loss_is_ce_exactly() {
        let (tok, corpora) = marker_corpus(8);
        let mut state = GanState::new(small_cfg(4), tok.vocab_size(), corpora.n_classes).unwrap();
        let recs: Vec<&GanRecord> = corpora.class_records(1).take(4).collect();
        let loss = state.generator_loss(&recs).unwrap();
        let mut cfg2 = small_cfg(4);
        cfg2.gamma = 0.0;
        let mut state2 = GanState::new(cfg2, tok.vocab_size(), corpora.n_classes).unwrap();
        let plain = state2.generator_loss(&recs).unwrap();
        assert!((loss - plain).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leaves_state_unchanged() {
        let (tok, corpora) = marker_corpus(8);
        let mut state = GanState::new(small_cfg(5), tok.vocab_size(), corpora.n_classes).unwrap();
        let before = state.snapshot();
        let report = state.train_gan(&corpora, 0, |_, _| {}).unwrap();
        assert!(report.epochs.is_empty());
        let after = state.snapshot();
        for (name, td) in &before.params {
            assert_eq!(td.values, after.params[name].values, "{name} changed");
        }
    }

    #[test]
    fn disc_and_gen_updates_are_isolated() {
        let (tok, corpora) = marker_corpus(10);
        let mut state = GanState::new(small_cfg(6), tok.vocab_size(), corpora.n_classes).unwrap();
        let recs: Vec<&GanRecord> = corpora.records.iter().take(8).collect();

        // one discriminator step must not touch generator params
        let gen_hash_before: Vec<u64> =
            state.generator.params().iter().map(|p| p.value_hash()).collect();
        let detached = state.encode_batch(&recs).unwrap();
        let (_, mut tape, loss) = state.disc_loss_tape(&detached).unwrap();
        let grads = tape.backward(loss).unwrap();
        state.opt_disc.step(state.discriminator.params_mut(), &grads).unwrap();
        let gen_hash_after: Vec<u64> =
            state.generator.params().iter().map(|p| p.value_hash()).collect();
        assert_eq!(gen_hash_before, gen_hash_after);

        // one generator step must not touch discriminator params
        let disc_hash_before: Vec<u64> =
            state.discriminator.params().iter().map(|p| p.value_hash()).collect();
        let (_, mut tape, loss) = state.gen_loss_tape(&recs).unwrap();
        let grads = tape.backward(loss).unwrap();
        state.opt_gen.step(state.generator.params_mut(), &grads).unwrap();
        let disc_hash_after: Vec<u64> =
            state.discriminator.params().iter().map(|p| p.value_hash()).collect();
        assert_eq!(disc_hash_before, disc_hash_after);
    }

    #[test]
    fn autoencoder_loss_decreases_and_reconstructs() {
        let (tok, _) = marker_corpus(8);
        let mut cfg = small_cfg(7);
        cfg.gamma = 0.0;
        cfg.width = 24;
        let mut state = GanState::new(cfg, tok.vocab_size(), 2).unwrap();
        let seqs: Vec<Vec<usize>> = (0..10)
            .map(|k| tok.encode(&format!("stone river cloud ember {k}")))
            .collect();
        let losses = state.pretrain_autoencoder(&seqs, 60).unwrap();
        assert!(losses[2] < losses[0], "losses {:?}", &losses[..3]);
        let acc = state.reconstruction_accuracy(&seqs).unwrap();
        assert!(acc > 0.8, "token accuracy {acc}");
    }

    #[test]
    fn empty_title_reconstructs_empty() {
        let (tok, corpora) = marker_corpus(8);
        let state = GanState::new(small_cfg(8), tok.vocab_size(), corpora.n_classes).unwrap();
        assert_eq!(state.reconstruct(&tok, "").unwrap(), "");
    }

    #[test]
    fn reconstruct_is_deterministic() {
        let (tok, corpora) = marker_corpus(8);
        let state = GanState::new(small_cfg(9), tok.vocab_size(), corpora.n_classes).unwrap();
        let a = state.reconstruct(&tok, "stone river").unwrap();
        let b = state.reconstruct(&tok, "stone river").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_improves_discriminator_and_diversity() {
        let (tok, corpora) = marker_corpus(24);
        let mut cfg = small_cfg(10);
        cfg.lr_disc = 1e-2;
        let mut state = GanState::new(cfg, tok.vocab_size(), corpora.n_classes).unwrap();
        let report = state.train_gan(&corpora, 8, |_, _| {}).unwrap();
        let last = report.epochs.last().unwrap();
        let chance = 1.0 / corpora.n_classes as f64;
        assert!(
            last.disc_accuracy > chance,
            "accuracy {} vs chance {chance}",
            last.disc_accuracy
        );
        assert!(
            last.probe.mean("js") > report.baseline_probe.mean("js"),
            "probe JS did not increase"
        );
        assert!(
            last.probe.mean("cos") < report.baseline_probe.mean("cos"),
            "probe cosine did not decrease"
        );
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_embeddings() {
        let (tok, corpora) = marker_corpus(8);
        let mut state = GanState::new(small_cfg(11), tok.vocab_size(), corpora.n_classes).unwrap();
        let _ = state.train_gan(&corpora, 1, |_, _| {}).unwrap();
        let ck = state.to_checkpoint();
        let state2 = GanState::from_checkpoint(&ck).unwrap();
        let recs: Vec<&GanRecord> = corpora.records.iter().take(4).collect();
        let b1 = state.encode_batch(&recs).unwrap();
        let b2 = state2.encode_batch(&recs).unwrap();
        for (x, y) in b1.vectors.iter().zip(&b2.vectors) {
            for (a, b) in x.iter().zip(y) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
