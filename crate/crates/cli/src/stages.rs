//! Stage execution: artifact layout, fingerprint-guarded dependencies,
//! idempotent re-runs, and the per-stage pipeline logic.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use divrec_core::attrs::{
    build_attribute_datasets, load_stoplist, predict_attributes, select_top_k, AttributePredictor,
    AttributeSet,
};
use divrec_core::collab::{train_collab, CollabParams};
use divrec_core::data::{
    ingest, preprocess, read_split, split_leave_one_out, write_split, SplitSample,
    UserHistory,
};
use divrec_core::diversity::EmbeddingBatch;
use divrec_core::gan::{GanState, GanRunReport};
use divrec_core::metrics::{MetricsReport, RankedSample};
use divrec_core::nn::Checkpoint;
use divrec_core::prompt::{
    render_attribute_prompt, render_rec_prompt, template_corpus, Guidance, PromptInstance,
    Templates, Tokenizer,
};
use divrec_core::rec::{RecConfig, RecInstance, RecModel, RecVariant};
use divrec_core::synth::generate;
use divrec_core::util::derive_seed;

use crate::config::{ExperimentConfig, TemplatesFile};
use crate::error::{CliError, Result};
use crate::projection;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Attrs,
    TrainGan,
    Reconstruct,
    TrainCollab,
    FinetuneA,
    FinetuneB,
    Eval,
    ExportProj,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Attrs => "attrs",
            Stage::TrainGan => "train-gan",
            Stage::Reconstruct => "reconstruct",
            Stage::TrainCollab => "train-collab",
            Stage::FinetuneA => "finetune-a",
            Stage::FinetuneB => "finetune-b",
            Stage::Eval => "eval",
            Stage::ExportProj => "export-proj",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Attrs => &[Stage::Ingest],
            Stage::TrainGan => &[Stage::Attrs],
            Stage::Reconstruct => &[Stage::TrainGan],
            Stage::TrainCollab => &[Stage::Ingest],
            Stage::FinetuneA => &[Stage::Reconstruct, Stage::TrainCollab],
            Stage::FinetuneB => &[Stage::FinetuneA],
            Stage::Eval => &[Stage::FinetuneB],
            Stage::ExportProj => &[Stage::TrainGan],
        }
    }

    /// Every stage in dependency order.
    pub fn pipeline() -> [Stage; 9] {
        [
            Stage::Ingest,
            Stage::Attrs,
            Stage::TrainGan,
            Stage::Reconstruct,
            Stage::TrainCollab,
            Stage::FinetuneA,
            Stage::FinetuneB,
            Stage::Eval,
            Stage::ExportProj,
        ]
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::pipeline().into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct StageStamp {
    fingerprint: String,
    seed: u64,
    stage: String,
}

/// Runs stages for one (config, seed) pair under
/// `out_root[/out_sub]/seed_<N>/<stage>/`.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub force: bool,
    root: PathBuf,
    fingerprint: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string(value)
        .map_err(|e| CliError::Stage(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, json)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Stage(format!("read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Stage(format!("parse {}: {e}", path.display())))
}

impl Runner {
    pub fn new(cfg: ExperimentConfig, seed: u64, out_sub: Option<&str>, force: bool) -> Self {
        let fingerprint = cfg.fingerprint();
        let root = cfg.out_root(out_sub).join(format!("seed_{seed}"));
        Self {
            cfg,
            seed,
            force,
            root,
            fingerprint,
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("fingerprint.json")
    }

    fn stamp(&self, stage: Stage) -> StageStamp {
        StageStamp {
            fingerprint: self.fingerprint.clone(),
            seed: self.seed,
            stage: stage.name().to_string(),
        }
    }

    fn is_up_to_date(&self, stage: Stage) -> bool {
        match fs::read_to_string(self.stamp_path(stage)) {
            Ok(text) => match serde_json::from_str::<StageStamp>(&text) {
                Ok(s) => s == self.stamp(stage),
                Err(_) => false,
            },
            Err(_) => false,
        }
    }

    fn check_deps(&self, stage: Stage) -> Result<()> {
        // transitive closure, depth-first
        let mut pending: Vec<Stage> = stage.deps().to_vec();
        let mut seen = BTreeSet::new();
        while let Some(dep) = pending.pop() {
            if !seen.insert(dep.name()) {
                continue;
            }
            let path = self.stamp_path(dep);
            let text = fs::read_to_string(&path).map_err(|_| {
                CliError::Dependency(format!(
                    "stage '{}' requires '{}' to have run first",
                    stage.name(),
                    dep.name()
                ))
            })?;
            let stamp: StageStamp = serde_json::from_str(&text).map_err(|_| {
                CliError::Dependency(format!(
                    "stage '{}': corrupt fingerprint for '{}'",
                    stage.name(),
                    dep.name()
                ))
            })?;
            if stamp != self.stamp(dep) {
                return Err(CliError::Dependency(format!(
                    "stage '{}': fingerprint mismatch in '{}' (found {}, expected {}); \
                     rerun upstream stages",
                    stage.name(),
                    dep.name(),
                    stamp.fingerprint,
                    self.fingerprint
                )));
            }
            pending.extend(dep.deps());
        }
        Ok(())
    }

    /// Run one stage. Returns false when the stage was already up to date
    /// and was skipped.
    pub fn run(&self, stage: Stage) -> Result<bool> {
        self.check_deps(stage)?;
        if !self.force && self.is_up_to_date(stage) {
            return Ok(false);
        }
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir)?;
        match stage {
            Stage::Ingest => self.run_ingest()?,
            Stage::Attrs => self.run_attrs()?,
            Stage::TrainGan => self.run_train_gan()?,
            Stage::Reconstruct => self.run_reconstruct()?,
            Stage::TrainCollab => self.run_train_collab()?,
            Stage::FinetuneA => self.run_finetune_a()?,
            Stage::FinetuneB => self.run_finetune_b()?,
            Stage::Eval => self.run_eval()?,
            Stage::ExportProj => self.run_export_proj()?,
        }
        write_json(&self.stamp_path(stage), &self.stamp(stage))?;
        Ok(true)
    }

    /// Run the whole pipeline in dependency order.
    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::pipeline() {
            self.run(stage)?;
        }
        Ok(())
    }

    // ---- ingest ------------------------------------------------------------

    fn run_ingest(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::Ingest);
        let (interactions, malformed) = match (&self.cfg.data.input, &self.cfg.data.synth) {
            (Some(path), None) => {
                let (recs, stats) = ingest(path)?;
                (recs, stats.malformed)
            }
            (None, Some(synth)) => (generate(synth), 0),
            _ => return Err(CliError::Config("exactly one data source required".into())),
        };
        let histories = preprocess(&interactions, &self.cfg.preprocess)?;
        let split_seed = derive_seed(self.seed, "split");
        let min_prefix = self.cfg.preprocess.trunc_lo - 1;
        let (train, test) =
            split_leave_one_out(&histories, self.cfg.split.n_neg, min_prefix, split_seed)?;

        write_split(&train, &dir.join("train.jsonl"))?;
        write_split(&test, &dir.join("test.jsonl"))?;

        let mut hist_file = fs::File::create(dir.join("histories.jsonl"))?;
        for h in &histories {
            serde_json::to_writer(&mut hist_file, h)
                .map_err(|e| CliError::Stage(format!("write history: {e}")))?;
            hist_file.write_all(b"\n")?;
        }

        let mut items: BTreeMap<String, String> = BTreeMap::new();
        for h in &histories {
            for (i, t) in h.items.iter().zip(&h.titles) {
                items.insert(i.clone(), t.clone());
            }
        }
        write_json(&dir.join("items.json"), &items)?;

        let stats = serde_json::json!({
            "interactions": interactions.len(),
            "malformed": malformed,
            "users": histories.len(),
            "items": items.len(),
            "train_samples": train.len(),
            "test_samples": test.len(),
        });
        write_json(&dir.join("stats.json"), &stats)?;
        Ok(())
    }

    fn load_histories(&self) -> Result<Vec<UserHistory>> {
        let path = self.stage_dir(Stage::Ingest).join("histories.jsonl");
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Stage(format!("read {}: {e}", path.display())))?;
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            out.push(
                serde_json::from_str(line)
                    .map_err(|e| CliError::Stage(format!("parse history: {e}")))?,
            );
        }
        Ok(out)
    }

    // ---- attrs -------------------------------------------------------------

    fn run_attrs(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::Attrs);
        let histories = self.load_histories()?;
        let templates = self.cfg.load_templates()?;

        let mut corpus: Vec<String> = template_corpus(&templates);
        corpus.push(self.cfg.data.domain.clone());
        let all_titles: Vec<String> = histories.iter().flat_map(|h| h.titles.clone()).collect();
        corpus.extend(all_titles.iter().cloned());
        let refs: Vec<&str> = corpus.iter().map(|s| s.as_str()).collect();
        let tokenizer = Tokenizer::build(refs, &self.cfg.vocab)?;
        tokenizer.save(&dir.join("vocab.json"))?;

        let samples: Vec<(String, PromptInstance)> = histories
            .iter()
            .map(|h| {
                render_attribute_prompt(&tokenizer, &templates, &h.titles, &self.cfg.data.domain)
                    .map(|inst| (h.user_id.clone(), inst))
            })
            .collect::<std::result::Result<_, _>>()?;

        let predictor = match &self.cfg.attrs.external {
            Some(path) => AttributePredictor::external_from_jsonl(path)?,
            None => AttributePredictor::Cooccurrence {
                candidate_pool: self.cfg.attrs.candidate_pool,
            },
        };
        let predictions = predict_attributes(&samples, &all_titles, &predictor, &tokenizer)?;
        let stoplist = match &self.cfg.attrs.stoplist {
            Some(path) => load_stoplist(path)?,
            None => BTreeSet::new(),
        };
        let attrs = select_top_k(&predictions, self.cfg.attrs.k, &stoplist)?;
        attrs.save(&dir.join("attributes.json"))?;

        // pin the exact template wording used for this run
        let tf = TemplatesFile {
            templates: templates.clone(),
        };
        let toml_text = toml::to_string_pretty(&tf)
            .map_err(|e| CliError::Stage(format!("serialize templates: {e}")))?;
        fs::write(dir.join("templates.toml"), toml_text)?;
        Ok(())
    }

    fn load_attrs_artifacts(&self) -> Result<(Tokenizer, Templates, AttributeSet)> {
        let dir = self.stage_dir(Stage::Attrs);
        let tokenizer = Tokenizer::load(&dir.join("vocab.json"))?;
        let text = fs::read_to_string(dir.join("templates.toml"))?;
        let tf: TemplatesFile =
            toml::from_str(&text).map_err(|e| CliError::Stage(format!("parse templates: {e}")))?;
        let attrs = AttributeSet::load(&dir.join("attributes.json"))?;
        Ok((tokenizer, tf.templates, attrs))
    }

    // ---- train-gan ---------------------------------------------------------

    fn run_train_gan(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::TrainGan);
        let histories = self.load_histories()?;
        let (tokenizer, templates, attrs) = self.load_attrs_artifacts()?;
        let corpora = build_attribute_datasets(&histories, &attrs, &tokenizer, &templates)?;

        let mut gan_cfg = self.cfg.gan.clone();
        gan_cfg.seed = derive_seed(self.seed, "gan");
        let mut state = GanState::new(gan_cfg.clone(), tokenizer.vocab_size(), corpora.n_classes)?;

        // autoencoder warmup over the distinct titles
        let unique_titles: BTreeSet<&String> = histories.iter().flat_map(|h| &h.titles).collect();
        let title_seqs: Vec<Vec<usize>> = unique_titles
            .iter()
            .map(|t| tokenizer.encode(t))
            .filter(|s| !s.is_empty())
            .collect();
        let warmup_losses = if gan_cfg.pretrain_epochs > 0 {
            state.pretrain_autoencoder(&title_seqs, gan_cfg.pretrain_epochs)?
        } else {
            Vec::new()
        };

        let mut csv = String::from("epoch,l_g,l_d,disc_accuracy,js,cos,kl,tv\n");
        let epoch_dir = dir.join("gan");
        let report = state.train_gan(&corpora, gan_cfg.epochs, |m, st| {
            csv.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.8},{:.8},{:.8},{:.8}\n",
                m.epoch,
                m.l_g,
                m.l_d,
                m.disc_accuracy,
                m.probe.mean("js"),
                m.probe.mean("cos"),
                m.probe.mean("kl"),
                m.probe.mean("tv"),
            ));
            let _ = st
                .to_checkpoint()
                .save(&epoch_dir.join(format!("epoch_{}", m.epoch)).join("checkpoint.json"));
        })?;

        state.to_checkpoint().save(&dir.join("checkpoint.json"))?;
        fs::write(dir.join("metrics.csv"), csv)?;
        write_json(&dir.join("warmup_losses.json"), &warmup_losses)?;
        write_json(&dir.join("diversity_report.json"), &report)?;
        Ok(())
    }

    pub fn load_gan_report(&self) -> Result<GanRunReport> {
        read_json(&self.stage_dir(Stage::TrainGan).join("diversity_report.json"))
    }

    // ---- reconstruct -------------------------------------------------------

    fn run_reconstruct(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::Reconstruct);
        let (tokenizer, _, _) = self.load_attrs_artifacts()?;
        let ck = Checkpoint::load(&self.stage_dir(Stage::TrainGan).join("checkpoint.json"))?;
        let state = GanState::from_checkpoint(&ck)?;
        if !state.is_trained() {
            eprintln!("warning: reconstructing from an untrained encoder checkpoint");
        }
        let items: BTreeMap<String, String> =
            read_json(&self.stage_dir(Stage::Ingest).join("items.json"))?;
        let mut reconstructed: BTreeMap<String, String> = BTreeMap::new();
        for (item, title) in &items {
            reconstructed.insert(item.clone(), state.reconstruct(&tokenizer, title)?);
        }
        write_json(&dir.join("reconstructed_titles.json"), &reconstructed)?;
        Ok(())
    }

    // ---- train-collab ------------------------------------------------------

    fn run_train_collab(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::TrainCollab);
        let train = read_split(&self.stage_dir(Stage::Ingest).join("train.jsonl"))?;
        let test = read_split(&self.stage_dir(Stage::Ingest).join("test.jsonl"))?;
        let params = train_collab(&train, &self.cfg.collab, derive_seed(self.seed, "collab"))?;
        params.save(&dir.join("checkpoint.json"))?;

        let mut pred_file = fs::File::create(dir.join("predictions.jsonl"))?;
        for s in &test {
            for c in s.candidates() {
                let p = params.predict(&s.user_id, c);
                let rec = serde_json::json!({"user": s.user_id, "item": c, "p": p});
                serde_json::to_writer(&mut pred_file, &rec)
                    .map_err(|e| CliError::Stage(format!("write prediction: {e}")))?;
                pred_file.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    // ---- fine-tuning -------------------------------------------------------

    fn rec_cfg(&self) -> RecConfig {
        let mut rc = self.cfg.rec.clone();
        rc.seed = derive_seed(self.seed, "rec");
        rc
    }

    fn load_reconstructed(&self) -> Result<BTreeMap<String, String>> {
        read_json(
            &self
                .stage_dir(Stage::Reconstruct)
                .join("reconstructed_titles.json"),
        )
    }

    fn load_collab(&self, stage: Stage) -> Result<CollabParams> {
        let path = match stage {
            Stage::FinetuneB => self.stage_dir(Stage::FinetuneB).join("collab.json"),
            _ => self.stage_dir(Stage::TrainCollab).join("checkpoint.json"),
        };
        Ok(CollabParams::load(&path)?)
    }

    fn run_finetune_a(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::FinetuneA);
        let (tokenizer, templates, _) = self.load_attrs_artifacts()?;
        let train = read_split(&self.stage_dir(Stage::Ingest).join("train.jsonl"))?;
        let rec_cfg = self.rec_cfg();
        let recon = self.load_reconstructed()?;
        let collab = self.load_collab(Stage::TrainCollab)?;

        let builder = PromptBuilder {
            tokenizer: &tokenizer,
            templates: &templates,
            recon: rec_cfg.use_reconstructed.then_some(&recon),
            collab: rec_cfg.variant.uses_collab().then_some(&collab),
            rec_cfg: &rec_cfg,
            train_mode: true,
        };
        let instances = builder.train_instances(&train)?;

        let mut model = RecModel::new(&rec_cfg, tokenizer.vocab_size(), collab.dim)?;
        // next-token pass over every training prompt: predicting the hint
        // token from (history, target) builds the match feature the adapter
        // reads out in stage A
        let prompt_seqs: Vec<Vec<usize>> = instances
            .iter()
            .map(|i| i.prompt.tokens.clone())
            .collect();
        let pretrain_losses = if rec_cfg.pretrain_epochs > 0 {
            model.pretrain_lm(&prompt_seqs, &rec_cfg)?
        } else {
            Vec::new()
        };
        let report = model.finetune_stage_a(&instances, &rec_cfg)?;

        model.to_checkpoint().save(&dir.join("checkpoint.json"))?;
        write_json(&dir.join("pretrain_losses.json"), &pretrain_losses)?;
        write_json(&dir.join("stage_report.json"), &report)?;
        Ok(())
    }

    fn run_finetune_b(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::FinetuneB);
        let (tokenizer, templates, _) = self.load_attrs_artifacts()?;
        let train = read_split(&self.stage_dir(Stage::Ingest).join("train.jsonl"))?;
        let rec_cfg = self.rec_cfg();
        let recon = self.load_reconstructed()?;
        let mut collab = self.load_collab(Stage::TrainCollab)?;

        let ck = Checkpoint::load(&self.stage_dir(Stage::FinetuneA).join("checkpoint.json"))?;
        let mut model = RecModel::from_checkpoint(&ck, &rec_cfg)?;

        let report = if rec_cfg.variant == RecVariant::RecCol {
            model.finetune_stage_b(&[], None, &rec_cfg)?
        } else {
            let builder = PromptBuilder {
                tokenizer: &tokenizer,
                templates: &templates,
                recon: rec_cfg.use_reconstructed.then_some(&recon),
                collab: Some(&collab),
                rec_cfg: &rec_cfg,
                train_mode: true,
            };
            let instances = builder.train_instances(&train)?;
            model.finetune_stage_b(&instances, Some(&mut collab), &rec_cfg)?
        };

        model.to_checkpoint().save(&dir.join("checkpoint.json"))?;
        collab.save(&dir.join("collab.json"))?;
        write_json(&dir.join("stage_report.json"), &report)?;
        Ok(())
    }

    // ---- eval --------------------------------------------------------------

    fn run_eval(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::Eval);
        let (tokenizer, templates, _) = self.load_attrs_artifacts()?;
        let test = read_split(&self.stage_dir(Stage::Ingest).join("test.jsonl"))?;
        let rec_cfg = self.rec_cfg();
        let recon = self.load_reconstructed()?;
        let collab = self.load_collab(Stage::FinetuneB)?;
        let ck = Checkpoint::load(&self.stage_dir(Stage::FinetuneB).join("checkpoint.json"))?;
        let model = RecModel::from_checkpoint(&ck, &rec_cfg)?;

        let builder = PromptBuilder {
            tokenizer: &tokenizer,
            templates: &templates,
            recon: rec_cfg.use_reconstructed.then_some(&recon),
            collab: rec_cfg.variant.uses_collab().then_some(&collab),
            rec_cfg: &rec_cfg,
            train_mode: false,
        };

        let mut ranked = Vec::with_capacity(test.len());
        let mut pred_file = fs::File::create(dir.join("predictions.jsonl"))?;
        for s in &test {
            let mut scores = Vec::with_capacity(1 + s.negatives.len());
            for (idx, (item, prompt)) in builder.eval_candidates(s)?.into_iter().enumerate() {
                let vectors = builder.vectors_for(&s.user_id, &item);
                let pred = match &vectors {
                    Some((u, i)) => model.predict(&prompt, Some((u, i)))?,
                    None => model.predict(&prompt, None)?,
                };
                scores.push(pred.p_yes);
                let rec = serde_json::json!({
                    "user": s.user_id,
                    "item": item,
                    "p_yes": pred.p_yes,
                    "label": if idx == 0 { 1 } else { 0 },
                });
                serde_json::to_writer(&mut pred_file, &rec)
                    .map_err(|e| CliError::Stage(format!("write prediction: {e}")))?;
                pred_file.write_all(b"\n")?;
            }
            ranked.push(RankedSample::new(scores, 0)?);
        }

        let report = MetricsReport::compute(
            &ranked,
            &self.cfg.eval.ks,
            &self.fingerprint,
            self.seed,
            &rec_cfg.variant.to_string(),
        )?;
        write_json(&dir.join("metrics.json"), &report)?;

        let mut csv = String::from("variant,seed,fingerprint,n_samples,auc");
        for &k in &self.cfg.eval.ks {
            csv.push_str(&format!(",hr@{k}"));
        }
        for &k in &self.cfg.eval.ks {
            csv.push_str(&format!(",ndcg@{k}"));
        }
        for &k in &self.cfg.eval.ks {
            csv.push_str(&format!(",mrr@{k}"));
        }
        csv.push('\n');
        csv.push_str(&format!(
            "{},{},{},{},{:.6}",
            report.variant, report.seed, report.fingerprint, report.n_samples, report.auc
        ));
        for (_, v) in report.hr.iter().chain(&report.ndcg).chain(&report.mrr) {
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
        fs::write(dir.join("metrics.csv"), csv)?;
        Ok(())
    }

    pub fn read_metrics(&self) -> Result<MetricsReport> {
        read_json(&self.stage_dir(Stage::Eval).join("metrics.json"))
    }

    // ---- export-proj -------------------------------------------------------

    fn run_export_proj(&self) -> Result<()> {
        let dir = self.stage_dir(Stage::ExportProj);
        let histories = self.load_histories()?;
        let (tokenizer, templates, attrs) = self.load_attrs_artifacts()?;
        let corpora = build_attribute_datasets(&histories, &attrs, &tokenizer, &templates)?;

        // cap the projected set, stride-sampled per class for determinism
        let cap = 600usize;
        let stride = (corpora.records.len() / cap).max(1);
        let subset: Vec<&divrec_core::attrs::GanRecord> = corpora
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| i % stride == 0)
            .map(|(_, r)| r)
            .collect();

        let ck = Checkpoint::load(&self.stage_dir(Stage::TrainGan).join("checkpoint.json"))?;
        let trained = GanState::from_checkpoint(&ck)?;
        let mut gan_cfg = self.cfg.gan.clone();
        gan_cfg.seed = derive_seed(self.seed, "gan");
        let untrained = GanState::new(gan_cfg, tokenizer.vocab_size(), corpora.n_classes)?;

        let project = |state: &GanState, name: &str| -> Result<f64> {
            let batch: EmbeddingBatch = state.encode_batch(&subset)?;
            let points = projection::project_2d(&batch)?;
            projection::write_csv(&points, &dir.join(format!("{name}.csv")))?;
            if name == "projection" {
                projection::write_svg(&points, &dir.join("scatter.svg"))?;
            }
            Ok(projection::centroid_spread(&points))
        };
        let spread_trained = project(&trained, "projection")?;
        let spread_untrained = project(&untrained, "projection_untrained")?;
        let ratio = if spread_untrained > 0.0 {
            spread_trained / spread_untrained
        } else {
            f64::INFINITY
        };
        write_json(
            &dir.join("centroid_spread.json"),
            &serde_json::json!({
                "trained": spread_trained,
                "untrained": spread_untrained,
                "ratio": ratio,
            }),
        )?;
        Ok(())
    }

    pub fn read_centroid_spread(&self) -> Result<serde_json::Value> {
        read_json(&self.stage_dir(Stage::ExportProj).join("centroid_spread.json"))
    }
}

/// Renders recommendation prompts for training and evaluation: titles come
/// from the reconstruction map when enabled, guidance from the
/// collaborative model's verdict, vectors from its tables. Stage A renders
/// text-only prompts (no guidance), matching the first fine-tuning phase;
/// collaborative inputs appear from stage B onward.
pub struct PromptBuilder<'a> {
    pub tokenizer: &'a Tokenizer,
    pub templates: &'a Templates,
    pub recon: Option<&'a BTreeMap<String, String>>,
    pub collab: Option<&'a CollabParams>,
    pub rec_cfg: &'a RecConfig,
    /// Guidance dropout applies to training prompts only.
    pub train_mode: bool,
}

impl<'a> PromptBuilder<'a> {
    fn title_of(&self, item_id: &str, raw: &str) -> String {
        match self.recon {
            Some(map) => match map.get(item_id) {
                Some(t) if !t.trim().is_empty() => t.clone(),
                _ => raw.to_string(),
            },
            None => raw.to_string(),
        }
    }

    fn history_titles(&self, s: &SplitSample) -> Vec<String> {
        s.history
            .iter()
            .zip(&s.history_titles)
            .map(|(i, t)| self.title_of(i, t))
            .collect()
    }

    fn guidance_for(&self, user: &str, item: &str) -> Guidance {
        match self.collab {
            Some(c) => {
                if self.train_mode && self.rec_cfg.guidance_dropout > 0.0 {
                    // deterministic per-pair coin
                    let h = divrec_core::util::fnv1a64(
                        format!("{}\u{1}{}\u{1}{}", user, item, self.rec_cfg.seed).as_bytes(),
                    );
                    let coin = (h >> 11) as f64 / (1u64 << 53) as f64;
                    if coin < self.rec_cfg.guidance_dropout {
                        return Guidance::Absent;
                    }
                }
                if c.predict(user, item) >= 0.5 {
                    Guidance::Yes
                } else {
                    Guidance::No
                }
            }
            None => Guidance::Absent,
        }
    }

    pub fn vectors_for(&self, user: &str, item: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        self.collab.map(|c| c.embed(user, item))
    }

    fn prompt_for(
        &self,
        s: &SplitSample,
        item_id: &str,
        raw_title: &str,
    ) -> Result<PromptInstance> {
        let hist = self.history_titles(s);
        let title = self.title_of(item_id, raw_title);
        let guidance = self.guidance_for(&s.user_id, item_id);
        Ok(render_rec_prompt(
            self.tokenizer,
            self.templates,
            &hist,
            &title,
            guidance,
            self.rec_cfg.history_cap,
        )?)
    }

    /// One positive instance per sample plus `neg_per_pos` of its sampled
    /// negatives.
    pub fn train_instances(&self, samples: &[SplitSample]) -> Result<Vec<RecInstance>> {
        let mut out = Vec::with_capacity(samples.len() * (1 + self.rec_cfg.neg_per_pos));
        for s in samples {
            out.push(RecInstance {
                user_id: s.user_id.clone(),
                item_id: s.target.clone(),
                prompt: self.prompt_for(s, &s.target, &s.target_title)?,
                label: true,
            });
            for (n, nt) in s
                .negatives
                .iter()
                .zip(&s.negative_titles)
                .take(self.rec_cfg.neg_per_pos)
            {
                out.push(RecInstance {
                    user_id: s.user_id.clone(),
                    item_id: n.clone(),
                    prompt: self.prompt_for(s, n, nt)?,
                    label: false,
                });
            }
        }
        Ok(out)
    }

    /// Candidate prompts for one test sample, positive first.
    pub fn eval_candidates(&self, s: &SplitSample) -> Result<Vec<(String, PromptInstance)>> {
        let mut out = Vec::with_capacity(1 + s.negatives.len());
        out.push((s.target.clone(), self.prompt_for(s, &s.target, &s.target_title)?));
        for (n, nt) in s.negatives.iter().zip(&s.negative_titles) {
            out.push((n.clone(), self.prompt_for(s, n, nt)?));
        }
        Ok(out)
    }
}
