//! Experiment configuration: one TOML file drives every stage. The config
//! fingerprint (content hash with run-varying fields normalized out) is
//! embedded in every artifact so mismatched pipelines abort early.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use divrec_core::collab::CollabConfig;
use divrec_core::data::PreprocessConfig;
use divrec_core::gan::GanConfig;
use divrec_core::prompt::{Templates, TokenizerConfig};
use divrec_core::rec::RecConfig;
use divrec_core::synth::SynthConfig;
use divrec_core::util::fnv1a64;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    /// JSONL interaction log; mutually exclusive with `synth`.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Built-in synthetic dataset parameters.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Category name rendered into the attribute template's domain slot.
    pub domain: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSection {
    pub n_neg: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { n_neg: 9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttrsSection {
    pub k: usize,
    pub candidate_pool: usize,
    #[serde(default)]
    pub stoplist: Option<PathBuf>,
    /// External predictor output (JSONL); overrides the co-occurrence
    /// predictor when set.
    #[serde(default)]
    pub external: Option<PathBuf>,
}

impl Default for AttrsSection {
    fn default() -> Self {
        Self {
            k: 5,
            candidate_pool: 30,
            stoplist: None,
            external: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { ks: vec![1, 3, 5] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub attrs: AttrsSection,
    #[serde(default)]
    pub vocab: TokenizerConfig,
    /// Optional templates.toml path; the built-in wording ships otherwise.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    pub gan: GanConfig,
    #[serde(default)]
    pub collab: CollabConfig,
    pub rec: RecConfig,
    #[serde(default)]
    pub eval: EvalSection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplatesFile {
    pub templates: Templates,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full validation before any stage runs.
    pub fn validate(&self) -> Result<()> {
        match (&self.data.input, &self.data.synth) {
            (None, None) => {
                return Err(CliError::Config(
                    "data needs either an input path or a synth section".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "data.input and data.synth are mutually exclusive".into(),
                ))
            }
            (Some(p), None) if !p.exists() => {
                return Err(CliError::Config(format!(
                    "input file {} does not exist",
                    p.display()
                )))
            }
            _ => {}
        }
        if self.data.domain.trim().is_empty() {
            return Err(CliError::Config("data.domain must be non-empty".into()));
        }
        if self.preprocess.trunc_lo < 2 {
            return Err(CliError::Config("preprocess.trunc_lo must be >= 2".into()));
        }
        if self.preprocess.trunc_hi < self.preprocess.trunc_lo {
            return Err(CliError::Config(
                "preprocess.trunc_hi must be >= trunc_lo".into(),
            ));
        }
        if self.split.n_neg == 0 {
            return Err(CliError::Config("split.n_neg must be >= 1".into()));
        }
        if self.attrs.k == 0 {
            return Err(CliError::Config("attrs.k must be >= 1".into()));
        }
        if self.attrs.candidate_pool < self.attrs.k {
            return Err(CliError::Config(
                "attrs.candidate_pool must be >= attrs.k".into(),
            ));
        }
        if let Some(p) = &self.attrs.stoplist {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "stoplist {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(p) = &self.templates {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "templates file {} does not exist",
                    p.display()
                )));
            }
        }
        for (name, v) in [
            ("gan.alpha", self.gan.alpha),
            ("gan.beta", self.gan.beta),
            ("gan.gamma", self.gan.gamma),
        ] {
            if !(v >= 0.0) {
                return Err(CliError::Config(format!("{name} must be >= 0")));
            }
        }
        if self.gan.batch < 2 {
            return Err(CliError::Config("gan.batch must be >= 2".into()));
        }
        if self.rec.adapter_rank == 0 || self.rec.adapter_rank > self.rec.width {
            return Err(CliError::Config(
                "rec.adapter_rank must be in [1, rec.width]".into(),
            ));
        }
        if self.eval.ks.is_empty()
            || self
                .eval
                .ks
                .iter()
                .any(|&k| k == 0 || k > self.split.n_neg + 1)
        {
            return Err(CliError::Config(format!(
                "eval.ks must lie in [1, {}]",
                self.split.n_neg + 1
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be non-empty".into()));
        }
        Ok(())
    }

    /// Content hash with the run-varying knobs normalized out: the output
    /// location and the per-run seeds do not change experiment identity.
    pub fn fingerprint(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        canon.gan.seed = 0;
        canon.rec.seed = 0;
        let json = serde_json::to_string(&canon).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    /// Output root honoring the DIVREC_OUT override and an optional
    /// subdirectory (used for ablation runs).
    pub fn out_root(&self, out_sub: Option<&str>) -> PathBuf {
        let base = std::env::var_os("DIVREC_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir.clone());
        match out_sub {
            Some(s) => base.join(s),
            None => base,
        }
    }

    pub fn load_templates(&self) -> Result<Templates> {
        match &self.templates {
            None => Ok(Templates::default()),
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("read {}: {e}", path.display())))?;
                let f: TemplatesFile = toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("parse templates: {e}")))?;
                Ok(f.templates)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
seeds = [1, 2]
out_dir = "runs/test"

[data]
domain = "widgets"
[data.synth]
users = 40
items = 30
clusters = 5
min_events = 6
max_events = 10
in_cluster_prob = 0.9
noise_fraction = 0.05
seed = 3

[gan]
encoder = "recurrent"
width = 16
alpha = 0.5
beta = 0.5
gamma = 1.0
disc_steps = 1
gen_steps = 1
epochs = 2
pretrain_epochs = 2
batch = 8
lr_gen = 1e-3
lr_disc = 1e-3
max_pairs = 64
probe_fraction = 0.2
early_stop_delta = 1e-4
early_stop_patience = 3
disc_hidden = 16
seed = 0

[rec]
width = 16
adapter_rank = 4
adapter_scale = 1.0
variant = "rec-ori"
pretrain_epochs = 1
stage_a_epochs = 1
stage_b_epochs = 1
lr_pretrain = 3e-3
lr_a = 3e-3
lr_b = 3e-3
batch = 8
neg_per_pos = 1
history_cap = 6
use_reconstructed = true
seed = 0
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg: ExperimentConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.attrs.k, 5);
        assert_eq!(cfg.split.n_neg, 9);
        assert_eq!(cfg.eval.ks, vec![1, 3, 5]);
    }

    #[test]
    fn fingerprint_ignores_out_dir_and_run_seeds() {
        let a: ExperimentConfig = toml::from_str(&minimal_toml()).unwrap();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("somewhere/else");
        b.gan.seed = 99;
        b.rec.seed = 42;
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.gan.alpha = 0.0;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg: ExperimentConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.data.synth = None;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));

        let mut cfg: ExperimentConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.eval.ks = vec![11];
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));

        let mut cfg: ExperimentConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
