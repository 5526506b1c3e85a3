//! Cross-seed aggregation of evaluation metrics and of diversity-ablation
//! reports, as a machine-readable JSON plus a printed table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use divrec_core::gan::GanRunReport;
use divrec_core::metrics::MetricsReport;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const DIV_VARIANTS: [&str; 4] = ["div-ori", "div-cos", "div-js", "div-all"];
pub const REC_VARIANTS: [&str; 4] = ["rec-col", "rec-lora", "rec-sm", "rec-lora&sm"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MeanStd {
        mean,
        std: var.sqrt(),
        n,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AggregateReport {
    /// variant -> metric name -> aggregate over seeds
    pub rec: BTreeMap<String, BTreeMap<String, MeanStd>>,
    /// div variant -> diversity metric -> aggregate over seeds
    pub div: BTreeMap<String, BTreeMap<String, MeanStd>>,
}

fn metrics_path(root: &Path, sub: Option<&str>, seed: u64) -> PathBuf {
    let base = match sub {
        Some(s) => root.join(s),
        None => root.to_path_buf(),
    };
    base.join(format!("seed_{seed}")).join("eval").join("metrics.json")
}

fn div_report_path(root: &Path, sub: &str, seed: u64) -> PathBuf {
    root.join(sub)
        .join(format!("seed_{seed}"))
        .join("train-gan")
        .join("diversity_report.json")
}

fn collect_rec_rows(
    root: &Path,
    sub: Option<&str>,
    seeds: &[u64],
    label: &str,
) -> Result<BTreeMap<String, MeanStd>> {
    let mut gaps = Vec::new();
    let mut reports: Vec<MetricsReport> = Vec::new();
    for &seed in seeds {
        let path = metrics_path(root, sub, seed);
        match std::fs::read_to_string(&path) {
            Ok(text) => reports.push(
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Report(format!("parse {}: {e}", path.display())))?,
            ),
            Err(_) => gaps.push(seed),
        }
    }
    if !gaps.is_empty() {
        return Err(CliError::Report(format!(
            "missing eval runs for '{label}': seeds {gaps:?}"
        )));
    }
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &reports {
        table.entry("auc".into()).or_default().push(r.auc);
        for (k, v) in &r.hr {
            table.entry(format!("hr@{k}")).or_default().push(*v);
        }
        for (k, v) in &r.ndcg {
            table.entry(format!("ndcg@{k}")).or_default().push(*v);
        }
        for (k, v) in &r.mrr {
            table.entry(format!("mrr@{k}")).or_default().push(*v);
        }
    }
    Ok(table.into_iter().map(|(k, v)| (k, mean_std(&v))).collect())
}

fn collect_div_rows(root: &Path, sub: &str, seeds: &[u64]) -> Result<BTreeMap<String, MeanStd>> {
    let mut gaps = Vec::new();
    let mut reports: Vec<GanRunReport> = Vec::new();
    for &seed in seeds {
        let path = div_report_path(root, sub, seed);
        match std::fs::read_to_string(&path) {
            Ok(text) => reports.push(
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Report(format!("parse {}: {e}", path.display())))?,
            ),
            Err(_) => gaps.push(seed),
        }
    }
    if !gaps.is_empty() {
        return Err(CliError::Report(format!(
            "missing train-gan runs for '{sub}': seeds {gaps:?}"
        )));
    }
    let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &reports {
        let probe = r
            .epochs
            .last()
            .map(|m| &m.probe)
            .unwrap_or(&r.baseline_probe);
        for metric in ["js", "cos", "kl", "tv"] {
            table
                .entry(metric.to_string())
                .or_default()
                .push(probe.mean(metric));
        }
    }
    Ok(table.into_iter().map(|(k, v)| (k, mean_std(&v))).collect())
}

/// Aggregate the config's own eval runs, plus the Rec-* ablation runs under
/// `rec-<variant>/` and the Div-* runs under `div-<variant>/` when the
/// corresponding flag is set.
pub fn aggregate(
    cfg: &ExperimentConfig,
    rec_ablation: bool,
    div_ablation: bool,
) -> Result<AggregateReport> {
    let root = cfg.out_root(None);
    let mut out = AggregateReport::default();
    out.rec.insert(
        cfg.rec.variant.to_string(),
        collect_rec_rows(&root, None, &cfg.seeds, &cfg.rec.variant.to_string())?,
    );
    if rec_ablation {
        for v in REC_VARIANTS {
            let sub = format!("rec-ablation/{v}");
            out.rec
                .insert(v.to_string(), collect_rec_rows(&root, Some(&sub), &cfg.seeds, v)?);
        }
    }
    if div_ablation {
        for v in DIV_VARIANTS {
            let sub = format!("div-ablation/{v}");
            out.div
                .insert(v.to_string(), collect_div_rows(&root, &sub, &cfg.seeds)?);
        }
    }
    Ok(out)
}

/// Human-readable table.
pub fn render_table(report: &AggregateReport) -> String {
    let mut out = String::new();
    if !report.rec.is_empty() {
        let metrics: Vec<&String> = report
            .rec
            .values()
            .next()
            .map(|m| m.keys().collect())
            .unwrap_or_default();
        out.push_str(&format!("{:<14}", "variant"));
        for m in &metrics {
            out.push_str(&format!("{:>16}", m));
        }
        out.push('\n');
        for (variant, row) in &report.rec {
            out.push_str(&format!("{variant:<14}"));
            for m in &metrics {
                match row.get(*m) {
                    Some(s) => out.push_str(&format!("{:>9.4}±{:<6.4}", s.mean, s.std)),
                    None => out.push_str(&format!("{:>16}", "-")),
                }
            }
            out.push('\n');
        }
    }
    if !report.div.is_empty() {
        out.push_str("\ndiversity probe (final epoch means)\n");
        out.push_str(&format!(
            "{:<10}{:>16}{:>16}{:>16}{:>16}\n",
            "variant", "js", "cos", "kl", "tv"
        ));
        for (variant, row) in &report.div {
            out.push_str(&format!("{variant:<10}"));
            for m in ["js", "cos", "kl", "tv"] {
                match row.get(m) {
                    Some(s) => out.push_str(&format!("{:>9.5}±{:<6.5}", s.mean, s.std)),
                    None => out.push_str(&format!("{:>16}", "-")),
                }
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_std_is_zero() {
        let s = mean_std(&[0.7]);
        assert_eq!(s.mean, 0.7);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.n, 1);
    }

    #[test]
    fn mean_std_over_two_values() {
        let s = mean_std(&[0.4, 0.6]);
        assert!((s.mean - 0.5).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
    }
}
