//! Cosine similarity, KL / JS / total-variation divergences, the weighted
//! diversity constraint, and batch-level cross-class diversity reports.
//!
//! Scalar versions operate on plain slices and are used for measurement;
//! tape versions build differentiable graphs for the generator loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, Tape, Var};

const LOG_FLOOR: f64 = 1e-12;
const DIST_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DivError {
    #[error("divergence error: {0}")]
    Invalid(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Normalization applied before information-theoretic measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Softmax at temperature 1.
    #[default]
    Softmax,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DivergenceConfig {
    /// Weight on the cosine term.
    pub alpha: f64,
    /// Weight on the Jensen-Shannon term.
    pub beta: f64,
    /// Constraint strength applied by the adversarial trainer.
    pub gamma: f64,
    #[serde(default)]
    pub normalization: Normalization,
    /// When set, the trainer's constraint term uses the literal
    /// `alpha*cos + beta*js` combination instead of the corrected
    /// `alpha*cos - beta*js` (see `constraint_term`).
    #[serde(default)]
    pub paper_literal_sign: bool,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            normalization: Normalization::Softmax,
            paper_literal_sign: false,
        }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<(), DivError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) {
                return Err(DivError::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Cosine of the angle between two vectors.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64, DivError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(DivError::Invalid(format!(
            "cosine needs equal nonzero dimensions, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(DivError::Invalid(
            "cosine undefined for an all-zero vector".into(),
        ));
    }
    Ok(dot / (nx * ny))
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), DivError> {
    if p.iter().any(|&v| v < 0.0) {
        return Err(DivError::Invalid(format!("{what} has a negative entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(DivError::Invalid(format!(
            "{what} sums to {s}, not 1 within {DIST_TOL}"
        )));
    }
    Ok(())
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)` in nats; `p_i = 0` terms contribute
/// zero, `q` is floored at 1e-12 inside the log.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64, DivError> {
    if p.len() != q.len() {
        return Err(DivError::Invalid(format!(
            "kl dimension mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            total += pi * (pi.ln() - qi.max(LOG_FLOOR).ln());
        }
    }
    total
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`. Exactly symmetric:
/// the mean distribution and the two KL terms combine commutatively.
pub fn js(p: &[f64], q: &[f64]) -> Result<f64, DivError> {
    if p.len() != q.len() {
        return Err(DivError::Invalid(format!(
            "js dimension mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl_unchecked(p, &m) + 0.5 * kl_unchecked(q, &m))
}

/// Total variation distance `0.5 * sum |p_i - q_i|`, in `[0, 1]`.
pub fn tv(p: &[f64], q: &[f64]) -> Result<f64, DivError> {
    if p.len() != q.len() {
        return Err(DivError::Invalid(format!(
            "tv dimension mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(0.5 * p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<f64>())
}

/// Numerically-stable softmax of a raw vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// The combined measure `alpha * cos(x, x') + beta * JS(softmax x, softmax x')`.
/// Cosine acts on the raw vectors, JS on their softmax normalizations.
pub fn d_total(x: &[f64], y: &[f64], cfg: &DivergenceConfig) -> Result<f64, DivError> {
    if cfg.alpha == 0.0 && cfg.beta == 0.0 {
        return Ok(0.0);
    }
    let c = if cfg.alpha != 0.0 { cosine(x, y)? } else { 0.0 };
    let j = if cfg.beta != 0.0 {
        js(&softmax(x), &softmax(y))?
    } else {
        0.0
    };
    Ok(cfg.alpha * c + cfg.beta * j)
}

/// The constraint term the generator actually minimizes. Minimizing the
/// literal combination would push JS down, suppressing diversity, so by
/// default the JS term enters with a negative sign; `paper_literal_sign`
/// restores the verbatim combination for comparison runs.
pub fn constraint_term(x: &[f64], y: &[f64], cfg: &DivergenceConfig) -> Result<f64, DivError> {
    let c = if cfg.alpha != 0.0 { cosine(x, y)? } else { 0.0 };
    let j = if cfg.beta != 0.0 {
        js(&softmax(x), &softmax(y))?
    } else {
        0.0
    };
    let sign = if cfg.paper_literal_sign { 1.0 } else { -1.0 };
    Ok(cfg.alpha * c + sign * cfg.beta * j)
}

// ---- differentiable versions ---------------------------------------------

/// Cosine on the tape; both arguments are rank-1 vectors.
pub fn cosine_t(tape: &mut Tape, x: Var, y: Var) -> Result<Var, DivError> {
    let (dx, dy) = (tape.value(x).len(), tape.value(y).len());
    if dx != dy || dx == 0 {
        return Err(DivError::Invalid(format!(
            "cosine needs equal nonzero dimensions, got {dx} and {dy}"
        )));
    }
    if tape.value(x).iter().all(|&v| v == 0.0) || tape.value(y).iter().all(|&v| v == 0.0) {
        return Err(DivError::Invalid(
            "cosine undefined for an all-zero vector".into(),
        ));
    }
    let xy = tape.mul(x, y)?;
    let dot = tape.sum(xy);
    let xx = tape.mul(x, x)?;
    let sx = tape.sum(xx);
    let nx = tape.sqrt(sx);
    let yy = tape.mul(y, y)?;
    let sy = tape.sum(yy);
    let ny = tape.sqrt(sy);
    let denom = tape.mul(nx, ny)?;
    Ok(tape.div(dot, denom)?)
}

fn softmax_vec_t(tape: &mut Tape, x: Var) -> Result<Var, DivError> {
    let d = tape.value(x).len();
    let row = tape.reshape(x, vec![1, d])?;
    let sm = tape.softmax_rows(row);
    Ok(tape.reshape(sm, vec![d])?)
}

fn kl_t(tape: &mut Tape, p: Var, q: Var) -> Result<Var, DivError> {
    let lp = tape.ln_clamped(p, LOG_FLOOR);
    let lq = tape.ln_clamped(q, LOG_FLOOR);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    Ok(tape.sum(terms))
}

/// JS divergence of the softmax normalizations of two raw vectors.
pub fn js_softmax_t(tape: &mut Tape, x: Var, y: Var) -> Result<Var, DivError> {
    let p = softmax_vec_t(tape, x)?;
    let q = softmax_vec_t(tape, y)?;
    let sum = tape.add(p, q)?;
    let m = tape.scale(sum, 0.5);
    let kl_pm = kl_t(tape, p, m)?;
    let kl_qm = kl_t(tape, q, m)?;
    let total = tape.add(kl_pm, kl_qm)?;
    Ok(tape.scale(total, 0.5))
}

/// Differentiable `alpha * cos + beta * js(softmax)`; gradient flows to
/// both arguments.
pub fn d_total_t(tape: &mut Tape, x: Var, y: Var, cfg: &DivergenceConfig) -> Result<Var, DivError> {
    let c = cosine_t(tape, x, y)?;
    let j = js_softmax_t(tape, x, y)?;
    let ca = tape.scale(c, cfg.alpha);
    let jb = tape.scale(j, cfg.beta);
    Ok(tape.add(ca, jb)?)
}

/// Differentiable constraint term with the sign convention of
/// [`constraint_term`].
pub fn constraint_t(
    tape: &mut Tape,
    x: Var,
    y: Var,
    cfg: &DivergenceConfig,
) -> Result<Var, DivError> {
    let c = cosine_t(tape, x, y)?;
    let j = js_softmax_t(tape, x, y)?;
    let ca = tape.scale(c, cfg.alpha);
    let sign = if cfg.paper_literal_sign { 1.0 } else { -1.0 };
    let jb = tape.scale(j, sign * cfg.beta);
    Ok(tape.add(ca, jb)?)
}

// ---- batch reports ---------------------------------------------------------

/// Pooled embedding vectors with class ids and sample ids, rows 1:1.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub vectors: Vec<Vec<f64>>,
    pub class_ids: Vec<usize>,
    pub sample_ids: Vec<String>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Vec<Vec<f64>>, class_ids: Vec<usize>, sample_ids: Vec<String>) -> Self {
        assert_eq!(vectors.len(), class_ids.len());
        assert_eq!(vectors.len(), sample_ids.len());
        Self {
            vectors,
            class_ids,
            sample_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
    pub n_pairs: usize,
    /// Same mean expressed in bits, for the log-based measures.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_bits: Option<f64>,
}

fn stats(values: &[f64], in_bits: bool) -> MetricStats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MetricStats {
        mean,
        std: var.sqrt(),
        n_pairs: n,
        mean_bits: in_bits.then(|| mean / std::f64::consts::LN_2),
    }
}

/// Cross-class pairwise diversity statistics, per class pair and overall.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    /// metric name -> stats over every cross-class pair
    pub overall: BTreeMap<String, MetricStats>,
    /// "i-j" class pair -> metric name -> stats
    pub per_class_pair: BTreeMap<String, BTreeMap<String, MetricStats>>,
}

impl DiversityReport {
    pub fn mean(&self, metric: &str) -> f64 {
        self.overall.get(metric).map(|s| s.mean).unwrap_or(f64::NAN)
    }
}

/// Mean cross-class pairwise values of cosine, KL (both directions
/// averaged), JS and TV. The information measures act on softmax-normalized
/// copies; cosine acts on the raw vectors.
pub fn batch_diversity_report(batch: &EmbeddingBatch) -> Result<DiversityReport, DivError> {
    let mut classes: Vec<usize> = batch.class_ids.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(DivError::Report(format!(
            "diversity report needs >= 2 classes, got {}",
            classes.len()
        )));
    }
    let softmaxed: Vec<Vec<f64>> = batch.vectors.iter().map(|v| softmax(v)).collect();

    let mut overall: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut per_pair: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();

    for (ci_idx, &ci) in classes.iter().enumerate() {
        for &cj in &classes[ci_idx + 1..] {
            let key = format!("{ci}-{cj}");
            let pair_map = per_pair.entry(key).or_default();
            for a in 0..batch.len() {
                if batch.class_ids[a] != ci {
                    continue;
                }
                for b in 0..batch.len() {
                    if batch.class_ids[b] != cj {
                        continue;
                    }
                    let cos_v = cosine(&batch.vectors[a], &batch.vectors[b])?;
                    let js_v = js(&softmaxed[a], &softmaxed[b])?;
                    let kl_ab = kl(&softmaxed[a], &softmaxed[b])?;
                    let kl_ba = kl(&softmaxed[b], &softmaxed[a])?;
                    let kl_v = 0.5 * (kl_ab + kl_ba);
                    let tv_v = tv(&softmaxed[a], &softmaxed[b])?;
                    for (name, v) in [("cos", cos_v), ("js", js_v), ("kl", kl_v), ("tv", tv_v)] {
                        overall.entry(name.into()).or_default().push(v);
                        pair_map.entry(name.into()).or_default().push(v);
                    }
                }
            }
        }
    }

    let finalize = |m: BTreeMap<String, Vec<f64>>| {
        m.into_iter()
            .map(|(k, v)| {
                let bits = k == "js" || k == "kl";
                (k, stats(&v, bits))
            })
            .collect::<BTreeMap<_, _>>()
    };
    Ok(DiversityReport {
        overall: finalize(overall),
        per_class_pair: per_pair.into_iter().map(|(k, v)| (k, finalize(v))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_difference, max_relative_error};

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_zero_vector_is_error() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert!(kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap().abs() < 1e-15);
        let ab = kl(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        let ba = kl(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((ab - ba).abs() > 1e-3, "KL must be asymmetric here");
        // direct summation: 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5)
        let want = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((ab - want).abs() < 1e-12);
        assert!((ab - 0.36800).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_non_distribution() {
        assert!(kl(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn js_examples() {
        assert!(js(&[0.4, 0.6], &[0.4, 0.6]).unwrap().abs() < 1e-15);
        let maxjs = js(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((maxjs - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        assert!(tv(&[0.4, 0.6], &[0.4, 0.6]).unwrap().abs() < 1e-15);
        assert!((tv(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((tv(&[0.9, 0.1], &[0.5, 0.5]).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn d_total_composition() {
        let cfg = DivergenceConfig {
            alpha: 0.5,
            beta: 0.5,
            ..Default::default()
        };
        let x = [0.3, -0.7, 1.1];
        let v = d_total(&x, &x, &cfg).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "identical vectors: 0.5*1 + 0.5*0");

        let zero = DivergenceConfig {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        assert_eq!(d_total(&[1.0, 2.0], &[3.0, -1.0], &zero).unwrap(), 0.0);
    }

    #[test]
    fn constraint_sign_convention() {
        let x = [1.0, 0.2, -0.5];
        let y = [-0.3, 0.9, 0.4];
        let mut cfg = DivergenceConfig::default();
        let corrected = constraint_term(&x, &y, &cfg).unwrap();
        cfg.paper_literal_sign = true;
        let literal = constraint_term(&x, &y, &cfg).unwrap();
        let j = js(&softmax(&x), &softmax(&y)).unwrap();
        assert!((literal - corrected - 2.0 * cfg.beta * j).abs() < 1e-12);
    }

    #[test]
    fn d_total_gradient_matches_finite_differences() {
        let cfg = DivergenceConfig::default();
        let x0 = vec![0.4, -0.9, 1.3, 0.2];
        let y0 = vec![-0.6, 0.8, 0.1, -1.0];

        let mut tape = Tape::new();
        let xp = crate::nn::Param::from_values("x", x0.clone(), vec![4]);
        let yp = crate::nn::Param::from_values("y", y0.clone(), vec![4]);
        let x = tape.param(&xp);
        let y = tape.param(&yp);
        let d = d_total_t(&mut tape, x, y, &cfg).unwrap();
        let grads = tape.backward(d).unwrap();

        let f_x = |vals: &[f64]| d_total(vals, &y0, &cfg).unwrap();
        let num_x = finite_difference(f_x, &x0, 1e-5);
        assert!(max_relative_error(&grads["x"], &num_x) < 1e-4);

        let f_y = |vals: &[f64]| d_total(&x0, vals, &cfg).unwrap();
        let num_y = finite_difference(f_y, &y0, 1e-5);
        assert!(max_relative_error(&grads["y"], &num_y) < 1e-4);

        // gradient flows to both arguments
        assert!(grads["x"].iter().any(|&g| g != 0.0));
        assert!(grads["y"].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn batch_report_trivial_cases() {
        // two classes, identical vectors: cos 1, js/kl/tv 0
        let batch = EmbeddingBatch::new(
            vec![vec![1.0, 2.0], vec![1.0, 2.0]],
            vec![0, 1],
            vec!["a".into(), "b".into()],
        );
        let rep = batch_diversity_report(&batch).unwrap();
        assert!((rep.mean("cos") - 1.0).abs() < 1e-12);
        assert!(rep.mean("js").abs() < 1e-12);
        assert!(rep.mean("kl").abs() < 1e-12);
        assert!(rep.mean("tv").abs() < 1e-12);

        // orthogonal one-hot embeddings: cos 0
        let batch = EmbeddingBatch::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1],
            vec!["a".into(), "b".into()],
        );
        let rep = batch_diversity_report(&batch).unwrap();
        assert!(rep.mean("cos").abs() < 1e-12);
    }

    #[test]
    fn batch_report_single_class_is_error() {
        let batch = EmbeddingBatch::new(
            vec![vec![1.0], vec![2.0]],
            vec![0, 0],
            vec!["a".into(), "b".into()],
        );
        assert!(matches!(
            batch_diversity_report(&batch),
            Err(DivError::Report(_))
        ));
    }

    #[test]
    fn batch_report_matches_brute_force_double_loop() {
        // 3 classes x 2 vectors: 12 cross-class unordered pairs
        let vectors = vec![
            vec![0.5, 0.1, -0.2],
            vec![0.9, -0.3, 0.0],
            vec![-0.4, 0.8, 0.2],
            vec![0.1, 0.7, -0.6],
            vec![0.0, -0.5, 1.0],
            vec![0.3, 0.3, 0.9],
        ];
        let class_ids = vec![0, 0, 1, 1, 2, 2];
        let ids = (0..6).map(|i| format!("s{i}")).collect();
        let batch = EmbeddingBatch::new(vectors.clone(), class_ids.clone(), ids);
        let rep = batch_diversity_report(&batch).unwrap();

        let mut cos_all = Vec::new();
        let mut js_all = Vec::new();
        for a in 0..6 {
            for b in 0..6 {
                if class_ids[a] < class_ids[b] {
                    cos_all.push(cosine(&vectors[a], &vectors[b]).unwrap());
                    js_all.push(js(&softmax(&vectors[a]), &softmax(&vectors[b])).unwrap());
                }
            }
        }
        assert_eq!(cos_all.len(), 12);
        let cos_mean = cos_all.iter().sum::<f64>() / 12.0;
        let js_mean = js_all.iter().sum::<f64>() / 12.0;
        assert!((rep.mean("cos") - cos_mean).abs() < 1e-12);
        assert!((rep.mean("js") - js_mean).abs() < 1e-12);
        assert_eq!(rep.overall["cos"].n_pairs, 12);
    }
}
