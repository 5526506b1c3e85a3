//! Deterministic 2D PCA projection of embedding batches plus CSV/SVG
//! export and the between-class centroid spread measure.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use divrec_core::diversity::EmbeddingBatch;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub sample_id: String,
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
}

fn power_iterate_from(cov: &[f64], d: usize, start: Vec<f64>) -> Option<(Vec<f64>, f64)> {
    let mut v = start;
    let mut lambda = 0.0;
    for _ in 0..300 {
        let mut next = vec![0.0; d];
        for i in 0..d {
            let row = &cov[i * d..(i + 1) * d];
            next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return None;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        lambda = norm;
        if delta < 1e-12 {
            break;
        }
    }
    Some((v, lambda))
}

fn power_iteration(cov: &[f64], d: usize) -> (Vec<f64>, f64) {
    // deterministic starts: a varying pattern first, then basis vectors in
    // case the pattern is orthogonal to the leading eigenvector
    let pattern: Vec<f64> = (0..d).map(|i| 1.0 + (i % 7) as f64 / 7.0).collect();
    let norm: f64 = pattern.iter().map(|x| x * x).sum::<f64>().sqrt();
    let pattern: Vec<f64> = pattern.into_iter().map(|x| x / norm).collect();
    let mut starts = vec![pattern];
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        starts.push(e);
    }
    let mut result: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        if let Some((v, lambda)) = power_iterate_from(cov, d, start.clone()) {
            result = Some((v, lambda));
            break;
        }
        if result.is_none() {
            result = Some((start, 0.0));
        }
    }
    let (mut v, lambda) = result.expect("at least one start");
    // sign convention: the largest-magnitude coordinate is positive
    let mut max_i = 0;
    for (i, c) in v.iter().enumerate() {
        if c.abs() > v[max_i].abs() {
            max_i = i;
        }
    }
    if v[max_i] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (v, lambda)
}

/// Project a batch onto its top two principal components. Fully
/// deterministic: centering, power iteration from a fixed start vector,
/// deflation, and a fixed sign convention.
pub fn project_2d(batch: &EmbeddingBatch) -> Result<Vec<ProjectedPoint>> {
    let n = batch.len();
    if n < 2 {
        return Err(CliError::Stage(format!(
            "projection error: need >= 2 samples, got {n}"
        )));
    }
    let d = batch.vectors[0].len();
    let mut mean = vec![0.0; d];
    for v in &batch.vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = batch
        .vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut cov = vec![0.0; d * d];
    for v in &centered {
        for i in 0..d {
            if v[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += v[i] * v[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);

    let (pc1, l1) = power_iteration(&cov, d);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * pc1[i] * pc1[j];
        }
    }
    let (pc2, _) = power_iteration(&deflated, d);

    Ok(centered
        .iter()
        .enumerate()
        .map(|(k, v)| ProjectedPoint {
            sample_id: batch.sample_ids[k].clone(),
            class_id: batch.class_ids[k],
            x: v.iter().zip(&pc1).map(|(a, b)| a * b).sum(),
            y: v.iter().zip(&pc2).map(|(a, b)| a * b).sum(),
        })
        .collect())
}

/// Mean pairwise euclidean distance between per-class centroids in the
/// projected plane.
pub fn centroid_spread(points: &[ProjectedPoint]) -> f64 {
    use std::collections::BTreeMap;
    let mut sums: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for p in points {
        let e = sums.entry(p.class_id).or_insert((0.0, 0.0, 0));
        e.0 += p.x;
        e.1 += p.y;
        e.2 += 1;
    }
    let centroids: Vec<(f64, f64)> = sums
        .values()
        .map(|(x, y, c)| (x / *c as f64, y / *c as f64))
        .collect();
    if centroids.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            let dx = centroids[i].0 - centroids[j].0;
            let dy = centroids[i].1 - centroids[j].1;
            total += (dx * dx + dy * dy).sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

pub fn write_csv(points: &[ProjectedPoint], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::from("sample_id,class_id,x,y\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.sample_id, p.class_id, p.x, p.y));
    }
    fs::write(path, out)?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// Minimal scatter plot, one color per class.
pub fn write_svg(points: &[ProjectedPoint], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let (w, h, m) = (640.0, 640.0, 40.0);
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for p in points {
        let px = m + (p.x - min_x) / span_x * (w - 2.0 * m);
        let py = h - m - (p.y - min_y) / span_y * (h - 2.0 * m);
        let color = PALETTE[p.class_id % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{color}\" \
             fill-opacity=\"0.75\"/>\n"
        ));
    }
    let classes: std::collections::BTreeSet<usize> = points.iter().map(|p| p.class_id).collect();
    for (i, c) in classes.iter().enumerate() {
        let color = PALETTE[c % PALETTE.len()];
        let y = 16.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            "<circle cx=\"12\" cy=\"{y:.1}\" r=\"4\" fill=\"{color}\"/>\
             <text x=\"22\" y=\"{:.1}\" font-size=\"12\" font-family=\"sans-serif\">class {c}</text>\n",
            y + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(vectors: Vec<Vec<f64>>, classes: Vec<usize>) -> EmbeddingBatch {
        let ids = (0..vectors.len()).map(|i| format!("s{i}")).collect();
        EmbeddingBatch::new(vectors, classes, ids)
    }

    #[test]
    fn identical_embeddings_project_to_origin() {
        let b = batch(vec![vec![1.0, 2.0, 3.0]; 5], vec![0, 0, 1, 1, 1]);
        let points = project_2d(&b).unwrap();
        for p in points {
            assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9);
        }
    }

    #[test]
    fn orthogonal_class_constants_give_two_distinct_points() {
        let b = batch(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 1.0, 0.0],
            ],
            vec![0, 0, 1, 1],
        );
        let points = project_2d(&b).unwrap();
        let d01 = ((points[0].x - points[2].x).powi(2) + (points[0].y - points[2].y).powi(2)).sqrt();
        assert!(d01 > 0.5, "classes should separate, got distance {d01}");
        assert!((points[0].x - points[1].x).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples_is_projection_error() {
        let b = batch(vec![vec![1.0, 2.0]], vec![0]);
        assert!(project_2d(&b).is_err());
    }

    #[test]
    fn pca_captures_the_dominant_direction() {
        // points spread along (1,1,0); PC1 must recover it
        let mut vectors = Vec::new();
        for k in 0..20 {
            let t = k as f64 - 10.0;
            vectors.push(vec![t, t, 0.01 * (k % 3) as f64]);
        }
        let n = vectors.len();
        let b = batch(vectors, vec![0; n]);
        let points = project_2d(&b).unwrap();
        // variance along x (pc1 scores) dwarfs y
        let var_x: f64 = points.iter().map(|p| p.x * p.x).sum();
        let var_y: f64 = points.iter().map(|p| p.y * p.y).sum();
        assert!(var_x > 100.0 * var_y.max(1e-12));
    }

    #[test]
    fn spread_and_files() {
        let b = batch(
            vec![
                vec![2.0, 0.0],
                vec![2.1, 0.0],
                vec![-2.0, 0.1],
                vec![-2.1, 0.0],
            ],
            vec![0, 0, 1, 1],
        );
        let points = project_2d(&b).unwrap();
        assert!(centroid_spread(&points) > 1.0);
        let dir = tempfile::tempdir().unwrap();
        write_csv(&points, &dir.path().join("p.csv")).unwrap();
        write_svg(&points, &dir.path().join("p.svg")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
        assert!(csv.starts_with("sample_id,class_id,x,y"));
        assert_eq!(csv.lines().count(), 5);
    }
}
