//! Low-rank additive adapter over frozen weight matrices.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::param::Param;
use super::tape::{Tape, Var};
use super::NnError;

/// For each adapted target matrix `W (d, d')` the adapter holds a factor
/// pair `A (d, r)`, `B (r, d')`; the effective weight is `W + scaling * A B`.
/// `A` is seeded-uniform, `B` starts at zero so training begins at the base
/// model exactly.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub scaling: f64,
    pairs: BTreeMap<String, (Param, Param)>,
}

impl LowRankAdapter {
    pub fn new(rank: usize, scaling: f64) -> Self {
        Self {
            rank,
            scaling,
            pairs: BTreeMap::new(),
        }
    }

    /// Attach a factor pair for `target`, a `(d, d')` matrix parameter.
    pub fn attach(&mut self, target: &Param, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        if target.shape.len() != 2 {
            return Err(NnError::Contract(format!(
                "adapter target '{}' is not a matrix",
                target.name
            )));
        }
        let (d, d_out) = (target.shape[0], target.shape[1]);
        if self.rank > d.min(d_out) {
            return Err(NnError::Contract(format!(
                "adapter rank {} exceeds min dim {} of '{}'",
                self.rank,
                d.min(d_out),
                target.name
            )));
        }
        let a = Param::uniform(
            format!("adapter.{}.a", target.name),
            vec![d, self.rank],
            d,
            rng,
        );
        let b = Param::zeros(format!("adapter.{}.b", target.name), vec![self.rank, d_out]);
        self.pairs.insert(target.name.clone(), (a, b));
        Ok(())
    }

    pub fn has_target(&self, name: &str) -> bool {
        self.pairs.contains_key(name)
    }

    /// `x @ (W + scaling * A B)` computed as `x W + scaling ((x A) B)`.
    /// Falls back to plain `x W` for un-adapted targets.
    pub fn matmul(&self, tape: &mut Tape, x: Var, target: &Param) -> Result<Var, NnError> {
        let wv = tape.param(target);
        let base = tape.matmul(x, wv)?;
        match self.pairs.get(&target.name) {
            None => Ok(base),
            Some((a, b)) => {
                let av = tape.param(a);
                let bv = tape.param(b);
                let xa = tape.matmul(x, av)?;
                let xab = tape.matmul(xa, bv)?;
                let scaled = tape.scale(xab, self.scaling);
                tape.add(base, scaled)
            }
        }
    }

    /// Materialize `W + scaling * A B` for a target (used in tests and when
    /// exporting merged weights).
    pub fn merged(&self, target: &Param) -> Vec<f64> {
        let mut out = target.data.clone();
        if let Some((a, b)) = self.pairs.get(&target.name) {
            let (d, r) = (a.shape[0], a.shape[1]);
            let d_out = b.shape[1];
            for i in 0..d {
                for p in 0..r {
                    let av = a.data[i * r + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..d_out {
                        out[i * d_out + j] += self.scaling * av * b.data[p * d_out + j];
                    }
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        self.pairs
            .values()
            .flat_map(|(a, b)| [a, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.pairs.values_mut().flat_map(|(a, b)| [a, b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_b_means_identity_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Param::uniform("w", vec![6, 4], 6, &mut rng);
        let mut ad = LowRankAdapter::new(2, 1.0);
        ad.attach(&w, &mut rng).unwrap();
        assert_eq!(ad.merged(&w), w.data);

        let mut tape = Tape::new();
        let x = tape.constant(vec![0.5; 6], vec![1, 6]);
        let with = ad.matmul(&mut tape, x, &w).unwrap();
        let wv = tape.param(&w);
        let plain = tape.matmul(x, wv).unwrap();
        for (a, b) in tape.value(with).iter().zip(tape.value(plain)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_above_min_dim_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Param::uniform("w", vec![6, 2], 6, &mut rng);
        let mut ad = LowRankAdapter::new(3, 1.0);
        assert!(ad.attach(&w, &mut rng).is_err());
    }

    #[test]
    fn merged_matches_tape_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Param::uniform("w", vec![4, 3], 4, &mut rng);
        let mut ad = LowRankAdapter::new(2, 0.7);
        ad.attach(&w, &mut rng).unwrap();
        // give B nonzero values
        for p in ad.params_mut() {
            if p.name.ends_with(".b") {
                p.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
            }
        }
        let merged = ad.merged(&w);
        let x = vec![0.3, -1.0, 0.7, 2.0];

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone(), vec![1, 4]);
        let y = ad.matmul(&mut tape, xv, &w).unwrap();

        let mut want = vec![0.0; 3];
        for i in 0..4 {
            for j in 0..3 {
                want[j] += x[i] * merged[i * 3 + j];
            }
        }
        for (a, b) in tape.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
