//! Adam / AdamW with per-parameter first and second moment state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::param::Param;
use super::tape::GradMap;
use super::NnError;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0.0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Optimizer over a fixed set of trainable parameter names. Parameters not
/// listed are never touched, which is how stage-freezing contracts are
/// enforced mechanically.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    state: BTreeMap<String, MomentState>,
    trainable: Vec<String>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, trainable: impl IntoIterator<Item = String>) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
            trainable: trainable.into_iter().collect(),
        }
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    /// Extend the trainable set (used when parameters are materialized
    /// lazily, e.g. per-row embedding entries).
    pub fn add_trainable(&mut self, name: String) {
        if !self.trainable.contains(&name) {
            self.trainable.push(name);
        }
    }

    pub fn state(&self) -> &BTreeMap<String, MomentState> {
        &self.state
    }

    pub fn restore_state(&mut self, state: BTreeMap<String, MomentState>) {
        self.state = state;
    }

    /// One update over the trainable subset. A non-finite gradient anywhere
    /// aborts the whole step before any parameter is modified.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param>,
        grads: &GradMap,
    ) -> Result<(), NnError> {
        let mut targets: Vec<&mut Param> = params
            .into_iter()
            .filter(|p| self.trainable.iter().any(|t| t == &p.name))
            .collect();

        for p in &targets {
            if let Some(g) = grads.get(&p.name) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGrad(p.name.clone()));
                }
            }
        }

        for p in &mut targets {
            let g: Vec<f64> = match grads.get(&p.name) {
                Some(g) => {
                    if g.len() != p.numel() {
                        return Err(NnError::Shape {
                            context: format!("gradient for '{}'", p.name),
                            left: g.len(),
                            right: p.numel(),
                        });
                    }
                    g.clone()
                }
                None => vec![0.0; p.numel()],
            };
            let st = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| MomentState {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                    t: 0,
                });
            apply_adam(&self.cfg, p, &g, st);
        }
        Ok(())
    }
}

fn apply_adam(cfg: &AdamConfig, p: &mut Param, g: &[f64], st: &mut MomentState) {
    st.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(st.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(st.t as i32);
    for i in 0..p.data.len() {
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = st.m[i] / b1t;
        let v_hat = st.v[i] / b2t;
        // decoupled decay, applied before the adaptive update
        p.data[i] *= 1.0 - cfg.lr * cfg.weight_decay;
        p.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: Vec<f64>) -> Param {
        let n = v.len();
        Param::from_values("p", v, vec![n])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = param(vec![1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::adam(0.1), ["p".to_string()]);
        let mut g = GradMap::new();
        g.insert("p".into(), vec![0.0, 0.0]);
        opt.step([&mut p], &g).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = param(vec![0.0, 0.0]);
        let lr = 0.01;
        let mut opt = Adam::new(AdamConfig::adam(lr), ["p".to_string()]);
        let mut g = GradMap::new();
        g.insert("p".into(), vec![3.0, -0.5]);
        opt.step([&mut p], &g).unwrap();
        // bias-corrected first step: -lr * g / (|g| + eps) ~= -lr * sign(g)
        assert!((p.data[0] + lr).abs() < 1e-6);
        assert!((p.data[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_shrinks_with_zero_grad() {
        let mut p = param(vec![2.0]);
        let lr = 0.1;
        let decay = 0.01;
        let mut opt = Adam::new(AdamConfig::adamw(lr, decay), ["p".to_string()]);
        let mut g = GradMap::new();
        g.insert("p".into(), vec![0.0]);
        opt.step([&mut p], &g).unwrap();
        assert!((p.data[0] - 2.0 * (1.0 - lr * decay)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_param() {
        let mut p = param(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::adam(0.1), ["p".to_string()]);
        let mut g = GradMap::new();
        g.insert("p".into(), vec![f64::NAN]);
        match opt.step([&mut p], &g) {
            Err(NnError::NonFiniteGrad(name)) => assert_eq!(name, "p"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
        assert_eq!(p.data, vec![1.0]);
    }

    #[test]
    fn untracked_params_are_never_touched() {
        let mut p = param(vec![1.0]);
        let mut frozen = Param::from_values("frozen", vec![5.0], vec![1]);
        let mut opt = Adam::new(AdamConfig::adam(0.1), ["p".to_string()]);
        let mut g = GradMap::new();
        g.insert("p".into(), vec![1.0]);
        g.insert("frozen".into(), vec![1.0]);
        opt.step([&mut p, &mut frozen], &g).unwrap();
        assert_eq!(frozen.data, vec![5.0]);
        assert_ne!(p.data, vec![1.0]);
    }
}
