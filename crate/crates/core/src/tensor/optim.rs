use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            algorithm: Algorithm::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            algorithm: Algorithm::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = Some(clip_norm);
        self
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }

    /// A zero learning rate is accepted and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bail!(Tensor, "learning rate must be a finite non-negative number, got {}", self.learning_rate);
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bail!(Tensor, "{name} must lie in [0, 1), got {b}");
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            bail!(Tensor, "epsilon must be positive, got {}", self.epsilon);
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                bail!(Tensor, "clip_norm must be positive, got {c}");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Stateful first-order optimizer over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    steps: u64,
    moments: HashMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            steps: 0,
            moments: HashMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates `params` in place from their stored gradients, then clears those
    /// gradients. With `clip_norm` set, the gradient vector over all listed
    /// parameters is rescaled to at most that norm first.
    ///
    /// Adam bias correction uses each parameter's own update count, so a task
    /// head touched only on its task's batches is corrected by its own history.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, params: &[ParamId]) -> Result<StepReport> {
        let mut grads: Vec<Tensor<T>> = Vec::with_capacity(params.len());
        for &id in params {
            match store.take_grad(id) {
                Some(g) => grads.push(g),
                None => bail!(Tensor, "optimizer: parameter {} has no gradient", store.get(id).name),
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm.unwrap_or(f64::INFINITY));
        if !grad_norm.is_finite() {
            bail!(Tensor, "optimizer: non-finite gradient norm {grad_norm}");
        }
        let clipped = self.cfg.clip_norm.is_some_and(|c| grad_norm > c);
        self.steps += 1;
        let lr = self.cfg.learning_rate;
        for (&id, g) in params.iter().zip(&grads) {
            let value = store.value_mut(id);
            match self.cfg.algorithm {
                Algorithm::Sgd => {
                    for (w, &gv) in value.data_mut().iter_mut().zip(g.data()) {
                        *w = T::lit(w.as_f64() - lr * gv.as_f64());
                    }
                }
                Algorithm::Adam => {
                    let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);
                    let st = self.moments.entry(id).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                        t: 0,
                    });
                    st.t += 1;
                    let bc1 = 1.0 - b1.powi(st.t as i32);
                    let bc2 = 1.0 - b2.powi(st.t as i32);
                    for (i, (w, &gv)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gi = gv.as_f64();
                        st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                        st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                        let mhat = st.m[i] / bc1;
                        let vhat = st.v[i] / bc2;
                        *w = T::lit(w.as_f64() - lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(StepReport {
            grad_norm,
            clipped,
        })
    }
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::lit(v.as_f64() * s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: &[f64], grad: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("w", super::super::ParamKind::Weight, Tensor::vector(value))
            .unwrap();
        s.set_grad(id, Tensor::vector(grad)).unwrap();
        (s, id)
    }

    #[test]
    fn sgd_single_step() {
        let (mut s, id) = store_with(&[1.0], &[2.0]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        opt.step(&mut s, &[id]).unwrap();
        assert!((s.value(id).data()[0] - 0.8).abs() < 1e-15);
        assert!(s.grad(id).is_none(), "gradients cleared after step");
    }

    #[test]
    fn clipping_rescales_to_unit_norm() {
        let (mut s, id) = store_with(&[0.0, 0.0], &[3.0, 4.0]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1.0).with_clip(1.0)).unwrap();
        let rep = opt.step(&mut s, &[id]).unwrap();
        assert!(rep.clipped);
        assert_eq!(rep.grad_norm, 5.0);
        let v = s.value(id).data();
        assert!((v[0] + 0.6).abs() < 1e-15 && (v[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate_times_sign() {
        // At t=1: m̂ = g, v̂ = g², so Δ = α·g/(|g|+ε) ≈ α·sign(g).
        for g in [3.7, -0.02] {
            let (mut s, id) = store_with(&[1.0], &[g]);
            let mut opt = Optimizer::new(OptimizerConfig::adam(5e-4)).unwrap();
            opt.step(&mut s, &[id]).unwrap();
            let expected = 1.0 - 5e-4 * g / (g.abs() + 1e-8);
            assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
            assert!((s.value(id).data()[0] - (1.0 - 5e-4 * g.signum())).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_zeros("head.bias", &[2]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3)).unwrap();
        let err = opt.step(&mut s, &[id]).unwrap_err().to_string();
        assert!(err.contains("head.bias"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::adam(-1.0).validate().is_err());
        assert!(OptimizerConfig::adam(0.0).validate().is_ok());
        assert!(OptimizerConfig::adam(1e-3).with_clip(0.0).validate().is_err());
        let mut c = OptimizerConfig::adam(1e-3);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn clip_helper_preserves_direction() {
        let mut g = vec![Tensor::<f64>::vector(&[6.0, 8.0])];
        let n = clip_global_norm(&mut g, 2.0);
        assert_eq!(n, 10.0);
        assert!((g[0].data()[0] - 1.2).abs() < 1e-15);
        assert!((g[0].data()[1] - 1.6).abs() < 1e-15);
    }
}
