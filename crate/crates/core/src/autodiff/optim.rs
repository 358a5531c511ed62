use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradStore, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn validate(params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
    }
    grads.check_congruent(params)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            param: name.to_string(),
        });
    }
    Ok(())
}

/// `θ ← θ − lr·g`
pub fn sgd_step(params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
    validate(params, grads, lr)?;
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    params.step_count += 1;
    Ok(())
}

/// Adam moment state, keyed like the parameters it updates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        validate(params, grads, lr)?;
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * d;
                *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.step_count += 1;
        Ok(())
    }
}

/// Either optimizer behind one interface, chosen by config.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamConfig::default())),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, grads, lr),
            Optimizer::Adam(adam) => adam.step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::vector(vec![v]));
        p
    }

    fn grad_of(params: &ParamStore, f: impl Fn(&mut Graph, crate::autodiff::Var) -> crate::autodiff::Var) -> GradStore {
        let mut g = Graph::new();
        let w = g.param(params, "theta").unwrap();
        let l = f(&mut g, w);
        g.backward(l, params).unwrap()
    }

    #[test]
    fn sgd_single_step() {
        let mut p = scalar_store(1.0);
        let mut grads = p.zeros_like();
        grads.get_mut("theta").unwrap().data_mut()[0] = 2.0;
        sgd_step(&mut p, &grads, 0.5).unwrap();
        assert_eq!(p.get("theta").unwrap().data(), &[0.0]);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn zero_lr_and_zero_grad_are_identity() {
        let mut p = scalar_store(0.25);
        let before = p.clone();
        let mut grads = p.zeros_like();
        grads.get_mut("theta").unwrap().data_mut()[0] = 3.0;
        sgd_step(&mut p, &grads, 0.0).unwrap();
        assert!(p.bitwise_eq(&before));
        let zeros = p.zeros_like();
        sgd_step(&mut p, &zeros, 0.7).unwrap();
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn ten_sgd_steps_on_square_follow_geometric_recursion() {
        // d/dθ θ² = 2θ, so θ_{t+1} = θ_t (1 - 2·0.1) = 0.8 θ_t
        let expected = 0.8f64.powi(10);
        let mut p = scalar_store(1.0);
        for _ in 0..10 {
            let grads = grad_of(&p, |g, w| {
                let sq = g.mul(w, w).unwrap();
                g.sum(sq)
            });
            sgd_step(&mut p, &grads, 0.1).unwrap();
        }
        let theta = p.get("theta").unwrap().item();
        assert!((theta - expected).abs() < 1e-12, "{theta} vs {expected}");
        assert!((expected - 0.1074).abs() < 1e-4);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let mut grads = p.zeros_like();
        grads.get_mut("theta").unwrap().data_mut()[0] = f64::NAN;
        match sgd_step(&mut p, &grads, 0.1) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "theta"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // with bias correction, the first Adam step is lr·g/(|g|+eps)
        let mut p = scalar_store(1.0);
        let mut grads = p.zeros_like();
        grads.get_mut("theta").unwrap().data_mut()[0] = 4.0;
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &grads, 0.01).unwrap();
        let theta = p.get("theta").unwrap().item();
        assert!((theta - (1.0 - 0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }
}
