//! Learning-rate schedule and the adaptive-moment optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

use super::TrainConfig;

/// `base_lr` for the first `warm_iters` iterations, then halved every
/// `decay_period` iterations (the first halving happens at `warm_iters`),
/// never below `lr_floor`.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warm_iters {
        return cfg.base_lr;
    }
    let halvings = 1 + (iter - cfg.warm_iters) / cfg.decay_period;
    let lr = if halvings >= 1024 {
        0.0
    } else {
        cfg.base_lr / 2f64.powi(halvings as i32)
    };
    lr.max(cfg.lr_floor)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Updates applied so far.
    pub steps: u64,
}

/// Bias-corrected adaptive-moment updates. Weight decay lives in the loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every parameter that has a gradient. Nothing is
    /// modified if any gradient contains a non-finite value.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape().numel() != g.len() {
                return Err(Error::contract(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.shape().numel()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
            }
        }
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                steps: 0,
            });
            st.steps += 1;
            let t = st.steps as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            for (((w, &gv), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let gv = gv as f64;
                let mn = BETA1 * *m as f64 + (1.0 - BETA1) * gv;
                let vn = BETA2 * *v as f64 + (1.0 - BETA2) * gv * gv;
                *m = mn as f32;
                *v = vn as f32;
                let mhat = *m as f64 / c1;
                let vhat = *v as f64 / c2;
                *w = (*w as f64 - lr * mhat / (vhat.sqrt() + EPSILON)) as f32;
            }
        }
        Ok(())
    }

    /// Moments as named tensors: `adam.m.<p>`, `adam.v.<p>` and the step
    /// count `adam.t.<p>`.
    pub fn to_tensors(&self, shapes: &ParamStore<f32>) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut out = Vec::new();
        for (name, st) in &self.state {
            let shape = shapes.get(name)?.shape();
            out.push((format!("adam.m.{name}"), Tensor::from_vec(shape, st.m.clone())?));
            out.push((format!("adam.v.{name}"), Tensor::from_vec(shape, st.v.clone())?));
            out.push((
                format!("adam.t.{name}"),
                Tensor::scalar(st.steps as f32),
            ));
        }
        Ok(out)
    }

    pub fn from_tensors<'a>(
        tensors: impl Iterator<Item = (&'a String, &'a Tensor<f32>)>,
        params: &ParamStore<f32>,
    ) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut t = BTreeMap::new();
        for (name, tensor) in tensors {
            if let Some(p) = name.strip_prefix("adam.m.") {
                m.insert(p.to_string(), tensor);
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                v.insert(p.to_string(), tensor);
            } else if let Some(p) = name.strip_prefix("adam.t.") {
                t.insert(p.to_string(), tensor);
            }
        }
        let mut state = BTreeMap::new();
        for (name, mt) in m {
            let expected = params
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?
                .shape();
            let vt = v
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `adam.v.{name}`")))?;
            let tt = t
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `adam.t.{name}`")))?;
            if mt.shape() != expected || vt.shape() != expected || tt.shape() != Shape::scalar() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for `{name}` does not match parameter shape {expected}"
                )));
            }
            state.insert(
                name,
                Moments {
                    m: mt.data().to_vec(),
                    v: vt.data().to_vec(),
                    steps: tt.data()[0] as u64,
                },
            );
        }
        if let Some(name) = v.keys().chain(t.keys()).next() {
            return Err(Error::Checkpoint(format!("missing `adam.m.{name}`")));
        }
        Ok(Adam { state })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_halving_rule() {
        let cfg = TrainConfig::default();
        let lr = |i| lr_schedule(i, &cfg);
        assert_eq!(lr(0), 2e-4);
        assert_eq!(lr(99_999), 2e-4);
        assert_eq!(lr(100_000), 1e-4);
        assert_eq!(lr(149_999), 1e-4);
        assert_eq!(lr(150_000), 5e-5);
        assert_eq!(lr(200_000), 3e-5);
        assert_eq!(lr(300_000), 3e-5);
        assert_eq!(lr(u64::MAX), 3e-5);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::full(Shape::new(1, 1, 1, 3), 0.7f32));
        let before = p.clone();
        let mut adam = Adam::new();
        let grads = BTreeMap::from([("a.w".to_string(), vec![0.0f32; 3])]);
        adam.step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::full(Shape::new(1, 1, 1, 1), 1.0f32));
        p.insert("b.w", Tensor::full(Shape::new(1, 1, 1, 1), 1.0f32));
        let before = p.clone();
        let grads = BTreeMap::from([
            ("a.w".to_string(), vec![1.0f32]),
            ("b.w".to_string(), vec![f32::NAN]),
        ]);
        let err = Adam::new().step(&mut p, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("b.w"), "{err}");
        assert_eq!(p, before);
    }
}
