use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// First/second moment buffers, one per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            state: AdamState {
                m: zeros.clone(),
                v: zeros,
                t: 0,
            },
        }
    }

    fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let c = &self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let eps = T::from_f64_lossy(c.eps);
        let lr = T::from_f64_lossy(lr);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (idx, grad) in grads.iter().enumerate() {
            let id = super::ParamId(idx);
            let m = self.state.m[idx].data_mut();
            let v = self.state.v[idx].data_mut();
            let theta = store.value_mut(id).data_mut();
            for (((p, &g), mi), vi) in theta.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Plain gradient descent, `θ ← θ − α·g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Sgd;

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, store: &ParamStore<T>, adam: AdamConfig) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(store, adam)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::Sgd(_) => OptimizerKind::Sgd,
        }
    }

    /// Number of updates applied so far (Adam only; 0 for SGD).
    pub fn steps(&self) -> u64 {
        match self {
            Optimizer::Adam(a) => a.state.t,
            Optimizer::Sgd(_) => 0,
        }
    }

    /// Applies one update. `grads` holds one tensor per parameter in store
    /// order. Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::dim(
                    "optimizer",
                    format!(
                        "gradient {:?} vs parameter `{}` {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    name: p.name.clone(),
                });
            }
        }
        match self {
            Optimizer::Adam(adam) => adam.step(store, grads, lr),
            Optimizer::Sgd(_) => {
                let lr = T::from_f64_lossy(lr);
                for (idx, g) in grads.iter().enumerate() {
                    let theta = store.value_mut(super::ParamId(idx)).data_mut();
                    for (p, &gi) in theta.iter_mut().zip(g.data()) {
                        *p -= lr * gi;
                    }
                }
            }
        }
        Ok(())
    }
}
