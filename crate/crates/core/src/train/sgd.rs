use std::f64::consts::PI;

use crate::error::{KwsError, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Sgd { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// One update. `grads[i]` belongs to the `i`-th parameter; a missing
    /// gradient counts as zero. Nothing is changed if any gradient is not
    /// finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&[f64]>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(KwsError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != params.get(id).numel() {
                    return Err(KwsError::dim("sgd_step", &[g.len()], params.get(id).shape()));
                }
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(KwsError::Numeric(format!(
                        "non-finite gradient {} at index {bad} of {}",
                        g[bad],
                        params.name(id)
                    )));
                }
            }
        }
        let ids: Vec<_> = params.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                v[i] = self.momentum * v[i] + gi + self.weight_decay * w[i];
                w[i] -= lr * v[i];
            }
        }
        Ok(())
    }

    /// Momentum buffers keyed by parameter name, for checkpoints.
    pub fn export(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        params
            .ids()
            .zip(&self.velocity)
            .map(|(id, v)| {
                let shape = params.get(id).shape().to_vec();
                (params.name(id).to_string(), Tensor::new(shape, v.clone()).expect("velocity matches its parameter"))
            })
            .collect()
    }

    pub fn import(&mut self, params: &ParamStore, saved: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in saved {
            let id = params
                .find(name)
                .ok_or_else(|| KwsError::config(format!("velocity for unknown parameter {name}")))?;
            let slot = &mut self.velocity[params.ids().position(|x| x == id).unwrap_or(0)];
            if slot.len() != t.numel() {
                return Err(KwsError::dim("sgd_import", &[slot.len()], t.shape()));
            }
            slot.copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at epoch 0 to `lr0·decay` at the last epoch.
pub fn cosine_lr(epoch: usize, max_epochs: usize, lr0: f64, decay: f64) -> f64 {
    if max_epochs <= 1 {
        return lr0;
    }
    let lr_final = lr0 * decay;
    let t = epoch.min(max_epochs - 1) as f64 / (max_epochs - 1) as f64;
    lr_final + 0.5 * (lr0 - lr_final) * (1.0 + (PI * t).cos())
}
