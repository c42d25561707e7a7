use gracaps_tensor::Tensor;

use crate::error::{contract, Result};
use crate::model::ParamSet;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplies the learning rate once per epoch.
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.96,
        }
    }
}

impl AdamConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

/// First and second moments per parameter, named like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected update of `params` in place. `params`, `grads` and
    /// the moments must share names and shapes in order.
    pub fn update(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [&mut Tensor], grads: &ParamSet) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, (name, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(contract(format!(
                    "`{name}`: parameter {:?}, gradient {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
                let gi = f64::from(gi);
                let m_new = b1 * f64::from(*mi) + (1.0 - b1) * gi;
                let v_new = b2 * f64::from(*vi) + (1.0 - b2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.eps);
                *pi = (f64::from(*pi) - update) as f32;
            }
        }
        Ok(())
    }
}
