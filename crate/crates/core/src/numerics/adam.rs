use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One bias-corrected Adam update applied in place.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam: {} moment slots, {} parameters, {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Dimension(format!(
                    "adam slot {i}: parameter {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (bc1, bc2, lr, eps) = (T::of(bc1), T::of(bc2), T::of(lr), T::of(eps));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
