//! Adam with decoupled weight decay, updating each parameter tensor in one
//! pass over host memory.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

enum Moments {
    F32(Vec<f32>, Vec<f32>),
    F64(Vec<f64>, Vec<f64>),
}

pub struct Adam {
    config: AdamConfig,
    params: Vec<(Var, Moments)>,
    step: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        let params = vars
            .into_iter()
            .map(|v| {
                let n = v.elem_count();
                let m = match v.dtype() {
                    DType::F32 => Moments::F32(vec![0.0; n], vec![0.0; n]),
                    DType::F64 => Moments::F64(vec![0.0; n], vec![0.0; n]),
                    other => return Err(Error::Config(format!("unsupported parameter type {other:?}"))),
                };
                Ok((v, m))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            params,
            step: 0,
        })
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let k = Step {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            decay: 1.0 - c.lr * c.weight_decay,
            bias1: 1.0 - c.beta1.powi(self.step),
            bias2: 1.0 - c.beta2.powi(self.step),
        };
        for (var, moments) in &mut self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            match moments {
                Moments::F32(m, v) => update(var, g, m, v, &k)?,
                Moments::F64(m, v) => update(var, g, m, v, &k)?,
            }
        }
        Ok(())
    }
}

struct Step {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    decay: f64,
    bias1: f64,
    bias2: f64,
}

fn update<T: WithDType>(var: &Var, grad: &Tensor, m: &mut [T], v: &mut [T], k: &Step) -> Result<()> {
    let shape = var.shape().clone();
    let mut w = var.as_tensor().flatten_all()?.to_vec1::<T>()?;
    let g = grad.flatten_all()?.to_vec1::<T>()?;
    for i in 0..w.len() {
        let gi = g[i].to_f64();
        let mi = k.beta1 * m[i].to_f64() + (1.0 - k.beta1) * gi;
        let vi = k.beta2 * v[i].to_f64() + (1.0 - k.beta2) * gi * gi;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let step = k.lr * (mi / k.bias1) / ((vi / k.bias2).sqrt() + k.eps);
        w[i] = T::from_f64(w[i].to_f64() * k.decay - step);
    }
    var.set(&Tensor::from_vec(w, shape, var.device())?)?;
    Ok(())
}
