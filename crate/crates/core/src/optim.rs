//! Named parameters and the Adam optimizer. Moments are keyed by parameter
//! name, so groups can be stepped independently (split learning rates, freeze
//! schedules) while each parameter keeps its own bias-correction clock.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

/// A trainable tensor with a stable name (also the checkpoint key).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Param> {
        Ok(Param {
            name: name.into(),
            value: Tensor::param(data, shape)?,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Param {
        Param::new(name, vec![0.0; shape.iter().product()], shape).expect("consistent")
    }

    pub fn full(name: impl Into<String>, shape: &[usize], v: f64) -> Param {
        Param::new(name, vec![v; shape.iter().product()], shape).expect("consistent")
    }

    pub fn normal(name: impl Into<String>, shape: &[usize], scale: f64, rng: &mut SplitRng) -> Param {
        let mut data = vec![0.0; shape.iter().product()];
        rng.fill_normal(&mut data, scale);
        Param::new(name, data, shape).expect("consistent")
    }

    /// Raw little-endian f64 bytes; used for byte-equality freeze checks.
    pub fn raw_bytes(&self) -> Vec<u8> {
        self.value
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction. `step` consumes the gradients deposited by the
/// last backward pass; parameters not passed to a step call are untouched.
pub struct Adam {
    cfg: AdamConfig,
    moments: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam {
            cfg,
            moments: HashMap::new(),
        }
    }

    /// Update one parameter group under a single learning rate. Every passed
    /// parameter must carry a gradient from the current backward pass.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Param]) -> Result<()> {
        for p in params.iter_mut() {
            let grad = p.value.take_grad().ok_or_else(|| {
                Error::contract(format!("missing grad on trainable param '{}'", p.name))
            })?;
            let n = p.value.numel();
            if grad.len() != n {
                return Err(Error::dim(format!(
                    "grad length {} != param '{}' length {n}",
                    grad.len(),
                    p.name
                )));
            }
            let slot = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            slot.t += 1;
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            let bc1 = 1.0 - b1.powi(slot.t as i32);
            let bc2 = 1.0 - b2.powi(slot.t as i32);
            let (ms, vs) = (&mut slot.m, &mut slot.v);
            p.value.apply_update(|data| {
                for i in 0..n {
                    let g = grad[i];
                    ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                    vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    data[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn first_step_is_signed_lr() {
        // With bias correction, the first update is -lr * g / (|g| + eps).
        let mut p = Param::new("p", vec![1.0, -2.0], &[2]).unwrap();
        let mut g = Graph::new();
        let w = Tensor::from_vec(vec![3.0, -0.5], &[2]).unwrap();
        let y = g.mul(&p.value, &w).unwrap();
        let loss = g.sum_all(&y).unwrap();
        g.backward(&loss).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(0.01, &mut [&mut p]).unwrap();
        // grads are w: [3, -0.5] -> steps approx -lr*sign(g)
        assert!((p.value.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((p.value.data()[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Param::new("p", vec![0.7], &[1]).unwrap();
        let mut g = Graph::new();
        let zero = Tensor::zeros(&[1]);
        let y = g.mul(&p.value, &zero).unwrap();
        let loss = g.sum_all(&y).unwrap();
        g.backward(&loss).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(0.1, &mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.7]);
    }

    #[test]
    fn converges_on_quadratic() {
        // 100 steps on f(x) = x^2 from x = 1 at lr 0.1 ends inside |x| < 0.1.
        let mut p = Param::new("x", vec![1.0], &[1]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            let mut g = Graph::new();
            let y = g.mul(&p.value, &p.value).unwrap();
            let loss = g.sum_all(&y).unwrap();
            g.backward(&loss).unwrap();
            adam.step(0.1, &mut [&mut p]).unwrap();
        }
        assert!(p.value.data()[0].abs() < 0.1, "got {}", p.value.data()[0]);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Param::new("p", vec![1.0], &[1]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(0.1, &mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains("missing grad"));
    }

    #[test]
    fn skipped_params_keep_their_clock() {
        // Stepping group A twice while group B sits out must not advance B's
        // moments; B's first step later still behaves like a first step.
        let mut a = Param::new("a", vec![1.0], &[1]).unwrap();
        let mut b = Param::new("b", vec![1.0], &[1]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2 {
            let mut g = Graph::new();
            let y = g.mul(&a.value, &a.value).unwrap();
            let loss = g.sum_all(&y).unwrap();
            g.backward(&loss).unwrap();
            adam.step(0.1, &mut [&mut a]).unwrap();
        }
        let mut g = Graph::new();
        let y = g.mul(&b.value, &b.value).unwrap();
        let loss = g.sum_all(&y).unwrap();
        g.backward(&loss).unwrap();
        adam.step(0.1, &mut [&mut b]).unwrap();
        assert!((b.value.data()[0] - 0.9).abs() < 1e-6);
    }
}
