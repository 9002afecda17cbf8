//! First-order optimizers over candle `Var`s and the cosine learning-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// Logistic function built from differentiable primitives.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Plain stochastic gradient descent, no momentum or weight decay.
#[derive(Debug)]
pub struct Sgd {
    vars: Vec<Var>,
    lr: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64) -> Self {
        Self { vars, lr }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for v in &self.vars {
            if let Some(g) = grads.get(v) {
                v.set(&(v.as_tensor() - (g * self.lr)?)?)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam {
    vars: Vec<Var>,
    moments: Vec<Moments>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let moments = vars
            .iter()
            .map(|v| {
                Ok(Moments {
                    first: v.zeros_like()?,
                    second: v.zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            moments,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (v, m) in self.vars.iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.get(v) else { continue };
            m.first = ((&m.first * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            m.second = ((&m.second * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m.first / c1)?;
            let v_hat = (&m.second / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            v.set(&(v.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at step 0 to 0 at `total` steps, no restarts.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}
