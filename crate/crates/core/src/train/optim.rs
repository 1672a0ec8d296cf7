use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Gradients are checked for shape and finiteness before any
    /// parameter or moment changes.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Config(format!("{name}: gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch: 0,
                    detail: format!("non-finite gradient {} in {name}[{i}]; step {} aborted", g.data()[i], self.step + 1),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let decay = self.lr * self.weight_decay;
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                let theta = w.f64();
                *w = T::lit(theta - decay * theta - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau on validation F1.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    since: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new(12, 0.1)
    }
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: None,
            since: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Epochs since the last strict improvement.
    pub fn stale(&self) -> usize {
        self.since
    }

    /// Record one validation score; returns the possibly reduced rate.
    pub fn step(&mut self, f1: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| f1 > b) {
            self.best = Some(f1);
            self.since = 0;
            return lr;
        }
        self.since += 1;
        if self.since >= self.patience {
            self.since = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}
