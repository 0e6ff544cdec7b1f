//! Parameter update rules: plain SGD, Adam and AdamW.

use super::{Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// `p ← p − lr·g`, no momentum.
    Sgd,
    /// Adam; weight decay (if any) is folded into the gradient as L2.
    Adam,
    /// Adam with decoupled weight decay applied to the parameter.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Reject non-finite gradients instead of applying them.
    pub strict: bool,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, beta1: 0.0, beta2: 0.0, eps: 0.0, weight_decay: 0.0, strict: false }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, strict: false }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::AdamW, weight_decay, ..Self::adam(lr) }
    }
}

/// Optimizer state for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let (first_moment, second_moment) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            _ => (zeros(), zeros()),
        };
        Self { config, step: 0, first_moment, second_moment }
    }

    /// Applies one update in place.
    pub fn apply(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::InvalidArgument {
                op: "optimizer_apply",
                detail: format!("{} params but {} grads", params.len(), grads.len()),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch { op: "optimizer_apply", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
        }
        if self.config.kind != OptimizerKind::Sgd {
            if self.first_moment.len() != params.len() {
                return Err(TensorError::InvalidArgument {
                    op: "optimizer_apply",
                    detail: format!("state tracks {} params, got {}", self.first_moment.len(), params.len()),
                });
            }
            for (m, p) in self.first_moment.iter().zip(params.iter()) {
                if m.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch { op: "optimizer_apply", lhs: m.shape().to_vec(), rhs: p.shape().to_vec() });
                }
            }
        }
        if self.config.strict {
            if let Some(index) = grads.iter().position(|g| !g.all_finite()) {
                return Err(TensorError::NonFinite { index });
            }
        }
        self.step += 1;
        let c = self.config;
        let lr = T::lit(c.lr);
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
                let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
                let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
                let eps = T::lit(c.eps);
                let wd = T::lit(c.weight_decay);
                let decoupled = c.kind == OptimizerKind::AdamW;
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first_moment).zip(&mut self.second_moment) {
                    let moments = m.data_mut().iter_mut().zip(v.data_mut());
                    for ((pi, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
                        let mut gv = gi;
                        if decoupled {
                            *pi -= lr * wd * *pi;
                        } else {
                            gv += wd * *pi;
                        }
                        *mi = b1 * *mi + (T::one() - b1) * gv;
                        *vi = b2 * *vi + (T::one() - b2) * gv * gv;
                        let (mh, vh) = (*mi / bc1, *vi / bc2);
                        *pi -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
