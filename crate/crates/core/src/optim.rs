//! Trainable parameters and the SGD / Adam update rules.

use serde::{Deserialize, Serialize};

use crate::error::{QkdError, Result};
use crate::quant::MIN_INTERVAL;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalRole {
    /// Step size of a layer's weight quantizer.
    Weight,
    /// Step size of a layer's input-activation quantizer.
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Interval(IntervalRole),
}

impl ParamKind {
    pub fn is_interval(self) -> bool {
        matches!(self, ParamKind::Interval(_))
    }
}

/// Per-parameter optimizer memory. Slots are allocated on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    pub momentum: Option<Tensor>,
    pub adam_m: Option<Tensor>,
    pub adam_v: Option<Tensor>,
    pub adam_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
    pub state: OptimState,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            kind,
            state: OptimState::default(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn reset_state(&mut self) {
        self.state = OptimState::default();
    }

    fn project(&mut self) {
        if self.kind.is_interval() {
            for v in self.value.data_mut() {
                if !(*v >= MIN_INTERVAL) {
                    *v = MIN_INTERVAL;
                }
            }
        }
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(QkdError::Config(format!("learning rate must be positive, got {}", lr)))
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + (g + wd * w)`, `w -= lr * v`.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_lr(lr)?;
    for p in params {
        let n = p.value.numel();
        let buf = p
            .state
            .momentum
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        let w = p.value.data_mut();
        let g = p.grad.data();
        let v = buf.data_mut();
        for i in 0..n {
            let d = g[i] + weight_decay * w[i];
            v[i] = momentum * v[i] + d;
            w[i] -= lr * v[i];
        }
        p.project();
    }
    Ok(())
}

/// Adam with bias-corrected first and second moments.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_lr(lr)?;
    for p in params {
        let n = p.value.numel();
        p.state.adam_steps += 1;
        let t = p.state.adam_steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let shape = p.value.shape().to_vec();
        let m = p.state.adam_m.get_or_insert_with(|| Tensor::zeros(&shape));
        let m = m.data_mut();
        let v = p.state.adam_v.get_or_insert_with(|| Tensor::zeros(&shape));
        let v = v.data_mut();
        let w = p.value.data_mut();
        let g = p.grad.data();
        for i in 0..n {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        p.project();
    }
    Ok(())
}
