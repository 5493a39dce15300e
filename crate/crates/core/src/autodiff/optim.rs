use std::collections::HashMap;

use super::tape::{Param, ParamId};
use super::tensor::{Scalar, Tensor};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f32> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: T) -> Self {
        AdamW {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay: T::of(1e-2),
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: T) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable param from its `grad`. Frozen params are skipped
    /// entirely. Gradients are left in place; call [`Param::zero_grad`] explicitly.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for p in params {
            if !p.trainable {
                continue;
            }
            let (m, v) = self.moments.entry(p.id()).or_insert_with(|| {
                let shape = p.value.shape().to_vec();
                (Tensor::zeros(shape.clone()), Tensor::zeros(shape))
            });
            let decay = T::one() - self.lr * self.weight_decay;
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((w, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
