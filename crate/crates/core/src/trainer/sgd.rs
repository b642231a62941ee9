use crate::error::{Error, Result};
use crate::net::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// SGD with momentum and L2 weight decay folded into the velocity.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    velocity: Vec<Tensor<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            momentum,
            weight_decay,
        }
    }

    /// `v ← m·v + g + wd·w; w ← w − lr·v`, then clears the gradients.
    /// Batch-norm scale and shift are not decayed.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !params.has_grads() {
            return Err(Error::State("optimizer step without gradients".into()));
        }
        if self.velocity.len() != params.len() {
            return Err(Error::State("optimizer built for a different parameter set".into()));
        }
        let (m, lr) = (T::from_f64(self.momentum), T::from_f64(lr));
        for ((_, p), v) in params.iter_mut().zip(&mut self.velocity) {
            if !p.kind.trainable() {
                continue;
            }
            let wd = T::from_f64(if p.kind.decays() { self.weight_decay } else { 0.0 });
            let grads = p.grad.data();
            for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grads) {
                *vel = m * *vel + g + wd * *w;
                *w = *w - lr * *vel;
            }
        }
        params.zero_grad();
        Ok(())
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}
