use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `base_lr · (1 − epoch / max_epoch)^power`.
pub fn poly_lr(epoch: usize, max_epoch: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_epoch == 0 || epoch > max_epoch {
        return Err(Error::contract(format!("epoch {epoch} outside 0..={max_epoch}")));
    }
    Ok(base_lr * (1.0 - epoch as f64 / max_epoch as f64).powf(power))
}

/// Bias-corrected Adam with one moment pair per parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Zero moments shaped like every parameter in `store`.
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores a saved state, checking it lines up with `store`.
    pub fn from_state(store: &ParamStore<T>, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer state has {}/{} moments for {} parameters",
                m.len(),
                v.len(),
                store.len()
            )));
        }
        for ((_, p), (a, b)) in store.iter().zip(m.iter().zip(&v)) {
            if a.shape() != p.value.shape() || b.shape() != p.value.shape() {
                return Err(Error::dim(format!("optimizer moments for {} have the wrong shape", p.name)));
            }
        }
        Ok(Adam {
            step,
            m,
            v,
            ..Self::new(store)
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update from the gradients accumulated in `store`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract("optimizer was built for a different parameter store"));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {}", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let m1 = b1 * m.as_f64() + (1.0 - b1) * g;
                let v1 = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::of(m1);
                *v = T::of(v1);
                let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + self.eps);
                *w = T::of(w.as_f64() - update);
            }
        }
        Ok(())
    }
}
