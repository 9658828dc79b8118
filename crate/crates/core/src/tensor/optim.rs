use super::{ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam over an explicit set of registered parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step_count: u64,
    registered: Vec<ParamId>,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, params: &[ParamId], config: AdamConfig) -> Self {
        let zeros = |id: &ParamId| vec![T::zero(); store.value(*id).numel()];
        Self {
            config,
            step_count: 0,
            registered: params.to_vec(),
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn registered(&self) -> &[ParamId] {
        &self.registered
    }

    /// Applies one update with learning rate `lr` from the gradients held in
    /// `store`. Every registered parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(id) = self.registered.iter().find(|id| store.grad(**id).is_none()) {
            return Err(Error::contract(format!(
                "parameter {} has no gradient",
                store.get(*id).name
            )));
        }
        self.step_count += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        let (b1, b2, eps) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2), T::from_f64_lossy(epsilon));
        let step = T::from_f64_lossy(lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        for (slot, &id) in self.registered.iter().enumerate() {
            let param = store.get_mut(id);
            let grad = param.grad.as_ref().expect("checked above").data().to_vec();
            let m = &mut self.first_moment[slot];
            let v = &mut self.second_moment[slot];
            for (i, w) in param.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                *w = *w - step * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
