use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay and per-group learning rates.
///
/// Each step first shrinks a parameter by `lr * weight_decay` (the decoupled
/// decay) and then applies the bias-corrected Adam update.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    groups: Vec<ParamGroup>,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Fails without
    /// touching any value if some trainable parameter lacks a gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(AutodiffError::MissingGrad(p.name.clone()));
        }
        if let Some((_, p)) = params.iter().find(|(_, p)| p.group >= self.groups.len()) {
            return Err(AutodiffError::Checkpoint(format!(
                "parameter `{}` refers to unknown group {}",
                p.name, p.group
            )));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        assert_eq!(self.first_moment.len(), params.len(), "parameter set changed size");

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);

        for (idx, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let group = &self.groups[p.group];
            let grad = p.grad.as_ref().expect("checked above").data();
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let decay = 1.0 - group.lr * group.weight_decay;
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                *w *= decay;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                *w -= group.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
