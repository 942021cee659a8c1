//! Adam with decoupled weight decay, with one learning rate per parameter group.

use ndarray::Array2;

use crate::params::{Grads, ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupSettings {
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    encoder: GroupSettings,
    main: GroupSettings,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, encoder: GroupSettings, main: GroupSettings) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Self {
            encoder,
            main,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn settings(&self, group: ParamGroup) -> GroupSettings {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Main => self.main,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let GroupSettings { lr, weight_decay } = self.settings(store.get(id).group);
            let i = id.index();
            // Parameters that received no gradient are skipped entirely, decay included.
            let Some(g) = grads.get(id) else { continue };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let value = store.value_mut(id);
            if weight_decay != 0.0 {
                value.mapv_inplace(|p| p * (1.0 - lr * weight_decay));
            }
            ndarray::Zip::from(value)
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}
