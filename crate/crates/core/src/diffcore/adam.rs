use std::collections::HashMap;

use super::tape::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Slot {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with per-parameter moment estimates. Minimizes: callers pass
/// gradients of the loss (the negative ELBO).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: HashMap<(u32, ParamId), Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: HashMap::new(),
        }
    }

    /// Updates every parameter of `store` that has a gradient in `grads`.
    /// Returns the number of tensors updated.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<usize> {
        let mut updated = 0;
        let tag = store.tag();
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(store, id) else { continue };
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let slot = self.slots.entry((tag, id)).or_insert_with(|| Slot {
                m: Tensor::zeros(g.rows(), g.cols()),
                v: Tensor::zeros(g.rows(), g.cols()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
            updated += 1;
        }
        Ok(updated)
    }
}
