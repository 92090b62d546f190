use wxadapt_autograd::Tensor;

use crate::models::{ParamId, ParamStore};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + g + wd * p`, `p = p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every trainable parameter that received a gradient. Frozen
    /// parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, &Tensor<f32>)], lr: f32) {
        self.step_clipped(store, grads, lr, 0.0);
    }

    /// As [`Sgd::step`], first rescaling each tensor's gradient to norm at
    /// most `max_norm` (0: no clipping).
    pub fn step_clipped(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, &Tensor<f32>)], lr: f32, max_norm: f32) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &(id, g) in grads {
            if store.is_frozen(id) {
                continue;
            }
            let norm = g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            let scale = clip_scale(norm, max_norm);
            let p = store.get_mut(id);
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; p.numel()]);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + scale * gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Factor that brings a gradient of norm `norm` down to `max_norm` (1 when already within it or clipping is off).
pub fn clip_scale(norm: f64, max_norm: f32) -> f32 {
    if max_norm > 0.0 && norm > max_norm as f64 {
        (max_norm as f64 / norm) as f32
    } else {
        1.0
    }
}
