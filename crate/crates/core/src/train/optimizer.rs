//! AdamW with decoupled weight decay, global-norm clipping, and the
//! warmup-then-cosine learning rate schedule.

use ndarray::{ArrayD, IxDyn, Zip};

use crate::autodiff::Float;
use crate::config::TrainConfig;
use crate::params::ParamStore;

/// Moment buffers mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(tc: &TrainConfig, params: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<ArrayD<T>> { params.specs().iter().map(|s| ArrayD::zeros(IxDyn(&s.shape))).collect() };
        AdamW {
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.adam_eps,
            weight_decay: tc.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[ArrayD<T>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (c1, c2) = (T::c(1.0 - self.beta1.powi(t)), T::c(1.0 - self.beta2.powi(t)));
        let (lr, eps, wd) = (T::c(lr), T::c(self.eps), T::c(self.weight_decay));
        let one = T::one();
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p;
                *p = *p - lr * step;
            });
        }
    }
}

pub fn global_norm<T: Float>(grads: &[ArrayD<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients in place so their joint norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [ArrayD<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

/// Number of linear warmup steps for a run of `total` steps.
pub fn warmup_steps(total: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total as f64).ceil() as usize
}

/// Cosine annealing from `base_lr` at step 0 to 0 at `total`, multiplied by
/// a linear warmup factor over the first `warmup_fraction` of steps.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * step.min(total) as f64 / total as f64).cos());
    let warm = warmup_steps(total, warmup_fraction);
    let factor = if warm > 0 { ((step + 1) as f64 / warm as f64).min(1.0) } else { 1.0 };
    base_lr * cosine * factor
}
