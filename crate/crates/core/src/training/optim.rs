//! Adam with the Noam warmup schedule, and global-norm clipping.

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// `k·d^(−1/2)·min(step^(−1/2), step·warmup^(−3/2))`.
pub fn noam_lr(step: u64, d_att: usize, warmup: u64, k: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("Noam schedule starts at step 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup must be at least 1".into()));
    }
    let s = step as f64;
    Ok(k * (d_att as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// One bias-corrected Adam update. Parameters whose `active` flag is false
/// keep their values and moments; the step counter advances regardless.
pub fn adam_step(store: &mut ParamStore<f64>, grads: &[Vec<f64>], state: &mut OptimizerState, lr: f64, active: &[bool]) -> Result<()> {
    let n = store.len();
    if grads.len() != n || state.m.len() != n || active.len() != n {
        return Err(Error::Shape(format!("{} gradients / {} moments / {} flags for {n} parameters", grads.len(), state.m.len(), active.len())));
    }
    for (i, (id, p)) in store.iter().enumerate() {
        if grads[i].len() != p.tensor.len() || state.m[i].len() != p.tensor.len() {
            return Err(Error::Shape(format!("gradient for {} has {} values, expected {}", p.name, grads[i].len(), p.tensor.len())));
        }
        debug_assert_eq!(id.0, i);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if !active[i] {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = store.tensor_mut(id).data_mut();
        for (((w, &g), mi), vi) in data.iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
