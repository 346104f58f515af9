use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(shapes: &[usize], hyper: AdamHyper) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [&mut [f32]], grads: &[Vec<f32>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Dimension("adam: tensor length mismatch".into()));
        }
    }
    state.t += 1;
    let AdamHyper { lr, beta1, beta2, eps } = state.hyper;
    let bc1 = 1.0 - (beta1 as f64).powi(state.t as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(state.t as i32);
    let step = (lr as f64 / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
