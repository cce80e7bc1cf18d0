//! AdamW with decoupled weight decay, global gradient clipping, and the
//! cosine learning-rate schedule.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::model::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cosine annealing from `lr_init` (step 0) to `lr_floor` (step `steps-1`),
/// no warm restarts.
pub fn cosine_lr(step: u64, steps: u64, lr_init: f64, lr_floor: f64) -> f64 {
    if steps <= 1 {
        return lr_init;
    }
    let progress = step.min(steps - 1) as f64 / (steps - 1) as f64;
    lr_floor + 0.5 * (lr_init - lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients by `clip/norm` when their global L2 norm exceeds
/// `clip`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, ArrayD<f64>>, clip: f64) -> Result<f64> {
    let mut sumsq = 0.0;
    for g in grads.values() {
        for v in g.iter() {
            sumsq += v * v;
        }
    }
    let norm = sumsq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    Ok(norm)
}

/// Decoupled weight decay applies to matrices (projections, the token bank)
/// but not to 1-D tensors (normalization gains, all biases).
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// AdamW state: first and second moments per trainable tensor plus the
/// bias-correction step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
    /// Number of updates applied so far (bias correction uses t+1).
    pub t: u64,
    pub weight_decay: f64,
    pub clip: f64,
}

impl AdamW {
    /// Zero-initialized moments for every trainable tensor in `params`.
    pub fn new(params: &ParamSet, trainable: &[String], weight_decay: f64, clip: f64) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in trainable {
            let shape = params.get(name).shape().to_vec();
            m.insert(name.clone(), ArrayD::zeros(shape.clone()));
            v.insert(name.clone(), ArrayD::zeros(shape));
        }
        Self {
            m,
            v,
            t: 0,
            weight_decay,
            clip,
        }
    }

    /// One update over all tensors in `grads`; clips first, then applies the
    /// Adam step and decoupled decay at the given learning rate. Returns the
    /// pre-clip gradient norm.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        mut grads: BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) -> Result<f64> {
        let norm = clip_global_norm(&mut grads, self.clip)?;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, grad) in grads {
            let m = self
                .m
                .get_mut(&name)
                .ok_or_else(|| Error::Contract(format!("no optimizer state for {name}")))?;
            let v = self.v.get_mut(&name).unwrap();
            let theta = params.get_mut(&name);
            let decay = if decays(theta.shape()) {
                self.weight_decay
            } else {
                0.0
            };
            let (ms, vs, ts, gs) = (
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                theta.as_slice_mut().unwrap(),
                grad.as_slice().unwrap(),
            );
            for i in 0..gs.len() {
                let g = gs[i];
                ms[i] = ADAM_BETA1 * ms[i] + (1.0 - ADAM_BETA1) * g;
                vs[i] = ADAM_BETA2 * vs[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                ts[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * ts[i]);
            }
        }
        Ok(norm)
    }
}
