//! Training objective: class-weighted edge BCE, a differentiable
//! spectral-radius acyclicity penalty, and their augmented-Lagrangian
//! combination with a dual-ascent schedule.
//!
//! The scalar entry points (`bce_edge_loss`, `spectral_radius`) drive the same
//! tape code as training does, so verification tests and the training loop
//! share one set of numerics.

use ndarray::{Array2, ArrayD};

use crate::error::{Error, Result};
use crate::scm::Dag;
use crate::tape::{Tape, TensorId};

/// Probability clipping inside the BCE logs.
pub const BCE_EPS: f64 = 1e-7;
/// Diagonal shift used to keep power iteration away from the zero vector on
/// nilpotent matrices.
pub const SPECTRAL_SHIFT: f64 = 1e-6;
/// Power-iteration count used during training.
pub const TRAIN_POWER_ITERS: usize = 20;
/// Power-iteration count used for verification.
pub const VERIFY_POWER_ITERS: usize = 100;

/// Class-balance weight for positive (edge) entries:
/// `clamp(#non-edges / #edges, 1, 20)`, and 1 for edgeless graphs.
pub fn pos_weight_for(dag: &Dag) -> f64 {
    let f = dag.f();
    let edges = dag.edge_count();
    if edges == 0 {
        return 1.0;
    }
    let non_edges = f * (f - 1) - edges;
    (non_edges as f64 / edges as f64).clamp(1.0, 20.0)
}

/// BCE weight matrix: `pos_weight` on true edges, 1 on off-diagonal
/// non-edges, 0 on the diagonal (diagonal entries never contribute).
fn bce_weights(truth: &Dag, pos_weight: f64) -> Array2<f64> {
    let f = truth.f();
    Array2::from_shape_fn((f, f), |(i, j)| {
        if i == j {
            0.0
        } else if truth.edge(i, j) {
            pos_weight
        } else {
            1.0
        }
    })
}

/// Tape version of the edge BCE: mean over the f(f−1) off-diagonal entries of
/// `−[pos_weight·A·log p̂ + (1−A)·log(1−p̂)]` with p̂ clipped to
/// `[BCE_EPS, 1−BCE_EPS]`. With `pos_weight = 1` this is exactly the
/// unweighted off-diagonal mean.
pub fn bce_edge_loss_tape(
    tape: &mut Tape,
    pred: TensorId,
    truth: &Dag,
    pos_weight: f64,
) -> TensorId {
    let f = truth.f();
    assert_eq!(tape.shape(pred), &[f, f], "bce: prediction shape mismatch");
    let targets = truth.to_matrix().into_dyn();
    let weights = bce_weights(truth, pos_weight).into_dyn();
    let denom = (f * (f - 1)) as f64;
    tape.weighted_bce_mean(pred, targets, weights, BCE_EPS, denom)
}

/// Scalar edge BCE over a probability matrix.
pub fn bce_edge_loss(pred: &Array2<f64>, truth: &Dag, pos_weight: f64) -> Result<f64> {
    if pred.dim() != (truth.f(), truth.f()) {
        return Err(Error::Contract(format!(
            "bce: pred shape {:?} does not match f={}",
            pred.dim(),
            truth.f()
        )));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("bce: non-finite prediction".into()));
    }
    let mut tape = Tape::new();
    let id = tape.constant(pred.clone().into_dyn());
    let loss = bce_edge_loss_tape(&mut tape, id, truth, pos_weight);
    Ok(tape.scalar(loss))
}

/// Differentiable spectral-radius estimate.
///
/// Power iteration runs on the shifted matrix `B = A + εI` from the all-ones
/// start vector with per-step normalization; the shift keeps the iterate away
/// from the zero vector when `A` is nilpotent. The returned estimate is
/// `sqrt(vᵀA²v / vᵀv)` at the final iterate, which is exact for cycles of
/// length two (where plain Rayleigh quotients oscillate), vanishes to within
/// the shift's order on nilpotent matrices, and converges to the dominant
/// eigenvalue on generic nonnegative matrices.
pub fn spectral_radius_tape(tape: &mut Tape, adj: TensorId, n_iters: usize) -> TensorId {
    let shape = tape.shape(adj).to_vec();
    assert_eq!(shape.len(), 2, "spectral_radius: matrix required");
    assert_eq!(shape[0], shape[1], "spectral_radius: square matrix required");
    assert!(n_iters >= 1, "spectral_radius: n_iters must be >= 1");
    let f = shape[0];
    let shift = Array2::<f64>::eye(f) * SPECTRAL_SHIFT;
    let shift_id = tape.constant(shift.into_dyn());
    let b = tape.add(adj, shift_id);
    let mut v = tape.constant(ArrayD::ones(vec![f, 1]));
    for _ in 0..n_iters {
        let w = tape.matmul(b, v, false);
        let w_sq = tape.mul(w, w);
        let sumsq = tape.sum_all(w_sq);
        let inv_norm = tape.pow_const(sumsq, -0.5);
        v = tape.mul_scalar_tensor(w, inv_norm);
    }
    let av = tape.matmul(adj, v, false);
    let aav = tape.matmul(adj, av, false);
    let vaav = tape.mul(v, aav);
    let num = tape.sum_all(vaav);
    let vv = tape.mul(v, v);
    let denom = tape.sum_all(vv);
    let inv_denom = tape.pow_const(denom, -1.0);
    let ratio = tape.mul_scalar_tensor(num, inv_denom);
    tape.pow_const(ratio, 0.5)
}

/// Scalar spectral-radius estimate of a nonnegative matrix.
pub fn spectral_radius(adj: &Array2<f64>, n_iters: usize) -> Result<f64> {
    if adj.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract(
            "spectral_radius: entries must be finite and nonnegative".into(),
        ));
    }
    if adj.nrows() != adj.ncols() {
        return Err(Error::Contract("spectral_radius: matrix must be square".into()));
    }
    if n_iters == 0 {
        return Err(Error::Contract("spectral_radius: n_iters must be >= 1".into()));
    }
    let mut tape = Tape::new();
    let id = tape.constant(adj.clone().into_dyn());
    let rho = spectral_radius_tape(&mut tape, id, n_iters);
    Ok(tape.scalar(rho))
}

fn h_last_unset() -> f64 {
    f64::INFINITY
}

fn h_last_is_unset(v: &f64) -> bool {
    !v.is_finite()
}

/// Augmented-Lagrangian dual state with its update schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DualState {
    /// Dual variable λ ≥ 0.
    pub lambda: f64,
    /// Penalty weight ρ > 0.
    pub rho: f64,
    /// Constraint value at the previous dual update (+∞ before the first).
    /// Omitted from JSON while unset, since JSON has no infinity literal.
    #[serde(default = "h_last_unset", skip_serializing_if = "h_last_is_unset")]
    pub h_last: f64,
    /// Optimizer steps between dual updates.
    pub period: u32,
    /// Penalty growth factor η > 1.
    pub eta: f64,
    /// Progress tolerance γ ∈ (0, 1).
    pub gamma: f64,
    /// Upper cap on ρ.
    pub rho_max: f64,
}

impl Default for DualState {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            rho: 0.1,
            h_last: f64::INFINITY,
            period: 500,
            eta: 2.0,
            gamma: 0.9,
            rho_max: 1e4,
        }
    }
}

impl DualState {
    /// Enforce λ ≥ 0, ρ > 0, η > 1, γ ∈ (0, 1).
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0
            || self.rho <= 0.0
            || self.eta <= 1.0
            || self.gamma <= 0.0
            || self.gamma >= 1.0
            || self.rho_max < self.rho
            || self.period == 0
        {
            return Err(Error::Config(format!("invalid dual state {self:?}")));
        }
        Ok(())
    }
}

/// `total = bce + λ·h + (ρ/2)·h²`. Fails on an invalid dual state or h < 0.
pub fn augmented_lagrangian(loss_bce: f64, h: f64, dual: &DualState) -> Result<f64> {
    dual.validate()?;
    if h < 0.0 {
        return Err(Error::Contract(format!("constraint value h={h} < 0")));
    }
    Ok(loss_bce + dual.lambda * h + 0.5 * dual.rho * h * h)
}

/// Tape version of the augmented Lagrangian.
pub fn augmented_lagrangian_tape(
    tape: &mut Tape,
    loss_bce: TensorId,
    h: TensorId,
    dual: &DualState,
) -> TensorId {
    let lin = tape.scale(h, dual.lambda);
    let h_sq = tape.mul(h, h);
    let quad = tape.scale(h_sq, 0.5 * dual.rho);
    let partial = tape.add(loss_bce, lin);
    tape.add(partial, quad)
}

/// Dual ascent: `λ ← λ + ρ·h`; if `h > γ·h_last` then `ρ ← min(η·ρ, ρ_max)`;
/// finally `h_last ← h`.
pub fn dual_update(dual: &DualState, h: f64) -> DualState {
    let mut next = *dual;
    next.lambda += next.rho * h;
    if h > next.gamma * next.h_last {
        next.rho = (next.rho * next.eta).min(next.rho_max);
    }
    next.h_last = h;
    next
}
