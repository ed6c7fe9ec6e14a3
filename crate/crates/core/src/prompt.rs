//! Client-side dual-timescale prompt state.
//!
//! A client owns a slow long-term prompt, a fast sparse short-term prompt and
//! a drift tracker over its query embeddings. The composed prompt injected
//! into the frozen scorer is `p_long + alpha * p_short + sum_k w_k c_k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::alignment::{self, AlignConfig, AlignMode};
use crate::error::{arg, Error, Result};
use crate::routing::Encoder;
use crate::server::PrototypeLibrary;

/// An `L_p x d` real matrix: prompt state, prototype, or composed prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMatrix(DMatrix<f64>);

impl PromptMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self(DMatrix::from_fn(rows, cols, f))
    }

    /// Every row set to `row`.
    pub fn tiled(row: &DVector<f64>, rows: usize) -> Self {
        Self(DMatrix::from_fn(rows, row.len(), |_, j| row[j]))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Average of the rows, as a column vector of length `d`.
    pub fn mean_row(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.cols());
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                out[c] += self.0[(r, c)];
            }
        }
        out / self.rows() as f64
    }

    /// Sum of the rows.
    pub fn sum_rows(&self) -> DVector<f64> {
        self.mean_row() * self.rows() as f64
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &PromptMatrix) -> Result<()> {
        check_shape(self, other)?;
        self.0.zip_apply(&other.0, |x, y| *x += a * y);
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> PromptMatrix {
        PromptMatrix(&self.0 * a)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn count_nonzero(&self) -> usize {
        self.0.iter().filter(|x| **x != 0.0).count()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }
}

pub(crate) fn check_shape(a: &PromptMatrix, b: &PromptMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return arg(format!(
            "prompt shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Rolling means of query embeddings and the drift they reveal.
///
/// The current rolling mean is an exponential moving average over the
/// queries of the active period; `end_period` freezes it as the previous mean
/// and records the drift magnitude `||e_curr - e_prev||_2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTracker {
    pub rolling_mean_prev: DVector<f64>,
    pub rolling_mean_curr: DVector<f64>,
    /// Queries averaged into the current mean during this period.
    pub window: usize,
    pub decay: f64,
    pub periods: usize,
    pub drift_history: Vec<f64>,
    observed: usize,
}

impl DriftTracker {
    pub fn new(dim: usize, decay: f64) -> Self {
        Self {
            rolling_mean_prev: DVector::zeros(dim),
            rolling_mean_curr: DVector::zeros(dim),
            window: 0,
            decay,
            periods: 0,
            drift_history: Vec::new(),
            observed: 0,
        }
    }

    pub fn observe(&mut self, h: &DVector<f64>) {
        if self.observed == 0 {
            self.rolling_mean_curr.copy_from(h);
        } else {
            self.rolling_mean_curr *= self.decay;
            self.rolling_mean_curr.axpy(1.0 - self.decay, h, 1.0);
        }
        self.observed += 1;
        self.window += 1;
    }

    /// Close the current period. Periods without observations are ignored.
    pub fn end_period(&mut self) {
        if self.window == 0 {
            return;
        }
        if self.periods > 0 {
            let d = (&self.rolling_mean_curr - &self.rolling_mean_prev).norm();
            self.drift_history.push(d);
        }
        self.rolling_mean_prev.copy_from(&self.rolling_mean_curr);
        self.periods += 1;
        self.window = 0;
    }

    /// Raw difference `e_curr - e_prev`; zero until one period has closed.
    pub fn delta(&self) -> DVector<f64> {
        if self.periods == 0 {
            DVector::zeros(self.rolling_mean_curr.len())
        } else {
            &self.rolling_mean_curr - &self.rolling_mean_prev
        }
    }

    pub fn drift_magnitude(&self) -> f64 {
        self.delta().norm()
    }

    /// Mean of the recorded per-period drift magnitudes.
    pub fn mean_drift(&self) -> f64 {
        if self.drift_history.is_empty() {
            0.0
        } else {
            self.drift_history.iter().sum::<f64>() / self.drift_history.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    /// Prompt length in tokens.
    pub l_p: usize,
    pub eta_s: f64,
    pub eta_l: f64,
    pub lambda_p: f64,
    pub lambda_s_max: f64,
    pub kappa_drift: f64,
    pub gamma: f64,
    /// Use `lambda_s_max * exp(-kappa * mean_drift)`; otherwise `lambda_s_max`.
    pub adaptive_lambda: bool,
    /// Update the session gate vector `a` by the recommendation gradient.
    pub learn_alpha: bool,
    /// EMA decay of the rolling query means.
    pub ema_decay: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            l_p: 8,
            eta_s: 5e-3,
            eta_l: 1e-3,
            lambda_p: 1e-4,
            lambda_s_max: 0.5,
            kappa_drift: 1.0,
            gamma: 0.5,
            adaptive_lambda: true,
            learn_alpha: false,
            ema_decay: 0.9,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [("eta_s", self.eta_s), ("eta_l", self.eta_l), ("kappa_drift", self.kappa_drift)];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prompt.{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("lambda_p", self.lambda_p),
            ("lambda_s_max", self.lambda_s_max),
            ("gamma", self.gamma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prompt.{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("prompt.ema_decay must be in [0,1)".into()));
        }
        if self.l_p == 0 {
            return Err(Error::Config("prompt.l_p must be at least 1".into()));
        }
        Ok(())
    }
}

/// A client's entire trainable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPromptState {
    pub p_long: PromptMatrix,
    pub p_short: PromptMatrix,
    pub alpha_params: DVector<f64>,
    pub drift: DriftTracker,
}

impl DualPromptState {
    pub fn zeros(l_p: usize, d: usize, d_phi: usize, ema_decay: f64) -> Self {
        Self {
            p_long: PromptMatrix::zeros(l_p, d),
            p_short: PromptMatrix::zeros(l_p, d),
            alpha_params: DVector::zeros(d_phi),
            drift: DriftTracker::new(d_phi, ema_decay),
        }
    }
}

/// Element-wise `sign(z) * max(|z| - tau, 0)`.
pub fn soft_thresh(z: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) {
        return arg(format!("soft-threshold level must be >= 0, got {tau}"));
    }
    Ok(z.map(|x| soft_thresh_scalar(x, tau)))
}

#[inline]
pub fn soft_thresh_scalar(x: f64, tau: f64) -> f64 {
    x.signum() * (x.abs() - tau).max(0.0)
}

/// `p_long + alpha * p_short + sum_k w_k c_k`.
pub fn compose_prompt(
    state: &DualPromptState,
    alpha: f64,
    retrieved: &[(f64, &PromptMatrix)],
) -> Result<PromptMatrix> {
    if !(alpha >= 0.0) {
        return arg(format!("alpha must be >= 0, got {alpha}"));
    }
    check_shape(&state.p_long, &state.p_short)?;
    if !retrieved.is_empty() {
        let total: f64 = retrieved.iter().map(|(w, _)| *w).sum();
        if retrieved.iter().any(|(w, _)| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return arg(format!("routing weights must be a simplex, sum = {total}"));
        }
    }
    let mut out = state.p_long.clone();
    out.axpy(alpha, &state.p_short)?;
    for (w, c) in retrieved {
        out.axpy(*w, c)?;
    }
    Ok(out)
}

/// Proximal sparse step on the short prompt.
pub fn short_update(
    state: &mut DualPromptState,
    grad_rec: &PromptMatrix,
    cfg: &StabilityConfig,
) -> Result<()> {
    check_shape(&state.p_short, grad_rec)?;
    let stepped = state.p_short.matrix() - grad_rec.matrix() * cfg.eta_s;
    *state.p_short.matrix_mut() = soft_thresh(&stepped, cfg.eta_s * cfg.lambda_p)?;
    Ok(())
}

/// Outcome of one long-term step.
#[derive(Debug, Clone, PartialEq)]
pub struct LongStep {
    pub align_value: f64,
    pub assigned: Option<usize>,
}

/// Anchored gradient step on the long prompt:
/// `p_long -= eta_l * grad(L_rec + lambda_s * A(phi(p_long), C))`, with the
/// prototype assignment recomputed first and held fixed inside the gradient.
///
/// `session_atoms` feeds the empirical measure when `align.mode` is
/// Wasserstein; it is ignored otherwise.
#[allow(clippy::too_many_arguments)]
pub fn long_update(
    state: &mut DualPromptState,
    grad_rec_long: &PromptMatrix,
    library: &PrototypeLibrary,
    lambda_s: f64,
    cfg: &StabilityConfig,
    align: &AlignConfig,
    encoder: &Encoder,
    session_atoms: &[DVector<f64>],
) -> Result<LongStep> {
    if !(lambda_s >= 0.0) {
        return arg(format!("lambda_s must be >= 0, got {lambda_s}"));
    }
    check_shape(&state.p_long, grad_rec_long)?;
    let mut grad = grad_rec_long.clone();
    let mut step = LongStep { align_value: 0.0, assigned: None };
    if lambda_s > 0.0 {
        if library.is_empty() {
            return Err(Error::State("alignment requested with an empty prototype library".into()));
        }
        let pooled = state.p_long.mean_row();
        let z = encoder.encode_pooled(&pooled)?;
        let (value, grad_z, assigned) = match align.mode {
            AlignMode::Bregman => {
                let a = alignment::align_value_and_grad(
                    &z,
                    &library.encoded,
                    align.generator,
                    cfg.gamma,
                    align.tau_a,
                )?;
                (a.value, a.grad, Some(a.assigned))
            }
            AlignMode::Wasserstein => {
                let (v, g) = alignment::wasserstein_align_grad(&z, session_atoms, library, align)?;
                (v, g, None)
            }
        };
        let grad_pooled = encoder.vjp_pooled(&pooled, &grad_z)?;
        let grad_prompt = PromptMatrix::tiled(&(grad_pooled / state.p_long.rows() as f64), state.p_long.rows());
        grad.axpy(lambda_s, &grad_prompt)?;
        step = LongStep { align_value: value, assigned };
    }
    state.p_long.axpy(-cfg.eta_l, &grad)?;
    Ok(step)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Session gate `sigma(a . (e_curr - e_prev))`.
pub fn session_alpha(state: &DualPromptState) -> f64 {
    sigmoid(state.alpha_params.dot(&state.drift.delta()))
}

/// `lambda_max * exp(-kappa * mean_drift)`.
pub fn adaptive_lambda_s(drift_mean: f64, cfg: &StabilityConfig) -> Result<f64> {
    if !(drift_mean >= 0.0) {
        return arg(format!("mean drift must be >= 0, got {drift_mean}"));
    }
    Ok(cfg.lambda_s_max * (-cfg.kappa_drift * drift_mean).exp())
}
