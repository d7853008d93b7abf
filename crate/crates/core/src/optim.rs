//! Gradients of the reconstruction objective, Adam, and step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

/// Gradients of `‖W0 − BA‖²_F` with respect to `A` and `B`.
///
/// `grad_a = −2·Bᵀ(W0 − BA)` and `grad_b = −2·(W0 − BA)Aᵀ`.
pub fn approx_grads(w0: &Matrix, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    check_factor_shapes(w0, a, b)?;
    let mut ws = GradWorkspace::new(w0.rows(), w0.cols(), a.rows());
    ws.evaluate(w0, a, b);
    let grad_a = Matrix::from_kernel(a.rows(), a.cols(), ws.grad_a, "approx_grads")?;
    let grad_b = Matrix::from_kernel(b.rows(), b.cols(), ws.grad_b, "approx_grads")?;
    Ok((grad_a, grad_b))
}

pub(crate) fn check_factor_shapes(w0: &Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    if b.cols() != a.rows() {
        return Err(Error::Shape {
            op: "factor rank (b.cols vs a.rows)",
            lhs: b.shape(),
            rhs: a.shape(),
        });
    }
    if b.rows() != w0.rows() {
        return Err(Error::Shape {
            op: "factor rows (b.rows vs w0.rows)",
            lhs: b.shape(),
            rhs: w0.shape(),
        });
    }
    if a.cols() != w0.cols() {
        return Err(Error::Shape {
            op: "factor cols (a.cols vs w0.cols)",
            lhs: a.shape(),
            rhs: w0.shape(),
        });
    }
    Ok(())
}

/// Preallocated buffers for repeated gradient evaluation.
pub(crate) struct GradWorkspace {
    d: usize,
    k: usize,
    r: usize,
    /// Holds `W0 − BA` after [`GradWorkspace::evaluate`].
    pub err: Vec<f64>,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl GradWorkspace {
    pub fn new(d: usize, k: usize, r: usize) -> Self {
        GradWorkspace {
            d,
            k,
            r,
            err: vec![0.0; d * k],
            grad_a: vec![0.0; r * k],
            grad_b: vec![0.0; d * r],
        }
    }

    /// Fills the error and both gradients; returns `‖W0 − BA‖²_F`.
    pub fn evaluate(&mut self, w0: &Matrix, a: &Matrix, b: &Matrix) -> f64 {
        let (d, k, r) = (self.d, self.k, self.r);
        tensor::gemm_nn(&mut self.err, b.data(), a.data(), d, r, k);
        for (e, &w) in self.err.iter_mut().zip(w0.data()) {
            *e = w - *e;
        }
        let objective = tensor::sum_sq(&self.err);
        tensor::gemm_tn(&mut self.grad_a, b.data(), &self.err, d, r, k);
        tensor::gemm_nt(&mut self.grad_b, &self.err, a.data(), d, k, r);
        for g in self.grad_a.iter_mut().chain(self.grad_b.iter_mut()) {
            *g *= -2.0;
        }
        objective
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a single parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, cfg: AdamConfig) -> Self {
        AdamState {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn for_param(param: &Matrix, cfg: AdamConfig) -> Self {
        AdamState::new(param.rows(), param.cols(), cfg)
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Matrix, grads: &Matrix, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if params.shape() != grads.shape() || params.shape() != self.first_moment.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: params.shape(),
                rhs: grads.shape(),
            });
        }
        let step = self.step_count + 1;
        if grads.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step });
        }
        self.apply(params.data_mut(), grads.data(), lr);
        if params.data().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("adam_step"));
        }
        Ok(())
    }

    /// Update kernel without validation; the caller guarantees matching lengths.
    pub(crate) fn apply(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let bias1 = 1.0 - b1.powi(t);
        let bias2_sqrt = (1.0 - b2.powi(t)).sqrt();
        let step_size = lr / bias1;
        let m = self.first_moment.data_mut();
        for (mi, &g) in m.iter_mut().zip(grads) {
            *mi = b1 * *mi + (1.0 - b1) * g;
        }
        let v = self.second_moment.data_mut();
        for (vi, &g) in v.iter_mut().zip(grads) {
            *vi = b2 * *vi + (1.0 - b2) * g * g;
        }
        let m = self.first_moment.data();
        let v = self.second_moment.data();
        for ((p, &mi), &vi) in params.iter_mut().zip(m).zip(v) {
            let denom = vi.sqrt() / bias2_sqrt + eps;
            *p -= step_size * mi / denom;
        }
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &Matrix, grads: &Matrix, lr: f64) -> Result<(Matrix, AdamState)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.step(&mut params, grads, lr)?;
    Ok((params, state))
}

/// `lr(t) = base_lr · gamma^⌊t / step_size⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLrSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl Default for StepLrSchedule {
    fn default() -> Self {
        StepLrSchedule {
            base_lr: 5e-4,
            step_size: 5000,
            gamma: 0.5,
        }
    }
}

impl StepLrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid(format!("base lr must be > 0, got {}", self.base_lr)));
        }
        if self.step_size == 0 {
            return Err(Error::invalid("schedule step_size must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = step / self.step_size;
        match i32::try_from(decays) {
            Ok(n) => self.base_lr * self.gamma.powi(n),
            Err(_) => self.base_lr * self.gamma.powf(decays as f64),
        }
    }
}

pub fn lr_at(schedule: &StepLrSchedule, step: usize) -> f64 {
    schedule.lr_at(step)
}
