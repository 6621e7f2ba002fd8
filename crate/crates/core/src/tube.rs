//! Plant model, tube controller and the nominal/error split `x = z + e`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::disturbance::ScenarioDisturbances;
use crate::error::{Error, Result};

/// Discrete-time LTI plant `x+ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LtiSystem {
    /// Fails unless `A` is square, `B` has matching rows and `(A, B)` is controllable.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || n == 0 || b.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let rank = controllability_rank(&a, &b);
        if rank < n {
            return Err(Error::NotControllable { rank, n });
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * k
    }
}

pub fn controllability_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        ctrb.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    let svd = ctrb.svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    svd.rank(smax * 1e-10 * n as f64)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Axis-aligned box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch(format!("box bounds of length {} and {}", lower.len(), upper.len())));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::InvalidParams(format!("box component {i} has lower {} > upper {}", lower[i], upper[i])));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(bound: f64, dim: usize) -> Self {
        Self { lower: DVector::from_element(dim, -bound), upper: DVector::from_element(dim, bound) }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && (0..x.len()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
    }
}

/// Error-feedback policy `pi(e)`, with `K` already in negative-feedback form.
#[derive(Debug, Clone, PartialEq)]
pub enum TubeController {
    Linear { k: DMatrix<f64> },
    /// `clamp(K e, -limit, limit)` componentwise.
    Saturated { k: DMatrix<f64>, limit: DVector<f64> },
}

impl TubeController {
    pub fn saturated(k: DMatrix<f64>, limit: DVector<f64>) -> Result<Self> {
        if limit.len() != k.nrows() {
            return Err(Error::DimensionMismatch(format!("{} limits for {} inputs", limit.len(), k.nrows())));
        }
        if limit.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::InvalidParams("saturation limits must be nonnegative".into()));
        }
        Ok(TubeController::Saturated { k, limit })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        match self {
            TubeController::Linear { k } | TubeController::Saturated { k, .. } => k,
        }
    }

    /// The bounded action set `E_u`, if any.
    pub fn action_box(&self) -> Option<BoxSet> {
        match self {
            TubeController::Linear { .. } => None,
            TubeController::Saturated { limit, .. } => Some(BoxSet { lower: -limit, upper: limit.clone() }),
        }
    }
}

pub fn apply_controller(ctrl: &TubeController, e: &DVector<f64>) -> DVector<f64> {
    match ctrl {
        TubeController::Linear { k } => k * e,
        TubeController::Saturated { k, limit } => {
            let mut u = k * e;
            for (ui, &l) in u.iter_mut().zip(limit.iter()) {
                *ui = ui.clamp(-l, l);
            }
            u
        }
    }
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// from `P = Q` and returns `(P, K)` with `K = -(R + B'PB)^-1 B'PA`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::DimensionMismatch("DARE operands have inconsistent shapes".into()));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let riccati = |p: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let pa = p * a;
        let s = r + &bt * p * b;
        let gain = s.cholesky()?.solve(&(&bt * &pa));
        let mut next = q + &at * &pa - (&at * p * b) * gain;
        next = (&next + next.transpose()) * 0.5;
        Some(next)
    };
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let Some(next) = riccati(&p) else {
            return Err(Error::NoConvergence { residual, iterations });
        };
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NoConvergence { residual: f64::INFINITY, iterations });
        }
        residual = (&next - &p).amax();
        p = next;
        if residual <= tol {
            break;
        }
    }
    if let Some(next) = riccati(&p) {
        residual = (&next - &p).amax();
    }
    if residual > tol {
        return Err(Error::NoConvergence { residual, iterations });
    }
    let s = r + &bt * &p * b;
    let k = -s
        .cholesky()
        .ok_or(Error::NoConvergence { residual, iterations })?
        .solve(&(&bt * &p * a));
    if spectral_radius(&(a + b * &k)) >= 1.0 {
        return Err(Error::NoConvergence { residual, iterations });
    }
    Ok((p, k))
}

/// `max |P - ric(P)|` for a candidate Riccati solution.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let s = r + b.transpose() * p * b;
    let inv = s.try_inverse().expect("R + B'PB is invertible");
    let rhs = q + a.transpose() * p * a - a.transpose() * p * b * inv * b.transpose() * p * a;
    (p - rhs).amax()
}

/// Per-scenario error and tube-input trajectories, flat `[sample][step][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorScenarios {
    pub n_samples: usize,
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    /// `n_samples x (horizon + 1) x n`
    pub errors: Vec<f64>,
    /// `n_samples x horizon x m`
    pub input_errors: Vec<f64>,
}

impl ErrorScenarios {
    pub fn zeros(n_samples: usize, horizon: usize, n: usize, m: usize) -> Self {
        Self {
            n_samples,
            horizon,
            n,
            m,
            errors: vec![0.0; n_samples * (horizon + 1) * n],
            input_errors: vec![0.0; n_samples * horizon * m],
        }
    }

    pub fn error(&self, j: usize, t: usize) -> &[f64] {
        let off = (j * (self.horizon + 1) + t) * self.n;
        &self.errors[off..off + self.n]
    }

    pub fn input_error(&self, j: usize, t: usize) -> &[f64] {
        let off = (j * self.horizon + t) * self.m;
        &self.input_errors[off..off + self.m]
    }

    pub fn set_error(&mut self, j: usize, t: usize, v: &DVector<f64>) {
        let off = (j * (self.horizon + 1) + t) * self.n;
        self.errors[off..off + self.n].copy_from_slice(v.as_slice());
    }

    pub fn set_input_error(&mut self, j: usize, t: usize, v: &DVector<f64>) {
        let off = (j * self.horizon + t) * self.m;
        self.input_errors[off..off + self.m].copy_from_slice(v.as_slice());
    }

    /// Errors of every sample at prediction step `t`, one row per sample.
    pub fn errors_at(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_samples, self.n, |j, i| self.error(j, t)[i])
    }
}

fn check_scenario_dims(sys: &LtiSystem, e0: &DVector<f64>, w: &ScenarioDisturbances) -> Result<()> {
    if e0.len() != sys.n() || w.n_dims != sys.n() {
        return Err(Error::DimensionMismatch(format!(
            "state dim {}, e0 dim {}, disturbance dim {}",
            sys.n(),
            e0.len(),
            w.n_dims
        )));
    }
    Ok(())
}

/// Recursive error propagation `e+ = A e + B pi(e) + w` for every scenario.
pub fn propagate_error_scenarios(
    sys: &LtiSystem,
    ctrl: &TubeController,
    e0: &DVector<f64>,
    w: &ScenarioDisturbances,
) -> Result<ErrorScenarios> {
    check_scenario_dims(sys, e0, w)?;
    let mut out = ErrorScenarios::zeros(w.n_samples, w.length, sys.n(), sys.m());
    for j in 0..w.n_samples {
        let mut e = e0.clone();
        out.set_error(j, 0, &e);
        for t in 0..w.length {
            let eu = apply_controller(ctrl, &e);
            out.set_input_error(j, t, &eu);
            e = sys.a() * &e + sys.b() * &eu + DVector::from_column_slice(w.get(j, t));
            out.set_error(j, t + 1, &e);
        }
    }
    Ok(out)
}

/// Closed form `e(t) = A_K^t e0 + sum_i A_K^(t-1-i) w(i)` for linear tube controllers.
pub fn explicit_error_affine(
    sys: &LtiSystem,
    ctrl: &TubeController,
    e0: &DVector<f64>,
    w: &ScenarioDisturbances,
) -> Result<ErrorScenarios> {
    let TubeController::Linear { k } = ctrl else {
        return Err(Error::NotLinear);
    };
    check_scenario_dims(sys, e0, w)?;
    let ak = sys.closed_loop(k);
    let n = sys.n();
    let mut powers = vec![DMatrix::identity(n, n)];
    for t in 1..=w.length {
        let next = &ak * &powers[t - 1];
        powers.push(next);
    }
    let mut out = ErrorScenarios::zeros(w.n_samples, w.length, n, sys.m());
    for j in 0..w.n_samples {
        for t in 0..=w.length {
            let mut e = &powers[t] * e0;
            for i in 0..t {
                e += &powers[t - 1 - i] * DVector::from_column_slice(w.get(j, i));
            }
            if t < w.length {
                out.set_input_error(j, t, &(k * &e));
            }
            out.set_error(j, t, &e);
        }
    }
    Ok(out)
}

/// Pontryagin difference `U ⊖ E_u` of two boxes.
pub fn tighten_input_box(u_box: &BoxSet, ctrl: &TubeController) -> Result<BoxSet> {
    let Some(eu) = ctrl.action_box() else {
        return Err(Error::InvalidParams("a linear tube controller has an unbounded action set".into()));
    };
    if eu.dim() != u_box.dim() {
        return Err(Error::DimensionMismatch(format!("input box dim {}, action box dim {}", u_box.dim(), eu.dim())));
    }
    let lower = &u_box.lower - &eu.lower;
    let upper = &u_box.upper - &eu.upper;
    if let Some(index) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
        return Err(Error::EmptyTightening { index, lower: lower[index], upper: upper[index] });
    }
    Ok(BoxSet { lower, upper })
}

pub fn nominal_step(sys: &LtiSystem, z: &DVector<f64>, v: &DVector<f64>, wbar: &DVector<f64>) -> DVector<f64> {
    sys.a() * z + sys.b() * v + wbar
}
