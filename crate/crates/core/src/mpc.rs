//! Soft-constrained distributionally robust tube MPC.
//!
//! Decision vector, in order:
//!
//! ```text
//! z(0..N)  v(0..N-1)  tau[i,t]  s[i,t,j]  theta(0..N-1)  eta  rho[t,j,c]  phi[t,j,k]
//! ```
//!
//! `rho` and `phi` exist only for L1 input and weighted-L1 state costs.

use std::ops::Range;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::dr_cvar::{build_cvar_block, AmbiguityConfig, BlockVar, CvarLpBlock, HalfspaceChanceConstraint};
use crate::error::{Error, Result};
use crate::qp::{check_feasibility, solve_qp_with, CscMatrix, Feasibility, KktCache, QpSettings, QpStandardForm, QpStatus, Residuals};
use crate::tube::{apply_controller, BoxSet, ErrorScenarios, LtiSystem, TubeController};

#[derive(Debug, Clone, PartialEq)]
pub enum StateCost {
    /// `(x - x_s)' Q (x - x_s)`
    Quadratic(DMatrix<f64>),
    /// `sum_i q_i |x_i - x_s,i|`
    WeightedL1(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputCost {
    /// `r |u|_1`
    L1(f64),
    Quadratic(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCost {
    Zero,
    Quadratic(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostConfig {
    pub state: StateCost,
    pub input: InputCost,
    pub terminal: TerminalCost,
    pub setpoint: DVector<f64>,
    /// Adds the Wasserstein worst-case offset `epsilon * kappa` of the
    /// (Lipschitz) stage costs to the objective.
    pub robust_offset: bool,
}

/// `pi_f(z) = u0 + K z`
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalPolicy {
    pub k: DMatrix<f64>,
    pub u0: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSet {
    Singleton(DVector<f64>),
    Box { set: BoxSet, policy: Option<TerminalPolicy> },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub penalty_c: f64,
    pub cost: CostConfig,
    pub constraints: Vec<HalfspaceChanceConstraint>,
    pub ambiguity: AmbiguityConfig,
    pub terminal: TerminalSet,
    /// Tightened input box `V`.
    pub input_box_v: BoxSet,
    /// Emit the CVaR blocks at all.
    pub cvar_blocks: bool,
    /// `false` drops `theta` from the budget rows (hard DR-CVaR constraints).
    pub soft: bool,
    /// Keep the block at `t = 0`, which is fixed by the measured state.
    pub first_step_block: bool,
    pub solver: QpSettings,
}

fn sym_psd(m: &DMatrix<f64>, n: usize, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch(format!("{what} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
    }
    let s = (m + m.transpose()) * 0.5;
    let min_eig = s.clone().symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 * s.amax().max(1.0) {
        return Err(Error::InvalidParams(format!("{what} is not positive semidefinite")));
    }
    Ok(s)
}

impl MpcConfig {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParams("prediction horizon must be >= 1".into()));
        }
        if !(self.penalty_c > 0.0 && self.penalty_c.is_finite()) {
            return Err(Error::InvalidParams(format!("penalty_c = {} must be > 0", self.penalty_c)));
        }
        self.ambiguity.validate()?;
        if self.cost.setpoint.len() != n {
            return Err(Error::DimensionMismatch(format!("setpoint has {} entries, n = {n}", self.cost.setpoint.len())));
        }
        match &self.cost.state {
            StateCost::Quadratic(q) => {
                sym_psd(q, n, "state weight Q")?;
            }
            StateCost::WeightedL1(w) => {
                if w.len() != n || w.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidParams("weighted-L1 state weights must be n nonnegative values".into()));
                }
            }
        }
        match &self.cost.input {
            InputCost::L1(r) if !(*r >= 0.0) => return Err(Error::InvalidParams("L1 input weight must be >= 0".into())),
            InputCost::Quadratic(r) => {
                sym_psd(r, m, "input weight R")?;
            }
            _ => {}
        }
        if let TerminalCost::Quadratic(p) = &self.cost.terminal {
            sym_psd(p, n, "terminal weight")?;
        }
        if self.cost.robust_offset
            && (matches!(self.cost.state, StateCost::Quadratic(_))
                || matches!(self.cost.input, InputCost::Quadratic(_))
                || matches!(self.cost.terminal, TerminalCost::Quadratic(_)))
        {
            return Err(Error::InvalidParams("robust_offset needs Lipschitz (L1-type) costs with zero terminal cost".into()));
        }
        for c in &self.constraints {
            if c.h.len() != n {
                return Err(Error::DimensionMismatch(format!("constraint normal has {} entries, n = {n}", c.h.len())));
            }
        }
        match &self.terminal {
            TerminalSet::Singleton(x) if x.len() != n => {
                return Err(Error::DimensionMismatch(format!("terminal point has {} entries, n = {n}", x.len())))
            }
            TerminalSet::Box { set, policy } => {
                if set.dim() != n {
                    return Err(Error::DimensionMismatch(format!("terminal box has dim {}, n = {n}", set.dim())));
                }
                if let Some(p) = policy {
                    if p.k.nrows() != m || p.k.ncols() != n || p.u0.len() != m {
                        return Err(Error::DimensionMismatch("terminal policy dimensions".into()));
                    }
                }
            }
            _ => {}
        }
        if self.input_box_v.dim() != m {
            return Err(Error::DimensionMismatch(format!("input box has dim {}, m = {m}", self.input_box_v.dim())));
        }
        Ok(())
    }

    /// Lipschitz constant of the per-scenario cost in the dual transport
    /// norm, summed over the horizon.
    pub fn cost_lipschitz(&self, m: usize) -> f64 {
        let p = self.ambiguity.p_norm();
        let state = match &self.cost.state {
            StateCost::WeightedL1(w) => p.norm(w.as_slice()),
            StateCost::Quadratic(_) => f64::INFINITY,
        };
        let input = match &self.cost.input {
            InputCost::L1(r) => r * p.norm(&vec![1.0; m]),
            InputCost::Quadratic(_) => f64::INFINITY,
        };
        self.horizon as f64 * (state + input)
    }
}

/// Offsets of every variable block and row block of the assembled problem.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub n_constraints: usize,
    pub n_samples: usize,
    /// First prediction step carrying CVaR blocks (0 or 1).
    pub first_block: usize,
    pub z: usize,
    pub v: usize,
    pub tau: usize,
    pub s: usize,
    pub theta: usize,
    pub eta: usize,
    pub rho: Option<usize>,
    pub phi: Option<usize>,
    /// State components carrying a weighted-L1 auxiliary.
    pub phi_dims: Vec<usize>,
    pub n_vars: usize,
    pub eq_terminal: Option<Range<usize>>,
    pub ineq_cvar: Range<usize>,
}

impl IndexMap {
    /// CVaR blocks per constraint.
    pub fn n_blocks(&self) -> usize {
        self.horizon - self.first_block
    }

    pub fn z(&self, t: usize, i: usize) -> usize {
        self.z + t * self.n + i
    }

    pub fn v(&self, t: usize, c: usize) -> usize {
        self.v + t * self.m + c
    }

    pub fn tau(&self, i: usize, t: usize) -> usize {
        self.tau + i * self.n_blocks() + t - self.first_block
    }

    pub fn s(&self, i: usize, t: usize, j: usize) -> usize {
        self.s + (i * self.n_blocks() + t - self.first_block) * self.n_samples + j
    }

    pub fn theta(&self, t: usize) -> usize {
        self.theta + t
    }

    pub fn rho(&self, t: usize, j: usize, c: usize) -> Option<usize> {
        self.rho.map(|r| r + (t * self.n_samples + j) * self.m + c)
    }

    pub fn phi(&self, t: usize, j: usize, k: usize) -> Option<usize> {
        self.phi.map(|p| p + (t * self.n_samples + j) * self.phi_dims.len() + k)
    }
}

/// An assembled MPC instance with everything needed to unpack or complete
/// decision vectors.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub qp: QpStandardForm,
    pub map: IndexMap,
    /// Constraint-major, step-minor.
    pub blocks: Vec<CvarLpBlock>,
    pub scenarios: ErrorScenarios,
    pub setpoint: DVector<f64>,
    pub soft: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// `N x m`
    pub v_star: DMatrix<f64>,
    /// `(N + 1) x n`
    pub z_star: DMatrix<f64>,
    pub theta_star: DVector<f64>,
    /// `r x N`
    pub tau_star: DMatrix<f64>,
    pub s_star: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub residuals: Residuals,
    pub iterations: usize,
    pub solve_time: Duration,
}

impl MpcSolution {
    pub fn v0(&self) -> DVector<f64> {
        self.v_star.row(0).transpose()
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_star.iter().cloned().fold(0.0, f64::max)
    }
}

/// Shifted sequence built from a previous optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub v: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub theta: DVector<f64>,
}

struct Rows {
    t: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl Rows {
    fn new() -> Self {
        Self { t: Vec::new(), rhs: Vec::new() }
    }

    fn push(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        let r = self.rhs.len();
        self.t.extend(terms.into_iter().map(|(c, v)| (r, c, v)));
        self.rhs.push(rhs);
    }

    fn len(&self) -> usize {
        self.rhs.len()
    }

    fn finish(self, d: usize) -> (CscMatrix, Vec<f64>) {
        (CscMatrix::from_triplets(self.rhs.len(), d, &self.t), self.rhs)
    }
}

/// Builds the QP for one MPC step. `scenarios` must have been propagated from
/// the current error; `wbar_window` row `t` is the known state disturbance at
/// `k + t`.
pub fn assemble_mpc_qp(sys: &LtiSystem, cfg: &MpcConfig, z_k: &DVector<f64>, scenarios: &ErrorScenarios, wbar_window: &DMatrix<f64>) -> Result<MpcProblem> {
    let (n, m, nh) = (sys.n(), sys.m(), cfg.horizon);
    cfg.validate(n, m)?;
    if z_k.len() != n {
        return Err(Error::DimensionMismatch(format!("z_k has {} entries, n = {n}", z_k.len())));
    }
    if scenarios.horizon != nh || scenarios.n != n || scenarios.m != m || scenarios.n_samples == 0 {
        return Err(Error::DimensionMismatch(format!(
            "scenarios ({} samples, horizon {}, n {}, m {}) vs horizon {nh}, n {n}, m {m}",
            scenarios.n_samples, scenarios.horizon, scenarios.n, scenarios.m
        )));
    }
    if wbar_window.nrows() < nh || wbar_window.ncols() != n {
        return Err(Error::DimensionMismatch(format!("known disturbance window is {}x{}, need {nh}x{n}", wbar_window.nrows(), wbar_window.ncols())));
    }
    let ns = scenarios.n_samples;
    let r = if cfg.cvar_blocks { cfg.constraints.len() } else { 0 };
    let x_s = &cfg.cost.setpoint;

    let phi_dims: Vec<usize> = match &cfg.cost.state {
        StateCost::WeightedL1(w) => (0..n).filter(|&i| w[i] > 0.0).collect(),
        StateCost::Quadratic(_) => Vec::new(),
    };
    let z0 = 0;
    let v0 = z0 + (nh + 1) * n;
    let first_block = usize::from(!cfg.first_step_block);
    let nb = nh - first_block;
    let tau0 = v0 + nh * m;
    let s0 = tau0 + r * nb;
    let theta0 = s0 + r * nb * ns;
    let eta = theta0 + nh;
    let mut next = eta + 1;
    let rho = matches!(cfg.cost.input, InputCost::L1(_)).then(|| {
        let o = next;
        next += nh * ns * m;
        o
    });
    let phi = (!phi_dims.is_empty()).then(|| {
        let o = next;
        next += nh * ns * phi_dims.len();
        o
    });
    let mut map = IndexMap {
        n,
        m,
        horizon: nh,
        n_constraints: r,
        n_samples: ns,
        first_block,
        z: z0,
        v: v0,
        tau: tau0,
        s: s0,
        theta: theta0,
        eta,
        rho,
        phi,
        phi_dims,
        n_vars: next,
        eq_terminal: None,
        ineq_cvar: 0..0,
    };
    let d = map.n_vars;

    // equalities
    let mut eq = Rows::new();
    for i in 0..n {
        eq.push([(map.z(0, i), 1.0)], z_k[i]);
    }
    let (a, b) = (sys.a(), sys.b());
    for t in 0..nh {
        for i in 0..n {
            let mut terms = vec![(map.z(t + 1, i), 1.0)];
            terms.extend((0..n).filter(|&j| a[(i, j)] != 0.0).map(|j| (map.z(t, j), -a[(i, j)])));
            terms.extend((0..m).filter(|&c| b[(i, c)] != 0.0).map(|c| (map.v(t, c), -b[(i, c)])));
            eq.push(terms, wbar_window[(t, i)]);
        }
    }
    if let TerminalSet::Singleton(xf) = &cfg.terminal {
        let start = eq.len();
        for i in 0..n {
            eq.push([(map.z(nh, i), 1.0)], xf[i]);
        }
        map.eq_terminal = Some(start..eq.len());
    }

    // inequalities
    let mut ineq = Rows::new();
    let mut blocks = Vec::with_capacity(r * nb);
    for (ci, c) in cfg.constraints.iter().enumerate().take(r) {
        for t in first_block..nh {
            let block = build_cvar_block(c, &cfg.ambiguity, &scenarios.errors_at(t), cfg.soft)?;
            for row in &block.rows {
                let terms = row.terms.iter().map(|&(var, coef)| {
                    let col = match var {
                        BlockVar::Z(k) => map.z(t, k),
                        BlockVar::Tau => map.tau(ci, t),
                        BlockVar::S(j) => map.s(ci, t, j),
                        BlockVar::Theta => map.theta(t),
                    };
                    (col, coef)
                });
                ineq.push(terms, row.rhs);
            }
            blocks.push(block);
        }
    }
    map.ineq_cvar = 0..ineq.len();
    for t in 0..nh {
        ineq.push([(map.theta(t), -1.0)], 0.0);
        ineq.push([(map.theta(t), 1.0), (map.eta, -1.0)], 0.0);
    }
    let vb = &cfg.input_box_v;
    for t in 0..nh {
        for c in 0..m {
            if vb.upper[c].is_finite() {
                ineq.push([(map.v(t, c), 1.0)], vb.upper[c]);
            }
            if vb.lower[c].is_finite() {
                ineq.push([(map.v(t, c), -1.0)], -vb.lower[c]);
            }
        }
    }
    if let TerminalSet::Box { set, .. } = &cfg.terminal {
        for i in 0..n {
            ineq.push([(map.z(nh, i), 1.0)], set.upper[i]);
            ineq.push([(map.z(nh, i), -1.0)], -set.lower[i]);
        }
    }
    if map.rho.is_some() {
        for t in 0..nh {
            for j in 0..ns {
                let eu = scenarios.input_error(j, t);
                for c in 0..m {
                    let rc = map.rho(t, j, c).unwrap();
                    ineq.push([(map.v(t, c), 1.0), (rc, -1.0)], -eu[c]);
                    ineq.push([(map.v(t, c), -1.0), (rc, -1.0)], eu[c]);
                }
            }
        }
    }
    if map.phi.is_some() {
        for t in 0..nh {
            for j in 0..ns {
                let e = scenarios.error(j, t);
                for (k, &i) in map.phi_dims.iter().enumerate() {
                    let pc = map.phi(t, j, k).unwrap();
                    ineq.push([(map.z(t, i), 1.0), (pc, -1.0)], x_s[i] - e[i]);
                    ineq.push([(map.z(t, i), -1.0), (pc, -1.0)], e[i] - x_s[i]);
                }
            }
        }
    }

    // objective
    let mut p_t: Vec<(usize, usize, f64)> = Vec::new();
    let mut q = vec![0.0; d];
    let mut offset = 0.0;
    let inv_ns = 1.0 / ns as f64;
    let quad_state = |w: &DMatrix<f64>, t: usize, p_t: &mut Vec<(usize, usize, f64)>, q: &mut [f64], offset: &mut f64| {
        let w = (w + w.transpose()) * 0.5;
        for i in 0..n {
            for j in 0..n {
                if w[(i, j)] != 0.0 {
                    p_t.push((map.z(t, i), map.z(t, j), 2.0 * w[(i, j)]));
                }
            }
        }
        let mut mean_dev = DVector::zeros(n);
        for jj in 0..ns {
            let dev = DVector::from_column_slice(scenarios.error(jj, t)) - x_s;
            *offset += inv_ns * dev.dot(&(&w * &dev));
            mean_dev += dev * inv_ns;
        }
        let lin = &w * mean_dev * 2.0;
        for i in 0..n {
            q[map.z(t, i)] += lin[i];
        }
    };
    match &cfg.cost.state {
        StateCost::Quadratic(w) => {
            for t in 0..nh {
                quad_state(w, t, &mut p_t, &mut q, &mut offset);
            }
        }
        StateCost::WeightedL1(w) => {
            for t in 0..nh {
                for j in 0..ns {
                    for (k, &i) in map.phi_dims.iter().enumerate() {
                        q[map.phi(t, j, k).unwrap()] = w[i] * inv_ns;
                    }
                }
            }
        }
    }
    if let TerminalCost::Quadratic(w) = &cfg.cost.terminal {
        quad_state(w, nh, &mut p_t, &mut q, &mut offset);
    }
    match &cfg.cost.input {
        InputCost::Quadratic(w) => {
            let w = (w + w.transpose()) * 0.5;
            for t in 0..nh {
                for i in 0..m {
                    for j in 0..m {
                        if w[(i, j)] != 0.0 {
                            p_t.push((map.v(t, i), map.v(t, j), 2.0 * w[(i, j)]));
                        }
                    }
                }
                let mut mean = DVector::zeros(m);
                for jj in 0..ns {
                    let eu = DVector::from_column_slice(scenarios.input_error(jj, t));
                    offset += inv_ns * eu.dot(&(&w * &eu));
                    mean += eu * inv_ns;
                }
                let lin = &w * mean * 2.0;
                for i in 0..m {
                    q[map.v(t, i)] += lin[i];
                }
            }
        }
        InputCost::L1(rw) => {
            for t in 0..nh {
                for j in 0..ns {
                    for c in 0..m {
                        q[map.rho(t, j, c).unwrap()] = rw * inv_ns;
                    }
                }
            }
        }
    }
    q[map.eta] = cfg.penalty_c;
    if cfg.cost.robust_offset {
        offset += cfg.ambiguity.epsilon * cfg.cost_lipschitz(m);
    }

    let (a_eq, b_eq) = eq.finish(d);
    let (g, h) = ineq.finish(d);
    let qp = QpStandardForm::from_parts(CscMatrix::from_triplets(d, d, &p_t), q, a_eq, b_eq, g, h, offset);
    Ok(MpcProblem { qp, map, blocks, scenarios: scenarios.clone(), setpoint: x_s.clone(), soft: cfg.soft })
}

impl MpcProblem {
    pub fn unpack(&self, x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>, Vec<f64>) {
        let mp = &self.map;
        let z = DMatrix::from_fn(mp.horizon + 1, mp.n, |t, i| x[mp.z(t, i)]);
        let v = DMatrix::from_fn(mp.horizon, mp.m, |t, c| x[mp.v(t, c)]);
        let theta = DVector::from_fn(mp.horizon, |t, _| x[mp.theta(t)]);
        let tau = DMatrix::from_fn(mp.n_constraints, mp.horizon, |i, t| if t < mp.first_block { 0.0 } else { x[mp.tau(i, t)] });
        let s = x[mp.s..mp.theta].to_vec();
        (z, v, theta, tau, s)
    }

    /// Completes a candidate to a full decision vector: `tau`, `s` at their
    /// minimizing values, `theta` raised where the new scenarios require it,
    /// and the cost auxiliaries at their tight values.
    pub fn complete(&self, cand: &Candidate) -> Vec<f64> {
        let mp = &self.map;
        let mut x = vec![0.0; mp.n_vars];
        for t in 0..=mp.horizon {
            for i in 0..mp.n {
                x[mp.z(t, i)] = cand.z[(t, i)];
            }
        }
        for t in 0..mp.horizon {
            for c in 0..mp.m {
                x[mp.v(t, c)] = cand.v[(t, c)];
            }
        }
        let mut theta: Vec<f64> = cand.theta.iter().map(|v| v.max(0.0)).collect();
        for (bi, block) in self.blocks.iter().enumerate() {
            let (ci, t) = (bi / mp.n_blocks(), mp.first_block + bi % mp.n_blocks());
            let zt = cand.z.row(t).transpose();
            let (lhs, tau, s) = block.optimal_completion(&zt);
            x[mp.tau(ci, t)] = tau;
            for (j, sj) in s.iter().enumerate() {
                x[mp.s(ci, t, j)] = *sj;
            }
            if self.soft {
                theta[t] = theta[t].max(lhs);
            }
        }
        for (t, th) in theta.iter().enumerate() {
            x[mp.theta(t)] = *th;
        }
        x[mp.eta] = theta.iter().cloned().fold(0.0, f64::max);
        for t in 0..mp.horizon {
            for j in 0..mp.n_samples {
                let eu = self.scenarios.input_error(j, t);
                for c in 0..mp.m {
                    if let Some(k) = mp.rho(t, j, c) {
                        x[k] = (cand.v[(t, c)] + eu[c]).abs();
                    }
                }
                let e = self.scenarios.error(j, t);
                for (k, &i) in mp.phi_dims.iter().enumerate() {
                    x[mp.phi(t, j, k).unwrap()] = (cand.z[(t, i)] + e[i] - self.setpoint[i]).abs();
                }
            }
        }
        x
    }

    /// Largest violation of any row of this problem by the completed
    /// candidate.
    pub fn candidate_violation(&self, cand: &Candidate) -> f64 {
        self.qp.max_violation(&self.complete(cand))
    }

    fn without_terminal(&self) -> Option<QpStandardForm> {
        let range = self.map.eq_terminal.clone()?;
        let kept: Vec<usize> = (0..self.qp.n_eq()).filter(|r| !range.contains(r)).collect();
        let mut new_row = vec![usize::MAX; self.qp.n_eq()];
        for (k, &r) in kept.iter().enumerate() {
            new_row[r] = k;
        }
        let t: Vec<_> = self.qp.a_eq.triplets().filter(|(r, _, _)| new_row[*r] != usize::MAX).map(|(r, c, v)| (new_row[r], c, v)).collect();
        let b: Vec<f64> = kept.iter().map(|&r| self.qp.b_eq[r]).collect();
        Some(QpStandardForm::from_parts(
            self.qp.p.clone(),
            self.qp.q.clone(),
            CscMatrix::from_triplets(kept.len(), self.qp.n_vars(), &t),
            b,
            self.qp.g.clone(),
            self.qp.h.clone(),
            self.qp.offset,
        ))
    }
}

/// Solves an assembled instance. A primal-infeasible problem that becomes
/// feasible once the terminal equality is dropped is reported as
/// [`Error::InfeasibleHardTerminal`]; other solver outcomes are returned in
/// the solution status.
pub fn solve_mpc(problem: &MpcProblem, settings: &QpSettings, cache: &mut KktCache) -> Result<MpcSolution> {
    let sol = solve_qp_with(&problem.qp, settings, cache);
    if sol.status == QpStatus::PrimalInfeasible {
        if let Some(relaxed) = problem.without_terminal() {
            if let Ok(Feasibility::Feasible(_)) = check_feasibility(&relaxed, settings) {
                return Err(Error::InfeasibleHardTerminal);
            }
        }
    }
    let (z_star, v_star, theta_star, tau_star, s_star) = problem.unpack(&sol.x);
    Ok(MpcSolution {
        v_star,
        z_star,
        theta_star,
        tau_star,
        s_star,
        objective: sol.objective,
        status: sol.status,
        residuals: sol.residuals,
        iterations: sol.iterations,
        solve_time: sol.solve_time,
    })
}

/// `u = v*(0) + pi(e)`
pub fn control_input(sol: &MpcSolution, ctrl: &TubeController, e_k: &DVector<f64>) -> Result<DVector<f64>> {
    if sol.status != QpStatus::Optimal {
        return Err(Error::NotSolved(sol.status));
    }
    Ok(sol.v0() + apply_controller(ctrl, e_k))
}

/// Input holding `x_f` in place under the state disturbance `wbar`.
pub fn steady_input(sys: &LtiSystem, x_f: &DVector<f64>, wbar: &DVector<f64>) -> Result<DVector<f64>> {
    let rhs = x_f - sys.a() * x_f - wbar;
    sys.b().clone().svd(true, true).solve(&rhs, 1e-12).map_err(|e| Error::InvalidParams(format!("steady input: {e}")))
}

/// Drops the first element of the previous optimum and appends the terminal
/// policy; `wbar_next` is the known state disturbance at `k + N`.
pub fn candidate_shift(prev: &MpcSolution, sys: &LtiSystem, cfg: &MpcConfig, wbar_next: &DVector<f64>) -> Result<Candidate> {
    let nh = cfg.horizon;
    let (n, m) = (sys.n(), sys.m());
    let z_end = prev.z_star.row(nh).transpose();
    let v_f = match &cfg.terminal {
        TerminalSet::Singleton(xf) => steady_input(sys, xf, wbar_next)?,
        TerminalSet::Box { policy: Some(p), .. } => &p.u0 + &p.k * &z_end,
        _ => return Err(Error::NoTerminalPolicy),
    };
    let z_next = sys.a() * &z_end + sys.b() * &v_f + wbar_next;
    let mut v = DMatrix::zeros(nh, m);
    let mut z = DMatrix::zeros(nh + 1, n);
    let mut theta = DVector::zeros(nh);
    for t in 0..nh - 1 {
        v.set_row(t, &prev.v_star.row(t + 1));
        theta[t] = prev.theta_star[t + 1];
    }
    v.set_row(nh - 1, &v_f.transpose());
    for t in 0..nh {
        z.set_row(t, &prev.z_star.row(t + 1));
    }
    z.set_row(nh, &z_next.transpose());
    Ok(Candidate { v, z, theta })
}
