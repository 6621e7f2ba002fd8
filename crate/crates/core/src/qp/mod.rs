//! Convex quadratic programs
//!
//! ```text
//! minimize    1/2 x'Px + q'x + offset
//! subject to  Aeq x  = beq
//!             G x   <= h
//! ```
//!
//! solved by a Mehrotra predictor-corrector interior-point method on the
//! regularized quasi-definite KKT system (see [`ipm`]).

use std::path::Path;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

pub mod ipm;
pub mod sparse;

pub use ipm::{solve_qp, solve_qp_with, KktCache};
pub use sparse::CscMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct QpStandardForm {
    /// Symmetric, both triangles stored.
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub g: CscMatrix,
    pub h: Vec<f64>,
    /// Constant added to the objective value.
    pub offset: f64,
}

impl QpStandardForm {
    /// Validates shapes and finiteness, symmetrizes `P` and checks it is PSD
    /// to within `-1e-10` (via an LDL' of `P + 1e-10 I`).
    pub fn new(p: CscMatrix, q: Vec<f64>, a_eq: CscMatrix, b_eq: Vec<f64>, g: CscMatrix, h: Vec<f64>) -> Result<Self> {
        let d = q.len();
        if p.nrows != d || p.ncols != d {
            return Err(Error::DimensionMismatch(format!("P is {}x{}, q has {d} entries", p.nrows, p.ncols)));
        }
        if a_eq.ncols != d || a_eq.nrows != b_eq.len() {
            return Err(Error::DimensionMismatch(format!(
                "Aeq is {}x{}, beq has {} entries, d = {d}",
                a_eq.nrows,
                a_eq.ncols,
                b_eq.len()
            )));
        }
        if g.ncols != d || g.nrows != h.len() {
            return Err(Error::DimensionMismatch(format!(
                "G is {}x{}, h has {} entries, d = {d}",
                g.nrows,
                g.ncols,
                h.len()
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&p.nzval) && finite(&q) && finite(&a_eq.nzval) && finite(&b_eq) && finite(&g.nzval) && finite(&h)) {
            return Err(Error::InvalidParams("QP data contains non-finite values".into()));
        }
        let pt = p.transpose();
        let mut sym: Vec<_> = p.triplets().chain(pt.triplets()).map(|(r, c, v)| (r, c, 0.5 * v)).collect();
        sym.retain(|t| t.2 != 0.0);
        let p = CscMatrix::from_triplets(d, d, &sym);
        if !ipm::is_psd(&p, 1e-10) {
            return Err(Error::InvalidParams("P is not positive semidefinite".into()));
        }
        Ok(Self { p, q, a_eq, b_eq, g, h, offset: 0.0 })
    }

    /// Trusted constructor for structurally symmetric PSD data.
    pub(crate) fn from_parts(p: CscMatrix, q: Vec<f64>, a_eq: CscMatrix, b_eq: Vec<f64>, g: CscMatrix, h: Vec<f64>, offset: f64) -> Self {
        debug_assert_eq!(p.nrows, q.len());
        debug_assert_eq!(a_eq.nrows, b_eq.len());
        debug_assert_eq!(g.nrows, h.len());
        Self { p, q, a_eq, b_eq, g, h, offset }
    }

    pub fn dense(
        p: &DMatrix<f64>,
        q: &DVector<f64>,
        a_eq: &DMatrix<f64>,
        b_eq: &DVector<f64>,
        g: &DMatrix<f64>,
        h: &DVector<f64>,
    ) -> Result<Self> {
        let d = q.len();
        let a_eq = if a_eq.nrows() == 0 { CscMatrix::zeros(0, d) } else { CscMatrix::from_dense(a_eq) };
        let g = if g.nrows() == 0 { CscMatrix::zeros(0, d) } else { CscMatrix::from_dense(g) };
        Self::new(CscMatrix::from_dense(p), q.as_slice().to_vec(), a_eq, b_eq.as_slice().to_vec(), g, h.as_slice().to_vec())
    }

    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.mul_vec(x);
        0.5 * dot(x, &px) + dot(&self.q, x) + self.offset
    }

    /// Largest violation of any equality or inequality row at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        let ax = self.a_eq.mul_vec(x);
        for (r, b) in ax.iter().zip(&self.b_eq) {
            worst = worst.max((r - b).abs());
        }
        let gx = self.g.mul_vec(x);
        for (r, h) in gx.iter().zip(&self.h) {
            worst = worst.max(r - h);
        }
        worst
    }

    /// Debug dump with dense row-major arrays.
    pub fn dump_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Dense {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }
        fn dense(m: &CscMatrix) -> Dense {
            let mut data = vec![0.0; m.nrows * m.ncols];
            for (r, c, v) in m.triplets() {
                data[r * m.ncols + c] += v;
            }
            Dense { rows: m.nrows, cols: m.ncols, data }
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            n_vars: usize,
            n_eq: usize,
            n_ineq: usize,
            p: Dense,
            q: &'a [f64],
            a_eq: Dense,
            b_eq: &'a [f64],
            g: Dense,
            h: &'a [f64],
            offset: f64,
        }
        let dump = Dump {
            n_vars: self.n_vars(),
            n_eq: self.n_eq(),
            n_ineq: self.n_ineq(),
            p: dense(&self.p),
            q: &self.q,
            a_eq: dense(&self.a_eq),
            b_eq: &self.b_eq,
            g: dense(&self.g),
            h: &self.h,
            offset: self.offset,
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &dump).map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    MaxIter,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Residuals {
    /// `max(|Aeq x - beq|, (G x - h)+)`
    pub primal: f64,
    /// `max(|P x + q + Aeq' y + G' z|, (-z)+)`
    pub dual: f64,
    /// Mean complementarity `sum |z_i (h - G x)_i| / n_ineq`.
    pub gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub y_eq: Vec<f64>,
    pub z_ineq: Vec<f64>,
    pub status: QpStatus,
    pub residuals: Residuals,
    pub objective: f64,
    pub iterations: usize,
    pub solve_time: Duration,
    /// Mean complementarity after every accepted iteration.
    pub gap_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub static_reg: f64,
    pub fraction_to_boundary: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, static_reg: 1e-9, fraction_to_boundary: 0.99 }
    }
}

impl QpSettings {
    pub fn with_tol(tol: f64, max_iter: usize) -> Self {
        Self { tol, max_iter, ..Self::default() }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Recomputes the three optimality residuals from the problem data alone.
pub fn kkt_residuals(p: &QpStandardForm, x: &[f64], y: &[f64], z: &[f64]) -> Residuals {
    let mut primal = 0.0f64;
    let ax = p.a_eq.mul_vec(x);
    for (r, b) in ax.iter().zip(&p.b_eq) {
        primal = primal.max((r - b).abs());
    }
    let gx = p.g.mul_vec(x);
    for (r, h) in gx.iter().zip(&p.h) {
        primal = primal.max(r - h);
    }
    let mut stat = p.p.mul_vec(x);
    for (s, q) in stat.iter_mut().zip(&p.q) {
        *s += q;
    }
    p.a_eq.gemv_t(1.0, y, &mut stat);
    p.g.gemv_t(1.0, z, &mut stat);
    let dual = z.iter().fold(inf_norm(&stat), |m, &zi| m.max(-zi));
    let gap = if z.is_empty() {
        0.0
    } else {
        gx.iter().zip(&p.h).zip(z).map(|((g, h), zi)| (zi * (h - g)).abs()).sum::<f64>() / z.len() as f64
    };
    Residuals { primal, dual, gap }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Feasible(Vec<f64>),
    Infeasible,
}

/// Decides feasibility through the elastic problem
/// `min t  s.t.  G x - t <= h,  |Aeq x - beq| <= t,  t >= -1`;
/// the constraint set is feasible to `tol` iff the optimal `t <= tol`.
pub fn check_feasibility(p: &QpStandardForm, settings: &QpSettings) -> Result<Feasibility> {
    let d = p.n_vars();
    let t = d;
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    let mut h = Vec::new();
    let mut r = 0;
    for (gr, gc, v) in p.g.triplets() {
        rows.push((gr, gc, v));
    }
    for i in 0..p.n_ineq() {
        rows.push((i, t, -1.0));
        h.push(p.h[i]);
    }
    r += p.n_ineq();
    for (ar, ac, v) in p.a_eq.triplets() {
        rows.push((r + ar, ac, v));
        rows.push((r + p.n_eq() + ar, ac, -v));
    }
    for i in 0..p.n_eq() {
        rows.push((r + i, t, -1.0));
        rows.push((r + p.n_eq() + i, t, -1.0));
        h.push(p.b_eq[i]);
    }
    for i in 0..p.n_eq() {
        h.push(-p.b_eq[i]);
    }
    r += 2 * p.n_eq();
    rows.push((r, t, -1.0));
    h.push(1.0);
    r += 1;
    let mut q = vec![0.0; d + 1];
    q[t] = 1.0;
    let elastic = QpStandardForm::from_parts(
        CscMatrix::zeros(d + 1, d + 1),
        q,
        CscMatrix::zeros(0, d + 1),
        Vec::new(),
        CscMatrix::from_triplets(r, d + 1, &rows),
        h,
        0.0,
    );
    let sol = solve_qp(&elastic, settings);
    match sol.status {
        QpStatus::Optimal | QpStatus::MaxIter => {
            let x = sol.x[..d].to_vec();
            if p.max_violation(&x) <= settings.tol {
                Ok(Feasibility::Feasible(x))
            } else if sol.status == QpStatus::Optimal {
                Ok(Feasibility::Infeasible)
            } else {
                Err(Error::NotSolved(sol.status))
            }
        }
        status => Err(Error::NotSolved(status)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn empty(d: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, d), DVector::zeros(0))
    }

    #[test]
    fn unconstrained_stationary_point() {
        let (e, eb) = empty(2);
        let p = QpStandardForm::dense(&DMatrix::identity(2, 2), &dv(&[-1.0, -2.0]), &e, &eb, &e, &eb).unwrap();
        let sol = solve_qp(&p, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-9 && (sol.x[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn equality_constrained_minimum_norm() {
        // min x^2 + y^2 s.t. x + y = 2: KKT gives (1, 1) with multiplier -2
        let (e, eb) = empty(2);
        let p = QpStandardForm::dense(&(DMatrix::identity(2, 2) * 2.0), &dv(&[0.0, 0.0]), &dm(1, 2, &[1.0, 1.0]), &dv(&[2.0]), &e, &eb).unwrap();
        let sol = solve_qp(&p, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-9 && (sol.x[1] - 1.0).abs() < 1e-9);
        assert!((sol.y_eq[0] + 2.0).abs() < 1e-8);

        let exact = kkt_residuals(&p, &[1.0, 1.0], &[-2.0], &[]);
        assert!(exact.max() <= 1e-12);
        let perturbed = kkt_residuals(&p, &[1.001, 1.001], &[-2.0], &[]);
        assert!((perturbed.primal - 2e-3).abs() < 1e-12);
    }

    #[test]
    fn active_bound_multiplier() {
        // min (x - 2)^2 s.t. x <= 1: x = 1, multiplier 2
        let (e, eb) = empty(1);
        let p = QpStandardForm::dense(&dm(1, 1, &[2.0]), &dv(&[-4.0]), &e, &eb, &dm(1, 1, &[1.0]), &dv(&[1.0])).unwrap();
        let sol = solve_qp(&p, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
        assert!((sol.z_ineq[0] - 2.0).abs() < 1e-7);
        assert!(sol.residuals.max() <= 1e-8);
    }

    #[test]
    fn zero_problem_residuals() {
        let (e, eb) = empty(3);
        let p = QpStandardForm::dense(&DMatrix::zeros(3, 3), &DVector::zeros(3), &e, &eb, &e, &eb).unwrap();
        assert_eq!(kkt_residuals(&p, &[0.0; 3], &[], &[]), Residuals::default());
    }

    #[test]
    fn rejects_indefinite_p() {
        let (e, eb) = empty(2);
        let r = QpStandardForm::dense(&dm(2, 2, &[1.0, 0.0, 0.0, -1.0]), &DVector::zeros(2), &e, &eb, &e, &eb);
        assert!(matches!(r, Err(Error::InvalidParams(_))));
    }

    #[test]
    fn feasibility_checks() {
        let (e, eb) = empty(1);
        let bad = QpStandardForm::dense(&dm(1, 1, &[0.0]), &dv(&[0.0]), &e, &eb, &dm(2, 1, &[1.0, -1.0]), &dv(&[1.0, -2.0])).unwrap();
        assert_eq!(check_feasibility(&bad, &QpSettings::default()).unwrap(), Feasibility::Infeasible);
        let (e3, eb3) = empty(3);
        let free = QpStandardForm::dense(&DMatrix::zeros(3, 3), &DVector::zeros(3), &e3, &eb3, &e3, &eb3).unwrap();
        match check_feasibility(&free, &QpSettings::default()).unwrap() {
            Feasibility::Feasible(x) => assert!(x.iter().all(|v| v.abs() < 1e-8)),
            Feasibility::Infeasible => panic!("empty constraint set is feasible"),
        }
        let sol = solve_qp(&bad, &QpSettings::default());
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    /// Brute force over active sets for strictly convex problems.
    fn active_set_oracle(p: &DMatrix<f64>, q: &DVector<f64>, ae: &DMatrix<f64>, be: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
        let d = q.len();
        let m = g.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << m) {
            let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let k = ae.nrows() + act.len();
            let mut kkt = DMatrix::zeros(d + k, d + k);
            let mut rhs = DVector::zeros(d + k);
            kkt.view_mut((0, 0), (d, d)).copy_from(p);
            rhs.rows_mut(0, d).copy_from(&(-q));
            for r in 0..ae.nrows() {
                for c in 0..d {
                    kkt[(d + r, c)] = ae[(r, c)];
                    kkt[(c, d + r)] = ae[(r, c)];
                }
                rhs[d + r] = be[r];
            }
            for (j, &i) in act.iter().enumerate() {
                let r = ae.nrows() + j;
                for c in 0..d {
                    kkt[(d + r, c)] = g[(i, c)];
                    kkt[(c, d + r)] = g[(i, c)];
                }
                rhs[d + r] = h[i];
            }
            if act.len() + ae.nrows() > d {
                continue;
            }
            let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
            if (&kkt * &sol - &rhs).amax() > 1e-9 {
                continue;
            }
            let x = sol.rows(0, d).into_owned();
            let mult_ok = act.iter().enumerate().all(|(j, _)| sol[d + ae.nrows() + j] >= -1e-9);
            let feas = (g * &x - h).iter().all(|v| *v <= 1e-9);
            if mult_ok && feas {
                let f = 0.5 * x.dot(&(p * &x)) + q.dot(&x);
                if best.as_ref().is_none_or(|b| f < b.0) {
                    best = Some((f, x));
                }
            }
        }
        best.expect("feasible by construction").1
    }

    type Instance = (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>);

    /// Strictly convex instance whose constraint set contains a known point.
    fn random_instance(seed: u64, d: usize, n_eq: usize, n_ineq: usize) -> Instance {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut u = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0));
        let m = u(d, d);
        let p = m.transpose() * &m + DMatrix::identity(d, d) * 0.1;
        let q = u(d, 1).column(0).into_owned();
        let x0 = u(d, 1).column(0).into_owned();
        let g = u(n_ineq, d);
        let slack = u(n_ineq, 1).column(0).map(|v: f64| 0.05 + v.abs() * 0.5);
        let h = &g * &x0 + slack;
        let ae = u(n_eq, d);
        let be = &ae * &x0;
        (p, q, ae, be, g, h)
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(200))]
        #[test]
        fn matches_active_set_enumeration(seed in 0u64..1_000_000, d in 1usize..=6, n_eq in 0usize..=3, n_ineq in 0usize..=8) {
            let n_eq = n_eq.min(d - 1);
            let (p, q, ae, be, g, h) = random_instance(seed, d, n_eq, n_ineq);
            let want = active_set_oracle(&p, &q, &ae, &be, &g, &h);
            let prob = QpStandardForm::dense(&p, &q, &ae, &be, &g, &h).unwrap();
            let sol = solve_qp(&prob, &QpSettings::default());
            proptest::prop_assert_eq!(sol.status, QpStatus::Optimal);
            let f_want = 0.5 * want.dot(&(&p * &want)) + q.dot(&want);
            proptest::prop_assert!((sol.objective - f_want).abs() < 1e-6);
            for i in 0..d {
                proptest::prop_assert!((sol.x[i] - want[i]).abs() < 1e-6, "x = {:?}, oracle = {:?}", sol.x, want.as_slice());
            }
            let r = kkt_residuals(&prob, &sol.x, &sol.y_eq, &sol.z_ineq);
            proptest::prop_assert!(r.max() <= 1e-8);
            proptest::prop_assert!(sol.z_ineq.iter().all(|z| *z >= 0.0));
            proptest::prop_assert!(sol.gap_history.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn cost_scaling_keeps_minimizer(seed in 0u64..1_000_000, d in 1usize..=6, n_ineq in 0usize..=8) {
            let (p, q, ae, be, g, h) = random_instance(seed, d, 0, n_ineq);
            let a = solve_qp(&QpStandardForm::dense(&p, &q, &ae, &be, &g, &h).unwrap(), &QpSettings::default());
            let b = solve_qp(&QpStandardForm::dense(&(&p * 1e3), &(&q * 1e3), &ae, &be, &g, &h).unwrap(), &QpSettings::default());
            proptest::prop_assert_eq!(b.status, QpStatus::Optimal);
            for i in 0..d {
                proptest::prop_assert!((a.x[i] - b.x[i]).abs() < 1e-6, "{:?} vs {:?}", a.x, b.x);
            }
        }

        #[test]
        fn feasible_polytope_is_detected(seed in 0u64..1_000_000, d in 1usize..=6, n_eq in 0usize..=3, n_ineq in 1usize..=8) {
            let n_eq = n_eq.min(d - 1);
            let (_, _, ae, be, g, h) = random_instance(seed, d, n_eq, n_ineq);
            let prob = QpStandardForm::dense(&DMatrix::zeros(d, d), &DVector::zeros(d), &ae, &be, &g, &h).unwrap();
            match check_feasibility(&prob, &QpSettings::default()).unwrap() {
                Feasibility::Feasible(x) => proptest::prop_assert!(prob.max_violation(&x) <= 1e-8),
                Feasibility::Infeasible => proptest::prop_assert!(false, "polytope contains a known point"),
            }
        }
    }

    #[test]
    fn repeated_solves_are_bit_identical() {
        let (p, q, ae, be, g, h) = random_instance(7, 4, 1, 6);
        let prob = QpStandardForm::dense(&p, &q, &ae, &be, &g, &h).unwrap();
        let mut cache = KktCache::default();
        let a = solve_qp_with(&prob, &QpSettings::default(), &mut cache);
        let b = solve_qp_with(&prob, &QpSettings::default(), &mut cache);
        let c = solve_qp(&prob, &QpSettings::default());
        assert_eq!(cache.hits, 1);
        for s in [&b, &c] {
            assert_eq!(a.x, s.x);
            assert_eq!(a.z_ineq, s.z_ineq);
            assert_eq!(a.iterations, s.iterations);
        }
    }

    #[test]
    fn dump_round_trips_dimensions() {
        let (p, q, ae, be, g, h) = random_instance(3, 3, 1, 5);
        let prob = QpStandardForm::dense(&p, &q, &ae, &be, &g, &h).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qp.json");
        prob.dump_json(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["n_vars"], 3);
        assert_eq!(v["g"]["rows"], 5);
        assert_eq!(v["g"]["data"].as_array().unwrap().len(), 15);
        assert_eq!(v["g"]["data"][1].as_f64().unwrap(), g[(0, 1)]);
    }
}
