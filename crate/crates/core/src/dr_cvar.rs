//! Wasserstein distributionally robust CVaR constraints.
//!
//! A constraint `h'x <= b` required to hold with CVaR level `alpha` against
//! every distribution within Wasserstein distance `epsilon` of the empirical
//! error distribution is equivalent to the existence of `tau` and `s >= 0`
//! with
//!
//! ```text
//! -alpha tau + epsilon |h|_p + mean(s) <= theta   (theta = 0 when hard)
//! h'(z + e_j) - b + tau <= s_j                    for every sample j
//! ```
//!
//! The dual multiplier of the transport budget is fixed at its optimal
//! value `|h|_p` instead of being carried as a variable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{CscMatrix, QpStandardForm};

#[derive(Debug, Clone, PartialEq)]
pub struct HalfspaceChanceConstraint {
    pub h: DVector<f64>,
    pub b: f64,
    /// Nominal satisfaction probability. Kept for reporting; the constraint
    /// itself uses `alpha`.
    pub p_level: f64,
    pub alpha: f64,
}

impl HalfspaceChanceConstraint {
    /// `alpha = 1 - p_level`.
    pub fn new(h: DVector<f64>, b: f64, p_level: f64) -> Result<Self> {
        Self::with_alpha(h, b, p_level, 1.0 - p_level)
    }

    /// Level and CVaR tail mass set independently.
    pub fn with_alpha(h: DVector<f64>, b: f64, p_level: f64, alpha: f64) -> Result<Self> {
        if h.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidParams("constraint normal h must be nonzero".into()));
        }
        if !(h.iter().all(|v| v.is_finite()) && b.is_finite()) {
            return Err(Error::InvalidParams("constraint data must be finite".into()));
        }
        if !(p_level > 0.0 && p_level < 1.0) {
            return Err(Error::InvalidParams(format!("p_level = {p_level} must lie in (0, 1)")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParams(format!("alpha = {alpha} must lie in (0, 1)")));
        }
        Ok(Self { h, b, p_level, alpha })
    }

    pub fn loss(&self, x: &DVector<f64>) -> f64 {
        self.h.dot(x) - self.b
    }
}

/// Transport cost norm, paired with its dual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QNorm {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl QNorm {
    pub fn dual(self) -> QNorm {
        match self {
            QNorm::One => QNorm::Inf,
            QNorm::Two => QNorm::Two,
            QNorm::Inf => QNorm::One,
        }
    }

    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            QNorm::One => v.iter().map(|x| x.abs()).sum(),
            QNorm::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            QNorm::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmbiguityConfig {
    pub epsilon: f64,
    pub q_norm: QNorm,
    /// Confidence attached to `epsilon`; reported, never used.
    pub beta: f64,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4, q_norm: QNorm::One, beta: 0.9 }
    }
}

impl AmbiguityConfig {
    pub fn new(epsilon: f64, q_norm: QNorm) -> Result<Self> {
        let c = Self { epsilon, q_norm, ..Self::default() };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParams(format!("epsilon = {} must be finite and >= 0", self.epsilon)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidParams(format!("beta = {} must lie in (0, 1)", self.beta)));
        }
        Ok(())
    }

    pub fn p_norm(&self) -> QNorm {
        self.q_norm.dual()
    }
}

/// Variables a block row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVar {
    /// Component of the nominal state `z(t)`.
    Z(usize),
    Tau,
    S(usize),
    Theta,
}

/// `sum(coef * var) <= rhs`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(BlockVar, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvarLpBlock {
    pub n: usize,
    pub n_samples: usize,
    pub soft: bool,
    pub alpha: f64,
    pub epsilon: f64,
    /// The eliminated multiplier, `|h|_p`.
    pub lambda_value: f64,
    pub h: DVector<f64>,
    pub b: f64,
    /// `h' e_j` per sample.
    pub offsets: Vec<f64>,
    /// Budget row first, then one hinge row per sample, then `-s_j <= 0`.
    pub rows: Vec<LinearRow>,
}

/// Builds the linear block for one constraint at one prediction step;
/// `errors_at_t` holds one error sample per row.
pub fn build_cvar_block(c: &HalfspaceChanceConstraint, amb: &AmbiguityConfig, errors_at_t: &DMatrix<f64>, soft: bool) -> Result<CvarLpBlock> {
    let n = c.h.len();
    let ns = errors_at_t.nrows();
    if ns == 0 {
        return Err(Error::InvalidParams("at least one error sample is required".into()));
    }
    if errors_at_t.ncols() != n {
        return Err(Error::DimensionMismatch(format!("error samples have {} columns, h has {n}", errors_at_t.ncols())));
    }
    let lambda_value = amb.p_norm().norm(c.h.as_slice());
    let offsets: Vec<f64> = (0..ns).map(|j| errors_at_t.row(j).transpose().dot(&c.h)).collect();
    let mut rows = Vec::with_capacity(1 + 2 * ns);
    let mut budget = vec![(BlockVar::Tau, -c.alpha)];
    budget.extend((0..ns).map(|j| (BlockVar::S(j), 1.0 / ns as f64)));
    if soft {
        budget.push((BlockVar::Theta, -1.0));
    }
    rows.push(LinearRow { terms: budget, rhs: -amb.epsilon * lambda_value });
    let z_terms: Vec<_> = c.h.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (BlockVar::Z(i), *v)).collect();
    for (j, off) in offsets.iter().enumerate() {
        let mut terms = z_terms.clone();
        terms.push((BlockVar::Tau, 1.0));
        terms.push((BlockVar::S(j), -1.0));
        rows.push(LinearRow { terms, rhs: c.b - off });
    }
    for j in 0..ns {
        rows.push(LinearRow { terms: vec![(BlockVar::S(j), -1.0)], rhs: 0.0 });
    }
    Ok(CvarLpBlock {
        n,
        n_samples: ns,
        soft,
        alpha: c.alpha,
        epsilon: amb.epsilon,
        lambda_value,
        h: c.h.clone(),
        b: c.b,
        offsets,
        rows,
    })
}

impl CvarLpBlock {
    fn losses(&self, z: &DVector<f64>) -> Vec<f64> {
        let hz = self.h.dot(z) - self.b;
        self.offsets.iter().map(|o| hz + o).collect()
    }

    /// Smallest left-hand side of the budget row over `tau` and `s` at fixed
    /// `z`, together with a minimizer.
    pub fn optimal_completion(&self, z: &DVector<f64>) -> (f64, f64, Vec<f64>) {
        let losses = self.losses(z);
        let (cvar, var) = cvar_and_var(&losses, self.alpha);
        let tau = -var;
        let s = losses.iter().map(|l| (l + tau).max(0.0)).collect();
        (self.alpha * cvar + self.epsilon * self.lambda_value, tau, s)
    }

    /// Largest row violation for the given values.
    pub fn max_violation(&self, z: &DVector<f64>, tau: f64, s: &[f64], theta: f64) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let lhs: f64 = r
                    .terms
                    .iter()
                    .map(|&(v, c)| {
                        c * match v {
                            BlockVar::Z(i) => z[i],
                            BlockVar::Tau => tau,
                            BlockVar::S(j) => s[j],
                            BlockVar::Theta => theta,
                        }
                    })
                    .sum();
                lhs - r.rhs
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The block with `z` fixed, as a constraint set over `(tau, s, theta)`.
    pub fn fixed_state_problem(&self, z: &DVector<f64>) -> QpStandardForm {
        let ns = self.n_samples;
        let d = 1 + ns + usize::from(self.soft);
        let col = |v: BlockVar| match v {
            BlockVar::Tau => Some(0),
            BlockVar::S(j) => Some(1 + j),
            BlockVar::Theta => Some(1 + ns),
            BlockVar::Z(_) => None,
        };
        let mut t = Vec::new();
        let mut h = Vec::with_capacity(self.rows.len());
        for (r, row) in self.rows.iter().enumerate() {
            let mut rhs = row.rhs;
            for &(v, c) in &row.terms {
                match (v, col(v)) {
                    (BlockVar::Z(i), _) => rhs -= c * z[i],
                    (_, Some(k)) => t.push((r, k, c)),
                    _ => unreachable!(),
                }
            }
            h.push(rhs);
        }
        QpStandardForm::from_parts(
            CscMatrix::zeros(d, d),
            vec![0.0; d],
            CscMatrix::zeros(0, d),
            Vec::new(),
            CscMatrix::from_triplets(self.rows.len(), d, &t),
            h,
            0.0,
        )
    }
}

/// Empirical CVaR at tail mass `alpha` and the matching value-at-risk (a
/// minimizing `tau` of the Rockafellar-Uryasev form).
pub fn cvar_and_var(losses: &[f64], alpha: f64) -> (f64, f64) {
    assert!(!losses.is_empty(), "CVaR of an empty sample");
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let w = 1.0 / sorted.len() as f64;
    let mut remaining = alpha;
    let mut acc = 0.0;
    let mut var = sorted[sorted.len() - 1];
    for &l in &sorted {
        let take = w.min(remaining);
        acc += take * l;
        remaining -= take;
        if remaining <= 0.0 {
            var = l;
            break;
        }
    }
    (acc / alpha, var)
}

/// `inf_tau tau + mean((losses - tau)+) / alpha` for the empirical
/// distribution.
pub fn evaluate_empirical_cvar(losses: &[f64], alpha: f64) -> f64 {
    cvar_and_var(losses, alpha).0
}

/// Worst-case CVaR of the constraint loss at nominal state `z`, relative to
/// zero: the constraint holds in the distributionally robust sense iff the
/// margin is `<= 0`.
pub fn evaluate_dr_cvar_margin(c: &HalfspaceChanceConstraint, amb: &AmbiguityConfig, errors_at_t: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    let hz = c.h.dot(z) - c.b;
    let losses: Vec<f64> = (0..errors_at_t.nrows()).map(|j| hz + errors_at_t.row(j).transpose().dot(&c.h)).collect();
    evaluate_empirical_cvar(&losses, c.alpha) + amb.epsilon * amb.p_norm().norm(c.h.as_slice()) / c.alpha
}

/// Supremum of `E[a'xi + b0]` over the Wasserstein ball around the
/// samples (one per row).
pub fn worst_case_expectation_affine(a: &DVector<f64>, b0: f64, samples: &DMatrix<f64>, epsilon: f64, q_norm: QNorm) -> f64 {
    let ns = samples.nrows();
    let mean = if ns == 0 { 0.0 } else { (0..ns).map(|j| samples.row(j).transpose().dot(a)).sum::<f64>() / ns as f64 };
    mean + b0 + epsilon * q_norm.dual().norm(a.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{check_feasibility, Feasibility, QpSettings};
    use proptest::prelude::*;

    fn feasible(block: &CvarLpBlock, z: &DVector<f64>) -> bool {
        let tight = QpSettings::with_tol(1e-9, 200);
        matches!(check_feasibility(&block.fixed_state_problem(z), &tight).unwrap(), Feasibility::Feasible(_))
    }

    /// `inf_tau` over a dense grid plus every atom (the piecewise-linear
    /// objective attains its minimum at an atom).
    fn cvar_grid(losses: &[f64], alpha: f64) -> f64 {
        let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
        let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        let f = |tau: f64| tau + losses.iter().map(|l| (l - tau).max(0.0)).sum::<f64>() / (losses.len() as f64 * alpha);
        let grid = (0..=20_000).map(|k| lo + (hi - lo) * k as f64 / 20_000.0);
        grid.chain(losses.iter().copied()).map(f).fold(f64::INFINITY, f64::min)
    }

    fn scalar(h: f64, b: f64, alpha: f64) -> HalfspaceChanceConstraint {
        HalfspaceChanceConstraint::with_alpha(DVector::from_element(1, h), b, 1.0 - alpha, alpha).unwrap()
    }

    #[test]
    fn single_atom_collapses_to_the_constraint() {
        let c = HalfspaceChanceConstraint::with_alpha(DVector::from_column_slice(&[1.0, 0.0]), 1.0, 0.9, 0.3).unwrap();
        let amb = AmbiguityConfig::new(0.0, QNorm::One).unwrap();
        let block = build_cvar_block(&c, &amb, &DMatrix::zeros(1, 2), false).unwrap();
        assert!(feasible(&block, &DVector::from_column_slice(&[0.999, 5.0])));
        assert!(feasible(&block, &DVector::from_column_slice(&[1.0, -3.0])));
        assert!(!feasible(&block, &DVector::from_column_slice(&[1.001, 0.0])));
    }

    #[test]
    fn two_atom_boundary() {
        let c = scalar(1.0, 1.0, 0.3);
        let amb = AmbiguityConfig::new(0.03, QNorm::One).unwrap();
        let e = DMatrix::from_column_slice(2, 1, &[0.0, 0.2]);
        let block = build_cvar_block(&c, &amb, &e, false).unwrap();
        assert_eq!(block.lambda_value, 1.0);
        assert_eq!(block.rows.len(), 5);
        let at = |z: f64| evaluate_dr_cvar_margin(&c, &amb, &e, &DVector::from_element(1, z));
        // -0.1 + 0.03 / 0.3
        assert!(at(0.7).abs() < 1e-12);
        assert!(feasible(&block, &DVector::from_element(1, 0.699)));
        assert!(!feasible(&block, &DVector::from_element(1, 0.701)));
        let (lhs, tau, s) = block.optimal_completion(&DVector::from_element(1, 0.7));
        assert!(lhs.abs() < 1e-12);
        assert!(block.max_violation(&DVector::from_element(1, 0.7), tau, &s, 0.0) <= 1e-12);
    }

    #[test]
    fn soft_block_is_always_feasible() {
        let c = scalar(1.0, 1.0, 0.3);
        let amb = AmbiguityConfig::new(0.03, QNorm::One).unwrap();
        let e = DMatrix::from_column_slice(2, 1, &[0.0, 0.2]);
        let block = build_cvar_block(&c, &amb, &e, true).unwrap();
        for z in [0.0, 0.7, 5.0, 100.0] {
            assert!(feasible(&block, &DVector::from_element(1, z)));
        }
    }

    #[test]
    fn cvar_examples() {
        assert!((evaluate_empirical_cvar(&[2.5; 7], 0.3) - 2.5).abs() < 1e-12);
        assert!((evaluate_empirical_cvar(&[-1.0, 1.0], 0.5) - 1.0).abs() < 1e-12);
        assert!((cvar_grid(&[-1.0, 1.0], 0.5) - 1.0).abs() < 1e-9);
        let l = [0.7 - 1.0, 0.7 - 0.8];
        assert!((evaluate_empirical_cvar(&l, 0.3) + 0.1).abs() < 1e-12);
        assert!((cvar_grid(&l, 0.3) + 0.1).abs() < 1e-9);
    }

    #[test]
    fn zero_radius_margin_is_empirical_cvar() {
        let c = scalar(2.0, 1.0, 0.2);
        let amb = AmbiguityConfig::new(0.0, QNorm::Two).unwrap();
        let e = DMatrix::from_column_slice(3, 1, &[0.1, -0.4, 0.3]);
        let z = DVector::from_element(1, 0.2);
        let losses: Vec<f64> = [0.1, -0.4, 0.3].iter().map(|v| 2.0 * (0.2 + v) - 1.0).collect();
        assert!((evaluate_dr_cvar_margin(&c, &amb, &e, &z) - cvar_grid(&losses, 0.2)).abs() < 1e-9);
        let doubled = scalar(4.0, 2.0, 0.2);
        let m1 = evaluate_dr_cvar_margin(&c, &amb, &e, &z);
        let m2 = evaluate_dr_cvar_margin(&doubled, &amb, &e, &z);
        assert!((m2 - 2.0 * m1).abs() < 1e-12);
    }

    #[test]
    fn worst_case_affine_examples() {
        let s = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let a = DVector::from_element(1, 2.0);
        assert!((worst_case_expectation_affine(&a, 0.0, &s, 0.5, QNorm::One) - 1.0).abs() < 1e-12);
        assert_eq!(worst_case_expectation_affine(&a, 0.0, &s, 0.0, QNorm::One), 0.0);
        assert_eq!(worst_case_expectation_affine(&DVector::zeros(1), 3.0, &s, 7.0, QNorm::Inf), 3.0);

        // brute force: move sample j by d_j with mean |d_j| <= eps
        let eps = 0.5;
        let mut best = f64::NEG_INFINITY;
        let steps = 400;
        for i in 0..=steps {
            let d1 = -2.0 * eps + 4.0 * eps * i as f64 / steps as f64;
            let d2_max = 2.0 * eps - d1.abs();
            for d2 in [-d2_max, 0.0, d2_max] {
                if d2_max < 0.0 {
                    continue;
                }
                best = best.max(0.5 * (2.0 * (1.0 + d1) + 2.0 * (-1.0 + d2)));
            }
        }
        assert!((best - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(HalfspaceChanceConstraint::new(DVector::zeros(2), 1.0, 0.9).is_err());
        assert!(HalfspaceChanceConstraint::with_alpha(DVector::from_element(1, 1.0), 1.0, 0.9, 1.0).is_err());
        assert!(AmbiguityConfig::new(-1e-3, QNorm::One).is_err());
        assert!(build_cvar_block(&scalar(1.0, 1.0, 0.3), &AmbiguityConfig::default(), &DMatrix::zeros(0, 1), false).is_err());
    }

    fn instance() -> impl Strategy<Value = (usize, usize, f64, f64, QNorm, u64)> {
        (1usize..=3, 1usize..=20, 0.05f64..0.5, 0.0f64..0.1, prop_oneof![Just(QNorm::One), Just(QNorm::Two), Just(QNorm::Inf)], any::<u64>())
    }

    fn materialize(n: usize, ns: usize, alpha: f64, seed: u64) -> (HalfspaceChanceConstraint, DMatrix<f64>, DVector<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut h = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        h[0] += 1.5;
        let c = HalfspaceChanceConstraint::with_alpha(h, rng.random_range(-1.0..1.0), 1.0 - alpha, alpha).unwrap();
        let e = DMatrix::from_fn(ns, n, |_, _| rng.random_range(-0.5..0.5));
        let z = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        (c, e, z)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn block_feasibility_matches_margin((n, ns, alpha, eps, q, seed) in instance()) {
            let (c, e, z) = materialize(n, ns, alpha, seed);
            let amb = AmbiguityConfig::new(eps, q).unwrap();
            let margin = evaluate_dr_cvar_margin(&c, &amb, &e, &z);
            prop_assume!(margin.abs() > 1e-7);
            let block = build_cvar_block(&c, &amb, &e, false).unwrap();
            prop_assert_eq!(feasible(&block, &z), margin <= 0.0, "margin {}", margin);
        }

        #[test]
        fn margin_monotone_in_radius_and_level((n, ns, alpha, eps, q, seed) in instance(), d_eps in 0.0f64..0.1, d_alpha in 0.0f64..0.4) {
            let (c, e, z) = materialize(n, ns, alpha, seed);
            let base = evaluate_dr_cvar_margin(&c, &AmbiguityConfig::new(eps, q).unwrap(), &e, &z);
            let wider = evaluate_dr_cvar_margin(&c, &AmbiguityConfig::new(eps + d_eps, q).unwrap(), &e, &z);
            prop_assert!(wider >= base - 1e-12);
            let a2 = (alpha + d_alpha).min(0.95);
            let c2 = HalfspaceChanceConstraint::with_alpha(c.h.clone(), c.b, 1.0 - a2, a2).unwrap();
            let looser = evaluate_dr_cvar_margin(&c2, &AmbiguityConfig::new(eps, q).unwrap(), &e, &z);
            prop_assert!(looser <= base + 1e-12);
        }

        #[test]
        fn cvar_dominates_var((n, ns, alpha, _eps, q, seed) in instance()) {
            let (c, e, mut z) = materialize(n, ns, alpha, seed);
            let amb = AmbiguityConfig::new(0.0, q).unwrap();
            // slide z along h until the margin is nonpositive
            let m = evaluate_dr_cvar_margin(&c, &amb, &e, &z);
            if m > 0.0 {
                z -= &c.h * (m / c.h.norm_squared());
            }
            prop_assert!(evaluate_dr_cvar_margin(&c, &amb, &e, &z) <= 1e-12);
            let violations = (0..ns).filter(|&j| c.loss(&(&z + e.row(j).transpose())) > 1e-12).count();
            prop_assert!(violations as f64 / ns as f64 <= alpha + 1e-12);
        }

        #[test]
        fn sorted_cvar_matches_grid(losses in proptest::collection::vec(-5.0f64..5.0, 1..15), alpha in 0.05f64..0.95) {
            prop_assert!((evaluate_empirical_cvar(&losses, alpha) - cvar_grid(&losses, alpha)).abs() < 1e-6);
        }

        #[test]
        fn radius_adds_a_constant((n, ns, _alpha, eps, q, seed) in instance(), b0 in -3.0f64..3.0) {
            let (c, e, _) = materialize(n, ns, 0.3, seed);
            let with = worst_case_expectation_affine(&c.h, b0, &e, eps, q);
            let without = worst_case_expectation_affine(&c.h, b0, &e, 0.0, q);
            prop_assert!((with - without - eps * q.dual().norm(c.h.as_slice())).abs() < 1e-10);
        }
    }
}
