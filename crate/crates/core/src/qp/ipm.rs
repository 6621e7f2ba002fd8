//! Mehrotra predictor-corrector interior-point method.
//!
//! Each iteration factors the quasi-definite matrix
//!
//! ```text
//! [ P + rho I    Aeq'     G'  ]
//! [ Aeq        -delta I   0   ]
//! [ G             0      -W   ]     W = diag(s ./ z)
//! ```
//!
//! with a sparse LDL' under a minimum-degree ordering and cleans up the
//! regularization by iterative refinement against the unregularized matrix.

use std::time::Instant;

use super::sparse::{minimum_degree, CscMatrix, LdlFactor, LdlSymbolic};
use super::{dot, inf_norm, kkt_residuals, QpSettings, QpSolution, QpStandardForm, QpStatus, Residuals};

const PIVOT_EPS: f64 = 1e-13;
const PIVOT_DELTA: f64 = 1e-7;
const REFINE_STEPS: usize = 6;
const FARKAS_TOL: f64 = 1e-9;
const POLISH_GAP: f64 = 1e-3;
const POLISH_STEPS: usize = 3;
const STALL_ITER: usize = 20;
const STALL_PRIMAL: f64 = 1e-6;

/// Reuses the fill-reducing ordering and symbolic factorization between
/// problems that share a KKT sparsity pattern.
#[derive(Debug, Default, Clone)]
pub struct KktCache {
    entry: Option<Ordering>,
    pub hits: usize,
    pub misses: usize,
}

#[derive(Debug, Clone)]
struct Ordering {
    dims: (usize, usize, usize),
    colptr: Vec<usize>,
    rowval: Vec<usize>,
    /// Position in the permuted upper triangle of each original entry.
    map: Vec<usize>,
    upper: CscMatrix,
    iperm: Vec<usize>,
    signs: Vec<i8>,
    z_diag: Vec<usize>,
    sym: LdlSymbolic,
    factor: LdlFactor,
}

fn kkt_upper(prob: &QpStandardForm, rho: f64, delta: f64) -> CscMatrix {
    let (d, ne, ni) = (prob.n_vars(), prob.n_eq(), prob.n_ineq());
    let mut t = Vec::with_capacity(prob.p.nnz() + prob.a_eq.nnz() + prob.g.nnz() + d + ne + ni);
    t.extend(prob.p.triplets().filter(|&(r, c, _)| r <= c));
    t.extend((0..d).map(|i| (i, i, rho)));
    t.extend(prob.a_eq.triplets().map(|(r, c, v)| (c, d + r, v)));
    t.extend(prob.g.triplets().map(|(r, c, v)| (c, d + ne + r, v)));
    t.extend((0..ne).map(|i| (d + i, d + i, -delta)));
    t.extend((0..ni).map(|i| (d + ne + i, d + ne + i, -1.0)));
    let n = d + ne + ni;
    CscMatrix::from_triplets(n, n, &t)
}

impl Ordering {
    fn build(orig: &CscMatrix, dims: (usize, usize, usize)) -> Self {
        let n = orig.ncols;
        let perm = minimum_degree(n, orig.triplets().map(|(r, c, _)| (r, c)));
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        // tag each entry with its index to recover where it lands
        let tagged: Vec<_> = orig
            .triplets()
            .enumerate()
            .map(|(k, (r, c, _))| {
                let (a, b) = (iperm[r], iperm[c]);
                (a.min(b), a.max(b), k as f64)
            })
            .collect();
        let mut upper = CscMatrix::from_triplets(n, n, &tagged);
        let mut map = vec![0; orig.nnz()];
        for (pos, &k) in upper.nzval.iter().enumerate() {
            map[k as usize] = pos;
        }
        upper.nzval.iter_mut().for_each(|v| *v = 0.0);
        let (d, ne, _) = dims;
        let signs = perm.iter().map(|&old| if old < d { 1 } else { -1 }).collect();
        let z_diag = (d + ne..n)
            .map(|old| {
                let c = iperm[old];
                let pos = upper.colptr[c + 1] - 1;
                debug_assert_eq!(upper.rowval[pos], c);
                pos
            })
            .collect();
        let sym = LdlSymbolic::analyse(&upper);
        let factor = LdlFactor::new(&sym);
        Self { dims, colptr: orig.colptr.clone(), rowval: orig.rowval.clone(), map, upper, iperm, signs, z_diag, sym, factor }
    }

    fn matches(&self, orig: &CscMatrix, dims: (usize, usize, usize)) -> bool {
        self.dims == dims && self.colptr == orig.colptr && self.rowval == orig.rowval
    }
}

impl KktCache {
    fn prepare(&mut self, prob: &QpStandardForm, reg: f64) -> &mut Ordering {
        let orig = kkt_upper(prob, reg, reg);
        let dims = (prob.n_vars(), prob.n_eq(), prob.n_ineq());
        let reuse = self.entry.as_ref().is_some_and(|o| o.matches(&orig, dims));
        if reuse {
            self.hits += 1;
        } else {
            self.misses += 1;
            self.entry = Some(Ordering::build(&orig, dims));
        }
        let ord = self.entry.as_mut().unwrap();
        for (k, &v) in orig.nzval.iter().enumerate() {
            ord.upper.nzval[ord.map[k]] = v;
        }
        ord
    }
}

struct Kkt<'a> {
    prob: &'a QpStandardForm,
    ord: &'a mut Ordering,
    w: Vec<f64>,
    reg: f64,
    perm_buf: Vec<f64>,
}

impl Kkt<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        self.ord.dims
    }

    fn factor(&mut self, w: &[f64]) -> bool {
        self.w.copy_from_slice(w);
        for (r, &pos) in self.ord.z_diag.iter().enumerate() {
            self.ord.upper.nzval[pos] = -(w[r] + self.reg);
        }
        let o = &mut *self.ord;
        o.factor.factor(&o.sym, &o.upper, &o.signs, PIVOT_EPS, PIVOT_DELTA);
        o.factor.diagonal().iter().all(|v| v.is_finite())
    }

    fn solve_reg(&mut self, rhs: &[f64], out: &mut [f64]) {
        for (i, &v) in rhs.iter().enumerate() {
            self.perm_buf[self.ord.iperm[i]] = v;
        }
        self.ord.factor.solve(&mut self.perm_buf);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.perm_buf[self.ord.iperm[i]];
        }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let (d, ne, _) = self.dims();
        let (vx, rest) = v.split_at(d);
        let (vy, vz) = rest.split_at(ne);
        out.iter_mut().for_each(|o| *o = 0.0);
        let (ox, rest) = out.split_at_mut(d);
        let (oy, oz) = rest.split_at_mut(ne);
        self.prob.p.gemv(1.0, vx, ox);
        self.prob.a_eq.gemv_t(1.0, vy, ox);
        self.prob.g.gemv_t(1.0, vz, ox);
        self.prob.a_eq.gemv(1.0, vx, oy);
        self.prob.g.gemv(1.0, vx, oz);
        for ((o, w), z) in oz.iter_mut().zip(&self.w).zip(vz) {
            *o -= w * z;
        }
    }

    fn solve(&mut self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut sol = vec![0.0; n];
        self.solve_reg(rhs, &mut sol);
        let mut kx = vec![0.0; n];
        let mut corr = vec![0.0; n];
        let target = 1e-15 * (1.0 + inf_norm(rhs));
        let mut last = f64::INFINITY;
        for _ in 0..REFINE_STEPS {
            self.apply(&sol, &mut kx);
            for (k, r) in kx.iter_mut().zip(rhs) {
                *k = r - *k;
            }
            let res = inf_norm(&kx);
            if res <= target || res >= 0.5 * last {
                break;
            }
            last = res;
            self.solve_reg(&kx, &mut corr);
            for (s, c) in sol.iter_mut().zip(&corr) {
                *s += c;
            }
        }
        sol
    }
}

/// Largest step in `(0, 1]` keeping `v + a dv >= 0` for both pairs.
fn max_step(s: &[f64], ds: &[f64], z: &[f64], dz: &[f64]) -> f64 {
    let mut a = 1.0f64;
    for (v, dv) in s.iter().zip(ds).chain(z.iter().zip(dz)) {
        if *dv < 0.0 {
            a = a.min(-v / dv);
        }
    }
    a
}

fn mean_comp(s: &[f64], ds: &[f64], z: &[f64], dz: &[f64], a: f64) -> f64 {
    s.iter().zip(ds).zip(z.iter().zip(dz)).map(|((s, ds), (z, dz))| (s + a * ds) * (z + a * dz)).sum::<f64>() / s.len() as f64
}

/// Derivative of the mean complementarity along the step at `a = 0`.
fn gap_slope(s: &[f64], z: &[f64], w: &[f64], r_c: &[f64], dz: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..s.len() {
        let ds = -r_c[i] / z[i] - w[i] * dz[i];
        acc += s[i] * dz[i] + z[i] * ds;
    }
    acc / s.len() as f64
}

fn farkas(prob: &QpStandardForm, y: &[f64], z: &[f64], tol: f64) -> bool {
    if y.is_empty() && z.is_empty() {
        return false;
    }
    let tau = -(dot(&prob.b_eq, y) + dot(&prob.h, z));
    let scale = inf_norm(y).max(inf_norm(z));
    if !(tau > 1e-12 * scale.max(1.0)) {
        return false;
    }
    let mut v = vec![0.0; prob.n_vars()];
    prob.a_eq.gemv_t(1.0, y, &mut v);
    prob.g.gemv_t(1.0, z, &mut v);
    inf_norm(&v) <= tol * tau
}

/// Checks `P + reg * max(1, |P|) I` admits an LDL' with positive pivots.
pub(crate) fn is_psd(p: &CscMatrix, reg: f64) -> bool {
    let n = p.ncols;
    let shift = reg * p.max_abs().max(1.0);
    let mut t: Vec<_> = p.triplets().collect();
    t.extend((0..n).map(|i| (i, i, shift)));
    let full = CscMatrix::from_triplets(n, n, &t);
    let perm = minimum_degree(n, full.triplets().map(|(r, c, _)| (r, c)));
    let mut iperm = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        iperm[old] = new;
    }
    let upper: Vec<_> = full
        .triplets()
        .filter_map(|(r, c, v)| {
            let (a, b) = (iperm[r], iperm[c]);
            (a <= b).then_some((a, b, v))
        })
        .collect();
    let upper = CscMatrix::from_triplets(n, n, &upper);
    let sym = LdlSymbolic::analyse(&upper);
    let mut f = LdlFactor::new(&sym);
    f.factor(&sym, &upper, &vec![1; n], 0.0, 1.0);
    f.regularized == 0
}

pub fn solve_qp(prob: &QpStandardForm, settings: &QpSettings) -> QpSolution {
    solve_qp_with(prob, settings, &mut KktCache::default())
}

pub fn solve_qp_with(prob: &QpStandardForm, settings: &QpSettings, cache: &mut KktCache) -> QpSolution {
    let start = Instant::now();
    let mut sol = run(prob, settings, cache);
    sol.solve_time = start.elapsed();
    sol
}

fn finish(prob: &QpStandardForm, x: Vec<f64>, y: Vec<f64>, z: Vec<f64>, status: QpStatus, iterations: usize, gap_history: Vec<f64>) -> QpSolution {
    let residuals = if x.iter().chain(&y).chain(&z).all(|v| v.is_finite()) {
        kkt_residuals(prob, &x, &y, &z)
    } else {
        Residuals { primal: f64::NAN, dual: f64::NAN, gap: f64::NAN }
    };
    let objective = prob.objective(&x);
    QpSolution {
        x,
        y_eq: y,
        z_ineq: z,
        status,
        residuals,
        objective,
        iterations,
        solve_time: Default::default(),
        gap_history,
    }
}

fn run(prob: &QpStandardForm, st: &QpSettings, cache: &mut KktCache) -> QpSolution {
    let (d, ne, ni) = (prob.n_vars(), prob.n_eq(), prob.n_ineq());
    let n = d + ne + ni;
    let reg = st.static_reg;
    let ord = cache.prepare(prob, reg);
    let mut kkt = Kkt { prob, ord, w: vec![0.0; ni], reg, perm_buf: vec![0.0; n] };
    let mut history = Vec::new();

    // initial point from the W = I system
    if !kkt.factor(&vec![1.0; ni]) {
        return finish(prob, vec![0.0; d], vec![0.0; ne], vec![0.0; ni], QpStatus::NumericalFailure, 0, history);
    }
    let mut rhs: Vec<f64> = prob.q.iter().map(|v| -v).chain(prob.b_eq.iter().copied()).chain(prob.h.iter().copied()).collect();
    let init = kkt.solve(&rhs);
    let mut x = init[..d].to_vec();
    let mut y = init[d..d + ne].to_vec();
    let mut s: Vec<f64> = init[d + ne..].iter().map(|v| -v).collect();
    let mut z: Vec<f64> = init[d + ne..].to_vec();
    for v in [&mut s, &mut z] {
        let worst = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(-x));
        if ni > 0 && worst >= -1e-8 * inf_norm(v).max(1.0) {
            v.iter_mut().for_each(|x| *x += 1.0 + worst);
        }
    }

    let mut r_d = vec![0.0; d];
    let mut r_p = vec![0.0; ne];
    let mut r_g = vec![0.0; ni];
    let mut r_c = vec![0.0; ni];
    let mut ds = vec![0.0; ni];
    let mut w = vec![0.0; ni];

    // once within tolerance, a few extra iterations tighten weakly active
    // rows; the last iterate that met the tolerance is kept
    let mut accepted: Option<(Vec<f64>, Vec<f64>, Vec<f64>, usize, usize)> = None;
    for iter in 0..=st.max_iter {
        let res = kkt_residuals(prob, &x, &y, &z);
        if !res.max().is_finite() {
            if let Some((x, y, z, it, len)) = accepted {
                history.truncate(len);
                return finish(prob, x, y, z, QpStatus::Optimal, it, history);
            }
            return finish(prob, x, y, z, QpStatus::NumericalFailure, iter, history);
        }
        if res.max() <= st.tol {
            let extra = accepted.as_ref().map_or(0, |a| iter - a.3);
            if ni == 0 || res.gap <= POLISH_GAP * st.tol || extra >= POLISH_STEPS {
                return finish(prob, x, y, z, QpStatus::Optimal, iter, history);
            }
            accepted = Some((x.clone(), y.clone(), z.clone(), iter, history.len()));
        } else if let Some((x, y, z, it, len)) = accepted {
            history.truncate(len);
            return finish(prob, x, y, z, QpStatus::Optimal, it, history);
        }
        if res.primal > st.tol && farkas(prob, &y, &z, FARKAS_TOL) {
            return finish(prob, x, y, z, QpStatus::PrimalInfeasible, iter, history);
        }
        if ni > 0 && iter >= STALL_ITER && res.primal > STALL_PRIMAL && dot(&s, &z) / (ni as f64) <= st.tol {
            return finish(prob, x, y, z, QpStatus::PrimalInfeasible, iter, history);
        }
        if iter == st.max_iter {
            break;
        }

        r_d.copy_from_slice(&prob.q);
        prob.p.gemv(1.0, &x, &mut r_d);
        prob.a_eq.gemv_t(1.0, &y, &mut r_d);
        prob.g.gemv_t(1.0, &z, &mut r_d);
        for (r, b) in r_p.iter_mut().zip(&prob.b_eq) {
            *r = -b;
        }
        prob.a_eq.gemv(1.0, &x, &mut r_p);
        for i in 0..ni {
            r_g[i] = s[i] - prob.h[i];
        }
        prob.g.gemv(1.0, &x, &mut r_g);
        let mu = if ni > 0 { dot(&s, &z) / ni as f64 } else { 0.0 };

        for i in 0..ni {
            w[i] = s[i] / z[i];
        }
        if !kkt.factor(&w) {
            return finish(prob, x, y, z, QpStatus::NumericalFailure, iter, history);
        }

        // predictor
        for i in 0..d {
            rhs[i] = -r_d[i];
        }
        for i in 0..ne {
            rhs[d + i] = -r_p[i];
        }
        for i in 0..ni {
            rhs[d + ne + i] = -r_g[i] + s[i];
        }
        let aff = kkt.solve(&rhs);
        let dz_aff = &aff[d + ne..];
        for i in 0..ni {
            ds[i] = -s[i] - w[i] * dz_aff[i];
        }
        let sigma = if ni > 0 {
            let a = max_step(&s, &ds, &z, dz_aff);
            let mu_aff = mean_comp(&s, &ds, &z, dz_aff, a);
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };

        // corrector
        for i in 0..ni {
            r_c[i] = s[i] * z[i] + ds[i] * dz_aff[i] - sigma * mu;
            rhs[d + ne + i] = -r_g[i] + r_c[i] / z[i];
        }
        let mut dir = if ni > 0 { kkt.solve(&rhs) } else { aff };
        if ni > 0 && gap_slope(&s, &z, &w, &r_c, &dir[d + ne..]) > -0.05 * mu {
            // the second-order term would raise the gap; fall back to a
            // damped centering direction, along which the gap strictly drops
            let sigma = sigma.clamp(0.1, 0.5);
            for i in 0..ni {
                r_c[i] = s[i] * z[i] - sigma * mu;
                rhs[d + ne + i] = -r_g[i] + r_c[i] / z[i];
            }
            dir = kkt.solve(&rhs);
        }
        if dir.iter().any(|v| !v.is_finite()) {
            return finish(prob, x, y, z, QpStatus::NumericalFailure, iter, history);
        }
        let (dx, rest) = dir.split_at(d);
        let (dy, dz) = rest.split_at(ne);
        for i in 0..ni {
            ds[i] = -r_c[i] / z[i] - w[i] * dz[i];
        }
        let mut a = if ni > 0 { (st.fraction_to_boundary * max_step(&s, &ds, &z, dz)).min(1.0) } else { 1.0 };
        if ni > 0 {
            while a > 1e-12 && mean_comp(&s, &ds, &z, dz, a) > mu {
                a *= 0.5;
            }
        }

        for (v, dv) in x.iter_mut().zip(dx) {
            *v += a * dv;
        }
        for (v, dv) in y.iter_mut().zip(dy) {
            *v += a * dv;
        }
        for i in 0..ni {
            s[i] += a * ds[i];
            z[i] += a * dz[i];
        }
        if ni > 0 {
            history.push(dot(&s, &z) / ni as f64);
        }
    }
    if let Some((x, y, z, it, len)) = accepted {
        history.truncate(len);
        return finish(prob, x, y, z, QpStatus::Optimal, it, history);
    }
    let res = kkt_residuals(prob, &x, &y, &z);
    let status = if res.primal > st.tol && farkas(prob, &y, &z, 1e3 * FARKAS_TOL) { QpStatus::PrimalInfeasible } else { QpStatus::MaxIter };
    finish(prob, x, y, z, status, st.max_iter, history)
}
