//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! line per criterion and exits nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use drmpc::config::RunConfig;
use drmpc::dr_cvar::{
    build_cvar_block, cvar_and_var, evaluate_dr_cvar_margin, evaluate_empirical_cvar, worst_case_expectation_affine, AmbiguityConfig,
    HalfspaceChanceConstraint, QNorm,
};
use drmpc::disturbance::ScenarioDisturbances;
use drmpc::harness::{four_room_model, FourRoomParams, McSummary, SweepTable};
use drmpc::mpc::{assemble_mpc_qp, solve_mpc, CostConfig, InputCost, MpcConfig, StateCost, TerminalCost, TerminalSet};
use drmpc::qp::{check_feasibility, kkt_residuals, solve_qp, Feasibility, KktCache, QpSettings, QpStandardForm, QpStatus};
use drmpc::tube::{dare_residual, explicit_error_affine, propagate_error_scenarios, solve_dare, spectral_radius, BoxSet, ErrorScenarios, LtiSystem, TubeController};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-s..s))
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.random_range(-s..s))
}

fn rand_norm(r: &mut ChaCha8Rng) -> QNorm {
    [QNorm::One, QNorm::Two, QNorm::Inf][r.random_range(0..3)]
}

fn block_feasibility() -> Outcome {
    let mut r = rng(1);
    let tight = QpSettings::with_tol(1e-9, 200);
    let (mut agree, mut skipped) = (0, 0);
    for i in 0..500 {
        let n = r.random_range(1..=3);
        let ns = r.random_range(1..=20);
        let alpha = r.random_range(0.05..0.95);
        let amb = AmbiguityConfig::new(r.random_range(0.0..0.2), rand_norm(&mut r)).unwrap();
        let h = rand_vec(&mut r, n, 1.0);
        let e = rand_mat(&mut r, ns, n, 0.5);
        let z = rand_vec(&mut r, n, 1.0);
        let probe = HalfspaceChanceConstraint::with_alpha(h.clone(), 0.0, 1.0 - alpha, alpha).unwrap();
        // place b around the boundary so both signs occur
        let b = evaluate_dr_cvar_margin(&probe, &amb, &e, &z) + r.random_range(-0.5..0.5);
        let c = HalfspaceChanceConstraint::with_alpha(h, b, 1.0 - alpha, alpha).unwrap();
        let margin = evaluate_dr_cvar_margin(&c, &amb, &e, &z);
        let block = build_cvar_block(&c, &amb, &e, false).map_err(|e| e.to_string())?;
        let feasible = matches!(check_feasibility(&block.fixed_state_problem(&z), &tight).map_err(|e| e.to_string())?, Feasibility::Feasible(_));
        if feasible == (margin <= 0.0) {
            agree += 1;
        } else if margin.abs() < 1e-7 {
            skipped += 1;
        } else {
            return Err(format!("instance {i}: solver says feasible={feasible}, margin {margin:e}"));
        }
    }
    Ok(format!("{agree}/500 agree, {skipped} within 1e-7 of the boundary"))
}

fn grid_cvar(losses: &[f64], alpha: f64) -> f64 {
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let f = |tau: f64| tau + losses.iter().map(|l| (l - tau).max(0.0)).sum::<f64>() / (losses.len() as f64 * alpha);
    (0..=20_000).map(|k| lo + (hi - lo) * k as f64 / 20_000.0).chain(losses.iter().copied()).map(f).fold(f64::INFINITY, f64::min)
}

fn cvar_oracle() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let len = r.random_range(1..=40);
        let losses: Vec<f64> = (0..len).map(|_| r.random_range(-3.0..3.0)).collect();
        let alpha = r.random_range(0.01..1.0);
        let (cvar, var) = cvar_and_var(&losses, alpha);
        let want = grid_cvar(&losses, alpha);
        let err = (cvar - want).abs().max((evaluate_empirical_cvar(&losses, alpha) - want).abs());
        let ru = var + losses.iter().map(|l| (l - var).max(0.0)).sum::<f64>() / (len as f64 * alpha);
        worst = worst.max(err).max((ru - cvar).abs());
        if worst > 1e-8 {
            return Err(format!("vector {i}: sorted-atoms {cvar}, grid {want}, RU at VaR {ru}"));
        }
    }
    Ok(format!("1000 vectors, max deviation {worst:.1e}"))
}

/// Brute force over active sets for strictly convex problems.
fn active_set_oracle(p: &DMatrix<f64>, q: &DVector<f64>, ae: &DMatrix<f64>, be: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
    let d = q.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << g.nrows()) {
        let act: Vec<usize> = (0..g.nrows()).filter(|i| mask & (1 << i) != 0).collect();
        let k = ae.nrows() + act.len();
        if k > d {
            continue;
        }
        let mut kkt = DMatrix::zeros(d + k, d + k);
        let mut rhs = DVector::zeros(d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(p);
        rhs.rows_mut(0, d).copy_from(&(-q));
        let rows = (0..ae.nrows()).map(|i| (ae.row(i), be[i])).chain(act.iter().map(|&i| (g.row(i), h[i])));
        for (j, (row, rh)) in rows.enumerate() {
            for c in 0..d {
                kkt[(d + j, c)] = row[c];
                kkt[(c, d + j)] = row[c];
            }
            rhs[d + j] = rh;
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-9 {
            continue;
        }
        let x = sol.rows(0, d).into_owned();
        let mult_ok = (0..act.len()).all(|j| sol[d + ae.nrows() + j] >= -1e-9);
        let feas = (g * &x - h).iter().all(|v| *v <= 1e-9);
        if mult_ok && feas {
            let f = 0.5 * x.dot(&(p * &x)) + q.dot(&x);
            if best.as_ref().is_none_or(|b| f < b.0) {
                best = Some((f, x));
            }
        }
    }
    best.map(|b| b.1)
}

fn qp_oracle() -> Outcome {
    let mut r = rng(3);
    let settings = QpSettings::default();
    let (mut dx, mut df, mut dr): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..200 {
        let d = r.random_range(1..=6);
        let n_eq = r.random_range(0..=3usize).min(d - 1);
        let n_ineq = r.random_range(0..=8);
        let m = rand_mat(&mut r, d, d, 2.0);
        let p = m.transpose() * &m + DMatrix::identity(d, d) * 0.1;
        let q = rand_vec(&mut r, d, 2.0);
        let x0 = rand_vec(&mut r, d, 2.0);
        let g = rand_mat(&mut r, n_ineq, d, 2.0);
        let slack = DVector::from_fn(n_ineq, |_, _| 0.05 + r.random_range(0.0..1.0));
        let h = &g * &x0 + slack;
        let ae = rand_mat(&mut r, n_eq, d, 2.0);
        let be = &ae * &x0;
        let want = active_set_oracle(&p, &q, &ae, &be, &g, &h).ok_or(format!("instance {i}: oracle found no KKT point"))?;
        let prob = QpStandardForm::dense(&p, &q, &ae, &be, &g, &h).map_err(|e| e.to_string())?;
        let sol = solve_qp(&prob, &settings);
        if sol.status != QpStatus::Optimal {
            return Err(format!("instance {i}: status {:?}", sol.status));
        }
        let f_want = 0.5 * want.dot(&(&p * &want)) + q.dot(&want);
        let res = kkt_residuals(&prob, &sol.x, &sol.y_eq, &sol.z_ineq).max();
        dx = dx.max((DVector::from_column_slice(&sol.x) - &want).amax());
        df = df.max((sol.objective - f_want).abs());
        dr = dr.max(res);
        if dx > 1e-6 || df > 1e-8 || dr > 1e-8 {
            return Err(format!("instance {i}: |dx| {dx:.1e}, |df| {df:.1e}, residual {dr:.1e}"));
        }
    }
    Ok(format!("200 QPs, max |dx| {dx:.1e}, |df| {df:.1e}, residual {dr:.1e}"))
}

fn random_disturbances(r: &mut ChaCha8Rng, ns: usize, len: usize, n: usize) -> ScenarioDisturbances {
    let mut w = ScenarioDisturbances::zeros(ns, len, n);
    w.values.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    w
}

fn max_diff(a: &ErrorScenarios, b: &ErrorScenarios) -> f64 {
    a.errors.iter().zip(&b.errors).chain(a.input_errors.iter().zip(&b.input_errors)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn affine_error() -> Outcome {
    let mut r = rng(4);
    let (mut d_explicit, mut d_super): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let n = r.random_range(1..=4);
        let m = r.random_range(1..=n);
        let sys = LtiSystem::new(rand_mat(&mut r, n, n, 0.6), rand_mat(&mut r, n, m, 1.0)).map_err(|e| e.to_string())?;
        let ctrl = TubeController::Linear { k: rand_mat(&mut r, m, n, 0.3) };
        let (ns, len) = (r.random_range(1..=5), r.random_range(1..=12));
        let e0 = rand_vec(&mut r, n, 1.0);
        let w1 = random_disturbances(&mut r, ns, len, n);
        let w2 = random_disturbances(&mut r, ns, len, n);
        let mut w12 = w1.clone();
        w12.values.iter_mut().zip(&w2.values).for_each(|(a, b)| *a += b);
        let prop = |e: &DVector<f64>, w: &ScenarioDisturbances| propagate_error_scenarios(&sys, &ctrl, e, w).map_err(|e| e.to_string());
        let rec = prop(&e0, &w1)?;
        let exp = explicit_error_affine(&sys, &ctrl, &e0, &w1).map_err(|e| e.to_string())?;
        d_explicit = d_explicit.max(max_diff(&rec, &exp));
        let (a, b, sum) = (prop(&e0, &w1)?, prop(&DVector::zeros(n), &w2)?, prop(&e0, &w12)?);
        let mut lin = a.clone();
        lin.errors.iter_mut().zip(&b.errors).for_each(|(x, y)| *x += y);
        lin.input_errors.iter_mut().zip(&b.input_errors).for_each(|(x, y)| *x += y);
        d_super = d_super.max(max_diff(&lin, &sum));
    }
    if d_explicit <= 1e-12 && d_super <= 1e-12 {
        Ok(format!("100 instances, explicit {d_explicit:.1e}, superposition {d_super:.1e}"))
    } else {
        Err(format!("explicit form off by {d_explicit:.1e}, superposition off by {d_super:.1e}"))
    }
}

fn dare() -> Outcome {
    let model = four_room_model(&FourRoomParams::default()).map_err(|e| e.to_string())?;
    let (a, b) = (model.sys.a().clone(), model.sys.b().clone());
    let q = DMatrix::identity(4, 4) * 1e3;
    let rr = DMatrix::identity(4, 4);
    let (p, k) = solve_dare(&a, &b, &q, &rr, 1e-12, 100_000).map_err(|e| e.to_string())?;
    let res = dare_residual(&a, &b, &q, &rr, &p);
    let rho = spectral_radius(&(&a + &b * &k));
    let one = DMatrix::from_element(1, 1, 1.0);
    let (ps, _) = solve_dare(&one, &one, &one, &one, 1e-14, 10_000).map_err(|e| e.to_string())?;
    let golden = (ps[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs();
    let detail = format!("residual {res:.1e}, spectral radius {rho:.4}, scalar golden error {golden:.1e}");
    if res <= 1e-10 && rho < 1.0 && golden <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn affine_offset() -> Outcome {
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..=5);
        let a = rand_vec(&mut r, n, 2.0);
        let b0 = r.random_range(-1.0..1.0);
        let ns = r.random_range(1..=20);
        let samples = rand_mat(&mut r, ns, n, 1.0);
        let eps = r.random_range(0.0..0.5);
        let q = rand_norm(&mut r);
        let gap = worst_case_expectation_affine(&a, b0, &samples, eps, q) - worst_case_expectation_affine(&a, b0, &samples, 0.0, q);
        worst = worst.max((gap - eps * q.dual().norm(a.as_slice())).abs());
    }
    if worst > 1e-10 {
        return Err(format!("offset deviates by {worst:.1e}"));
    }
    let mut dv: f64 = 0.0;
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let sys = LtiSystem::new(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.05, 0.85]), DMatrix::identity(2, 2)).unwrap();
        let ctrl = TubeController::Linear { k: DMatrix::identity(2, 2) * -0.3 };
        let w = random_disturbances(&mut r, 6, 5, 2);
        let scen = propagate_error_scenarios(&sys, &ctrl, &DVector::zeros(2), &w).unwrap();
        let cfg = |eps: f64| MpcConfig {
            horizon: 5,
            penalty_c: 1e3,
            cost: CostConfig {
                state: StateCost::WeightedL1(DVector::from_element(2, 0.2)),
                input: InputCost::L1(1.0),
                terminal: TerminalCost::Zero,
                setpoint: DVector::from_element(2, 0.5),
                robust_offset: true,
            },
            constraints: vec![HalfspaceChanceConstraint::with_alpha(DVector::from_column_slice(&[1.0, 0.0]), 0.8, 0.9, 0.3).unwrap()],
            ambiguity: AmbiguityConfig::new(eps, QNorm::One).unwrap(),
            terminal: TerminalSet::Singleton(DVector::from_element(2, 0.5)),
            input_box_v: BoxSet::symmetric(2.0, 2),
            cvar_blocks: false,
            soft: true,
            first_step_block: false,
            solver: QpSettings::default(),
        };
        let z0 = rand_vec(&mut r, 2, 1.0);
        let wbar = DMatrix::from_element(5, 2, 0.02);
        let solve = |eps: f64| {
            let prob = assemble_mpc_qp(&sys, &cfg(eps), &z0, &scen, &wbar).unwrap();
            solve_mpc(&prob, &QpSettings::default(), &mut KktCache::default()).unwrap()
        };
        let (s0, s1) = (solve(0.0), solve(0.05));
        if s0.status != QpStatus::Optimal || s1.status != QpStatus::Optimal {
            return Err(format!("seed {seed}: status {:?} / {:?}", s0.status, s1.status));
        }
        dv = dv.max((&s0.v_star - &s1.v_star).amax()).max((&s0.z_star - &s1.z_star).amax());
    }
    if dv > 1e-6 {
        return Err(format!("argmin moves by {dv:.1e} between radii"));
    }
    Ok(format!("100 losses, offset error {worst:.1e}; argmin shift {dv:.1e}"))
}

fn drmpc(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_drmpc")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("drmpc {} exited with {}: {}", args.join(" "), out.status, String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> String {
    let mut cfg = RunConfig::default();
    edit(&mut cfg);
    let path = dir.join("config.in.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_string_lossy().into_owned()
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn with_dataset(dir: &Path, cfg: &str) -> Result<String, String> {
    let out = dir.join("out");
    let out = out.to_string_lossy().into_owned();
    drmpc(&["--config", cfg, "--out", &out, "gen-data"])?;
    Ok(out)
}

fn closed_loop_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), |c| {
        c.sim.runs = 100;
        c.sim.candidate_checks = 20;
        c.ambiguity.epsilon = 1e-4;
    });
    let out = with_dataset(dir.path(), &cfg)?;
    drmpc(&["--config", &cfg, "--out", &out, "run"])?;
    let s: McSummary = read(&Path::new(&out).join("summary.json"))?;
    let detail = format!(
        "{} runs, {} infeasible, {} input violations, max |u| {:.3}, {} candidate checks, max candidate violation {:.1e}",
        s.runs, s.infeasible_steps, s.violations, s.max_abs_u, s.candidate_checks, s.max_candidate_violation
    );
    let ok = s.runs == 100 && s.infeasible_steps == 0 && s.violations == 0 && s.max_abs_u <= 4.5 + 1e-9 && s.candidate_checks == 2000 && s.max_candidate_violation <= 1e-7;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn satisfaction_trend() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), |c| {
        c.sim.runs = 200;
        c.sweep.epsilons = vec![0.0, 1e-5, 1e-4, 1e-3];
        c.sweep.sample_sizes = vec![10];
    });
    let out = with_dataset(dir.path(), &cfg)?;
    drmpc(&["--config", &cfg, "--out", &out, "sweep"])?;
    let t: SweepTable = read(&Path::new(&out).join("sweep.json"))?;
    let sat: Vec<f64> = (0..t.epsilons.len()).map(|e| t.cell(e, 0).satisfaction[&t.table_constraint]).collect();
    let drops: Vec<f64> = sat.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    let gain = sat[sat.len() - 1] - sat[0];
    let pct: Vec<String> = sat.iter().map(|s| format!("{:.1}%", 100.0 * s)).collect();
    let detail = format!("{} by epsilon: {}, gain {:.1} pp", t.table_constraint, pct.join(" "), 100.0 * gain);
    if drops.len() <= 1 && drops.iter().all(|d| *d <= 0.01 + 1e-12) && gain >= 0.02 - 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn runtime_scaling() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), |c| {
        c.sim.runs = 4;
        c.sweep.epsilons = vec![1e-4];
        c.sweep.sample_sizes = vec![10, 50];
    });
    let out = with_dataset(dir.path(), &cfg)?;
    drmpc(&["--config", &cfg, "--out", &out, "--threads", "1", "sweep"])?;
    let text = std::fs::read_to_string(Path::new(&out).join("runtime.csv")).map_err(|e| e.to_string())?;
    let mut means = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        means.push((cols[0].to_string(), cols[1].parse::<f64>().map_err(|e| e.to_string())?));
    }
    let [(_, t10), (_, t50)] = means.as_slice() else {
        return Err(format!("runtime.csv has {} rows", means.len()));
    };
    let detail = format!("mean solve {t10:.2} ms at N_s=10, {t50:.2} ms at N_s=50, ratio {:.2}", t50 / t10);
    if t50 / t10 >= 2.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), |c| {
        c.sim.runs = 6;
        c.sim.n_t = 12;
        c.sim.candidate_checks = 2;
        c.sweep.epsilons = vec![0.0, 1e-3];
        c.sweep.sample_sizes = vec![5, 10];
    });
    let mut outputs = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(format!("t{threads}"));
        let out = out.to_string_lossy().into_owned();
        let common = ["--config", &cfg, "--out", &out, "--seed", "7", "--threads", threads, "--no-timing"];
        for cmd in ["gen-data", "run", "sweep"] {
            drmpc(&[&common[..], &[cmd]].concat())?;
        }
        outputs.push(files_under(Path::new(&out)));
    }
    let names: Vec<&str> = outputs[0].iter().map(|f| f.0.as_str()).collect();
    if !names.iter().any(|n| n.starts_with("traces")) || !names.contains(&"summary.json") {
        return Err(format!("missing outputs, found {names:?}"));
    }
    if outputs[0] != outputs[1] {
        let differ: Vec<&str> = outputs[0].iter().zip(&outputs[1]).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
        return Err(format!("outputs differ between 1 and 8 threads: {differ:?}"));
    }
    Ok(format!("{} files identical across 1 and 8 threads", names.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("CVaR block feasibility matches margin sign", block_feasibility),
        ("CVaR sorted atoms vs tau grid", cvar_oracle),
        ("QP solver vs active-set enumeration", qp_oracle),
        ("affine error propagation", affine_error),
        ("Riccati solution", dare),
        ("closed-loop feasibility suite", closed_loop_suite),
        ("satisfaction trend in epsilon", satisfaction_trend),
        ("runtime scaling in N_s", runtime_scaling),
        ("radius offset and argmin invariance", affine_offset),
        ("determinism across thread counts", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {}: PASS {name} ({d}) [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({d}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
