//! Closed-loop simulation: the four-room RC model, Monte-Carlo runs, empirical
//! constraint satisfaction and (epsilon, N_s) sweeps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disturbance::{cholesky_lower, extract_scenarios, gaussian_kernel_covariance, sample_with_factor, DisturbanceDataset, GpKernelParams, KnownDisturbanceProfile, ProfileOutput, Selector};
use crate::dr_cvar::HalfspaceChanceConstraint;
use crate::error::{Error, Result};
use crate::mpc::{assemble_mpc_qp, candidate_shift, control_input, solve_mpc, MpcConfig, MpcSolution};
use crate::qp::{KktCache, QpStatus};
use crate::tube::{nominal_step, propagate_error_scenarios, solve_dare, tighten_input_box, BoxSet, LtiSystem, TubeController};

/// Ring of four rooms, each coupled to the ambient temperature.
///
/// `C_i dT_i/dt = sum_j (T_j - T_i) / R_ij + (T_0 - T_i) / R_i0 + u_i`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FourRoomParams {
    /// Thermal capacitances.
    pub capacitance: Vec<f64>,
    /// Wall resistances to ambient; `inf` disconnects a room.
    pub r_ambient: Vec<f64>,
    /// Ring resistances for the walls 1-2, 2-3, 3-4, 4-1.
    pub r_coupling: Vec<f64>,
    /// Sampling time in hours.
    pub dt: f64,
    pub u_max: f64,
    pub x0: Vec<f64>,
    pub x_s: Vec<f64>,
    /// `amplitude * sin((k + phase) / rate) + offset`
    pub ambient: AmbientProfile,
    /// Gain from one dataset channel to the matching room temperature.
    pub noise_gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbientProfile {
    pub amplitude: f64,
    pub phase: f64,
    pub rate: f64,
    pub offset: f64,
}

impl Default for AmbientProfile {
    fn default() -> Self {
        Self { amplitude: 5.0, phase: 6.0, rate: 4.0, offset: 19.0 }
    }
}

impl Default for FourRoomParams {
    fn default() -> Self {
        Self {
            capacitance: vec![1.0; 4],
            r_ambient: vec![3.0, 3.3, 3.0, 3.6],
            r_coupling: vec![5.0; 4],
            dt: 1.0,
            u_max: 4.5,
            x0: vec![20.75, 20.50, 20.65, 20.60],
            x_s: vec![21.0; 4],
            ambient: AmbientProfile::default(),
            noise_gain: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourRoomModel {
    pub sys: LtiSystem,
    /// Ambient temperature injection, `4 x 1`.
    pub b_w: DMatrix<f64>,
    pub profile: KnownDisturbanceProfile,
    pub u_box: BoxSet,
    pub x_s: DVector<f64>,
    pub x0: DVector<f64>,
    /// Maps a dataset sample to a state disturbance.
    pub noise_injection: DMatrix<f64>,
}

impl FourRoomModel {
    /// Known state disturbance `B_w * wbar(k)`.
    pub fn wbar(&self, k: usize) -> DVector<f64> {
        &self.profile.injection * self.profile.output_at(k)
    }

    /// Rows `k .. k + len` of the known disturbance.
    pub fn wbar_window(&self, k: usize, len: usize) -> DMatrix<f64> {
        let n = self.sys.n();
        let mut out = DMatrix::zeros(len, n);
        for t in 0..len {
            out.set_row(t, &self.wbar(k + t).transpose());
        }
        out
    }
}

pub fn four_room_model(p: &FourRoomParams) -> Result<FourRoomModel> {
    let n = 4;
    for (name, v) in [("capacitance", &p.capacitance), ("r_ambient", &p.r_ambient), ("r_coupling", &p.r_coupling), ("x0", &p.x0), ("x_s", &p.x_s)] {
        if v.len() != n {
            return Err(Error::DimensionMismatch(format!("{name} has {} entries, expected {n}", v.len())));
        }
    }
    if p.capacitance.iter().chain(&p.r_ambient).chain(&p.r_coupling).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParams("resistances and capacitances must be positive".into()));
    }
    if !(p.dt > 0.0 && p.u_max > 0.0 && p.noise_gain >= 0.0) {
        return Err(Error::InvalidParams("dt and u_max must be positive, noise_gain nonnegative".into()));
    }
    let mut ac = DMatrix::zeros(n, n);
    let mut bwc = DMatrix::zeros(n, 1);
    for i in 0..n {
        let g0 = 1.0 / p.r_ambient[i];
        ac[(i, i)] -= g0;
        bwc[(i, 0)] = g0;
    }
    for (edge, &r) in p.r_coupling.iter().enumerate() {
        let (i, j) = (edge, (edge + 1) % n);
        let g = 1.0 / r;
        ac[(i, i)] -= g;
        ac[(j, j)] -= g;
        ac[(i, j)] += g;
        ac[(j, i)] += g;
    }
    let cinv = DMatrix::from_diagonal(&DVector::from_iterator(n, p.capacitance.iter().map(|c| 1.0 / c)));
    let ac = &cinv * ac;
    let bc = cinv.clone();
    let bwc = &cinv * bwc;

    // zero-order hold via the exponential of [[Ac, [Bc Bwc]], [0, 0]]
    let k = n + n + 1;
    let mut aug = DMatrix::zeros(k, k);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&ac * p.dt));
    aug.view_mut((0, n), (n, n)).copy_from(&(&bc * p.dt));
    aug.view_mut((0, 2 * n), (n, 1)).copy_from(&(&bwc * p.dt));
    let e = aug.exp();
    let a = e.view((0, 0), (n, n)).into_owned();
    let b = e.view((0, n), (n, n)).into_owned();
    let b_w = e.view((0, 2 * n), (n, 1)).into_owned();

    let amb = p.ambient;
    let profile = KnownDisturbanceProfile::new(
        ProfileOutput::Sinusoidal { amplitude: amb.amplitude, phase: amb.phase, rate: amb.rate, offset: amb.offset },
        b_w.clone(),
        usize::MAX,
    )?;
    Ok(FourRoomModel {
        sys: LtiSystem::new(a, b)?,
        b_w,
        profile,
        u_box: BoxSet::symmetric(p.u_max, n),
        x_s: DVector::from_column_slice(&p.x_s),
        x0: DVector::from_column_slice(&p.x0),
        noise_injection: DMatrix::identity(n, n) * p.noise_gain,
    })
}

/// Saturated LQR tube controller and the tightened input box `V`.
pub fn design_tube(sys: &LtiSystem, lqr_q: &DMatrix<f64>, lqr_r: &DMatrix<f64>, limit: f64, u_box: &BoxSet) -> Result<(TubeController, BoxSet)> {
    let (_, k) = solve_dare(sys.a(), sys.b(), lqr_q, lqr_r, 1e-12, 100_000)?;
    let ctrl = TubeController::saturated(k, DVector::from_element(sys.m(), limit))?;
    let v = tighten_input_box(u_box, &ctrl)?;
    Ok((ctrl, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueNoise {
    /// Fresh kernel draw per run.
    Resample,
    /// Dataset trajectory `(offset + run) mod n_traj`.
    HeldOut { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioSelection {
    /// A seeded random subset per run, fixed over the run.
    PerRun,
    /// The first `N_s` trajectories.
    First,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub n_t: usize,
    pub n_samples: usize,
    pub true_noise: TrueNoise,
    pub noise_kernel: GpKernelParams,
    pub selection: ScenarioSelection,
    /// Steps per run at which the shifted candidate is checked.
    pub candidate_checks: usize,
    /// Record solver wall time; off gives reproducible files.
    pub timing: bool,
    /// Write every QP of run 0 here as `step_KKK.json`.
    pub dump_dir: Option<PathBuf>,
}

/// Everything one closed-loop run needs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: FourRoomModel,
    pub mpc: MpcConfig,
    pub ctrl: TubeController,
    pub constraint_ids: Vec<String>,
    pub sim: SimSettings,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub e: Vec<f64>,
    pub theta_max: f64,
    pub status: QpStatus,
    pub solve_ms: f64,
    pub candidate_violation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopTrace {
    pub run: usize,
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    /// Step at which the MPC problem was not solved, if any.
    pub failed_step: Option<usize>,
}

/// splitmix64 finalizer, used to derive independent per-run seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn true_noise(exp: &Experiment, ds: &DisturbanceDataset, run: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let n_t = exp.sim.n_t;
    let d = ds.n_dims();
    let raw: Vec<DVector<f64>> = match exp.sim.true_noise {
        TrueNoise::Resample => {
            let factor = cholesky_lower(&gaussian_kernel_covariance(&exp.sim.noise_kernel, n_t))?;
            let data = sample_with_factor(&factor, d, 1, derive_seed(seed, 2));
            (0..n_t).map(|t| DVector::from_column_slice(&data[t * d..(t + 1) * d])).collect()
        }
        TrueNoise::HeldOut { offset } => {
            let j = (offset + run) % ds.n_traj();
            if ds.horizon() < n_t {
                return Err(Error::WindowOverrun { start: 0, end: n_t, horizon: ds.horizon() });
            }
            (0..n_t).map(|t| DVector::from_column_slice(ds.sample(j, t))).collect()
        }
    };
    Ok(raw.into_iter().map(|w| &exp.model.noise_injection * w).collect())
}

fn check_steps(n_t: usize, count: usize, seed: u64) -> Vec<bool> {
    let mut mask = vec![false; n_t];
    if n_t < 2 || count == 0 {
        return mask;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 3));
    for i in rand::seq::index::sample(&mut rng, n_t - 1, count.min(n_t - 1)) {
        mask[i + 1] = true;
    }
    mask
}

/// One closed-loop run of `N_T` steps.
pub fn run_closed_loop(exp: &Experiment, ds: &DisturbanceDataset, run: usize, seed: u64) -> Result<ClosedLoopTrace> {
    let model = &exp.model;
    let sys = &model.sys;
    let cfg = &exp.mpc;
    let n_t = exp.sim.n_t;
    let nh = cfg.horizon;
    let wrap = |step: usize| move |e: Error| Error::Step { run, step, source: Box::new(e) };
    if ds.horizon() < n_t + nh {
        return Err(Error::WindowOverrun { start: 0, end: n_t + nh, horizon: ds.horizon() });
    }
    let selector = match exp.sim.selection {
        ScenarioSelection::PerRun => Selector::SeededRandom(derive_seed(seed, 1)),
        ScenarioSelection::First => Selector::First,
    };
    let w_true = true_noise(exp, ds, run, seed)?;
    let checks = check_steps(n_t, exp.sim.candidate_checks, seed);
    let mut cache = KktCache::default();
    let mut x = model.x0.clone();
    let mut z = model.x0.clone();
    let mut e = DVector::zeros(sys.n());
    let mut prev: Option<MpcSolution> = None;
    let mut steps = Vec::with_capacity(n_t);
    let mut failed_step = None;
    for k in 0..n_t {
        let w_sc = extract_scenarios(ds, k, nh, exp.sim.n_samples, selector).and_then(|s| s.mapped(&model.noise_injection)).map_err(wrap(k))?;
        let sc = propagate_error_scenarios(sys, &exp.ctrl, &e, &w_sc).map_err(wrap(k))?;
        let problem = assemble_mpc_qp(sys, cfg, &z, &sc, &model.wbar_window(k, nh)).map_err(wrap(k))?;
        if let (Some(dir), 0) = (&exp.sim.dump_dir, run) {
            problem.qp.dump_json(&dir.join(format!("step_{k:03}.json"))).map_err(wrap(k))?;
        }
        let candidate_violation = match (&prev, checks[k]) {
            (Some(p), true) => {
                let cand = candidate_shift(p, sys, cfg, &model.wbar(k - 1 + nh)).map_err(wrap(k))?;
                Some(problem.candidate_violation(&cand))
            }
            _ => None,
        };
        let sol = match solve_mpc(&problem, &cfg.solver, &mut cache) {
            Ok(s) => s,
            Err(Error::InfeasibleHardTerminal) => {
                failed_step = Some(k);
                break;
            }
            Err(err) => return Err(wrap(k)(err)),
        };
        if sol.status != QpStatus::Optimal {
            failed_step = Some(k);
            break;
        }
        let u = control_input(&sol, &exp.ctrl, &e).map_err(wrap(k))?;
        let wbar = model.wbar(k);
        let x_next = sys.a() * &x + sys.b() * &u + &wbar + &w_true[k];
        let z_next = nominal_step(sys, &z, &sol.v0(), &wbar);
        let e_next = &x_next - &z_next;
        steps.push(StepRecord {
            k,
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            z: z.as_slice().to_vec(),
            e: e.as_slice().to_vec(),
            theta_max: sol.theta_max(),
            status: sol.status,
            solve_ms: if exp.sim.timing { sol.solve_time.as_secs_f64() * 1e3 } else { 0.0 },
            candidate_violation,
        });
        x = x_next;
        z = z_next;
        e = e_next;
        prev = Some(sol);
    }
    Ok(ClosedLoopTrace { run, seed, config_hash: exp.config_hash.clone(), steps, failed_step })
}

/// Minimum over steps of the fraction of runs with `h'x(k) <= b`.
pub fn empirical_satisfaction(traces: &[ClosedLoopTrace], c: &HalfspaceChanceConstraint) -> f64 {
    per_step_rates(traces, c).into_iter().fold(1.0, f64::min)
}

/// Per-step satisfied fraction over the runs that reached the step.
pub fn per_step_rates(traces: &[ClosedLoopTrace], c: &HalfspaceChanceConstraint) -> Vec<f64> {
    let n_t = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    (0..n_t)
        .map(|k| {
            let (mut ok, mut total) = (0usize, 0usize);
            for tr in traces {
                if let Some(s) = tr.steps.get(k) {
                    total += 1;
                    let v: f64 = c.h.iter().zip(&s.x).map(|(h, x)| h * x).sum();
                    if v <= c.b {
                        ok += 1;
                    }
                }
            }
            ok as f64 / total as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub mean: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub config_hash: String,
    pub runs: usize,
    pub n_samples: usize,
    pub epsilon: f64,
    /// Worst-case in-time satisfaction per constraint.
    pub satisfaction: BTreeMap<String, f64>,
    pub per_step_rates: BTreeMap<String, Vec<f64>>,
    pub solve_ms: SolveStats,
    /// Steps with `|u|_inf` above the hard bound.
    pub violations: usize,
    pub infeasible_steps: usize,
    pub max_abs_u: f64,
    pub mean_theta_max: f64,
    pub candidate_checks: usize,
    pub max_candidate_violation: f64,
}

pub fn summarize(exp: &Experiment, traces: &[ClosedLoopTrace]) -> McSummary {
    let bound = exp.model.u_box.upper.amax();
    let mut satisfaction = BTreeMap::new();
    let mut rates = BTreeMap::new();
    for (id, c) in exp.constraint_ids.iter().zip(&exp.mpc.constraints) {
        let r = per_step_rates(traces, c);
        satisfaction.insert(id.clone(), r.iter().cloned().fold(1.0, f64::min));
        rates.insert(id.clone(), r);
    }
    let mut times = Vec::new();
    let (mut violations, mut max_abs_u, mut theta_sum) = (0, 0.0f64, 0.0);
    let (mut checks, mut max_cand) = (0, 0.0f64);
    for tr in traces {
        for s in &tr.steps {
            times.push(s.solve_ms);
            let u = s.u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            max_abs_u = max_abs_u.max(u);
            if u > bound + 1e-9 {
                violations += 1;
            }
            theta_sum += s.theta_max;
            if let Some(v) = s.candidate_violation {
                checks += 1;
                max_cand = max_cand.max(v);
            }
        }
    }
    let n_steps = times.len().max(1) as f64;
    let mean = times.iter().sum::<f64>() / n_steps;
    times.sort_by(f64::total_cmp);
    let p95 = times.get(((times.len() as f64 * 0.95).ceil() as usize).saturating_sub(1)).copied().unwrap_or(0.0);
    McSummary {
        config_hash: exp.config_hash.clone(),
        runs: traces.len(),
        n_samples: exp.sim.n_samples,
        epsilon: exp.mpc.ambiguity.epsilon,
        satisfaction,
        per_step_rates: rates,
        solve_ms: SolveStats { mean, p95 },
        violations,
        infeasible_steps: traces.iter().filter(|t| t.failed_step.is_some()).count(),
        max_abs_u,
        mean_theta_max: theta_sum / n_steps,
        candidate_checks: checks,
        max_candidate_violation: max_cand,
    }
}

/// Runs `runs` independent closed loops on `threads` workers. Seeds depend
/// only on `master_seed` and the run index, and results are collected in run
/// order, so the outcome does not depend on `threads`.
pub fn monte_carlo(exp: &Experiment, ds: &DisturbanceDataset, runs: usize, master_seed: u64, threads: usize) -> Result<(Vec<ClosedLoopTrace>, McSummary)> {
    if runs == 0 {
        return Err(Error::InvalidParams("runs must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    let traces: Vec<ClosedLoopTrace> = pool.install(|| {
        (0..runs)
            .into_par_iter()
            .map(|r| run_closed_loop(exp, ds, r, derive_seed(master_seed, r as u64)))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = summarize(exp, &traces);
    Ok((traces, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub config_hash: String,
    pub table_constraint: String,
    pub epsilons: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    /// Epsilon-major.
    pub cells: Vec<McSummary>,
}

impl SweepTable {
    pub fn cell(&self, ei: usize, si: usize) -> &McSummary {
        &self.cells[ei * self.sample_sizes.len() + si]
    }
}

/// One Monte-Carlo batch per `(epsilon, N_s)`; every cell reuses the same
/// per-run seeds, so cells are paired.
pub fn sweep(exp: &Experiment, ds: &DisturbanceDataset, epsilons: &[f64], sample_sizes: &[usize], table_constraint: &str, runs: usize, master_seed: u64, threads: usize) -> Result<SweepTable> {
    if epsilons.is_empty() || sample_sizes.is_empty() {
        return Err(Error::InvalidParams("sweep needs at least one epsilon and one sample size".into()));
    }
    if !exp.constraint_ids.iter().any(|c| c == table_constraint) {
        return Err(Error::InvalidParams(format!("unknown table constraint {table_constraint:?}")));
    }
    let mut cells = Vec::new();
    for &eps in epsilons {
        for &ns in sample_sizes {
            let mut cell = exp.clone();
            cell.mpc.ambiguity.epsilon = eps;
            cell.mpc.ambiguity.validate()?;
            cell.sim.n_samples = ns;
            cells.push(monte_carlo(&cell, ds, runs, master_seed, threads)?.1);
        }
    }
    Ok(SweepTable { config_hash: exp.config_hash.clone(), table_constraint: table_constraint.into(), epsilons: epsilons.to_vec(), sample_sizes: sample_sizes.to_vec(), cells })
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// `# config_hash: ...` line, then `k,x0..,u0..,z0..,e0..,theta_max,status,solve_ms`.
pub fn write_trace_csv(trace: &ClosedLoopTrace, path: &Path) -> Result<()> {
    let (n, m) = trace.steps.first().map_or((0, 0), |s| (s.x.len(), s.u.len()));
    write_file(path, |w| {
        writeln!(w, "# config_hash: {} run: {} seed: {}", trace.config_hash, trace.run, trace.seed)?;
        let mut header = vec!["k".to_string()];
        for (p, d) in [("x", n), ("u", m), ("z", n), ("e", n)] {
            header.extend((0..d).map(|i| format!("{p}{i}")));
        }
        header.extend(["theta_max", "status", "solve_ms"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for s in &trace.steps {
            let mut row = vec![s.k.to_string()];
            for v in [&s.x, &s.u, &s.z, &s.e] {
                row.extend(v.iter().map(|x| format!("{x:?}")));
            }
            row.push(format!("{:?}", s.theta_max));
            row.push(status_name(s.status).into());
            row.push(format!("{:?}", s.solve_ms));
            writeln!(w, "{}", row.join(","))?;
        }
        if let Some(k) = trace.failed_step {
            writeln!(w, "# failed at step {k}")?;
        }
        Ok(())
    })
}

pub fn status_name(s: QpStatus) -> &'static str {
    match s {
        QpStatus::Optimal => "optimal",
        QpStatus::PrimalInfeasible => "primal_infeasible",
        QpStatus::MaxIter => "max_iter",
        QpStatus::NumericalFailure => "numerical_failure",
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Rows epsilon, columns `N_s`, entries the table constraint's satisfaction.
pub fn write_sweep_csv(table: &SweepTable, path: &Path) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "# config_hash: {} constraint: {}", table.config_hash, table.table_constraint)?;
        let cols: Vec<String> = table.sample_sizes.iter().map(|n| format!("ns_{n}")).collect();
        writeln!(w, "epsilon,{}", cols.join(","))?;
        for (ei, eps) in table.epsilons.iter().enumerate() {
            let vals: Vec<String> = (0..table.sample_sizes.len()).map(|si| format!("{:?}", table.cell(ei, si).satisfaction[&table.table_constraint])).collect();
            writeln!(w, "{eps:?},{}", vals.join(","))?;
        }
        Ok(())
    })
}

/// One row per `N_s`: solve time averaged over the epsilon cells.
pub fn write_runtime_csv(table: &SweepTable, path: &Path) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "# config_hash: {}", table.config_hash)?;
        writeln!(w, "n_samples,mean_solve_ms,p95_solve_ms")?;
        let ne = table.epsilons.len() as f64;
        for (si, ns) in table.sample_sizes.iter().enumerate() {
            let mean = (0..table.epsilons.len()).map(|ei| table.cell(ei, si).solve_ms.mean).sum::<f64>() / ne;
            let p95 = (0..table.epsilons.len()).map(|ei| table.cell(ei, si).solve_ms.p95).fold(0.0, f64::max);
            writeln!(w, "{ns},{mean:?},{p95:?}")?;
        }
        Ok(())
    })
}
