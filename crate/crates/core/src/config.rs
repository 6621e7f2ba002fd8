//! JSON run configuration. Every field has a default; unknown keys are
//! rejected. See `docs/config.md` for the schema.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::disturbance::GpKernelParams;
use crate::dr_cvar::{AmbiguityConfig, HalfspaceChanceConstraint};
use crate::error::{Error, Result};
use crate::harness::{design_tube, four_room_model, Experiment, FourRoomParams, ScenarioSelection, SimSettings, TrueNoise};
use crate::mpc::{CostConfig, InputCost, MpcConfig, StateCost, TerminalCost, TerminalSet};
use crate::qp::QpSettings;

/// A scalar (times identity), a diagonal, or a full row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize, field: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(s) => Ok(DMatrix::identity(n, n) * *s),
            MatrixSpec::Diagonal(d) if d.len() == n => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            MatrixSpec::Full(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j])),
            _ => Err(Error::InvalidConfig(format!("{field}: expected a scalar, {n} diagonal entries or an {n}x{n} matrix"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Only `"four_room"`.
    pub kind: String,
    pub params: FourRoomParams,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: "four_room".into(), params: FourRoomParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceSection {
    pub kernel: GpKernelParams,
    pub n_dims: usize,
    pub trajectories: usize,
    /// Defaults to `N_T + N`.
    pub horizon: Option<usize>,
    pub seed: u64,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        Self { kernel: GpKernelParams::default(), n_dims: 4, trajectories: 1000, horizon: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub id: String,
    pub h: Vec<f64>,
    pub b: f64,
    pub p_level: f64,
    /// CVaR level; `1 - p_level` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn default_constraints() -> Vec<ConstraintSpec> {
    let mut out = Vec::new();
    for i in 0..4 {
        let unit = |s: f64| (0..4).map(|j| if j == i { s } else { 0.0 }).collect::<Vec<_>>();
        out.push(ConstraintSpec { id: format!("x{}_lo", i + 1), h: unit(-1.0), b: -20.4, p_level: 0.9, alpha: Some(0.3) });
        out.push(ConstraintSpec { id: format!("x{}_hi", i + 1), h: unit(1.0), b: 21.6, p_level: 0.9, alpha: Some(0.3) });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub lqr_q: MatrixSpec,
    pub lqr_r: MatrixSpec,
    pub saturation_limit: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self { lqr_q: MatrixSpec::Scalar(1e3), lqr_r: MatrixSpec::Scalar(1.0), saturation_limit: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateCostSpec {
    Quadratic { weight: MatrixSpec },
    WeightedL1 { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputCostSpec {
    L1 { weight: f64 },
    Quadratic { weight: MatrixSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalCostSpec {
    Zero,
    Quadratic { weight: MatrixSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    /// `z(N) = x_s`
    Setpoint,
    Point { x: Vec<f64> },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = QpSettings::default();
        Self { tol: s.tol, max_iter: s.max_iter }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub horizon: usize,
    pub penalty_c: f64,
    pub n_samples: usize,
    pub state_cost: StateCostSpec,
    pub input_cost: InputCostSpec,
    pub terminal_cost: TerminalCostSpec,
    pub terminal: TerminalSpec,
    /// Add `epsilon` times the cost's Lipschitz constant (L1 costs only).
    pub robust_offset: bool,
    pub cvar_blocks: bool,
    /// Keep the CVaR block at `t = 0`, which only involves the measured state.
    pub first_step_block: bool,
    pub solver: SolverSection,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: 12,
            penalty_c: 1e3,
            n_samples: 10,
            state_cost: StateCostSpec::Quadratic { weight: MatrixSpec::Scalar(0.01) },
            input_cost: InputCostSpec::L1 { weight: 1.0 },
            terminal_cost: TerminalCostSpec::Zero,
            terminal: TerminalSpec::Setpoint,
            robust_offset: false,
            cvar_blocks: true,
            first_step_block: false,
            solver: SolverSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub n_t: usize,
    pub runs: usize,
    pub seed: u64,
    /// Worker threads; all available cores when absent. Not part of the hash.
    pub parallelism: Option<usize>,
    pub true_noise: TrueNoise,
    pub selection: ScenarioSelection,
    pub candidate_checks: usize,
    /// Per-run trace files written by `run`.
    pub traces_written: usize,
    /// Record solver wall time; `false` writes zeros.
    pub timing: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            n_t: 48,
            runs: 1000,
            seed: 0,
            parallelism: None,
            true_noise: TrueNoise::Resample,
            selection: ScenarioSelection::PerRun,
            candidate_checks: 0,
            traces_written: 10,
            timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    pub table_constraint: String,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { epsilons: vec![0.0, 1e-5, 1e-4, 1e-3], sample_sizes: vec![10, 20, 50], table_constraint: "x2_lo".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// `report` fails when the table constraint drops below this in any cell.
    pub min_satisfaction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub disturbance: DisturbanceSection,
    pub ambiguity: AmbiguityConfig,
    pub constraints: Vec<ConstraintSpec>,
    pub controller: ControllerSection,
    pub mpc: MpcSection,
    pub sim: SimSection,
    pub sweep: SweepSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            disturbance: DisturbanceSection::default(),
            ambiguity: AmbiguityConfig::default(),
            constraints: default_constraints(),
            controller: ControllerSection::default(),
            mpc: MpcSection::default(),
            sim: SimSection::default(),
            sweep: SweepSection::default(),
            report: ReportSection::default(),
        }
    }
}

fn invalid(e: Error) -> Error {
    match e {
        Error::InvalidConfig(_) => e,
        other => Error::InvalidConfig(other.to_string()),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON with `sim.parallelism` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.sim.parallelism = None;
        hex::encode(Sha256::digest(serde_json::to_string(&c).expect("config serializes").as_bytes()))
    }

    pub fn dataset_horizon(&self) -> usize {
        self.disturbance.horizon.unwrap_or(self.sim.n_t + self.mpc.horizon)
    }

    pub fn threads(&self) -> usize {
        self.sim.parallelism.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.model.kind != "four_room" {
            return bad(format!("model.kind: unknown model {:?}", self.model.kind));
        }
        if self.disturbance.trajectories == 0 {
            return bad("disturbance.trajectories: must be >= 1".into());
        }
        if self.disturbance.n_dims != 4 {
            return bad(format!("disturbance.n_dims: the four-room model needs 4, got {}", self.disturbance.n_dims));
        }
        self.disturbance.kernel.validate().map_err(|e| Error::InvalidConfig(format!("disturbance.kernel: {e}")))?;
        if self.dataset_horizon() < self.sim.n_t + self.mpc.horizon {
            return bad(format!("disturbance.horizon: {} < N_T + N = {}", self.dataset_horizon(), self.sim.n_t + self.mpc.horizon));
        }
        if self.mpc.n_samples == 0 || self.mpc.n_samples > self.disturbance.trajectories {
            return bad(format!("mpc.n_samples: {} must lie in 1..={}", self.mpc.n_samples, self.disturbance.trajectories));
        }
        if self.sim.n_t == 0 || self.sim.runs == 0 {
            return bad("sim.n_t and sim.runs must be >= 1".into());
        }
        if self.sim.parallelism == Some(0) {
            return bad("sim.parallelism: must be >= 1".into());
        }
        if self.sweep.epsilons.is_empty() || self.sweep.sample_sizes.is_empty() {
            return bad("sweep: epsilons and sample_sizes must be nonempty".into());
        }
        if self.sweep.sample_sizes.iter().any(|&n| n == 0 || n > self.disturbance.trajectories) {
            return bad("sweep.sample_sizes: every entry must lie in 1..=trajectories".into());
        }
        if self.sweep.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return bad("sweep.epsilons: entries must be finite and >= 0".into());
        }
        let mut ids: Vec<&str> = self.constraints.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("constraints: ids must be unique".into());
        }
        if !ids.contains(&self.sweep.table_constraint.as_str()) {
            return bad(format!("sweep.table_constraint: no constraint with id {:?}", self.sweep.table_constraint));
        }
        self.build_experiment().map(|_| ())
    }

    pub fn build_experiment(&self) -> Result<Experiment> {
        let model = four_room_model(&self.model.params).map_err(|e| Error::InvalidConfig(format!("model.params: {e}")))?;
        let (n, m) = (model.sys.n(), model.sys.m());
        let c = &self.controller;
        let (ctrl, v_box) = design_tube(&model.sys, &c.lqr_q.to_matrix(n, "controller.lqr_q")?, &c.lqr_r.to_matrix(m, "controller.lqr_r")?, c.saturation_limit, &model.u_box)
            .map_err(|e| Error::InvalidConfig(format!("controller: {e}")))?;
        let mut constraints = Vec::new();
        for cs in &self.constraints {
            let h = DVector::from_column_slice(&cs.h);
            let built = match cs.alpha {
                Some(a) => HalfspaceChanceConstraint::with_alpha(h, cs.b, cs.p_level, a),
                None => HalfspaceChanceConstraint::new(h, cs.b, cs.p_level),
            };
            constraints.push(built.map_err(|e| Error::InvalidConfig(format!("constraints[{}]: {e}", cs.id)))?);
        }
        let mc = &self.mpc;
        let state = match &mc.state_cost {
            StateCostSpec::Quadratic { weight } => StateCost::Quadratic(weight.to_matrix(n, "mpc.state_cost.weight")?),
            StateCostSpec::WeightedL1 { weights } => StateCost::WeightedL1(DVector::from_column_slice(weights)),
        };
        let input = match &mc.input_cost {
            InputCostSpec::L1 { weight } => InputCost::L1(*weight),
            InputCostSpec::Quadratic { weight } => InputCost::Quadratic(weight.to_matrix(m, "mpc.input_cost.weight")?),
        };
        let terminal_cost = match &mc.terminal_cost {
            TerminalCostSpec::Zero => TerminalCost::Zero,
            TerminalCostSpec::Quadratic { weight } => TerminalCost::Quadratic(weight.to_matrix(n, "mpc.terminal_cost.weight")?),
        };
        let terminal = match &mc.terminal {
            TerminalSpec::Setpoint => TerminalSet::Singleton(model.x_s.clone()),
            TerminalSpec::Point { x } => TerminalSet::Singleton(DVector::from_column_slice(x)),
            TerminalSpec::None => TerminalSet::None,
        };
        let mpc = MpcConfig {
            horizon: mc.horizon,
            penalty_c: mc.penalty_c,
            cost: CostConfig { state, input, terminal: terminal_cost, setpoint: model.x_s.clone(), robust_offset: mc.robust_offset },
            constraints,
            ambiguity: self.ambiguity,
            terminal,
            input_box_v: v_box,
            cvar_blocks: mc.cvar_blocks,
            soft: true,
            first_step_block: mc.first_step_block,
            solver: QpSettings::with_tol(mc.solver.tol, mc.solver.max_iter),
        };
        mpc.validate(n, m).map_err(invalid)?;
        let sim = SimSettings {
            n_t: self.sim.n_t,
            n_samples: mc.n_samples,
            true_noise: self.sim.true_noise,
            noise_kernel: self.disturbance.kernel,
            selection: self.sim.selection,
            candidate_checks: self.sim.candidate_checks,
            timing: self.sim.timing,
            dump_dir: None,
        };
        Ok(Experiment { model, mpc, ctrl, constraint_ids: self.constraints.iter().map(|c| c.id.clone()).collect(), sim, config_hash: self.hash() })
    }
}
