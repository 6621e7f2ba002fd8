use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drmpc::config::RunConfig;
use drmpc::disturbance::{generate_dataset, load_dataset, save_dataset, DisturbanceDataset};
use drmpc::harness::{monte_carlo, sweep, write_json, write_runtime_csv, write_sweep_csv, write_trace_csv, McSummary, SweepTable};
use drmpc::Error;

/// Distributionally robust tube MPC experiments on the four-room model.
#[derive(Parser)]
#[command(name = "drmpc", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides both the dataset seed and the simulation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write every QP of run 0 to OUT/qp/.
    #[arg(long, global = true)]
    dump_qp: bool,
    /// Write zero solve times so outputs are reproducible byte for byte.
    #[arg(long, global = true)]
    no_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the disturbance dataset.
    GenData {
        /// Defaults to OUT/dataset.csv.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Monte-Carlo closed-loop runs.
    Run {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Satisfaction and runtime over an (epsilon, N_s) grid.
    Sweep {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        sample_sizes: Option<Vec<usize>>,
    },
    /// Summarize the artifacts in OUT.
    Report,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
enum Failure {
    Checks(String),
    Config(String),
    Data(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Checks(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Solver(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Checks(m) | Failure::Config(m) | Failure::Data(m) | Failure::Solver(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e.root() {
            Error::InvalidConfig(_) | Error::InvalidParams(_) | Error::DimensionMismatch(_) => Failure::Config(msg),
            Error::Io { .. } | Error::Schema { .. } | Error::WindowOverrun { .. } | Error::InsufficientTrajectories { .. } | Error::OutOfRange { .. } => Failure::Data(msg),
            _ => Failure::Solver(msg),
        }
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn load_config(g: &Global) -> Res<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.disturbance.seed = s;
        cfg.sim.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.sim.parallelism = Some(t);
    }
    if g.no_timing {
        cfg.sim.timing = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(g: &Global) -> Res<&Path> {
    std::fs::create_dir_all(&g.out).map_err(|e| Failure::Data(format!("cannot create {}: {e}", g.out.display())))?;
    Ok(&g.out)
}

fn save_config(cfg: &RunConfig, out: &Path) -> Res<()> {
    let mut c = cfg.clone();
    c.sim.parallelism = None;
    std::fs::write(out.join("config.json"), c.to_json() + "\n").map_err(|e| Failure::Data(format!("config.json: {e}")))
}

fn load_data(cfg: &RunConfig, g: &Global, path: &Option<PathBuf>) -> Res<DisturbanceDataset> {
    let path = path.clone().unwrap_or_else(|| g.out.join("dataset.csv"));
    let ds = load_dataset(&path)?;
    let need = cfg.sim.n_t + cfg.mpc.horizon;
    if ds.horizon() < need || ds.n_dims() != cfg.disturbance.n_dims {
        return Err(Failure::Data(format!(
            "{}: dataset has horizon {} and {} dims, config needs horizon >= {need} and {} dims",
            path.display(),
            ds.horizon(),
            ds.n_dims(),
            cfg.disturbance.n_dims
        )));
    }
    Ok(ds)
}

fn experiment(cfg: &RunConfig, g: &Global) -> Res<drmpc::harness::Experiment> {
    let mut exp = cfg.build_experiment()?;
    if g.dump_qp {
        let dir = g.out.join("qp");
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
        exp.sim.dump_dir = Some(dir);
    }
    Ok(exp)
}

fn health(s: &McSummary, label: &str) -> Res<()> {
    if s.infeasible_steps > 0 {
        return Err(Failure::Solver(format!("{label}: {} runs hit an unsolved MPC step", s.infeasible_steps)));
    }
    if s.violations > 0 {
        return Err(Failure::Checks(format!("{label}: {} steps exceed the input bound (max |u| = {})", s.violations, s.max_abs_u)));
    }
    Ok(())
}

fn cmd_gen_data(g: &Global, dataset: &Option<PathBuf>) -> Res<()> {
    let cfg = load_config(g)?;
    let out = out_dir(g)?;
    let d = &cfg.disturbance;
    let ds = generate_dataset(&d.kernel, d.n_dims, d.trajectories, cfg.dataset_horizon(), d.seed)?;
    let path = dataset.clone().unwrap_or_else(|| out.join("dataset.csv"));
    save_dataset(&ds, &path)?;
    save_config(&cfg, out)?;
    println!("wrote {} trajectories x {} steps x {} dims (seed {}) to {}", ds.n_traj(), ds.horizon(), ds.n_dims(), d.seed, path.display());
    Ok(())
}

fn cmd_run(g: &Global, dataset: &Option<PathBuf>) -> Res<()> {
    let cfg = load_config(g)?;
    let ds = load_data(&cfg, g, dataset)?;
    let out = out_dir(g)?;
    let exp = experiment(&cfg, g)?;
    let (traces, summary) = monte_carlo(&exp, &ds, cfg.sim.runs, cfg.sim.seed, cfg.threads())?;
    let tdir = out.join("traces");
    std::fs::create_dir_all(&tdir).map_err(|e| Failure::Data(format!("{}: {e}", tdir.display())))?;
    for tr in traces.iter().take(cfg.sim.traces_written) {
        write_trace_csv(tr, &tdir.join(format!("run_{:04}.csv", tr.run)))?;
    }
    write_json(&summary, &out.join("summary.json"))?;
    save_config(&cfg, out)?;
    let tc = &cfg.sweep.table_constraint;
    println!(
        "{} runs, {tc} satisfaction {:.4}, solve {:.2} ms mean / {:.2} ms p95, {} input violations, {} infeasible",
        summary.runs, summary.satisfaction[tc], summary.solve_ms.mean, summary.solve_ms.p95, summary.violations, summary.infeasible_steps
    );
    health(&summary, "run")
}

fn cmd_sweep(g: &Global, dataset: &Option<PathBuf>, epsilons: &Option<Vec<f64>>, sizes: &Option<Vec<usize>>) -> Res<()> {
    let mut cfg = load_config(g)?;
    if let Some(e) = epsilons {
        cfg.sweep.epsilons = e.clone();
    }
    if let Some(s) = sizes {
        cfg.sweep.sample_sizes = s.clone();
    }
    cfg.validate()?;
    let ds = load_data(&cfg, g, dataset)?;
    let out = out_dir(g)?;
    let exp = experiment(&cfg, g)?;
    let sw = &cfg.sweep;
    let table = sweep(&exp, &ds, &sw.epsilons, &sw.sample_sizes, &sw.table_constraint, cfg.sim.runs, cfg.sim.seed, cfg.threads())?;
    write_sweep_csv(&table, &out.join("sweep.csv"))?;
    write_runtime_csv(&table, &out.join("runtime.csv"))?;
    write_json(&table, &out.join("sweep.json"))?;
    save_config(&cfg, out)?;
    print_sweep(&table);
    for (i, c) in table.cells.iter().enumerate() {
        health(c, &format!("cell {i} (eps {}, N_s {})", c.epsilon, c.n_samples))?;
    }
    Ok(())
}

fn print_sweep(t: &SweepTable) {
    println!("worst-case satisfaction of {}", t.table_constraint);
    print!("{:>10}", "epsilon");
    for n in &t.sample_sizes {
        print!("{:>10}", format!("N_s={n}"));
    }
    println!();
    for (ei, e) in t.epsilons.iter().enumerate() {
        print!("{e:>10}");
        for si in 0..t.sample_sizes.len() {
            print!("{:>9.1}%", 100.0 * t.cell(ei, si).satisfaction[&t.table_constraint]);
        }
        println!();
    }
    println!("mean solve time");
    for (si, n) in t.sample_sizes.iter().enumerate() {
        let ms = (0..t.epsilons.len()).map(|ei| t.cell(ei, si).solve_ms.mean).sum::<f64>() / t.epsilons.len() as f64;
        println!("{:>10}{ms:>10.2} ms", format!("N_s={n}"));
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Res<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn cmd_report(g: &Global) -> Res<()> {
    let out = &g.out;
    let cfg: Option<RunConfig> = read_json(&out.join("config.json"))?;
    let summary: Option<McSummary> = read_json(&out.join("summary.json"))?;
    let table: Option<SweepTable> = read_json(&out.join("sweep.json"))?;
    let Some(cfg) = cfg.filter(|_| summary.is_some() || table.is_some()) else {
        return Err(Failure::Data(format!("missing artifacts: {} holds no config.json with summary.json or sweep.json", out.display())));
    };
    let hash = cfg.hash();
    let hashes = summary.iter().map(|s| &s.config_hash).chain(table.iter().map(|t| &t.config_hash));
    for h in hashes {
        if *h != hash {
            return Err(Failure::Data(format!("artifacts in {} come from different configs ({h} vs {hash})", out.display())));
        }
    }
    let tc = &cfg.sweep.table_constraint;
    let threshold = cfg.report.min_satisfaction;
    let mut failing = Vec::new();
    println!("config {hash}");
    if let Some(s) = &summary {
        println!("run: {} runs, eps {}, N_s {}", s.runs, s.epsilon, s.n_samples);
        for (id, v) in &s.satisfaction {
            println!("  {id:>8} {:6.1}%", 100.0 * v);
        }
        println!("  solve {:.2} ms mean, {:.2} ms p95; {} input violations; {} infeasible", s.solve_ms.mean, s.solve_ms.p95, s.violations, s.infeasible_steps);
        if let Some(m) = threshold {
            if s.satisfaction[tc] < m {
                failing.push(format!("run {tc} = {:.4} < {m}", s.satisfaction[tc]));
            }
        }
    }
    if let Some(t) = &table {
        print_sweep(t);
        if let Some(m) = threshold {
            for c in &t.cells {
                let v = c.satisfaction[&t.table_constraint];
                if v < m {
                    failing.push(format!("cell eps={} N_s={} {} = {v:.4} < {m}", c.epsilon, c.n_samples, t.table_constraint));
                }
            }
        }
    }
    if failing.is_empty() {
        println!("PASS");
        Ok(())
    } else {
        for f in &failing {
            println!("FAIL {f}");
        }
        Err(Failure::Checks(failing.join("; ")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let res = match &cli.cmd {
        Command::GenData { dataset } => cmd_gen_data(g, dataset),
        Command::Run { dataset } => cmd_run(g, dataset),
        Command::Sweep { dataset, epsilons, sample_sizes } => cmd_sweep(g, dataset, epsilons, sample_sizes),
        Command::Report => cmd_report(g),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
