//! Disturbance datasets: correlated Gaussian-process trajectories, the known
//! (mean) disturbance profile, and scenario windows cut from stored data.
//!
//! Sampling is reproducible bit-for-bit: the random stream is ChaCha20
//! (`rand_chacha::ChaCha20Rng::seed_from_u64`) and standard normals come from
//! the Ziggurat sampler in `rand_distr::StandardNormal`. For every trajectory
//! and every dimension, in that order, `horizon` standard normals are drawn
//! and multiplied by the lower Cholesky factor of the temporal covariance.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stationary temporal kernel `nugget + scale * exp(-(i-j)^2 / length_sq)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpKernelParams {
    pub nugget: f64,
    pub scale: f64,
    pub length_sq: f64,
}

impl Default for GpKernelParams {
    fn default() -> Self {
        Self { nugget: 0.1, scale: 2.0, length_sq: 60.0 }
    }
}

impl GpKernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nugget > 0.0 && self.scale >= 0.0 && self.length_sq > 0.0) {
            return Err(Error::InvalidParams(format!(
                "kernel needs nugget > 0, scale >= 0, length_sq > 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Temporal covariance matrix over `length` consecutive steps.
pub fn gaussian_kernel_covariance(params: &GpKernelParams, length: usize) -> DMatrix<f64> {
    let mut cov = DMatrix::zeros(length, length);
    for i in 0..length {
        for j in 0..=i {
            let d = i as f64 - j as f64;
            let v = params.nugget + params.scale * (-(d * d) / params.length_sq).exp();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Lower Cholesky factor of a covariance matrix.
///
/// Smooth kernels such as the squared exponential are numerically singular
/// beyond a few dozen grid points, so a failed factorization is retried with
/// diagonal jitter `10^-12 .. 10^-6` times the largest diagonal entry. An
/// exactly zero covariance yields a zero factor.
pub fn cholesky_lower(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::DimensionMismatch(format!("covariance is {}x{}", n, cov.ncols())));
    }
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let diag_max = cov.diagonal().max();
    let mut first_err = match cholesky_strict(cov) {
        Ok(l) => return Ok(l),
        Err(e) => e,
    };
    if diag_max > 0.0 {
        let mut jitter = 1e-12 * diag_max;
        while jitter <= 1e-6 * diag_max {
            let mut shifted = cov.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            match cholesky_strict(&shifted) {
                Ok(l) => return Ok(l),
                Err(e) => first_err = e,
            }
            jitter *= 10.0;
        }
    }
    Err(first_err)
}

fn cholesky_strict(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = cov[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::CholeskyFailure { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = cov[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// How the dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n_dims: usize,
    pub n_traj: usize,
    pub horizon: usize,
    /// `None` for externally supplied data.
    pub seed: Option<u64>,
    /// `None` for externally supplied data.
    pub kernel: Option<GpKernelParams>,
}

/// Stored disturbance trajectories, laid out `[traj][step][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceDataset {
    n_dims: usize,
    n_traj: usize,
    horizon: usize,
    data: Vec<f64>,
    pub meta: DatasetMeta,
}

impl DisturbanceDataset {
    pub fn new(n_traj: usize, horizon: usize, n_dims: usize, data: Vec<f64>, meta: DatasetMeta) -> Result<Self> {
        if n_traj == 0 || horizon == 0 || n_dims == 0 {
            return Err(Error::InvalidParams(format!(
                "dataset needs n_traj, horizon, n_dims >= 1 (got {n_traj}, {horizon}, {n_dims})"
            )));
        }
        if data.len() != n_traj * horizon * n_dims {
            return Err(Error::DimensionMismatch(format!(
                "dataset buffer has {} values, expected {}",
                data.len(),
                n_traj * horizon * n_dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("dataset contains non-finite values".into()));
        }
        Ok(Self { n_dims, n_traj, horizon, data, meta })
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn n_traj(&self) -> usize {
        self.n_traj
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sample(&self, traj: usize, step: usize) -> &[f64] {
        let off = (traj * self.horizon + step) * self.n_dims;
        &self.data[off..off + self.n_dims]
    }

    /// One full trajectory as `horizon` vectors.
    pub fn trajectory(&self, traj: usize) -> Vec<DVector<f64>> {
        (0..self.horizon).map(|t| DVector::from_column_slice(self.sample(traj, t))).collect()
    }
}

/// Draws `count` trajectories whose every component series is an independent
/// `N(0, cov)` sample.
pub fn sample_trajectories(cov: &DMatrix<f64>, n_dims: usize, count: usize, seed: u64) -> Result<DisturbanceDataset> {
    let factor = cholesky_lower(cov)?;
    let data = sample_with_factor(&factor, n_dims, count, seed);
    let meta = DatasetMeta { n_dims, n_traj: count, horizon: cov.nrows(), seed: Some(seed), kernel: None };
    DisturbanceDataset::new(count, cov.nrows(), n_dims, data, meta)
}

/// Same stream as [`sample_trajectories`] but with a precomputed factor.
pub fn sample_with_factor(factor: &DMatrix<f64>, n_dims: usize, count: usize, seed: u64) -> Vec<f64> {
    let horizon = factor.nrows();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = vec![0.0; count * horizon * n_dims];
    let mut z = vec![0.0; horizon];
    for j in 0..count {
        for d in 0..n_dims {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for t in 0..horizon {
                let mut acc = 0.0;
                for (k, zk) in z.iter().enumerate().take(t + 1) {
                    acc += factor[(t, k)] * zk;
                }
                data[(j * horizon + t) * n_dims + d] = acc;
            }
        }
    }
    data
}

/// Generates a dataset from the kernel, recording the generator in the metadata.
pub fn generate_dataset(params: &GpKernelParams, n_dims: usize, count: usize, horizon: usize, seed: u64) -> Result<DisturbanceDataset> {
    params.validate()?;
    let cov = gaussian_kernel_covariance(params, horizon);
    let mut ds = sample_trajectories(&cov, n_dims, count, seed)?;
    ds.meta.kernel = Some(*params);
    Ok(ds)
}

/// Known (mean) disturbance `w̄(k) = injection * output(k)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileOutput {
    Sinusoidal { amplitude: f64, phase: f64, rate: f64, offset: f64 },
    Constant(DVector<f64>),
    Tabulated(Vec<DVector<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnownDisturbanceProfile {
    pub output: ProfileOutput,
    /// Maps the profile output to a state disturbance, `n x d`.
    pub injection: DMatrix<f64>,
    /// Number of steps the profile is declared over.
    pub horizon: usize,
}

impl KnownDisturbanceProfile {
    pub fn new(output: ProfileOutput, injection: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let d = match &output {
            ProfileOutput::Sinusoidal { rate, .. } => {
                if *rate == 0.0 {
                    return Err(Error::InvalidParams("sinusoid rate must be nonzero".into()));
                }
                1
            }
            ProfileOutput::Constant(c) => c.len(),
            ProfileOutput::Tabulated(series) => {
                if series.len() < horizon {
                    return Err(Error::InvalidParams(format!(
                        "tabulated profile has {} entries, horizon is {horizon}",
                        series.len()
                    )));
                }
                let d = series.first().map_or(0, |v| v.len());
                if series.iter().any(|v| v.len() != d) {
                    return Err(Error::DimensionMismatch("tabulated profile rows differ in length".into()));
                }
                d
            }
        };
        if injection.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "injection has {} columns, profile output has {d}",
                injection.ncols()
            )));
        }
        Ok(Self { output, injection, horizon })
    }

    pub fn output_at(&self, k: usize) -> DVector<f64> {
        match &self.output {
            ProfileOutput::Sinusoidal { amplitude, phase, rate, offset } => {
                DVector::from_element(1, amplitude * ((k as f64 + phase) / rate).sin() + offset)
            }
            ProfileOutput::Constant(c) => c.clone(),
            ProfileOutput::Tabulated(series) => series[k].clone(),
        }
    }

    /// Componentwise bounds of the profile output over the declared horizon.
    pub fn output_box(&self) -> (DVector<f64>, DVector<f64>) {
        let first = self.output_at(0);
        let mut lo = first.clone();
        let mut hi = first;
        for k in 1..self.horizon {
            let o = self.output_at(k);
            lo = lo.inf(&o);
            hi = hi.sup(&o);
        }
        (lo, hi)
    }
}

pub fn known_disturbance_at(profile: &KnownDisturbanceProfile, k: usize) -> Result<DVector<f64>> {
    if k >= profile.horizon {
        return Err(Error::OutOfRange { k, horizon: profile.horizon });
    }
    Ok(&profile.injection * profile.output_at(k))
}

/// Window of `length` steps for `n_samples` trajectories, `[sample][step][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDisturbances {
    pub n_samples: usize,
    pub length: usize,
    pub base_time: usize,
    pub n_dims: usize,
    pub values: Vec<f64>,
}

impl ScenarioDisturbances {
    pub fn zeros(n_samples: usize, length: usize, n_dims: usize) -> Self {
        Self { n_samples, length, base_time: 0, n_dims, values: vec![0.0; n_samples * length * n_dims] }
    }

    pub fn get(&self, j: usize, t: usize) -> &[f64] {
        let off = (j * self.length + t) * self.n_dims;
        &self.values[off..off + self.n_dims]
    }

    pub fn get_mut(&mut self, j: usize, t: usize) -> &mut [f64] {
        let off = (j * self.length + t) * self.n_dims;
        &mut self.values[off..off + self.n_dims]
    }

    /// Applies a linear map to every sample (e.g. a noise injection matrix).
    pub fn mapped(&self, map: &DMatrix<f64>) -> Result<Self> {
        if map.ncols() != self.n_dims {
            return Err(Error::DimensionMismatch(format!(
                "map has {} columns, scenarios have {} dims",
                map.ncols(),
                self.n_dims
            )));
        }
        let out_dims = map.nrows();
        let mut values = Vec::with_capacity(self.n_samples * self.length * out_dims);
        for j in 0..self.n_samples {
            for t in 0..self.length {
                let w = map * DVector::from_column_slice(self.get(j, t));
                values.extend(w.iter());
            }
        }
        Ok(Self { n_samples: self.n_samples, length: self.length, base_time: self.base_time, n_dims: out_dims, values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    First,
    SeededRandom(u64),
}

impl Selector {
    /// Trajectory indices picked for `n_samples` out of `n_traj`.
    pub fn indices(&self, n_traj: usize, n_samples: usize) -> Vec<usize> {
        match *self {
            Selector::First => (0..n_samples).collect(),
            Selector::SeededRandom(seed) => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rand::seq::index::sample(&mut rng, n_traj, n_samples).into_vec()
            }
        }
    }
}

pub fn extract_scenarios(ds: &DisturbanceDataset, k: usize, length: usize, n_samples: usize, selector: Selector) -> Result<ScenarioDisturbances> {
    if n_samples > ds.n_traj {
        return Err(Error::InsufficientTrajectories { requested: n_samples, available: ds.n_traj });
    }
    if k + length > ds.horizon {
        return Err(Error::WindowOverrun { start: k, end: k + length, horizon: ds.horizon });
    }
    let mut values = Vec::with_capacity(n_samples * length * ds.n_dims);
    for j in selector.indices(ds.n_traj, n_samples) {
        let start = (j * ds.horizon + k) * ds.n_dims;
        values.extend_from_slice(&ds.data[start..start + length * ds.n_dims]);
    }
    Ok(ScenarioDisturbances { n_samples, length, base_time: k, n_dims: ds.n_dims, values })
}

/// `foo/bar.csv` -> `foo/bar.meta.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

/// Writes `traj,step,w0..` CSV plus the JSON sidecar. Reals use the shortest
/// representation that parses back to the same bits.
pub fn save_dataset(ds: &DisturbanceDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["traj".to_string(), "step".to_string()];
    header.extend((0..ds.n_dims).map(|d| format!("w{d}")));
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    let mut row: Vec<String> = Vec::with_capacity(2 + ds.n_dims);
    for j in 0..ds.n_traj {
        for t in 0..ds.horizon {
            row.clear();
            row.push(j.to_string());
            row.push(t.to_string());
            row.extend(ds.sample(j, t).iter().map(|v| format!("{v:?}")));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = DatasetMeta { n_dims: ds.n_dims, n_traj: ds.n_traj, horizon: ds.horizon, ..ds.meta.clone() };
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))
}

pub fn load_dataset(path: &Path) -> Result<DisturbanceDataset> {
    let mp = meta_path(path);
    let meta_text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::schema(&mp, e.to_string()))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr.headers().map_err(|e| Error::schema(path, e.to_string()))?.clone();
    let expected_cols = 2 + meta.n_dims;
    if header.len() != expected_cols
        || &header[0] != "traj"
        || &header[1] != "step"
        || (0..meta.n_dims).any(|d| header[2 + d] != format!("w{d}"))
    {
        return Err(Error::schema(path, format!("bad header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut data = Vec::with_capacity(meta.n_traj * meta.horizon * meta.n_dims);
    let mut expected = (0usize, 0usize);
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::schema(path, e.to_string()))?;
        let row = line + 2;
        if rec.len() != expected_cols {
            return Err(Error::schema(path, format!("row {row}: {} columns, expected {expected_cols}", rec.len())));
        }
        let parse_idx = |s: &str| s.parse::<usize>().map_err(|_| Error::schema(path, format!("row {row}: bad index {s:?}")));
        let idx = (parse_idx(&rec[0])?, parse_idx(&rec[1])?);
        if idx != expected {
            return Err(Error::schema(path, format!("row {row}: expected (traj, step) = {expected:?}, found {idx:?}")));
        }
        for field in rec.iter().skip(2) {
            let v: f64 = field.parse().map_err(|_| Error::schema(path, format!("row {row}: bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::schema(path, format!("row {row}: non-finite value {field:?}")));
            }
            data.push(v);
        }
        expected.1 += 1;
        if expected.1 == meta.horizon {
            expected = (expected.0 + 1, 0);
        }
    }
    if expected != (meta.n_traj, 0) {
        return Err(Error::schema(path, format!(
            "file holds {} rows, metadata declares {} trajectories x {} steps",
            data.len() / meta.n_dims.max(1),
            meta.n_traj,
            meta.horizon
        )));
    }
    DisturbanceDataset::new(meta.n_traj, meta.horizon, meta.n_dims, data, meta.clone())
}
