//! Baselines, Monte Carlo sweeps and plan files.
//!
//! Trial `t` of a plan uses seed `base_seed + t` for the channel draw, the
//! optimizer's random start and the random baseline (each on its own RNG
//! stream), so every architecture sees the same channels in a given trial.
//! Results are sorted by (architecture, power, elements, trial, algorithm)
//! before they are returned, whatever order the worker pool finished in.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{generate, ChannelRecipe};
use crate::gradient::{
    euclidean_gradient_diag_power, fd_gradient, fd_gradient_block, conj_trace_gradient,
    bilinear_gradient, relative_error, GradientMode,
};
use crate::manifold::{project_unitary_symmetric, random_unitary_symmetric};
use crate::model::{sum_rate, uniform_power_beamformer};
use crate::optimizer::{csv_err, optimize_from, OptimizationTrace, SolverConfig};
use crate::rng::{complex_gaussian_matrix, stream_rng, Stream};
use crate::{
    dbm_to_watts, Architecture, Beamformer, BlockDiagonal, CMatrix, ChannelSet, Error, Problem,
    Result, ScatteringMatrix, SystemDims, C64,
};

/// Starting point of each optimization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    #[default]
    Random,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub architectures: Vec<Architecture>,
    pub p_max_dbm_grid: Vec<f64>,
    pub r_grid: Vec<usize>,
    pub trials: usize,
    pub base_seed: u64,
    /// Template for every channel draw; `dims.elements` is the default `R`.
    pub recipe: ChannelRecipe,
    pub solver: SolverConfig,
    pub init: InitMode,
    /// Also report the random and identity baselines.
    pub baselines: bool,
    /// Worker threads; zero uses the global pool.
    pub threads: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let dims = SystemDims::new(5, 5, 32, 1).expect("static dims");
        Self {
            architectures: vec![
                Architecture::SingleConnected,
                Architecture::GroupConnected { group_size: 2 },
                Architecture::GroupConnected { group_size: 4 },
                Architecture::FullyConnected,
            ],
            p_max_dbm_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            r_grid: vec![8, 16, 32],
            trials: 50,
            base_seed: 0,
            recipe: ChannelRecipe::new(dims, 0),
            solver: SolverConfig::default(),
            init: InitMode::Random,
            baselines: true,
            threads: 0,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::invalid(format!("bad entry '{s}' for '{key}'")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value '{value}' for '{key}'")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentPlan {
    /// Parses flat `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped; unknown keys are errors.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut plan = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("line {}: expected key = value", lineno + 1))
            })?;
            plan.set(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_config_str(&std::fs::read_to_string(path)?)
    }

    /// Sets one configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let pl = &mut self.recipe.pathloss;
        let s = &mut self.solver;
        match key {
            "architectures" => self.architectures = parse_list(key, value)?,
            "p_max_dbm_grid" | "p_max_dbm" => self.p_max_dbm_grid = parse_list(key, value)?,
            "r_grid" => self.r_grid = parse_list(key, value)?,
            "trials" => self.trials = parse_one(key, value)?,
            "base_seed" | "seed" => self.base_seed = parse_one(key, value)?,
            "users" => self.recipe.dims.users = parse_one(key, value)?,
            "antennas" => self.recipe.dims.antennas = parse_one(key, value)?,
            "elements" => self.recipe.dims.elements = parse_one(key, value)?,
            "c0_db" => pl.c0_db = parse_one(key, value)?,
            "d0_m" => pl.d0_m = parse_one(key, value)?,
            "rho" => pl.rho = parse_one(key, value)?,
            "d_m" => pl.d_m = parse_one(key, value)?,
            "n0_dbm" => self.recipe.n0_dbm = parse_one(key, value)?,
            "carrier_ghz" => self.recipe.carrier_ghz = parse_one(key, value)?,
            "user_distances_m" => self.recipe.user_distances_m = parse_list(key, value)?,
            "nu" => s.nu = parse_one(key, value)?,
            "epsilon" => s.epsilon = parse_one(key, value)?,
            "max_iters" => s.max_iters = parse_one(key, value)?,
            "max_armijo" => s.max_armijo = parse_one(key, value)?,
            "armijo_sigma" => s.armijo_sigma = parse_one(key, value)?,
            "alpha_init" => s.alpha_init = parse_one(key, value)?,
            "alpha_shrink" => s.alpha_shrink = parse_one(key, value)?,
            "gradient_mode" => s.gradient_mode = value.parse()?,
            "init" => {
                self.init = match value {
                    "random" => InitMode::Random,
                    "identity" => InitMode::Identity,
                    other => return Err(Error::invalid(format!("unknown init '{other}'"))),
                }
            }
            "baselines" => self.baselines = parse_one(key, value)?,
            "threads" => self.threads = parse_one(key, value)?,
            other => return Err(Error::invalid(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// The plan as `key = value` lines accepted by [`Self::from_config_str`].
    pub fn to_config_string(&self) -> String {
        let d = &self.recipe.dims;
        let pl = &self.recipe.pathloss;
        let s = &self.solver;
        let archs: Vec<String> = self.architectures.iter().map(Architecture::flag).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("architectures", archs.join(","));
        kv("p_max_dbm_grid", join(&self.p_max_dbm_grid));
        kv("r_grid", join(&self.r_grid));
        kv("trials", self.trials.to_string());
        kv("base_seed", self.base_seed.to_string());
        kv("users", d.users.to_string());
        kv("antennas", d.antennas.to_string());
        kv("elements", d.elements.to_string());
        kv("c0_db", pl.c0_db.to_string());
        kv("d0_m", pl.d0_m.to_string());
        kv("rho", pl.rho.to_string());
        kv("d_m", pl.d_m.to_string());
        kv("n0_dbm", self.recipe.n0_dbm.to_string());
        kv("carrier_ghz", self.recipe.carrier_ghz.to_string());
        kv("user_distances_m", join(&self.recipe.user_distances_m));
        kv("nu", s.nu.to_string());
        kv("epsilon", s.epsilon.to_string());
        kv("max_iters", s.max_iters.to_string());
        kv("max_armijo", s.max_armijo.to_string());
        kv("armijo_sigma", s.armijo_sigma.to_string());
        kv("alpha_init", s.alpha_init.to_string());
        kv("alpha_shrink", s.alpha_shrink.to_string());
        kv("gradient_mode", s.gradient_mode.to_string());
        kv(
            "init",
            match self.init {
                InitMode::Random => "random",
                InitMode::Identity => "identity",
            }
            .to_string(),
        );
        kv("baselines", self.baselines.to_string());
        kv("threads", self.threads.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.recipe.dims;
        SystemDims::new(d.users, d.antennas, d.elements, 1)?;
        if self.architectures.is_empty() {
            return Err(Error::InvalidPlan("no architectures".into()));
        }
        if self.p_max_dbm_grid.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidPlan("power grid must be finite".into()));
        }
        self.solver.validate()
    }

    /// Architecture/element pairs whose group size does not divide `R`.
    pub fn invalid_pairs(&self, r_values: &[usize]) -> Vec<(Architecture, usize)> {
        let mut bad = Vec::new();
        for &arch in &self.architectures {
            for &r in r_values {
                if r == 0 || arch.groups(r).is_err() {
                    bad.push((arch, r));
                }
            }
        }
        bad
    }

    fn check_pairs(&self, r_values: &[usize]) -> Result<()> {
        let bad = self.invalid_pairs(r_values);
        if bad.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = bad.iter().map(|(a, r)| format!("{} with R={r}", a.label())).collect();
        Err(Error::InvalidPlan(format!(
            "group size does not divide element count: {}",
            list.join(", ")
        )))
    }
}

/// One result line: an algorithm on one architecture, grid point and trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub algorithm: String,
    pub architecture: String,
    pub p_max_dbm: f64,
    #[serde(rename = "R")]
    pub elements: usize,
    pub trial: usize,
    pub seed: u64,
    pub sum_rate: f64,
    pub iterations: usize,
    pub wall_ms: f64,
    pub termination: String,
}

pub const ALGORITHM_CGA: &str = "cga";
pub const ALGORITHM_RANDOM: &str = "random";
pub const ALGORITHM_IDENTITY: &str = "identity";

/// Random feasible scattering matrix (baseline stream) and its sum-rate.
pub fn baseline_random(
    channels: &ChannelSet,
    bf: &Beamformer,
    dims: &SystemDims,
    seed: u64,
) -> Result<(ScatteringMatrix, f64)> {
    let mut rng = stream_rng(seed, Stream::Baseline);
    let n = dims.group_size();
    let mut blocks = Vec::with_capacity(dims.groups);
    for _ in 0..dims.groups {
        blocks.push(project_unitary_symmetric(&complex_gaussian_matrix(&mut rng, n, n, 1.0))?);
    }
    let theta = ScatteringMatrix::from_blocks(&blocks)?;
    let rate = sum_rate(channels, &theta, bf)?;
    Ok((theta, rate))
}

/// `Θ = I` and its sum-rate.
pub fn baseline_identity(
    channels: &ChannelSet,
    bf: &Beamformer,
    dims: &SystemDims,
) -> Result<(ScatteringMatrix, f64)> {
    let theta = ScatteringMatrix::identity(dims);
    let rate = sum_rate(channels, &theta, bf)?;
    Ok((theta, rate))
}

/// Channels and uniform-power beamformer of one trial.
pub fn trial_instance(
    plan: &ExperimentPlan,
    elements: usize,
    p_max_dbm: f64,
    trial: usize,
) -> Result<(ChannelSet, Beamformer, u64)> {
    let seed = plan.base_seed.wrapping_add(trial as u64);
    let mut recipe = plan.recipe.with_seed(seed);
    recipe.dims = SystemDims::new(recipe.dims.users, recipe.dims.antennas, elements, 1)?;
    let channels = generate(&recipe)?;
    let bf = uniform_power_beamformer(&recipe.dims, dbm_to_watts(p_max_dbm))?;
    Ok((channels, bf, seed))
}

/// Optimizes one trial of one architecture.
pub fn run_trial(
    plan: &ExperimentPlan,
    arch: Architecture,
    elements: usize,
    p_max_dbm: f64,
    trial: usize,
) -> Result<(ScatteringMatrix, OptimizationTrace)> {
    let (channels, bf, seed) = trial_instance(plan, elements, p_max_dbm, trial)?;
    let dims = channels.dims(arch.groups(elements)?)?;
    let init = match plan.init {
        InitMode::Random => random_unitary_symmetric(&dims, seed),
        InitMode::Identity => ScatteringMatrix::identity(&dims),
    };
    let config = SolverConfig { seed, ..plan.solver.clone() };
    optimize_from(&channels, &bf, init, &config)
}

#[derive(Debug, Clone, Copy)]
struct Job {
    arch_idx: usize,
    p_idx: usize,
    elements: usize,
    trial: usize,
}

fn run_job(plan: &ExperimentPlan, job: Job) -> Vec<ResultRow> {
    let arch = plan.architectures[job.arch_idx];
    let p = plan.p_max_dbm_grid[job.p_idx];
    let seed = plan.base_seed.wrapping_add(job.trial as u64);
    let row = |algorithm: &str, sum_rate: f64, iterations: usize, wall_ms: f64, term: String| ResultRow {
        algorithm: algorithm.to_string(),
        architecture: arch.label(),
        p_max_dbm: p,
        elements: job.elements,
        trial: job.trial,
        seed,
        sum_rate,
        iterations,
        wall_ms,
        termination: term,
    };
    let failed = |algorithm: &str, e: Error| row(algorithm, 0.0, 0, 0.0, format!("failed: {e}"));

    let mut rows = Vec::with_capacity(3);
    let start = Instant::now();
    match run_trial(plan, arch, job.elements, p, job.trial) {
        Ok((_, trace)) => rows.push(row(
            ALGORITHM_CGA,
            trace.final_sum_rate,
            trace.iterations(),
            start.elapsed().as_secs_f64() * 1e3,
            trace.termination.to_string(),
        )),
        Err(e) => rows.push(failed(ALGORITHM_CGA, e)),
    }
    if plan.baselines {
        let baselines = trial_instance(plan, job.elements, p, job.trial).and_then(|(ch, bf, _)| {
            let dims = ch.dims(arch.groups(job.elements)?)?;
            let random = baseline_random(&ch, &bf, &dims, seed)?.1;
            let identity = baseline_identity(&ch, &bf, &dims)?.1;
            Ok((random, identity))
        });
        match baselines {
            Ok((random, identity)) => {
                rows.push(row(ALGORITHM_RANDOM, random, 0, 0.0, "none".into()));
                rows.push(row(ALGORITHM_IDENTITY, identity, 0, 0.0, "none".into()));
            }
            Err(e) => {
                let msg = e.to_string();
                rows.push(failed(ALGORITHM_RANDOM, Error::InvalidInput(msg.clone())));
                rows.push(failed(ALGORITHM_IDENTITY, Error::InvalidInput(msg)));
            }
        }
    }
    rows
}

fn algorithm_rank(name: &str) -> usize {
    match name {
        ALGORITHM_CGA => 0,
        ALGORITHM_RANDOM => 1,
        _ => 2,
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn run_grid(plan: &ExperimentPlan, p_indices: &[usize], r_values: &[usize]) -> Result<Vec<ResultRow>> {
    plan.validate()?;
    plan.check_pairs(r_values)?;
    let mut jobs = Vec::new();
    for arch_idx in 0..plan.architectures.len() {
        for &p_idx in p_indices {
            for &elements in r_values {
                for trial in 0..plan.trials {
                    jobs.push(Job { arch_idx, p_idx, elements, trial });
                }
            }
        }
    }
    let mut tagged: Vec<(Job, Vec<ResultRow>)> =
        in_pool(plan.threads, || jobs.par_iter().map(|&j| (j, run_job(plan, j))).collect())?;
    tagged.sort_by_key(|(j, _)| (j.arch_idx, j.p_idx, j.elements, j.trial));
    let mut rows = Vec::new();
    for (_, mut r) in tagged {
        r.sort_by_key(|row| algorithm_rank(&row.algorithm));
        rows.extend(r);
    }
    Ok(rows)
}

/// Every architecture × power × trial at the recipe's element count.
pub fn run_power_sweep(plan: &ExperimentPlan) -> Result<Vec<ResultRow>> {
    let p_indices: Vec<usize> = (0..plan.p_max_dbm_grid.len()).collect();
    run_grid(plan, &p_indices, &[plan.recipe.dims.elements])
}

/// Every architecture × element count × power × trial.
pub fn run_element_sweep(plan: &ExperimentPlan) -> Result<Vec<ResultRow>> {
    let p_indices: Vec<usize> = (0..plan.p_max_dbm_grid.len()).collect();
    run_grid(plan, &p_indices, &plan.r_grid)
}

/// Empirical CDF of the optimized sum-rate of one architecture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfSeries {
    pub architecture: String,
    /// `(sum_rate, F(sum_rate))`, sorted by rate.
    pub points: Vec<(f64, f64)>,
}

/// Empirical CDF points from raw samples.
pub fn empirical_cdf(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, x)| (x, (i + 1) as f64 / n))
        .collect()
}

/// Optimized sum-rates at one power, one CDF per architecture. Fewer than 20
/// trials is allowed but logged.
pub fn run_cdf(plan: &ExperimentPlan, p_max_dbm: f64) -> Result<(Vec<CdfSeries>, Vec<ResultRow>)> {
    if plan.trials < 20 {
        warn!("cdf with only {} trials", plan.trials);
    }
    let mut single = plan.clone();
    single.p_max_dbm_grid = vec![p_max_dbm];
    let rows = run_grid(&single, &[0], &[plan.recipe.dims.elements])?;
    let series = plan
        .architectures
        .iter()
        .map(|arch| {
            let label = arch.label();
            let rates: Vec<f64> = rows
                .iter()
                .filter(|r| r.algorithm == ALGORITHM_CGA && r.architecture == label)
                .map(|r| r.sum_rate)
                .collect();
            CdfSeries { architecture: label, points: empirical_cdf(&rates) }
        })
        .collect();
    Ok((series, rows))
}

/// Single-seed runs of every architecture at one power, keeping the traces.
pub fn run_convergence(
    plan: &ExperimentPlan,
    p_max_dbm: f64,
    trial: usize,
) -> Result<Vec<(Architecture, ScatteringMatrix, OptimizationTrace)>> {
    plan.validate()?;
    let r = plan.recipe.dims.elements;
    plan.check_pairs(&[r])?;
    let results: Vec<Result<_>> = in_pool(plan.threads, || {
        plan.architectures
            .par_iter()
            .map(|&arch| run_trial(plan, arch, r, p_max_dbm, trial).map(|(t, tr)| (arch, t, tr)))
            .collect()
    })?;
    results.into_iter().collect()
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cdf_csv<W: Write>(series: &[CdfSeries], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["architecture", "sum_rate", "cdf"]).map_err(csv_err)?;
    for s in series {
        for (x, f) in &s.points {
            w.write_record([s.architecture.clone(), x.to_string(), f.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean optimized sum-rate per (architecture, power, R), in plan order.
pub fn mean_rates(rows: &[ResultRow], algorithm: &str) -> Vec<(String, f64, usize, f64)> {
    let mut groups: Vec<((String, f64, usize), Vec<f64>)> = Vec::new();
    for r in rows.iter().filter(|r| r.algorithm == algorithm) {
        let key = (r.architecture.clone(), r.p_max_dbm, r.elements);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.sum_rate),
            None => groups.push((key, vec![r.sum_rate])),
        }
    }
    groups
        .into_iter()
        .map(|((a, p, e), v)| (a, p, e, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

/// Paired-difference summary of `a − b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedSummary {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    /// One-sided 95% lower confidence bound on the mean difference.
    pub lower_95: f64,
}

/// Student-t lower bound on the mean of paired differences.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<PairedSummary> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("paired samples need equal lengths of at least 2"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std_dev = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::invalid(e.to_string()))?
        .inverse_cdf(0.95);
    Ok(PairedSummary { n: d.len(), mean, std_dev, lower_95: mean - t * std_dev / n.sqrt() })
}

/// Optimized sum-rates of one architecture at one grid point, by trial.
pub fn rates_by_trial(rows: &[ResultRow], algorithm: &str, arch: &str, p_max_dbm: f64, elements: usize) -> Vec<f64> {
    let mut by_trial: BTreeMap<usize, f64> = BTreeMap::new();
    for r in rows {
        if r.algorithm == algorithm && r.architecture == arch && r.p_max_dbm == p_max_dbm && r.elements == elements {
            by_trial.insert(r.trial, r.sum_rate);
        }
    }
    by_trial.into_values().collect()
}

/// One finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub check: String,
    pub elements: usize,
    pub groups: usize,
    pub users: usize,
    pub nu: f64,
    pub seed: u64,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }

    pub fn max_error(&self, check: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.check == check)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.entries {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Problem size of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckCase {
    pub users: usize,
    pub antennas: usize,
    pub elements: usize,
    pub groups: usize,
}

/// Unit-scale random instance for gradient checks: unit-variance channels,
/// `N0 = 0.5`, a random point with unitary (not symmetric) blocks, and a
/// random beamformer with `‖V‖_F² = 2`.
pub fn grad_check_instance(case: GradCheckCase, seed: u64) -> Result<(ChannelSet, ScatteringMatrix, Beamformer)> {
    let mut rng = stream_rng(seed, Stream::Channel);
    let h_tx = complex_gaussian_matrix(&mut rng, case.elements, case.antennas, 1.0);
    let h_rx = complex_gaussian_matrix(&mut rng, case.users, case.elements, 1.0);
    let channels = ChannelSet::new(h_tx, h_rx, 0.5)?;
    let n = SystemDims::new(case.users, case.antennas, case.elements, case.groups)?.group_size();
    let blocks: Vec<CMatrix> = (0..case.groups)
        .map(|_| crate::manifold::project_unitary(&complex_gaussian_matrix(&mut rng, n, n, 1.0)))
        .collect::<Result<_>>()?;
    let theta = ScatteringMatrix::from_blocks(&blocks)?;
    let mut v = complex_gaussian_matrix(&mut rng, case.antennas, case.users, 1.0);
    v *= C64::new((2.0 / v.norm_squared()).sqrt(), 0.0);
    let bf = Beamformer::new(v, 2.0 * (1.0 + 1e-12))?;
    Ok((channels, theta, bf))
}

pub const FD_STEP: f64 = 1e-6;

/// Closed-form gradients against central differences, for both modes, the
/// two matrix identities and the diagonal-power specialization.
pub fn run_grad_check(cases: &[GradCheckCase], seeds: &[u64], nus: &[f64]) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for &case in cases {
        if case.elements > 16 {
            return Err(Error::invalid("gradient checks are limited to R <= 16"));
        }
        for &seed in seeds {
            let (channels, theta, bf) = grad_check_instance(case, seed)?;
            let problem = Problem::new(&channels, &bf, theta.group_size())?;
            let entry = |check: &str, nu: f64, rel_error: f64, tolerance: f64| GradCheckEntry {
                check: check.to_string(),
                elements: case.elements,
                groups: case.groups,
                users: case.users,
                nu,
                seed,
                rel_error,
                tolerance,
            };
            for &nu in nus {
                let exact = problem.gradient(theta.blocks(), nu, GradientMode::ExactCoupled);
                let fd = fd_gradient(|t| problem.objective(t, nu), theta.blocks(), FD_STEP);
                let err = exact.add_scaled(&fd, -1.0).norm() / fd.norm().max(1e-12);
                report.entries.push(entry("exact_coupled", nu, err, 1e-6));

                let groupwise = problem.gradient(theta.blocks(), nu, GradientMode::Groupwise);
                let mut worst: f64 = 0.0;
                for g in 0..problem.groups() {
                    let fd = fd_gradient_block(|t| problem.group_objective(t, g, nu), theta.blocks(), g, FD_STEP);
                    worst = worst.max(relative_error(&groupwise.block(g).into_owned(), &fd));
                }
                report.entries.push(entry("groupwise", nu, worst, 1e-6));
            }
            report.entries.push(entry("conj_trace", 0.0, conj_trace_check(case.users, seed), 1e-7));
            report.entries.push(entry("bilinear", 0.0, bilinear_check(case.users, seed), 1e-7));
            if case.users == case.antennas {
                let err = diag_power_check(&channels, &theta, seed, 1.0)?;
                report.entries.push(entry("diag_power", 1.0, err, 1e-12));
            }
        }
    }
    Ok(report)
}

fn wrap(m: &CMatrix) -> BlockDiagonal {
    BlockDiagonal::from_blocks(std::slice::from_ref(m)).expect("square block")
}

/// Relative FD error of `∇Tr{A*A} = 2A^T` on a random `n×n` matrix.
pub fn conj_trace_check(n: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, Stream::Baseline);
    let a = complex_gaussian_matrix(&mut rng, n, n, 1.0);
    let fd = fd_gradient(
        |t| (t.block(0).map(|z| z.conj()) * t.block(0)).trace().re,
        &wrap(&a),
        FD_STEP,
    );
    relative_error(&fd.block(0).into_owned(), &conj_trace_gradient(&a))
}

/// Relative FD error of `∇|a^T B c|² = 2d·conj(a)c^H` on random data.
pub fn bilinear_check(k: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, Stream::Baseline);
    let a = complex_gaussian_matrix(&mut rng, k, 1, 1.0).column(0).into_owned();
    let b = complex_gaussian_matrix(&mut rng, k, k, 1.0);
    let c = complex_gaussian_matrix(&mut rng, k, 1, 1.0).column(0).into_owned();
    let fd = fd_gradient(
        |t| (a.transpose() * t.block(0) * &c)[(0, 0)].norm_sqr(),
        &wrap(&b),
        FD_STEP,
    );
    relative_error(&fd.block(0).into_owned(), &bilinear_gradient(&a, &b, &c))
}

/// Relative gap between the diagonal-power and general gradients for random
/// powers; requires `K = N`.
pub fn diag_power_check(channels: &ChannelSet, theta: &ScatteringMatrix, seed: u64, nu: f64) -> Result<f64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, Stream::Baseline);
    let powers: Vec<f64> = (0..channels.users()).map(|_| rng.random_range(0.0..1.0)).collect();
    let v = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        powers.len(),
        powers.iter().map(|p| C64::new(p.sqrt(), 0.0)),
    ));
    let total: f64 = powers.iter().sum();
    let bf = Beamformer::new(v, total * (1.0 + 1e-12))?;
    let general = Problem::new(channels, &bf, theta.group_size())?.gradient(theta.blocks(), nu, GradientMode::Groupwise);
    let diag = euclidean_gradient_diag_power(channels, theta, &powers, nu)?;
    Ok(diag.add_scaled(&general, -1.0).norm() / general.norm().max(1e-300))
}
