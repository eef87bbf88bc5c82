use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bdris::channel::{save_channels, save_scattering};
use bdris::experiments::{
    mean_rates, run_cdf, run_convergence, run_element_sweep, run_grad_check, run_power_sweep,
    run_trial, trial_instance, write_cdf_csv, write_results_csv, ExperimentPlan, GradCheckCase,
    ResultRow, ALGORITHM_CGA,
};
use bdris::Architecture;
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "bdris", version, about = "Reciprocal BD-RIS scattering matrix experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize one instance; writes the trace, channels and final matrix.
    Optimize(Common),
    /// Sum-rate against transmit power for every architecture.
    SweepPower(Common),
    /// Sum-rate against the number of elements.
    SweepElements(Common),
    /// Empirical CDF of the sum-rate at one power.
    Cdf(Common),
    /// Closed-form gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Single-seed convergence traces of every architecture.
    Convergence(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Plan file with key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architectures, comma separated: sc, gc:<group_size>, fc.
    #[arg(long, value_delimiter = ',')]
    arch: Vec<Architecture>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Transmit power grid in dBm, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pmax_dbm: Vec<f64>,
    /// Element counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    elements: Vec<usize>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per configuration.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Element count, at most 16.
    #[arg(long, default_value_t = 8)]
    elements: usize,
    #[arg(long, default_value_t = 3)]
    users: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Utc::now();
    match cli.command {
        Command::Optimize(c) => optimize(&c, started),
        Command::SweepPower(c) => {
            let plan = build_plan(&c)?;
            let rows = run_power_sweep(&plan)?;
            finish_sweep(&c, "sweep-power", &plan, &rows, started)
        }
        Command::SweepElements(c) => {
            let mut plan = build_plan(&c)?;
            if !c.elements.is_empty() {
                plan.r_grid = c.elements.clone();
            }
            let rows = run_element_sweep(&plan)?;
            finish_sweep(&c, "sweep-elements", &plan, &rows, started)
        }
        Command::Cdf(c) => {
            let plan = build_plan(&c)?;
            let p = single_power(&plan)?;
            let (series, rows) = run_cdf(&plan, p)?;
            fs::create_dir_all(&c.out_dir)?;
            write_cdf_csv(&series, create(&c.out_dir.join("cdf.csv"))?)?;
            finish_sweep(&c, "cdf", &plan, &rows, started)
        }
        Command::GradCheck(g) => grad_check(&g, started),
        Command::Convergence(c) => convergence(&c, started),
    }
}

fn build_plan(c: &Common) -> Result<ExperimentPlan> {
    let mut plan = match &c.config {
        Some(path) => ExperimentPlan::load(path)
            .with_context(|| format!("reading plan {}", path.display()))?,
        None => ExperimentPlan::default(),
    };
    if !c.arch.is_empty() {
        plan.architectures = c.arch.clone();
    }
    if let Some(seed) = c.seed {
        plan.base_seed = seed;
    }
    if let Some(trials) = c.trials {
        plan.trials = trials;
    }
    if !c.pmax_dbm.is_empty() {
        plan.p_max_dbm_grid = c.pmax_dbm.clone();
    }
    if let [r] = c.elements[..] {
        plan.recipe.dims.elements = r;
    }
    plan.validate()?;
    Ok(plan)
}

/// The last grid power, or the only one.
fn single_power(plan: &ExperimentPlan) -> Result<f64> {
    match plan.p_max_dbm_grid.last() {
        Some(&p) => Ok(p),
        None => bail!("empty power grid"),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn manifest(
    command: &str,
    plan: Option<&ExperimentPlan>,
    started: DateTime<Utc>,
    extra: Value,
) -> Value {
    let config: Map<String, Value> = plan
        .map(|p| {
            p.to_config_string()
                .lines()
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
                .collect()
        })
        .unwrap_or_default();
    json!({
        "command": command,
        "version": bdris_version(),
        "args": std::env::args().collect::<Vec<_>>(),
        "started_at": started.to_rfc3339(),
        "finished_at": Utc::now().to_rfc3339(),
        "config": config,
        "details": extra,
    })
}

fn bdris_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

fn write_manifest(dir: &Path, value: &Value) -> Result<()> {
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn finish_sweep(
    c: &Common,
    command: &str,
    plan: &ExperimentPlan,
    rows: &[ResultRow],
    started: DateTime<Utc>,
) -> Result<()> {
    fs::create_dir_all(&c.out_dir)?;
    write_results_csv(rows, create(&c.out_dir.join("results.csv"))?)?;
    let failed = rows.iter().filter(|r| r.termination.starts_with("failed")).count();
    let means: Vec<Value> = mean_rates(rows, ALGORITHM_CGA)
        .into_iter()
        .map(|(arch, p, r, mean)| {
            info!("{arch:>6}  P={p:>5} dBm  R={r:>3}  mean sum-rate {mean:.4}");
            json!({"architecture": arch, "p_max_dbm": p, "R": r, "mean_sum_rate": mean})
        })
        .collect();
    let extra = json!({"rows": rows.len(), "failed": failed, "means": means});
    write_manifest(&c.out_dir, &manifest(command, Some(plan), started, extra))?;
    info!("wrote {} rows to {}", rows.len(), c.out_dir.display());
    Ok(())
}

fn optimize(c: &Common, started: DateTime<Utc>) -> Result<()> {
    let plan = build_plan(c)?;
    let arch = match plan.architectures[..] {
        [a] => a,
        _ if c.arch.is_empty() => Architecture::FullyConnected,
        _ => bail!("optimize takes a single --arch"),
    };
    let p = single_power(&plan)?;
    let r = plan.recipe.dims.elements;
    fs::create_dir_all(&c.out_dir)?;

    let (channels, _, seed) = trial_instance(&plan, r, p, 0)?;
    let mut recipe = plan.recipe.with_seed(seed);
    recipe.dims = channels.dims(1)?;
    save_channels(c.out_dir.join("channels.bdris"), &channels, Some(&recipe))?;

    let (theta, trace) = run_trial(&plan, arch, r, p, 0)?;
    trace.write_csv(create(&c.out_dir.join("trace.csv"))?)?;
    save_scattering(c.out_dir.join("theta.bdris"), &theta)?;
    let row = ResultRow {
        algorithm: ALGORITHM_CGA.into(),
        architecture: arch.label(),
        p_max_dbm: p,
        elements: r,
        trial: 0,
        seed,
        sum_rate: trace.final_sum_rate,
        iterations: trace.iterations(),
        wall_ms: trace.wall_time.as_secs_f64() * 1e3,
        termination: trace.termination.to_string(),
    };
    write_results_csv(std::slice::from_ref(&row), create(&c.out_dir.join("results.csv"))?)?;
    info!(
        "{}: {} iterations ({}), sum-rate {:.4} -> {:.4}",
        arch.label(),
        trace.iterations(),
        trace.termination,
        trace.initial_sum_rate,
        trace.final_sum_rate
    );
    let extra = json!({
        "architecture": arch.flag(),
        "p_max_dbm": p,
        "iterations": trace.iterations(),
        "termination": trace.termination.as_str(),
        "initial_sum_rate": trace.initial_sum_rate,
        "final_sum_rate": trace.final_sum_rate,
        "unitarity_residual": theta.unitarity_residual(),
        "symmetry_residual": theta.symmetry_residual(),
        "notes": trace.notes,
    });
    write_manifest(&c.out_dir, &manifest("optimize", Some(&plan), started, extra))
}

fn convergence(c: &Common, started: DateTime<Utc>) -> Result<()> {
    let mut plan = build_plan(c)?;
    if c.pmax_dbm.is_empty() && c.config.is_none() {
        plan.p_max_dbm_grid = vec![20.0];
    }
    let p = single_power(&plan)?;
    fs::create_dir_all(&c.out_dir)?;
    let runs = run_convergence(&plan, p, 0)?;
    let mut summary = Vec::new();
    let mut rows = Vec::new();
    for (arch, _, trace) in &runs {
        let name = format!("trace_{}.csv", arch.flag().replace(':', ""));
        trace.write_csv(create(&c.out_dir.join(&name))?)?;
        info!(
            "{:>6}: {} iterations ({}), sum-rate {:.4}",
            arch.label(),
            trace.iterations(),
            trace.termination,
            trace.final_sum_rate
        );
        summary.push(json!({
            "architecture": arch.label(),
            "trace": name,
            "iterations": trace.iterations(),
            "termination": trace.termination.as_str(),
            "final_sum_rate": trace.final_sum_rate,
        }));
        rows.push(ResultRow {
            algorithm: ALGORITHM_CGA.into(),
            architecture: arch.label(),
            p_max_dbm: p,
            elements: plan.recipe.dims.elements,
            trial: 0,
            seed: plan.base_seed,
            sum_rate: trace.final_sum_rate,
            iterations: trace.iterations(),
            wall_ms: trace.wall_time.as_secs_f64() * 1e3,
            termination: trace.termination.to_string(),
        });
    }
    write_results_csv(&rows, create(&c.out_dir.join("results.csv"))?)?;
    let extra = json!({"p_max_dbm": p, "runs": summary});
    write_manifest(&c.out_dir, &manifest("convergence", Some(&plan), started, extra))
}

fn grad_check(g: &GradCheckArgs, started: DateTime<Utc>) -> Result<()> {
    let cases: Vec<GradCheckCase> = [1, 2, 4, 8]
        .into_iter()
        .filter(|&groups| g.elements % groups == 0)
        .map(|groups| GradCheckCase {
            users: g.users,
            antennas: g.users,
            elements: g.elements,
            groups,
        })
        .collect();
    let seeds: Vec<u64> = (0..g.trials as u64).map(|t| g.seed + t).collect();
    let report = run_grad_check(&cases, &seeds, &[0.0, 1.0])?;
    fs::create_dir_all(&g.out_dir)?;
    report.write_csv(create(&g.out_dir.join("grad_check.csv"))?)?;
    let mut checks = Map::new();
    for name in ["exact_coupled", "groupwise", "conj_trace", "bilinear", "diag_power"] {
        let worst = report.max_error(name);
        info!("{name:>16}: max relative error {worst:.3e}");
        checks.insert(name.into(), json!(worst));
    }
    let extra = json!({
        "elements": g.elements,
        "users": g.users,
        "trials": g.trials,
        "passed": report.passed(),
        "max_errors": checks,
    });
    write_manifest(&g.out_dir, &manifest("grad-check", None, started, extra))?;
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}
