//! Subcommand implementations and the run manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use moran_meanfield::io::{write_json, write_report_csv, write_trajectory};
use moran_meanfield::lab::sample_initial;
use moran_meanfield::rng::{derive_seed, domain};
use moran_meanfield::validation::run_validation;
use moran_meanfield::{
    convergence_experiment, limit_ensemble, regime_experiment, run_ensemble, simulate_stream, standard_family,
    weak_form_residual, DiscreteState, ExperimentSettings, FlowConfig, PathSet, RegimeReport, ResidualEstimate,
    ScalingSchedule, SimplexPoint,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Failure classes of the exit-code contract.
#[derive(Debug)]
pub enum CliError {
    /// Rejected before any compute; exit code 2.
    Config(String),
    /// Failed while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Serialize)]
struct OutputFile {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    command: &'a str,
    moranlab_version: &'a str,
    library_version: &'a str,
    config_sha256: String,
    config_file: Option<String>,
    config_file_sha256: Option<String>,
    seed: u64,
    threads: usize,
    config: &'a RunConfig,
    outputs: Vec<OutputFile>,
    wall_clock_seconds: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical resolved configuration.
pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

struct Run<'a> {
    command: &'a str,
    cfg: &'a RunConfig,
    started: Instant,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    fn start(command: &'a str, cfg: &'a RunConfig) -> CliResult<Self> {
        fs::create_dir_all(&cfg.output_dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
        Ok(Self { command, cfg, started: Instant::now(), outputs: Vec::new() })
    }

    /// Path for a new output file, refusing to overwrite the input config.
    fn output(&mut self, name: &str) -> CliResult<PathBuf> {
        let path = self.cfg.output_dir.join(name);
        if let Some(src) = &self.cfg.source {
            if let (Ok(a), Ok(b)) = (fs::canonicalize(src), fs::canonicalize(&path)) {
                if a == b {
                    return Err(CliError::Config(format!("output {} would overwrite the input config", path.display())));
                }
            }
        }
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn finish(self) -> CliResult<PathBuf> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(runtime)?;
                Ok(OutputFile {
                    file: p.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned()),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let config_file_sha256 = match &self.cfg.source {
            Some(p) => Some(sha256_hex(&fs::read(p).map_err(runtime)?)),
            None => None,
        };
        let manifest = Manifest {
            schema_version: 1,
            command: self.command,
            moranlab_version: env!("CARGO_PKG_VERSION"),
            library_version: moran_meanfield::VERSION,
            config_sha256: config_hash(self.cfg),
            config_file: self.cfg.source.as_ref().map(|p| p.display().to_string()),
            config_file_sha256,
            seed: self.cfg.seed,
            threads: rayon::current_num_threads(),
            config: self.cfg,
            outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.cfg.output_dir.join("manifest.json");
        write_json(&path, &manifest).map_err(runtime)?;
        Ok(path)
    }
}

fn csv_writer(path: &Path) -> CliResult<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?))
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// One chain at one resolution; writes `trajectory.csv`, `trajectory.json`.
pub fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let payoff = cfg.payoff_matrix().map_err(CliError::Config)?;
    let schedule = cfg.simulate_schedule().map_err(CliError::Config)?;
    let point = match &cfg.simulate.initial {
        Some(p) => SimplexPoint::new(p.clone()).map_err(|e| CliError::Config(cfg.diag("simulate.initial", e)))?,
        None => sample_initial(&cfg.law, 1, cfg.seed).map_err(runtime)?.to_points().remove(0),
    };
    let start = DiscreteState::from_point(&point, schedule.population(), schedule.selection_weight())
        .map_err(|e| CliError::Config(cfg.diag("simulate.initial", e)))?;
    let chain_seed = derive_seed(cfg.seed, domain::CHAIN, schedule.resolution() as u64);
    let traj = simulate_stream(&start, &payoff, &schedule, chain_seed, cfg.simulate.stream).map_err(runtime)?;
    let mut run = Run::start("simulate", cfg)?;
    run.output("trajectory.csv")?;
    run.output("trajectory.json")?;
    let (csv, _) = write_trajectory(&cfg.output_dir.join("trajectory"), &traj, &payoff).map_err(runtime)?;
    run.finish()?;
    let last = traj.states.last().expect("at least the initial state");
    println!(
        "k={} N={} w={} final counts {:?} -> {}",
        schedule.resolution(),
        schedule.population(),
        schedule.selection_weight(),
        last.counts(),
        csv.display()
    );
    Ok(())
}

/// `(k, tau, N, w, drift scale)` for every configured resolution.
pub fn schedule_table(cfg: &RunConfig) -> CliResult<Vec<ScalingSchedule>> {
    cfg.ks.iter().map(|&k| cfg.scaled_schedule(k).map_err(CliError::Config)).collect()
}

fn print_schedule_table(schedules: &[ScalingSchedule]) {
    println!("{:>8} {:>14} {:>10} {:>14} {:>14}", "k", "tau_k", "N_k", "w_k", "drift_scale");
    for s in schedules {
        println!(
            "{:>8} {:>14.6e} {:>10} {:>14.6e} {:>14.6e}",
            s.resolution(),
            s.tau(),
            s.population(),
            s.selection_weight(),
            s.drift_scale()
        );
    }
}

fn settings(cfg: &RunConfig) -> CliResult<ExperimentSettings> {
    let flow = FlowConfig::new(cfg.flow_step).map_err(|e| CliError::Config(cfg.diag("flow_step", e)))?;
    let mut s = ExperimentSettings::new(cfg.ensemble_size, cfg.checkpoints.clone(), cfg.seed, flow);
    s.bootstrap_resamples = cfg.bootstrap_resamples;
    s.random_witnesses = cfg.random_witnesses;
    Ok(s)
}

/// Checks the exponents admitted by `converge`: `alpha + beta = 1` and
/// `alpha > 1/2`.
pub fn check_convergence_regime(cfg: &RunConfig) -> CliResult<()> {
    let sum = cfg.alpha + cfg.beta;
    if (sum - 1.0).abs() > 1e-12 {
        return Err(CliError::Config(cfg.diag(
            "beta",
            format!(
                "alpha + beta = {sum}, but converge needs alpha + beta = 1; use --regime or the regimes command for other exponents"
            ),
        )));
    }
    if cfg.alpha <= 0.5 {
        return Err(CliError::Config(cfg.diag(
            "alpha",
            format!(
                "alpha = {} is at or below the critical threshold 1/2; converge needs alpha > 1/2 (use --regime to study it)",
                cfg.alpha
            ),
        )));
    }
    Ok(())
}

/// Convergence experiment; writes `report.json`, `report.csv` and prints a
/// one-line verdict.
pub fn converge(cfg: &RunConfig, dry_run: bool, regime: bool) -> CliResult<()> {
    if regime {
        return regimes(cfg, dry_run);
    }
    if let Err(e) = check_convergence_regime(cfg) {
        println!("FAIL: precondition not met");
        return Err(e);
    }
    let schedules = schedule_table(cfg)?;
    if dry_run {
        print_schedule_table(&schedules);
        return Ok(());
    }
    let payoff = cfg.payoff_matrix().map_err(CliError::Config)?;
    let settings = settings(cfg)?;
    let report =
        convergence_experiment(&cfg.law, &payoff, &schedules[0], &cfg.ks, &settings).map_err(runtime)?;
    let mut run = Run::start("converge", cfg)?;
    let json = run.output("report.json")?;
    let csv = run.output("report.csv")?;
    write_json(&json, &report).map_err(runtime)?;
    let mut w = csv_writer(&csv)?;
    write_report_csv(&mut w, &report).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    run.finish()?;
    let verdict = report.verdict(&cfg.thresholds);
    if verdict.pass {
        println!("PASS");
    } else {
        println!("FAIL: {}", verdict.failures.join("; "));
    }
    Ok(())
}

fn write_regime_csv(path: &Path, report: &RegimeReport) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let io = |e: std::io::Error| runtime(e);
    writeln!(
        w,
        "k,tau_k,n_k,w_k,drift_scale,w1_final_vs_initial,mean_displacement,predicted_mean_displacement,rms_displacement,diffusive_bound"
    )
    .map_err(io)?;
    for r in &report.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.k,
            num(r.tau),
            r.population,
            num(r.selection_weight),
            num(r.drift_scale),
            num(r.w1_final_vs_initial),
            num(r.mean_displacement),
            num(r.predicted_mean_displacement),
            num(r.rms_displacement),
            num(r.diffusive_bound)
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Displacement of the ensemble over `[0, T]` for arbitrary exponents;
/// writes `regimes.json`, `regimes.csv`.
pub fn regimes(cfg: &RunConfig, dry_run: bool) -> CliResult<()> {
    if cfg.beta <= 0.0 {
        return Err(CliError::Config(cfg.diag("beta", "the regime study needs beta > 0")));
    }
    let schedules = schedule_table(cfg)?;
    if dry_run {
        print_schedule_table(&schedules);
        return Ok(());
    }
    let payoff = cfg.payoff_matrix().map_err(CliError::Config)?;
    let report = regime_experiment(&cfg.law, &payoff, &schedules[0], &cfg.ks, cfg.ensemble_size, cfg.seed)
        .map_err(runtime)?;
    let mut run = Run::start("regimes", cfg)?;
    let json = run.output("regimes.json")?;
    let csv = run.output("regimes.csv")?;
    write_json(&json, &report).map_err(runtime)?;
    write_regime_csv(&csv, &report)?;
    run.finish()?;
    let d = report.final_distances();
    println!(
        "regime {:?} (alpha={}, beta={}): W1(final, initial) by k = {}",
        report.regime,
        cfg.alpha,
        cfg.beta,
        d.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

#[derive(Serialize)]
struct ResidualRow {
    k: usize,
    test_function: String,
    chain: ResidualEstimate,
    limit: ResidualEstimate,
    /// Limit-path residual plus the chain standard error.
    floor: f64,
}

#[derive(Serialize)]
struct ResidualReport {
    schema_version: u32,
    test_family_version: u32,
    rows: Vec<ResidualRow>,
}

/// Weak-form residual of the chain ensemble against the standard test
/// family; writes `residual.json`, `residual.csv`.
pub fn residual(cfg: &RunConfig) -> CliResult<()> {
    let schedules = schedule_table(cfg)?;
    let payoff = cfg.payoff_matrix().map_err(CliError::Config)?;
    let flow = FlowConfig::new(cfg.flow_step).map_err(|e| CliError::Config(cfg.diag("flow_step", e)))?;
    if let Some(s) = schedules.iter().find(|s| s.resolution() + 1 < moran_meanfield::lab::MIN_QUADRATURE_NODES) {
        return Err(CliError::Config(cfg.diag(
            "ks",
            format!(
                "k = {} gives fewer than {} quadrature nodes",
                s.resolution(),
                moran_meanfield::lab::MIN_QUADRATURE_NODES
            ),
        )));
    }
    let family = standard_family(payoff.dim(), cfg.horizon).map_err(runtime)?;
    let mut rows = Vec::new();
    for sched in &schedules {
        let k = sched.resolution();
        let ens = run_ensemble(&cfg.law, &payoff, sched, cfg.ensemble_size, &[], cfg.seed).map_err(runtime)?;
        let chain_paths = PathSet::from_ensemble(&ens);
        let limit_paths = limit_ensemble(&ens, &payoff, &flow).map_err(runtime)?;
        let seed = derive_seed(cfg.seed, domain::BOOTSTRAP, k as u64);
        for phi in &family {
            let chain = weak_form_residual(&chain_paths, &payoff, phi, cfg.bootstrap_resamples, seed).map_err(runtime)?;
            let limit = weak_form_residual(&limit_paths, &payoff, phi, cfg.bootstrap_resamples, seed).map_err(runtime)?;
            let floor = limit.value + chain.std_error;
            rows.push(ResidualRow { k, test_function: phi.name.clone(), chain, limit, floor });
        }
    }
    let mut run = Run::start("residual", cfg)?;
    let json = run.output("residual.json")?;
    let csv = run.output("residual.csv")?;
    let report = ResidualReport {
        schema_version: 1,
        test_family_version: moran_meanfield::lab::TEST_FAMILY_VERSION,
        rows,
    };
    write_json(&json, &report).map_err(runtime)?;
    let mut w = csv_writer(&csv)?;
    let io = |e: std::io::Error| runtime(e);
    writeln!(w, "k,test_function,residual,ci,std_error,limit_residual,floor,nodes").map_err(io)?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.k,
            r.test_function,
            num(r.chain.value),
            num(r.chain.ci_halfwidth),
            num(r.chain.std_error),
            num(r.limit.value),
            num(r.floor),
            r.chain.nodes
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;
    run.finish()?;
    for r in &report.rows {
        println!(
            "k={:<6} {:<16} residual {:.4e} +- {:.4e} (floor {:.4e})",
            r.k, r.test_function, r.chain.value, r.chain.ci_halfwidth, r.floor
        );
    }
    Ok(())
}

/// Fast invariant suite; fails with exit code 1 if any check fails.
pub fn validate(seed: u64) -> CliResult<()> {
    let checks = run_validation(seed).map_err(runtime)?;
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed (seed {seed})", checks.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!("failed checks: {}", failed.join(", "))))
    }
}
