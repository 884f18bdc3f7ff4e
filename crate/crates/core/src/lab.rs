//! Ensembles of chains, their mean-field limit, and the comparisons between
//! them: convergence in W1, degenerate scaling regimes, and weak-form
//! residuals of the continuity equation.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{simulate_stream, DiscreteState, ScalingSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::flow::{flow_on_grid, pushforward, FlowConfig};
use crate::rng::{derive_seed, domain, stream_rng};
use crate::simplex::{field_into, PayoffMatrix, SimplexPoint};
use crate::transport::{standard_witnesses, w1_dual_lower_bound, w1_exact, EmpiricalMeasure};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TEST_FAMILY_VERSION: u32 = 1;
/// Fewest time nodes accepted by [`weak_form_residual`].
pub const MIN_QUADRATURE_NODES: usize = 16;

/// Law of the initial proportions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Dirac { point: SimplexPoint },
    Dirichlet { concentration: Vec<f64> },
    UniformSimplex { dim: usize },
}

impl InitialLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::Dirac { .. } => Ok(()),
            InitialLaw::Dirichlet { concentration } => {
                if concentration.len() < 2 {
                    return Err(Error::Configuration("dirichlet law needs at least 2 concentrations".into()));
                }
                if let Some(c) = concentration.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
                    return Err(Error::Configuration(format!("dirichlet concentration {c} is not positive")));
                }
                Ok(())
            }
            InitialLaw::UniformSimplex { dim } if *dim < 2 => {
                Err(Error::Configuration(format!("uniform simplex needs dimension >= 2, got {dim}")))
            }
            InitialLaw::UniformSimplex { .. } => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac { point } => point.dim(),
            InitialLaw::Dirichlet { concentration } => concentration.len(),
            InitialLaw::UniformSimplex { dim } => *dim,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimplexPoint> {
        match self {
            InitialLaw::Dirac { point } => Ok(point.clone()),
            InitialLaw::Dirichlet { concentration } => dirichlet(concentration, rng),
            InitialLaw::UniformSimplex { dim } => dirichlet(&vec![1.0; *dim], rng),
        }
    }
}

fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<SimplexPoint> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .map(|g| g.sample(rng))
                .map_err(|e| Error::Configuration(format!("dirichlet concentration {a}: {e}")))
        })
        .collect::<Result<_>>()?;
    SimplexPoint::from_weights(&draws)
}

/// Measures of the ensemble at one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub affine: EmpiricalMeasure,
    pub constant: EmpiricalMeasure,
}

#[derive(Clone, Debug)]
pub struct EnsembleOutput {
    pub schedule: ScalingSchedule,
    /// Draws from the initial law before rounding to the count lattice.
    pub initial_samples: EmpiricalMeasure,
    pub initial_states: Vec<DiscreteState>,
    pub trajectories: Vec<Trajectory>,
    pub snapshots: Vec<Snapshot>,
}

impl EnsembleOutput {
    pub fn discretized_initial(&self) -> EmpiricalMeasure {
        let m = self.initial_samples.dim();
        let mut data = Vec::with_capacity(self.initial_states.len() * m);
        for s in &self.initial_states {
            data.extend_from_slice(s.proportions().coords());
        }
        EmpiricalMeasure::from_flat_unchecked(m, data)
    }

    pub fn snapshot(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.t == t)
    }
}

/// `R` draws of the initial law; replica `r` always uses stream `r` of the
/// initial-law seed, so the same draws are shared by every resolution.
pub fn sample_initial(law: &InitialLaw, replicas: usize, master_seed: u64) -> Result<EmpiricalMeasure> {
    law.validate()?;
    let seed = derive_seed(master_seed, domain::INITIAL_LAW, 0);
    let points: Vec<SimplexPoint> = (0..replicas)
        .map(|r| law.sample(&mut stream_rng(seed, r as u64)))
        .collect::<Result<_>>()?;
    EmpiricalMeasure::new(&points)
}

fn check_checkpoints(checkpoints: &[f64], horizon: f64) -> Result<()> {
    if let Some(t) = checkpoints.iter().find(|t| !(0.0..=horizon).contains(*t)) {
        return Err(Error::Configuration(format!("checkpoint {t} outside [0, {horizon}]")));
    }
    Ok(())
}

/// Runs `replicas` independent chains from rounded draws of `law` and
/// records both interpolations at every checkpoint.
pub fn run_ensemble(
    law: &InitialLaw,
    payoff: &PayoffMatrix,
    schedule: &ScalingSchedule,
    replicas: usize,
    checkpoints: &[f64],
    master_seed: u64,
) -> Result<EnsembleOutput> {
    if replicas < 2 {
        return Err(Error::Configuration(format!("ensemble size must be at least 2, got {replicas}")));
    }
    if law.dim() != payoff.dim() {
        return Err(Error::Dimension { expected: payoff.dim(), found: law.dim() });
    }
    check_checkpoints(checkpoints, schedule.horizon())?;
    let initial_samples = sample_initial(law, replicas, master_seed)?;
    let n = schedule.population();
    let w = schedule.selection_weight();
    let initial_states: Vec<DiscreteState> = initial_samples
        .to_points()
        .iter()
        .map(|p| DiscreteState::from_point(p, n, w))
        .collect::<Result<_>>()?;
    let chain_seed = derive_seed(master_seed, domain::CHAIN, schedule.resolution() as u64);
    let trajectories: Vec<Trajectory> = initial_states
        .par_iter()
        .enumerate()
        .map(|(r, s)| {
            simulate_stream(s, payoff, schedule, chain_seed, r as u64)
                .map_err(|e| Error::Sample { index: r, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let m = payoff.dim();
    let mut snapshots = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        let mut affine = Vec::with_capacity(replicas * m);
        let mut constant = Vec::with_capacity(replicas * m);
        for traj in &trajectories {
            affine.extend_from_slice(traj.interpolate_affine(t)?.coords());
            constant.extend_from_slice(traj.interpolate_constant(t)?.coords());
        }
        snapshots.push(Snapshot {
            t,
            affine: EmpiricalMeasure::from_flat_unchecked(m, affine),
            constant: EmpiricalMeasure::from_flat_unchecked(m, constant),
        });
    }
    Ok(EnsembleOutput { schedule: schedule.clone(), initial_samples, initial_states, trajectories, snapshots })
}

/// Knobs shared by the experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub ensemble_size: usize,
    pub checkpoints: Vec<f64>,
    pub master_seed: u64,
    pub flow: FlowConfig,
    pub bootstrap_resamples: usize,
    pub random_witnesses: usize,
}

impl ExperimentSettings {
    pub fn new(ensemble_size: usize, checkpoints: Vec<f64>, master_seed: u64, flow: FlowConfig) -> Self {
        Self { ensemble_size, checkpoints, master_seed, flow, bootstrap_resamples: 200, random_witnesses: 16 }
    }
}

/// Half the width of the central 95% percentile interval.
pub fn percentile_halfwidth(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let b = v.len();
    let lo = ((0.025 * b as f64).floor() as usize).min(b - 1);
    let hi = ((0.975 * b as f64).ceil() as usize).saturating_sub(1).min(b - 1);
    0.5 * (v[hi] - v[lo])
}

fn resample_indices(n: usize, resamples: usize, seed: u64, stream: u64) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, stream);
    (0..resamples).map(|_| (0..n).map(|_| rng.random_range(0..n)).collect()).collect()
}

/// Paired bootstrap of `W1(mu, nu)`: replica `r` of both measures is kept
/// together in every resample.
fn paired_bootstrap(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, sets: &[Vec<usize>]) -> Result<f64> {
    let values: Vec<f64> = sets
        .par_iter()
        .map(|idx| w1_exact(&mu.resample(idx), &nu.resample(idx)).map(|(d, _)| d))
        .collect::<Result<_>>()?;
    Ok(percentile_halfwidth(&values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub t: f64,
    pub w1_to_limit: f64,
    pub ci_halfwidth: f64,
    pub dual_lower_bound: f64,
    pub w1_affine_vs_constant: f64,
    pub gap_ci_halfwidth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    pub k: usize,
    pub tau: f64,
    pub population: u64,
    pub selection_weight: f64,
    /// `W1` between the rounded and the raw initial draws.
    pub initial_discretization_w1: f64,
    pub checkpoints: Vec<CheckpointRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schema_version: u32,
    pub payoff: PayoffMatrix,
    pub law: InitialLaw,
    pub base_schedule: ScalingSchedule,
    pub settings: ExperimentSettings,
    pub resolutions: Vec<ResolutionRecord>,
}

/// Pass criteria for a convergence run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Allowed relative increase of `W1` between consecutive resolutions.
    pub monotone_slack: f64,
    /// Required `W1(k_last) / W1(k_first)` at the final checkpoint.
    pub final_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { monotone_slack: 0.2, final_ratio: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub failures: Vec<String>,
}

impl ConvergenceReport {
    /// `W1` to the limit at checkpoint `t` for every resolution.
    pub fn series(&self, t: f64) -> Vec<f64> {
        self.resolutions
            .iter()
            .filter_map(|r| r.checkpoints.iter().find(|c| c.t == t).map(|c| c.w1_to_limit))
            .collect()
    }

    /// Interpolation-gap bound violations: `(k, t, gap, bound)`.
    pub fn interpolation_violations(&self) -> Vec<(usize, f64, f64, f64)> {
        let mut out = Vec::new();
        for r in &self.resolutions {
            for c in &r.checkpoints {
                let bound = 2f64.sqrt() / r.population as f64 + 2.0 * c.gap_ci_halfwidth;
                if c.w1_affine_vs_constant > bound {
                    out.push((r.k, c.t, c.w1_affine_vs_constant, bound));
                }
            }
        }
        out
    }

    pub fn verdict(&self, thresholds: &Thresholds) -> Verdict {
        let mut failures = Vec::new();
        for &t in &self.settings.checkpoints {
            let s = self.series(t);
            for (i, w) in s.windows(2).enumerate() {
                if w[1] > (1.0 + thresholds.monotone_slack) * w[0] {
                    failures.push(format!(
                        "t={t}: W1 rose from {:.4} (k={}) to {:.4} (k={})",
                        w[0], self.resolutions[i].k, w[1], self.resolutions[i + 1].k
                    ));
                }
            }
        }
        if let Some(&t_final) = self.settings.checkpoints.iter().max_by(|a, b| a.total_cmp(b)) {
            let s = self.series(t_final);
            if let (Some(first), Some(last)) = (s.first(), s.last()) {
                if s.len() >= 2 && *last > thresholds.final_ratio * first {
                    failures.push(format!(
                        "t={t_final}: final W1 {last:.4} exceeds {:.0}% of initial {first:.4}",
                        100.0 * thresholds.final_ratio
                    ));
                }
            }
        }
        for (k, t, gap, bound) in self.interpolation_violations() {
            failures.push(format!("k={k}, t={t}: interpolation gap {gap:.4e} above {bound:.4e}"));
        }
        for r in &self.resolutions {
            for c in &r.checkpoints {
                if c.dual_lower_bound > c.w1_to_limit + 1e-10 {
                    failures.push(format!("k={}, t={}: dual bound above exact value", r.k, c.t));
                }
            }
        }
        Verdict { pass: failures.is_empty(), failures }
    }
}

fn critical_exponents(schedule: &ScalingSchedule) -> Result<(f64, f64)> {
    let (alpha, beta) = schedule
        .exponents()
        .ok_or_else(|| Error::Regime("convergence needs a scaled schedule".into()))?;
    if (alpha + beta - 1.0).abs() > 1e-12 {
        return Err(Error::Regime(format!(
            "alpha + beta = {} but the mean-field limit needs alpha + beta = 1; use the regime experiment",
            alpha + beta
        )));
    }
    if alpha <= 0.5 {
        return Err(Error::Regime(format!(
            "alpha = {alpha} is at or below the critical threshold 1/2"
        )));
    }
    Ok((alpha, beta))
}

fn check_resolutions(ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::Configuration("need at least one resolution".into()));
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Configuration(format!("resolutions must be strictly increasing, got {ks:?}")));
    }
    Ok(())
}

/// Compares chain ensembles at each resolution in `ks` against the pushforward
/// of the same initial draws under the replicator flow.
pub fn convergence_experiment(
    law: &InitialLaw,
    payoff: &PayoffMatrix,
    base: &ScalingSchedule,
    ks: &[usize],
    settings: &ExperimentSettings,
) -> Result<ConvergenceReport> {
    critical_exponents(base)?;
    check_resolutions(ks)?;
    law.validate()?;
    check_checkpoints(&settings.checkpoints, base.horizon())?;
    let r = settings.ensemble_size;
    let initial = sample_initial(law, r, settings.master_seed)?;
    let limits: Vec<EmpiricalMeasure> = settings
        .checkpoints
        .iter()
        .map(|&t| pushforward(&initial, payoff, t, &settings.flow))
        .collect::<Result<_>>()?;
    let witnesses = standard_witnesses(payoff.dim(), settings.random_witnesses, settings.master_seed);
    let boot_seed = derive_seed(settings.master_seed, domain::BOOTSTRAP, 0);

    let mut resolutions = Vec::with_capacity(ks.len());
    for &k in ks {
        let schedule = base.with_resolution(k)?;
        let ens = run_ensemble(law, payoff, &schedule, r, &settings.checkpoints, settings.master_seed)?;
        let initial_discretization_w1 = w1_exact(&ens.discretized_initial(), &ens.initial_samples)?.0;
        let mut records = Vec::with_capacity(settings.checkpoints.len());
        for (c, (snap, limit)) in ens.snapshots.iter().zip(&limits).enumerate() {
            let sets = resample_indices(r, settings.bootstrap_resamples, boot_seed, (k as u64) << 16 | c as u64);
            let w1_to_limit = w1_exact(&snap.affine, limit)?.0;
            let gap = w1_exact(&snap.affine, &snap.constant)?.0;
            records.push(CheckpointRecord {
                t: snap.t,
                w1_to_limit,
                ci_halfwidth: paired_bootstrap(&snap.affine, limit, &sets)?,
                dual_lower_bound: w1_dual_lower_bound(&snap.affine, limit, &witnesses)?,
                w1_affine_vs_constant: gap,
                gap_ci_halfwidth: paired_bootstrap(&snap.affine, &snap.constant, &sets)?,
            });
        }
        resolutions.push(ResolutionRecord {
            k,
            tau: schedule.tau(),
            population: schedule.population(),
            selection_weight: schedule.selection_weight(),
            initial_discretization_w1,
            checkpoints: records,
        });
    }
    Ok(ConvergenceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        payoff: payoff.clone(),
        law: law.clone(),
        base_schedule: base.clone(),
        settings: settings.clone(),
        resolutions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `alpha + beta > 1`: the chain stops moving as `k` grows.
    Frozen,
    /// `alpha + beta = 1`: replicator limit.
    Critical,
    /// `alpha + beta < 1`: drift per unit time blows up.
    Subcritical,
}

pub fn classify(alpha: f64, beta: f64) -> Regime {
    let s = alpha + beta;
    if (s - 1.0).abs() <= 1e-12 {
        Regime::Critical
    } else if s > 1.0 {
        Regime::Frozen
    } else {
        Regime::Subcritical
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRecord {
    pub k: usize,
    pub tau: f64,
    pub population: u64,
    pub selection_weight: f64,
    /// `w / (N tau)`, the per-unit-time drift prefactor.
    pub drift_scale: f64,
    /// `W1` between the rounded initial ensemble and the ensemble at `T`.
    pub w1_final_vs_initial: f64,
    /// `|mean(lambda_T - lambda_0)|`.
    pub mean_displacement: f64,
    /// `drift_scale * T * |mean b(lambda_0)|`, first-order prediction.
    pub predicted_mean_displacement: f64,
    /// `sqrt(mean |lambda_T - lambda_0|^2)`.
    pub rms_displacement: f64,
    /// `sqrt(2 k (1 - 1/M)) / N`, the neutral-chain bound on the rms.
    pub diffusive_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub schema_version: u32,
    pub regime: Regime,
    pub alpha: f64,
    pub beta: f64,
    pub records: Vec<RegimeRecord>,
}

impl RegimeReport {
    pub fn final_distances(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.w1_final_vs_initial).collect()
    }
}

/// Runs the chain for any positive exponents and measures how far the
/// ensemble moves over `[0, T]`.
pub fn regime_experiment(
    law: &InitialLaw,
    payoff: &PayoffMatrix,
    base: &ScalingSchedule,
    ks: &[usize],
    replicas: usize,
    master_seed: u64,
) -> Result<RegimeReport> {
    let (alpha, beta) = base
        .exponents()
        .ok_or_else(|| Error::Regime("regime experiment needs a scaled schedule".into()))?;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Regime(format!("exponents must be positive, got alpha={alpha}, beta={beta}")));
    }
    check_resolutions(ks)?;
    let m = payoff.dim();
    let horizon = base.horizon();
    let mut records = Vec::with_capacity(ks.len());
    for &k in ks {
        let schedule = base.with_resolution(k)?;
        let ens = run_ensemble(law, payoff, &schedule, replicas, &[horizon], master_seed)?;
        let start = ens.discretized_initial();
        let end = &ens.snapshots[0].affine;
        let w1_final_vs_initial = w1_exact(&start, end)?.0;
        let mut mean_disp = vec![0.0; m];
        let mut mean_field = vec![0.0; m];
        let mut sq = 0.0;
        let (mut ax, mut b) = (vec![0.0; m], vec![0.0; m]);
        for (x0, x1) in start.iter().zip(end.iter()) {
            field_into(x0, payoff, &mut ax, &mut b);
            for c in 0..m {
                mean_disp[c] += (x1[c] - x0[c]) / replicas as f64;
                mean_field[c] += b[c] / replicas as f64;
                sq += (x1[c] - x0[c]).powi(2);
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n = schedule.population() as f64;
        records.push(RegimeRecord {
            k,
            tau: schedule.tau(),
            population: schedule.population(),
            selection_weight: schedule.selection_weight(),
            drift_scale: schedule.drift_scale(),
            w1_final_vs_initial,
            mean_displacement: norm(&mean_disp),
            predicted_mean_displacement: schedule.drift_scale() * horizon * norm(&mean_field),
            rms_displacement: (sq / replicas as f64).sqrt(),
            diffusive_bound: (2.0 * k as f64 * (1.0 - 1.0 / m as f64)).sqrt() / n,
        });
    }
    Ok(RegimeReport { schema_version: REPORT_SCHEMA_VERSION, regime: classify(alpha, beta), alpha, beta, records })
}

/// Time factor of a test function, vanishing at the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeWindow {
    /// `T - t`.
    Linear,
    /// `exp(1 - T / (T - t))`, equal to 1 at `t = 0` and flat at `T`.
    Bump,
    /// `(T - t)^p`, `p >= 1`.
    Power { exponent: f64 },
}

impl TimeWindow {
    fn value(&self, t: f64, horizon: f64) -> f64 {
        let s = horizon - t;
        if s <= 0.0 {
            return 0.0;
        }
        match self {
            TimeWindow::Linear => s,
            TimeWindow::Bump => {
                let z = horizon / s;
                if z > 700.0 {
                    0.0
                } else {
                    (1.0 - z).exp()
                }
            }
            TimeWindow::Power { exponent } => s.powf(*exponent),
        }
    }

    fn derivative(&self, t: f64, horizon: f64) -> f64 {
        let s = horizon - t;
        match self {
            TimeWindow::Linear => -1.0,
            _ if s <= 0.0 => 0.0,
            TimeWindow::Bump => {
                let z = horizon / s;
                if z > 700.0 {
                    0.0
                } else {
                    -(1.0 - z).exp() * z / s
                }
            }
            TimeWindow::Power { exponent } => -exponent * s.powf(exponent - 1.0),
        }
    }
}

/// `coefficient * prod_i lambda_i^{powers_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coefficient: f64,
    pub powers: Vec<u32>,
}

/// Smooth test function `phi(t, lambda) = theta(t) p(lambda)` with `p` a
/// polynomial of degree at most 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub name: String,
    pub horizon: f64,
    pub window: TimeWindow,
    pub terms: Vec<Monomial>,
}

impl TestFunction {
    pub fn new(name: &str, horizon: f64, window: TimeWindow, terms: Vec<Monomial>) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Configuration(format!("test function horizon must be positive, got {horizon}")));
        }
        if let TimeWindow::Power { exponent } = window {
            if !(exponent >= 1.0) {
                return Err(Error::Configuration(format!("window exponent must be at least 1, got {exponent}")));
            }
        }
        let dims: Vec<usize> = terms.iter().map(|t| t.powers.len()).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Configuration("monomials must share one dimension".into()));
        }
        if let Some(t) = terms.iter().find(|t| t.powers.iter().sum::<u32>() > 3) {
            return Err(Error::Configuration(format!("monomial {:?} has degree above 3", t.powers)));
        }
        Ok(Self { name: name.to_string(), horizon, window, terms })
    }

    /// Single monomial times a window.
    pub fn monomial(name: &str, horizon: f64, window: TimeWindow, powers: Vec<u32>) -> Result<Self> {
        Self::new(name, horizon, window, vec![Monomial { coefficient: 1.0, powers }])
    }

    fn poly(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|m| m.coefficient * m.powers.iter().zip(x).map(|(&p, v)| v.powi(p as i32)).product::<f64>())
            .sum()
    }

    fn poly_grad(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for m in &self.terms {
            for (i, o) in out.iter_mut().enumerate() {
                let p = m.powers[i];
                if p == 0 {
                    continue;
                }
                let mut prod = m.coefficient * p as f64 * x[i].powi(p as i32 - 1);
                for (j, (&q, v)) in m.powers.iter().zip(x).enumerate() {
                    if j != i {
                        prod *= v.powi(q as i32);
                    }
                }
                *o += prod;
            }
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.window.value(t, self.horizon) * self.poly(x)
    }

    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        self.window.derivative(t, self.horizon) * self.poly(x)
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.poly_grad(x, &mut g);
        let th = self.window.value(t, self.horizon);
        g.iter_mut().for_each(|v| *v *= th);
        g
    }
}

/// The fixed family `theta * lambda_1`, `theta * lambda_1 lambda_2`,
/// `theta * lambda_1^2 lambda_2` with the bump window; see
/// [`TEST_FAMILY_VERSION`].
pub fn standard_family(m: usize, horizon: f64) -> Result<Vec<TestFunction>> {
    if m < 2 {
        return Err(Error::Dimension { expected: 2, found: m });
    }
    let pow = |a: u32, b: u32| {
        let mut p = vec![0u32; m];
        p[0] = a;
        p[1] = b;
        p
    };
    Ok(vec![
        TestFunction::monomial("bump*l1", horizon, TimeWindow::Bump, pow(1, 0))?,
        TestFunction::monomial("bump*l1*l2", horizon, TimeWindow::Bump, pow(1, 1))?,
        TestFunction::monomial("bump*l1^2*l2", horizon, TimeWindow::Bump, pow(2, 1))?,
    ])
}

/// Sample paths on a common time grid: the grid state of path `r` at node
/// `j` is `paths[r][j * dim..(j + 1) * dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub times: Vec<f64>,
    pub dim: usize,
    pub paths: Vec<Vec<f64>>,
}

impl PathSet {
    /// Grid paths of a chain ensemble.
    pub fn from_ensemble(ens: &EnsembleOutput) -> Self {
        let k = ens.schedule.resolution();
        let times = (0..=k).map(|h| ens.schedule.time(h)).collect();
        let dim = ens.initial_samples.dim();
        let paths = ens
            .trajectories
            .iter()
            .map(|tr| {
                let mut flat = Vec::with_capacity((k + 1) * dim);
                for s in &tr.states {
                    flat.extend_from_slice(s.proportions().coords());
                }
                flat
            })
            .collect();
        Self { times, dim, paths }
    }
}

/// Exact replicator paths on the chain grid, started from the rounded
/// initial states of the ensemble.
pub fn limit_ensemble(ens: &EnsembleOutput, payoff: &PayoffMatrix, cfg: &FlowConfig) -> Result<PathSet> {
    let k = ens.schedule.resolution();
    let times: Vec<f64> = (0..=k).map(|h| ens.schedule.time(h)).collect();
    let dim = ens.initial_samples.dim();
    let paths = ens
        .initial_states
        .par_iter()
        .enumerate()
        .map(|(r, s)| {
            flow_on_grid(&s.proportions(), payoff, &times, cfg)
                .map(|pts| pts.iter().flat_map(|p| p.coords().to_vec()).collect())
                .map_err(|e| Error::Sample { index: r, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    Ok(PathSet { times, dim, paths })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualEstimate {
    /// Absolute value of the ensemble mean.
    pub value: f64,
    pub signed: f64,
    /// Percentile bootstrap half-width of the mean.
    pub ci_halfwidth: f64,
    pub std_error: f64,
    pub nodes: usize,
}

/// Per-path weak-form functional
/// `int dphi/dt(t, lambda(t)) dt + int Dphi(t, lambda_bar(t)) . b(lambda_bar(t)) dt + phi(0, lambda(0))`,
/// with the trapezoid rule on the grid; on `[t_j, t_{j+1})` the piecewise
/// constant path sits at the grid value `lambda_j`.
fn path_functional(times: &[f64], dim: usize, path: &[f64], payoff: &PayoffMatrix, phi: &TestFunction) -> f64 {
    let (mut ax, mut b, mut grad) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let node = |j: usize| &path[j * dim..(j + 1) * dim];
    let mut total = phi.value(times[0], node(0));
    let mut prev_dt = phi.time_derivative(times[0], node(0));
    for j in 0..times.len() - 1 {
        let h = times[j + 1] - times[j];
        let next_dt = phi.time_derivative(times[j + 1], node(j + 1));
        total += 0.5 * h * (prev_dt + next_dt);
        prev_dt = next_dt;
        let x = node(j);
        field_into(x, payoff, &mut ax, &mut b);
        phi.poly_grad(x, &mut grad);
        let transport: f64 = grad.iter().zip(&b).map(|(g, v)| g * v).sum();
        let th0 = phi.window.value(times[j], phi.horizon);
        let th1 = phi.window.value(times[j + 1], phi.horizon);
        total += 0.5 * h * (th0 + th1) * transport;
    }
    total
}

/// Ensemble estimate of the weak-form residual of the continuity equation
/// driven by the replicator field.
pub fn weak_form_residual(
    paths: &PathSet,
    payoff: &PayoffMatrix,
    phi: &TestFunction,
    bootstrap_resamples: usize,
    seed: u64,
) -> Result<ResidualEstimate> {
    let nodes = paths.times.len();
    if nodes < MIN_QUADRATURE_NODES {
        return Err(Error::Resolution { nodes, required: MIN_QUADRATURE_NODES });
    }
    payoff.check_dim(paths.dim)?;
    if let Some(t) = phi.terms.first() {
        if t.powers.len() != paths.dim {
            return Err(Error::Dimension { expected: paths.dim, found: t.powers.len() });
        }
    }
    let horizon = *paths.times.last().unwrap();
    if paths.times[0] != 0.0 || (horizon - phi.horizon).abs() > 1e-12 {
        return Err(Error::Configuration(format!(
            "time grid [{}, {horizon}] does not match test function horizon {}",
            paths.times[0], phi.horizon
        )));
    }
    let values: Vec<f64> = paths
        .paths
        .par_iter()
        .map(|p| path_functional(&paths.times, paths.dim, p, payoff, phi))
        .collect();
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)
    } else {
        0.0
    };
    let mut rng = stream_rng(seed, 0);
    let means: Vec<f64> = (0..bootstrap_resamples)
        .map(|_| (0..values.len()).map(|_| values[rng.random_range(0..values.len())]).sum::<f64>() / r)
        .collect();
    Ok(ResidualEstimate {
        value: mean.abs(),
        signed: mean,
        ci_halfwidth: percentile_halfwidth(&means),
        std_error: (var / r).sqrt(),
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::exact_drift;

    fn headline() -> PayoffMatrix {
        PayoffMatrix::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()
    }

    fn beta22() -> InitialLaw {
        InitialLaw::Dirichlet { concentration: vec![2.0, 2.0] }
    }

    #[test]
    fn dirichlet_moments() {
        let law = InitialLaw::Dirichlet { concentration: vec![2.0, 3.0, 5.0] };
        let mu = sample_initial(&law, 20000, 1).unwrap();
        for (c, expect) in [0.2, 0.3, 0.5].iter().enumerate() {
            let mean = mu.mean_of(|x| x[c]);
            let var = expect * (1.0 - expect) / 11.0;
            assert!((mean - expect).abs() < 4.0 * (var / 20000.0f64).sqrt());
        }
        assert!(InitialLaw::Dirichlet { concentration: vec![1.0, 0.0] }.validate().is_err());
        assert!(InitialLaw::UniformSimplex { dim: 1 }.validate().is_err());
    }

    #[test]
    fn dirac_at_vertex_stays_put() {
        let law = InitialLaw::Dirac { point: SimplexPoint::vertex(2, 0).unwrap() };
        let sched = ScalingSchedule::scaled(1.0, 64, 0.6, 0.4).unwrap();
        let ens = run_ensemble(&law, &headline(), &sched, 16, &[0.0, 0.5, 1.0], 3).unwrap();
        for s in &ens.snapshots {
            assert!(s.affine.iter().all(|x| x == [1.0, 0.0]));
            assert!(s.constant.iter().all(|x| x == [1.0, 0.0]));
        }
    }

    #[test]
    fn checkpoint_zero_is_discretized_initial() {
        let sched = ScalingSchedule::scaled(1.0, 64, 0.6, 0.4).unwrap();
        let ens = run_ensemble(&beta22(), &headline(), &sched, 32, &[0.0], 3).unwrap();
        assert_eq!(ens.snapshots[0].affine, ens.discretized_initial());
        assert_eq!(ens.snapshots[0].constant, ens.discretized_initial());
        let d = w1_exact(&ens.discretized_initial(), &ens.initial_samples).unwrap().0;
        assert!(d <= 2f64.sqrt() / sched.population() as f64);
    }

    #[test]
    fn ensemble_is_reproducible_and_validated() {
        let sched = ScalingSchedule::scaled(1.0, 32, 0.6, 0.4).unwrap();
        let a = run_ensemble(&beta22(), &headline(), &sched, 8, &[0.5, 1.0], 9).unwrap();
        let b = run_ensemble(&beta22(), &headline(), &sched, 8, &[0.5, 1.0], 9).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        assert!(run_ensemble(&beta22(), &headline(), &sched, 1, &[0.5], 9).is_err());
        assert!(run_ensemble(&beta22(), &headline(), &sched, 8, &[1.5], 9).is_err());
        let rps = PayoffMatrix::rock_paper_scissors();
        assert!(matches!(run_ensemble(&beta22(), &rps, &sched, 8, &[0.5], 9), Err(Error::Dimension { .. })));
    }

    #[test]
    fn first_step_mean_matches_exact_drift() {
        let law = InitialLaw::UniformSimplex { dim: 3 };
        let a = PayoffMatrix::rock_paper_scissors();
        let sched = ScalingSchedule::scaled(1.0, 128, 0.6, 0.4)
            .unwrap()
            .with_scales(1.0, 1.0)
            .unwrap();
        let r = 256;
        let tau = sched.tau();
        // 20 independent ensembles of 256
        let mut emp = vec![0.0; 3];
        let mut sq = vec![0.0; 3];
        let reps = 20u64;
        let mut exact = vec![0.0; 3];
        for rep in 0..reps {
            let ens = run_ensemble(&law, &a, &sched, r, &[tau], 1000 + rep).unwrap();
            for (s, x1) in ens.initial_states.iter().zip(ens.snapshots[0].affine.iter()) {
                let x0 = s.proportions();
                let d = exact_drift(s, &a).unwrap();
                for c in 0..3 {
                    let inc = x1[c] - x0.coords()[c];
                    emp[c] += inc;
                    sq[c] += inc * inc;
                    exact[c] += d[c];
                }
            }
        }
        let total = (reps as usize * r) as f64;
        for c in 0..3 {
            let mean = emp[c] / total;
            let var = sq[c] / total - mean * mean;
            let se = (var / total).sqrt();
            assert!((mean - exact[c] / total).abs() <= 4.0 * se, "c={c} {mean} vs {}", exact[c] / total);
        }
    }

    #[test]
    fn convergence_rejects_bad_regimes() {
        let cfg = FlowConfig::for_horizon(1.0).unwrap();
        let st = ExperimentSettings::new(8, vec![1.0], 0, cfg);
        let frozen = ScalingSchedule::scaled(1.0, 8, 1.0, 0.5).unwrap();
        assert!(matches!(
            convergence_experiment(&beta22(), &headline(), &frozen, &[8, 16], &st),
            Err(Error::Regime(_))
        ));
        let low = ScalingSchedule::scaled(1.0, 8, 0.5, 0.5).unwrap();
        let err = convergence_experiment(&beta22(), &headline(), &low, &[8, 16], &st).unwrap_err();
        assert!(err.to_string().contains("1/2"));
        let ok = ScalingSchedule::scaled(1.0, 8, 0.6, 0.4).unwrap();
        assert!(convergence_experiment(&beta22(), &headline(), &ok, &[16, 8], &st).is_err());
    }

    #[test]
    fn fixed_point_law_shows_no_growth() {
        let law = InitialLaw::Dirac { point: SimplexPoint::barycenter(3).unwrap() };
        let a = PayoffMatrix::rock_paper_scissors();
        let base = ScalingSchedule::scaled(1.0, 16, 0.6, 0.4).unwrap();
        let mut st = ExperimentSettings::new(64, vec![0.5, 1.0], 4, FlowConfig::for_horizon(1.0).unwrap());
        st.bootstrap_resamples = 20;
        let rep = convergence_experiment(&law, &a, &base, &[16, 64, 256], &st).unwrap();
        for r in &rep.resolutions {
            let n = r.population as f64;
            for c in &r.checkpoints {
                // rounding of 1/3 plus diffusion of at most sqrt(2k)/N
                let bound = 3f64.sqrt() / n + (2.0 * r.k as f64).sqrt() / n;
                assert!(c.w1_to_limit <= bound, "k={} t={} {} > {bound}", r.k, c.t, c.w1_to_limit);
                assert!(c.dual_lower_bound <= c.w1_to_limit + 1e-10);
            }
        }
        let s = rep.series(1.0);
        assert!(s[2] <= s[0]);
    }

    #[test]
    fn report_is_reproducible() {
        let base = ScalingSchedule::scaled(1.0, 16, 0.6, 0.4).unwrap();
        let mut st = ExperimentSettings::new(32, vec![0.5, 1.0], 8, FlowConfig::for_horizon(1.0).unwrap());
        st.bootstrap_resamples = 10;
        let a = convergence_experiment(&beta22(), &headline(), &base, &[16, 32], &st).unwrap();
        let b = convergence_experiment(&beta22(), &headline(), &base, &[16, 32], &st).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.schema_version, REPORT_SCHEMA_VERSION);
        assert!(a.interpolation_violations().is_empty());
    }

    #[test]
    fn classification() {
        assert_eq!(classify(0.6, 0.4), Regime::Critical);
        assert_eq!(classify(1.0, 0.5), Regime::Frozen);
        assert_eq!(classify(0.3, 0.3), Regime::Subcritical);
    }

    #[test]
    fn neutral_scale_is_diffusive_only() {
        let base = ScalingSchedule::scaled(1.0, 16, 0.8, 0.4)
            .unwrap()
            .with_scales(1.0, 0.0)
            .unwrap();
        let rep = regime_experiment(&beta22(), &headline(), &base, &[16, 64, 256], 256, 5).unwrap();
        assert_eq!(rep.regime, Regime::Frozen);
        for r in &rep.records {
            assert_eq!(r.selection_weight, 0.0);
            assert_eq!(r.drift_scale, 0.0);
            // the neutral bound is exact in expectation; allow sampling noise
            assert!(r.rms_displacement <= 1.2 * r.diffusive_bound, "{r:?}");
            let tau = r.tau;
            assert!(r.diffusive_bound <= (2.0 * tau.powf(2.0 * 0.8 - 1.0)).sqrt() * 1.01 + 1e-12);
        }
        assert!(regime_experiment(&beta22(), &headline(), &ScalingSchedule::fixed(1.0, 4, 8, 0.1).unwrap(), &[4], 8, 0).is_err());
    }

    #[test]
    fn test_function_derivatives_match_differences() {
        let fns = standard_family(3, 1.0).unwrap();
        let extra = TestFunction::new(
            "mixed",
            2.0,
            TimeWindow::Power { exponent: 2.0 },
            vec![
                Monomial { coefficient: 0.5, powers: vec![0, 1, 2] },
                Monomial { coefficient: -1.5, powers: vec![1, 1, 1] },
                Monomial { coefficient: 2.0, powers: vec![0, 0, 0] },
            ],
        )
        .unwrap();
        let x = [0.2, 0.3, 0.5];
        for phi in fns.iter().chain(std::iter::once(&extra)) {
            for &t in &[0.0, 0.3, 0.7, 0.95] {
                let h = 1e-6;
                let fd_t = (phi.value(t + h, &x) - phi.value(t - h, &x)) / (2.0 * h);
                let dt = phi.time_derivative(t, &x);
                assert!((fd_t - dt).abs() <= 1e-6 * dt.abs().max(1e-3), "{} t={t}", phi.name);
                let g = phi.gradient(t, &x);
                for i in 0..3 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (phi.value(t, &xp) - phi.value(t, &xm)) / (2.0 * h);
                    assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3));
                }
            }
            assert_eq!(phi.value(phi.horizon, &x), 0.0);
        }
        assert!(TestFunction::monomial("deg4", 1.0, TimeWindow::Bump, vec![2, 2]).is_err());
    }

    #[test]
    fn residual_examples() {
        let sched = ScalingSchedule::scaled(1.0, 32, 0.6, 0.4).unwrap();
        let ens = run_ensemble(&beta22(), &headline(), &sched, 16, &[], 2).unwrap();
        let paths = PathSet::from_ensemble(&ens);
        let zero = TestFunction::new("zero", 1.0, TimeWindow::Bump, vec![]).unwrap();
        assert_eq!(weak_form_residual(&paths, &headline(), &zero, 10, 0).unwrap().value, 0.0);
        let flat = TestFunction::monomial("linear", 1.0, TimeWindow::Linear, vec![0, 0]).unwrap();
        let r = weak_form_residual(&paths, &headline(), &flat, 10, 0).unwrap();
        assert!(r.value < 1e-14, "{r:?}");

        let coarse = ScalingSchedule::scaled(1.0, 8, 0.6, 0.4).unwrap();
        let ens = run_ensemble(&beta22(), &headline(), &coarse, 4, &[], 2).unwrap();
        let err = weak_form_residual(&PathSet::from_ensemble(&ens), &headline(), &flat, 10, 0).unwrap_err();
        assert!(matches!(err, Error::Resolution { nodes: 9, .. }));
    }

    #[test]
    fn limit_paths_have_small_residual() {
        let sched = ScalingSchedule::scaled(1.0, 256, 0.6, 0.4).unwrap();
        let ens = run_ensemble(&beta22(), &headline(), &sched, 32, &[], 2).unwrap();
        let paths = limit_ensemble(&ens, &headline(), &FlowConfig::for_horizon(1.0).unwrap()).unwrap();
        for phi in standard_family(2, 1.0).unwrap() {
            let r = weak_form_residual(&paths, &headline(), &phi, 50, 0).unwrap();
            // left-point rule for the constant interpolant is first order in tau
            assert!(r.value < 2e-3, "{} {r:?}", phi.name);
        }
    }

    #[test]
    fn percentile_interval() {
        let v: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert_eq!(percentile_halfwidth(&v), 0.5 * (194.0 - 5.0));
        assert_eq!(percentile_halfwidth(&[1.0]), 0.0);
    }
}
