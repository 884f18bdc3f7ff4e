//! Run configuration.
//!
//! One TOML file per run. Precedence, highest first: command-line flags,
//! the config file, the `MORANLAB_OUT` environment variable (output
//! directory only), built-in defaults. The defaults are the two-strategy
//! headline instance.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use moran_meanfield::transport::EXACT_CAP;
use moran_meanfield::{InitialLaw, PayoffMatrix, ScalingSchedule, SimplexPoint, Sizing, Thresholds};
use serde::{Deserialize, Serialize};
use toml::Spanned;

pub const OUT_ENV: &str = "MORANLAB_OUT";
const DEFAULT_OUT: &str = "moranlab-out";

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LawFile {
    Dirac { point: Vec<f64> },
    Dirichlet { concentration: Vec<f64> },
    UniformSimplex { dim: usize },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdsFile {
    monotone_slack: Option<Spanned<f64>>,
    final_ratio: Option<Spanned<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverFile {
    exact_cap: Option<Spanned<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFile {
    k: Option<Spanned<usize>>,
    population: Option<Spanned<u64>>,
    selection_weight: Option<Spanned<f64>>,
    initial: Option<Spanned<Vec<f64>>>,
    stream: Option<Spanned<u64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    payoff: Option<Spanned<Vec<Vec<f64>>>>,
    law: Option<Spanned<LawFile>>,
    horizon: Option<Spanned<f64>>,
    alpha: Option<Spanned<f64>>,
    beta: Option<Spanned<f64>>,
    n_scale: Option<Spanned<f64>>,
    w_scale: Option<Spanned<f64>>,
    n_floor: Option<Spanned<u64>>,
    ks: Option<Spanned<Vec<usize>>>,
    ensemble_size: Option<Spanned<usize>>,
    checkpoints: Option<Spanned<Vec<f64>>>,
    seed: Option<Spanned<u64>>,
    output_dir: Option<Spanned<String>>,
    flow_step: Option<Spanned<f64>>,
    bootstrap_resamples: Option<Spanned<usize>>,
    random_witnesses: Option<Spanned<usize>>,
    thresholds: Option<ThresholdsFile>,
    solver: Option<SolverFile>,
    simulate: Option<SimulateFile>,
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ks: Option<Vec<usize>>,
    pub ensemble_size: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub k: Option<usize>,
    pub population: Option<u64>,
    pub selection_weight: Option<f64>,
    pub stream: Option<u64>,
}

/// Where a value came from, for diagnostics.
#[derive(Clone, Debug)]
enum Origin {
    File(Range<usize>),
    Flag(&'static str),
    Env,
    Default,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateConfig {
    pub k: usize,
    pub population: Option<u64>,
    pub selection_weight: Option<f64>,
    pub initial: Option<Vec<f64>>,
    pub stream: u64,
}

/// Fully resolved and validated configuration. Serializes to the canonical
/// form that is hashed into the manifest; the output directory is left out
/// because it does not affect any output byte.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub payoff: Vec<Vec<f64>>,
    pub law: InitialLaw,
    pub horizon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_scale: f64,
    pub w_scale: f64,
    pub n_floor: u64,
    pub ks: Vec<usize>,
    pub ensemble_size: usize,
    pub checkpoints: Vec<f64>,
    pub seed: u64,
    pub flow_step: f64,
    pub bootstrap_resamples: usize,
    pub random_witnesses: usize,
    pub thresholds: Thresholds,
    pub exact_cap: usize,
    pub simulate: SimulateConfig,
    #[serde(skip)]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub source: Option<PathBuf>,
    #[serde(skip)]
    text: String,
    #[serde(skip)]
    origins: BTreeMap<&'static str, Origin>,
}

struct Resolver {
    origins: BTreeMap<&'static str, Origin>,
}

impl Resolver {
    fn pick<T>(&mut self, key: &'static str, flag: Option<(T, &'static str)>, file: Option<Spanned<T>>, default: T) -> T {
        let (value, origin) = match (flag, file) {
            (Some((v, name)), _) => (v, Origin::Flag(name)),
            (None, Some(s)) => {
                let span = s.span();
                (s.into_inner(), Origin::File(span))
            }
            (None, None) => (default, Origin::Default),
        };
        self.origins.insert(key, origin);
        value
    }

    fn pick_opt<T>(&mut self, key: &'static str, flag: Option<(T, &'static str)>, file: Option<Spanned<T>>) -> Option<T> {
        match (flag, file) {
            (Some((v, name)), _) => {
                self.origins.insert(key, Origin::Flag(name));
                Some(v)
            }
            (None, Some(s)) => {
                self.origins.insert(key, Origin::File(s.span()));
                Some(s.into_inner())
            }
            (None, None) => None,
        }
    }
}

fn locate(path: &str, text: &str, origin: Option<&Origin>, key: &str) -> String {
    match origin {
        Some(Origin::File(span)) => {
            let start = span.start.min(text.len());
            let line = text[..start].matches('\n').count() + 1;
            let col = start - text[..start].rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("{path}:{line}:{col}: `{key}`")
        }
        Some(Origin::Flag(name)) => format!("flag {name}"),
        Some(Origin::Env) => format!("environment variable {OUT_ENV}"),
        Some(Origin::Default) | None => format!("default `{key}`"),
    }
}

fn flag<T>(v: Option<T>, name: &'static str) -> Option<(T, &'static str)> {
    v.map(|v| (v, name))
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides and defaults and checks every
    /// precondition shared by the subcommands. Errors are one-line
    /// diagnostics naming the offending line or flag.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, String> {
        let (label, text) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                (p.display().to_string(), text)
            }
            None => ("<defaults>".to_string(), String::new()),
        };
        let file: FileConfig = toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .map_or(String::new(), |l| format!("{l}:"));
            format!("{label}:{line} {}", e.message())
        })?;
        Self::resolve(file, label, text, path.map(Path::to_path_buf), ov)
    }

    fn resolve(file: FileConfig, label: String, text: String, source: Option<PathBuf>, ov: &Overrides) -> Result<Self, String> {
        let mut r = Resolver { origins: BTreeMap::new() };
        let payoff = r.pick("payoff", None, file.payoff, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let law_file = r.pick("law", None, file.law, LawFile::Dirichlet { concentration: vec![2.0, 2.0] });
        let horizon = r.pick("horizon", None, file.horizon, 1.0);
        let alpha = r.pick("alpha", flag(ov.alpha, "--alpha"), file.alpha, 0.6);
        let beta = r.pick("beta", flag(ov.beta, "--beta"), file.beta, 0.4);
        let n_scale = r.pick("n_scale", None, file.n_scale, 1.0);
        let w_scale = r.pick("w_scale", None, file.w_scale, 1.0);
        let n_floor = r.pick("n_floor", None, file.n_floor, 2);
        let ks = r.pick("ks", flag(ov.ks.clone(), "--ks"), file.ks, vec![64, 128, 256, 512]);
        let ensemble_size = r.pick("ensemble_size", flag(ov.ensemble_size, "--ensemble-size"), file.ensemble_size, 256);
        let checkpoints = r.pick("checkpoints", None, file.checkpoints, vec![0.25, 0.5, 1.0]);
        let seed = r.pick("seed", flag(ov.seed, "--seed"), file.seed, 1);
        let flow_step = r.pick("flow_step", None, file.flow_step, horizon / 1024.0);
        let bootstrap_resamples = r.pick("bootstrap_resamples", None, file.bootstrap_resamples, 200);
        let random_witnesses = r.pick("random_witnesses", None, file.random_witnesses, 16);
        let defaults = Thresholds::default();
        let (th_slack, th_ratio) = file.thresholds.map_or((None, None), |t| (t.monotone_slack, t.final_ratio));
        let thresholds = Thresholds {
            monotone_slack: r.pick("thresholds.monotone_slack", None, th_slack, defaults.monotone_slack),
            final_ratio: r.pick("thresholds.final_ratio", None, th_ratio, defaults.final_ratio),
        };
        let exact_cap = r.pick("solver.exact_cap", None, file.solver.and_then(|s| s.exact_cap), EXACT_CAP);
        let sim = file.simulate.unwrap_or_default();
        let simulate = SimulateConfig {
            k: r.pick("simulate.k", flag(ov.k, "--k"), sim.k, 64),
            population: r.pick_opt("simulate.population", flag(ov.population, "--population"), sim.population),
            selection_weight: r.pick_opt(
                "simulate.selection_weight",
                flag(ov.selection_weight, "--selection-weight"),
                sim.selection_weight,
            ),
            initial: r.pick_opt("simulate.initial", None, sim.initial),
            stream: r.pick("simulate.stream", flag(ov.stream, "--stream"), sim.stream, 0),
        };
        let output_dir = match (&ov.out, file.output_dir, std::env::var_os(OUT_ENV)) {
            (Some(p), _, _) => {
                r.origins.insert("output_dir", Origin::Flag("--out"));
                p.clone()
            }
            (None, Some(s), _) => {
                r.origins.insert("output_dir", Origin::File(s.span()));
                PathBuf::from(s.into_inner())
            }
            (None, None, Some(env)) => {
                r.origins.insert("output_dir", Origin::Env);
                PathBuf::from(env)
            }
            (None, None, None) => {
                r.origins.insert("output_dir", Origin::Default);
                PathBuf::from(DEFAULT_OUT)
            }
        };
        let origins = r.origins;
        let law = match law_file {
            LawFile::Dirac { point } => InitialLaw::Dirac {
                point: SimplexPoint::new(point).map_err(|e| locate(&label, &text, origins.get("law"), "law") + ": " + &e.to_string())?,
            },
            LawFile::Dirichlet { concentration } => InitialLaw::Dirichlet { concentration },
            LawFile::UniformSimplex { dim } => InitialLaw::UniformSimplex { dim },
        };
        let cfg = RunConfig {
            payoff,
            law,
            horizon,
            alpha,
            beta,
            n_scale,
            w_scale,
            n_floor,
            ks,
            ensemble_size,
            checkpoints,
            seed,
            flow_step,
            bootstrap_resamples,
            random_witnesses,
            thresholds,
            exact_cap,
            simulate,
            output_dir,
            source,
            text,
            origins,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One-line diagnostic for `key`, located at its source.
    pub fn diag(&self, key: &str, msg: impl std::fmt::Display) -> String {
        let label = self.source.as_ref().map_or("<defaults>".to_string(), |p| p.display().to_string());
        format!("{}: {msg}", locate(&label, &self.text, self.origins.get(key), key))
    }

    fn validate(&self) -> Result<(), String> {
        let payoff = self.payoff_matrix()?;
        self.law.validate().map_err(|e| self.diag("law", e))?;
        if self.law.dim() != payoff.dim() {
            return Err(self.diag(
                "law",
                format!("initial law has dimension {} but the payoff matrix is {m}x{m}", self.law.dim(), m = payoff.dim()),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(self.diag("horizon", format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(self.diag("alpha", format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(self.diag("beta", format!("beta must be nonnegative, got {}", self.beta)));
        }
        if !(self.n_scale.is_finite() && self.n_scale > 0.0) {
            return Err(self.diag("n_scale", format!("n_scale must be positive, got {}", self.n_scale)));
        }
        if !(self.w_scale.is_finite() && self.w_scale >= 0.0) {
            return Err(self.diag("w_scale", format!("w_scale must be nonnegative, got {}", self.w_scale)));
        }
        if self.n_floor < 2 {
            return Err(self.diag("n_floor", format!("n_floor must be at least 2, got {}", self.n_floor)));
        }
        if self.ks.is_empty() {
            return Err(self.diag("ks", "need at least one resolution"));
        }
        if self.ks[0] == 0 {
            return Err(self.diag("ks", "resolutions must be at least 1"));
        }
        if let Some(w) = self.ks.windows(2).find(|w| w[1] <= w[0]) {
            return Err(self.diag("ks", format!("resolutions must be strictly increasing, got {} then {}", w[0], w[1])));
        }
        if self.exact_cap == 0 || self.exact_cap > EXACT_CAP {
            return Err(self.diag("solver.exact_cap", format!("exact solver cap must be in 1..={EXACT_CAP}, got {}", self.exact_cap)));
        }
        if self.ensemble_size < 2 {
            return Err(self.diag("ensemble_size", format!("ensemble size must be at least 2, got {}", self.ensemble_size)));
        }
        if self.ensemble_size > self.exact_cap {
            return Err(self.diag(
                "ensemble_size",
                format!("ensemble size {} exceeds the exact solver cap {}", self.ensemble_size, self.exact_cap),
            ));
        }
        if self.checkpoints.is_empty() {
            return Err(self.diag("checkpoints", "need at least one checkpoint"));
        }
        if let Some(t) = self.checkpoints.iter().find(|t| !(t.is_finite() && **t >= 0.0 && **t <= self.horizon)) {
            return Err(self.diag("checkpoints", format!("checkpoint {t} is outside [0, {}]", self.horizon)));
        }
        if let Some(w) = self.checkpoints.windows(2).find(|w| w[1] <= w[0]) {
            return Err(self.diag("checkpoints", format!("checkpoints must be strictly increasing, got {} then {}", w[0], w[1])));
        }
        if !(self.flow_step.is_finite() && self.flow_step > 0.0) {
            return Err(self.diag("flow_step", format!("flow step must be positive, got {}", self.flow_step)));
        }
        if self.bootstrap_resamples < 2 {
            return Err(self.diag("bootstrap_resamples", format!("need at least 2 resamples, got {}", self.bootstrap_resamples)));
        }
        let t = &self.thresholds;
        if !(t.monotone_slack.is_finite() && t.monotone_slack >= 0.0) {
            return Err(self.diag("thresholds.monotone_slack", format!("slack must be nonnegative, got {}", t.monotone_slack)));
        }
        if !(t.final_ratio.is_finite() && t.final_ratio > 0.0) {
            return Err(self.diag("thresholds.final_ratio", format!("ratio must be positive, got {}", t.final_ratio)));
        }
        for &k in &self.ks {
            self.scaled_schedule(k)?;
        }
        self.simulate_schedule()?;
        if let Some(p) = &self.simulate.initial {
            let point = SimplexPoint::new(p.clone()).map_err(|e| self.diag("simulate.initial", e))?;
            if point.dim() != payoff.dim() {
                return Err(self.diag(
                    "simulate.initial",
                    format!("initial point has dimension {} but the payoff matrix is {m}x{m}", point.dim(), m = payoff.dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn payoff_matrix(&self) -> Result<PayoffMatrix, String> {
        PayoffMatrix::new(self.payoff.clone()).map_err(|e| self.diag("payoff", e))
    }

    /// Scaled schedule at resolution `k`.
    pub fn scaled_schedule(&self, k: usize) -> Result<ScalingSchedule, String> {
        ScalingSchedule::new(
            self.horizon,
            k,
            Sizing::Scaled {
                alpha: self.alpha,
                beta: self.beta,
                n_floor: self.n_floor,
                n_scale: self.n_scale,
                w_scale: self.w_scale,
            },
        )
        .map_err(|e| self.diag("ks", e))
    }

    /// Schedule of the `simulate` command: explicit population and weight if
    /// both are given, otherwise the scaled rule at `simulate.k`.
    pub fn simulate_schedule(&self) -> Result<ScalingSchedule, String> {
        let s = &self.simulate;
        match (s.population, s.selection_weight) {
            (Some(population), Some(selection_weight)) => {
                ScalingSchedule::fixed(self.horizon, s.k, population, selection_weight)
                    .map_err(|e| self.diag("simulate.population", e))
            }
            (Some(_), None) => Err(self.diag("simulate.population", "population needs selection_weight as well")),
            (None, Some(_)) => Err(self.diag("simulate.selection_weight", "selection_weight needs population as well")),
            (None, None) => self.scaled_schedule(s.k).map_err(|_| {
                self.diag("simulate.k", format!("no valid scaled schedule at k = {}", s.k))
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, String> {
        let file: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        RunConfig::resolve(file, "run.toml".into(), text.into(), Some("run.toml".into()), &Overrides::default())
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.ks, vec![64, 128, 256, 512]);
        assert_eq!(cfg.ensemble_size, 256);
    }

    #[test]
    fn negative_entry_names_entry_and_line() {
        let err = parse("seed = 3\npayoff = [[1.0, -1.0], [0.5, 1.0]]\n").unwrap_err();
        assert!(err.contains("run.toml:2:"), "{err}");
        assert!(err.contains("[0][1]"), "{err}");
    }

    #[test]
    fn flags_override_file() {
        let file: FileConfig = toml::from_str("seed = 3\nalpha = 0.7\nbeta = 0.3\n").unwrap();
        let ov = Overrides { seed: Some(9), ..Default::default() };
        let cfg = RunConfig::resolve(file, "x".into(), String::new(), None, &ov).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.alpha, 0.7);
        assert!(cfg.diag("seed", "m").starts_with("flag --seed"));
    }

    #[test]
    fn rejects_bad_values_with_location() {
        let err = parse("ks = [64, 32]\n").unwrap_err();
        assert!(err.contains("run.toml:1:") && err.contains("increasing"), "{err}");
        let err = parse("ensemble_size = 5000\n").unwrap_err();
        assert!(err.contains("cap"), "{err}");
        let err = parse("[law]\nkind = \"dirichlet\"\nconcentration = [1.0, 1.0, 1.0]\n").unwrap_err();
        assert!(err.contains("dimension 3"), "{err}");
        assert!(parse("unknown_key = 1\n").is_err());
        let err = parse("[simulate]\npopulation = 8\n").unwrap_err();
        assert!(err.contains("selection_weight"), "{err}");
    }
}
