//! Replicator flow by fixed-step RK4 and pushforward of empirical measures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{field_into, PayoffMatrix, SimplexPoint, ALGEBRAIC_TOL, INTEGRATION_TOL};
use crate::transport::EmpiricalMeasure;

/// Smallest step the rejection cascade may reach.
pub const MIN_STEP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub step_size: f64,
    /// Clip tiny negative coordinates and rescale to unit sum after each step.
    pub renormalize: bool,
}

impl FlowConfig {
    pub fn new(step_size: f64) -> Result<Self> {
        if !(step_size.is_finite() && step_size > 0.0) {
            return Err(Error::Configuration(format!("flow step size must be positive, got {step_size}")));
        }
        Ok(Self { step_size, renormalize: true })
    }

    /// `T / 1024`.
    pub fn for_horizon(horizon: f64) -> Result<Self> {
        Self::new(horizon / 1024.0)
    }

    pub fn without_renormalization(mut self) -> Self {
        self.renormalize = false;
        self
    }
}

/// Integration diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub steps: usize,
    pub rejections: usize,
    /// Largest `|sum - 1|` over all RK4 stage evaluation points.
    pub max_stage_sum_deviation: f64,
    /// Largest per-step renormalization correction that was applied.
    pub max_correction: f64,
}

struct Rk4 {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
    ax: Vec<f64>,
    next: Vec<f64>,
}

impl Rk4 {
    fn new(m: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; m]),
            stage: vec![0.0; m],
            ax: vec![0.0; m],
            next: vec![0.0; m],
        }
    }

    fn step(&mut self, x: &[f64], h: f64, a: &PayoffMatrix, stats: &mut FlowStats) {
        let m = x.len();
        let coef = [0.0, 0.5, 0.5, 1.0];
        for s in 0..4 {
            if s == 0 {
                self.stage.copy_from_slice(x);
            } else {
                for i in 0..m {
                    self.stage[i] = x[i] + coef[s] * h * self.k[s - 1][i];
                }
            }
            let dev = (self.stage.iter().sum::<f64>() - 1.0).abs();
            stats.max_stage_sum_deviation = stats.max_stage_sum_deviation.max(dev);
            field_into(&self.stage, a, &mut self.ax, &mut self.k[s]);
        }
        for i in 0..m {
            self.next[i] = x[i]
                + h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
    }
}

/// Integrates from `x` over `[t0, t0 + duration]` in place.
fn advance(
    x: &mut [f64],
    a: &PayoffMatrix,
    t0: f64,
    duration: f64,
    cfg: &FlowConfig,
    rk: &mut Rk4,
    stats: &mut FlowStats,
) -> Result<()> {
    if duration <= 0.0 {
        return Ok(());
    }
    let n = (duration / cfg.step_size).ceil().max(1.0) as usize;
    let base = duration / n as f64;
    let mut t = 0.0;
    let mut h = base;
    while t < duration {
        let h_eff = h.min(duration - t);
        rk.step(x, h_eff, a, stats);
        if cfg.renormalize {
            let min = rk.next.iter().cloned().fold(f64::INFINITY, f64::min);
            let sum: f64 = rk.next.iter().map(|v| v.max(0.0)).sum();
            let correction = (sum - 1.0).abs().max((-min).max(0.0));
            if correction > ALGEBRAIC_TOL || !correction.is_finite() {
                stats.rejections += 1;
                h *= 0.5;
                if h < MIN_STEP {
                    return Err(Error::Stiffness {
                        time: t0 + t,
                        reason: format!("renormalization correction {correction:e} exceeds {ALGEBRAIC_TOL:e}"),
                    });
                }
                continue;
            }
            stats.max_correction = stats.max_correction.max(correction);
            for (xi, &v) in x.iter_mut().zip(&rk.next) {
                *xi = v.max(0.0) / sum;
            }
        } else {
            x.copy_from_slice(&rk.next);
        }
        stats.steps += 1;
        t += h_eff;
        // try to get back to the nominal step once past the trouble
        if h < base {
            h = (2.0 * h).min(base);
        }
        if duration - t < 1e-15 * duration.max(1.0) {
            break;
        }
    }
    Ok(())
}

fn finish(x: Vec<f64>, cfg: &FlowConfig) -> Result<SimplexPoint> {
    let tol = if cfg.renormalize { ALGEBRAIC_TOL } else { INTEGRATION_TOL };
    SimplexPoint::with_tolerance(x, tol)
}

/// `Psi(t, lambda0)` together with integration diagnostics.
pub fn flow_with_stats(
    lambda0: &SimplexPoint,
    payoff: &PayoffMatrix,
    t: f64,
    cfg: &FlowConfig,
) -> Result<(SimplexPoint, FlowStats)> {
    payoff.check_dim(lambda0.dim())?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("flow time must be nonnegative, got {t}")));
    }
    let mut x = lambda0.coords().to_vec();
    let mut rk = Rk4::new(x.len());
    let mut stats = FlowStats::default();
    advance(&mut x, payoff, 0.0, t, cfg, &mut rk, &mut stats)?;
    Ok((finish(x, cfg)?, stats))
}

/// `Psi(t, lambda0)`.
pub fn flow(lambda0: &SimplexPoint, payoff: &PayoffMatrix, t: f64, cfg: &FlowConfig) -> Result<SimplexPoint> {
    flow_with_stats(lambda0, payoff, t, cfg).map(|(p, _)| p)
}

/// `Psi(t_j, lambda0)` for nondecreasing `times` starting at or after 0.
pub fn flow_on_grid(
    lambda0: &SimplexPoint,
    payoff: &PayoffMatrix,
    times: &[f64],
    cfg: &FlowConfig,
) -> Result<Vec<SimplexPoint>> {
    payoff.check_dim(lambda0.dim())?;
    let mut x = lambda0.coords().to_vec();
    let mut rk = Rk4::new(x.len());
    let mut stats = FlowStats::default();
    let mut now = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if !(t >= now) {
            return Err(Error::Domain(format!("grid times must be nondecreasing from 0, got {t} after {now}")));
        }
        advance(&mut x, payoff, now, t - now, cfg, &mut rk, &mut stats)?;
        now = t;
        out.push(finish(x.clone(), cfg)?);
    }
    Ok(out)
}

/// Applies the flow to every sample; the output keeps sample order.
pub fn pushforward(
    samples: &EmpiricalMeasure,
    payoff: &PayoffMatrix,
    t: f64,
    cfg: &FlowConfig,
) -> Result<EmpiricalMeasure> {
    payoff.check_dim(samples.dim())?;
    let m = samples.dim();
    let moved: Vec<Vec<f64>> = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let p = SimplexPoint::with_tolerance(samples.point(i).to_vec(), INTEGRATION_TOL)
                .and_then(|p| flow(&p, payoff, t, cfg))
                .map_err(|e| Error::Sample { index: i, source: Box::new(e) })?;
            Ok(p.into_coords())
        })
        .collect::<Result<_>>()?;
    Ok(EmpiricalMeasure::from_flat_unchecked(m, moved.concat()))
}
