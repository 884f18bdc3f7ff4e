//! The multi-strategy Moran chain on strategy counts.
//!
//! One step: a bearer of strategy `i` is chosen to reproduce with probability
//! proportional to `count_i * f_i`, and independently a uniformly chosen agent
//! (possibly the same one) abandons its strategy. The chain depends on the
//! agents only through the count vector, so that is the state we carry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::simplex::{
    check_weight, fitness_profile, PayoffMatrix, SimplexPoint, ALGEBRAIC_TOL,
};

/// Integer strategy counts of a population of fixed size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteState {
    counts: Vec<u64>,
    population: u64,
    selection_weight: f64,
}

impl DiscreteState {
    pub fn new(counts: Vec<u64>, selection_weight: f64) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidPoint(format!(
                "need at least 2 strategies, got {}",
                counts.len()
            )));
        }
        check_weight(selection_weight)?;
        let population: u64 = counts.iter().sum();
        if population < 2 {
            return Err(Error::Domain(format!(
                "population must be at least 2, got {population}"
            )));
        }
        Ok(Self {
            counts,
            population,
            selection_weight,
        })
    }

    /// Rounds a point of the simplex onto the `1/N` lattice by largest
    /// remainder: floor every `N * lambda_i`, then hand the missing units to
    /// the largest fractional parts, ties going to the lowest index.
    pub fn from_point(point: &SimplexPoint, population: u64, selection_weight: f64) -> Result<Self> {
        let n = population as f64;
        let scaled: Vec<f64> = point.coords().iter().map(|l| (l * n).max(0.0)).collect();
        let mut counts: Vec<u64> = scaled.iter().map(|x| x.floor() as u64).collect();
        let assigned: u64 = counts.iter().sum();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - scaled[a].floor();
            let rb = scaled[b] - scaled[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut missing = population.saturating_sub(assigned);
        for &i in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
        Self::new(counts, selection_weight)
    }

    /// All `population` agents carry strategy `strategy`.
    pub fn monomorphic(m: usize, strategy: usize, population: u64, selection_weight: f64) -> Result<Self> {
        if strategy >= m {
            return Err(Error::Dimension { expected: m, found: strategy + 1 });
        }
        let mut counts = vec![0; m];
        counts[strategy] = population;
        Self::new(counts, selection_weight)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    pub fn selection_weight(&self) -> f64 {
        self.selection_weight
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn is_monomorphic(&self) -> bool {
        self.counts.contains(&self.population)
    }

    pub fn proportions(&self) -> SimplexPoint {
        let mut coords = vec![0.0; self.dim()];
        self.proportions_into(&mut coords);
        SimplexPoint::new(coords).expect("count proportions lie on the simplex")
    }

    #[inline]
    pub(crate) fn proportions_into(&self, out: &mut [f64]) {
        let n = self.population as f64;
        for (o, &c) in out.iter_mut().zip(&self.counts) {
            *o = c as f64 / n;
        }
    }

    fn apply(&mut self, outcome: Outcome) {
        if let Outcome::Move { gain, lose } = outcome {
            self.counts[gain] += 1;
            self.counts[lose] -= 1;
        }
    }
}

/// Result of one step of the chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Stay,
    /// Strategy `gain` gains one bearer, strategy `lose` loses one.
    Move { gain: usize, lose: usize },
}

/// Exact one-step law of the chain from a given state.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    m: usize,
    move_probs: Vec<f64>,
    stay_prob: f64,
}

impl TransitionTable {
    pub fn dim(&self) -> usize {
        self.m
    }

    /// Probability that `gain` gains a bearer and `lose` loses one; zero on
    /// the diagonal (those events leave the proportions unchanged and are
    /// counted in [`stay_prob`](Self::stay_prob)).
    #[inline]
    pub fn move_prob(&self, gain: usize, lose: usize) -> f64 {
        self.move_probs[gain * self.m + lose]
    }

    pub fn stay_prob(&self) -> f64 {
        self.stay_prob
    }

    pub fn total(&self) -> f64 {
        self.stay_prob + self.move_probs.iter().sum::<f64>()
    }

    /// Outcomes with their probabilities in sampling order: stay first, then
    /// moves in row-major `(gain, lose)` order skipping the diagonal.
    pub fn outcomes(&self) -> impl Iterator<Item = (Outcome, f64)> + '_ {
        let m = self.m;
        std::iter::once((Outcome::Stay, self.stay_prob)).chain(
            (0..m * m)
                .filter(move |k| k / m != k % m)
                .map(move |k| (Outcome::Move { gain: k / m, lose: k % m }, self.move_probs[k])),
        )
    }

    /// Inverse-CDF lookup of a uniform draw `u` in `[0, 1)`.
    pub fn sample_outcome(&self, u: f64) -> Outcome {
        let target = u * self.total();
        let mut acc = 0.0;
        let mut last = Outcome::Stay;
        for (outcome, p) in self.outcomes() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = outcome;
            if target < acc {
                return outcome;
            }
        }
        last
    }

    /// `E[lambda(t_{h+1}) - lambda(t_h)]` summed over the table.
    pub fn mean_increment(&self, population: u64) -> Vec<f64> {
        let n = population as f64;
        let mut out = vec![0.0; self.m];
        for (outcome, p) in self.outcomes() {
            if let Outcome::Move { gain, lose } = outcome {
                out[gain] += p / n;
                out[lose] -= p / n;
            }
        }
        out
    }

    /// `E[(lambda_c(t_{h+1}) - lambda_c(t_h))^2]` for every component `c`.
    pub fn component_second_moments(&self, population: u64) -> Vec<f64> {
        let n2 = (population as f64).powi(2);
        let mut out = vec![0.0; self.m];
        for (outcome, p) in self.outcomes() {
            if let Outcome::Move { gain, lose } = outcome {
                out[gain] += p / n2;
                out[lose] += p / n2;
            }
        }
        out
    }

    /// `E[|lambda(t_{h+1}) - lambda(t_h)|^2]`.
    pub fn increment_second_moment(&self, population: u64) -> f64 {
        self.component_second_moments(population).iter().sum()
    }
}

/// Reusable buffers for building tables inside a tight simulation loop.
struct Workspace {
    lambda: Vec<f64>,
    fitness: Vec<f64>,
    table: TransitionTable,
}

impl Workspace {
    fn new(m: usize) -> Self {
        Self {
            lambda: vec![0.0; m],
            fitness: vec![0.0; m],
            table: TransitionTable {
                m,
                move_probs: vec![0.0; m * m],
                stay_prob: 1.0,
            },
        }
    }

    fn fill(&mut self, state: &DiscreteState, payoff: &PayoffMatrix) -> Result<()> {
        let m = state.dim();
        if payoff.dim() != m {
            return Err(Error::Dimension { expected: payoff.dim(), found: m });
        }
        state.proportions_into(&mut self.lambda);
        let n = state.population as f64;
        let w = state.selection_weight;
        payoff.apply_into(&self.lambda, &mut self.fitness);
        let mut mean = 0.0;
        for i in 0..m {
            let pi = n / (n - 1.0) * self.fitness[i] - payoff.get(i, i) / (n - 1.0);
            self.fitness[i] = (1.0 - w) + w * pi;
            mean += self.lambda[i] * self.fitness[i];
        }
        if mean <= 0.0 || !mean.is_finite() {
            return Err(Error::FitnessDegenerate { mean_fitness: mean });
        }
        let t = &mut self.table;
        let mut stay = 0.0;
        for i in 0..m {
            let repro = self.lambda[i] * self.fitness[i] / mean;
            stay += repro * self.lambda[i];
            for j in 0..m {
                t.move_probs[i * m + j] = if i == j { 0.0 } else { repro * self.lambda[j] };
            }
        }
        t.stay_prob = stay;
        Ok(())
    }
}

/// Exact transition law from `state`:
/// `P(i gains, j loses) = lambda_i f_i lambda_j / fbar` and
/// `P(stay) = sum_i lambda_i^2 f_i / fbar`.
pub fn transition_table(state: &DiscreteState, payoff: &PayoffMatrix) -> Result<TransitionTable> {
    let mut ws = Workspace::new(state.dim());
    ws.fill(state, payoff)?;
    Ok(ws.table)
}

/// Samples the successor of `state` using a single uniform draw.
pub fn step<R: Rng + ?Sized>(
    state: &DiscreteState,
    payoff: &PayoffMatrix,
    rng: &mut R,
) -> Result<DiscreteState> {
    let table = transition_table(state, payoff)?;
    let mut next = state.clone();
    next.apply(table.sample_outcome(rng.random::<f64>()));
    Ok(next)
}

/// Runs `steps` transitions from `initial`, returning all `steps + 1` states.
pub fn simulate_steps<R: Rng + ?Sized>(
    initial: &DiscreteState,
    payoff: &PayoffMatrix,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<DiscreteState>> {
    let mut ws = Workspace::new(initial.dim());
    let mut states = Vec::with_capacity(steps + 1);
    let mut current = initial.clone();
    states.push(current.clone());
    for _ in 0..steps {
        if !current.is_monomorphic() {
            ws.fill(&current, payoff)?;
            let u = rng.random::<f64>();
            current.apply(ws.table.sample_outcome(u));
        } else {
            // absorbing; consume the draw so streams stay aligned
            let _ = rng.random::<f64>();
        }
        states.push(current.clone());
    }
    Ok(states)
}

/// `E[lambda(t_{h+1}) - lambda(t_h) | state]` in closed form:
/// `lambda_i (f_i - fbar) / (N fbar)`.
pub fn exact_drift(state: &DiscreteState, payoff: &PayoffMatrix) -> Result<Vec<f64>> {
    let lambda = state.proportions();
    let prof = fitness_profile(&lambda, payoff, state.population, state.selection_weight)?;
    if prof.mean_fitness <= 0.0 {
        return Err(Error::FitnessDegenerate { mean_fitness: prof.mean_fitness });
    }
    let scale = 1.0 / (state.population as f64 * prof.mean_fitness);
    Ok(lambda
        .coords()
        .iter()
        .zip(&prof.fitnesses)
        .map(|(l, f)| scale * l * (f - prof.mean_fitness))
        .collect())
}

/// How population size and selection weight are chosen at one resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sizing {
    /// `N = max(n_floor, round(n_scale * tau^-alpha))`,
    /// `w = min(1, w_scale * tau^beta)`.
    Scaled {
        alpha: f64,
        beta: f64,
        n_floor: u64,
        n_scale: f64,
        w_scale: f64,
    },
    /// Explicit population and weight, independent of the time step.
    Fixed { population: u64, selection_weight: f64 },
}

/// One resolution level: horizon `T`, `k` steps of `tau = T / k`, and the
/// matching population size and selection weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSchedule {
    horizon: f64,
    resolution: usize,
    sizing: Sizing,
}

impl ScalingSchedule {
    /// Scaled schedule with floor 2 and unit prefactors.
    pub fn scaled(horizon: f64, resolution: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(
            horizon,
            resolution,
            Sizing::Scaled {
                alpha,
                beta,
                n_floor: 2,
                n_scale: 1.0,
                w_scale: 1.0,
            },
        )
    }

    pub fn fixed(horizon: f64, resolution: usize, population: u64, selection_weight: f64) -> Result<Self> {
        Self::new(horizon, resolution, Sizing::Fixed { population, selection_weight })
    }

    pub fn new(horizon: f64, resolution: usize, sizing: Sizing) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Configuration(format!("horizon must be positive, got {horizon}")));
        }
        if resolution == 0 {
            return Err(Error::Configuration("resolution k must be at least 1".into()));
        }
        match &sizing {
            Sizing::Scaled { alpha, beta, n_floor, n_scale, w_scale } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(Error::Configuration(format!("alpha must be positive, got {alpha}")));
                }
                if !(beta.is_finite() && *beta >= 0.0) {
                    return Err(Error::Configuration(format!("beta must be nonnegative, got {beta}")));
                }
                if *n_floor < 2 {
                    return Err(Error::Configuration(format!("n_floor must be at least 2, got {n_floor}")));
                }
                if !(n_scale.is_finite() && *n_scale > 0.0) {
                    return Err(Error::Configuration(format!("n_scale must be positive, got {n_scale}")));
                }
                if !(w_scale.is_finite() && *w_scale >= 0.0) {
                    return Err(Error::Configuration(format!("w_scale must be nonnegative, got {w_scale}")));
                }
            }
            Sizing::Fixed { population, selection_weight } => {
                if *population < 2 {
                    return Err(Error::Configuration(format!(
                        "population must be at least 2, got {population}"
                    )));
                }
                check_weight(*selection_weight)
                    .map_err(|e| Error::Configuration(e.to_string()))?;
            }
        }
        Ok(Self { horizon, resolution, sizing })
    }

    /// The same sizing rule at another resolution.
    pub fn with_resolution(&self, resolution: usize) -> Result<Self> {
        Self::new(self.horizon, resolution, self.sizing.clone())
    }

    pub fn with_scales(self, n_scale: f64, w_scale: f64) -> Result<Self> {
        match self.sizing {
            Sizing::Scaled { alpha, beta, n_floor, .. } => Self::new(
                self.horizon,
                self.resolution,
                Sizing::Scaled { alpha, beta, n_floor, n_scale, w_scale },
            ),
            Sizing::Fixed { .. } => Err(Error::Configuration(
                "prefactors apply only to scaled schedules".into(),
            )),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn sizing(&self) -> &Sizing {
        &self.sizing
    }

    /// `(alpha, beta)` for scaled schedules.
    pub fn exponents(&self) -> Option<(f64, f64)> {
        match self.sizing {
            Sizing::Scaled { alpha, beta, .. } => Some((alpha, beta)),
            Sizing::Fixed { .. } => None,
        }
    }

    pub fn tau(&self) -> f64 {
        self.horizon / self.resolution as f64
    }

    pub fn population(&self) -> u64 {
        match self.sizing {
            Sizing::Scaled { alpha, n_floor, n_scale, .. } => {
                let raw = (n_scale * self.tau().powf(-alpha)).round();
                n_floor.max(raw as u64)
            }
            Sizing::Fixed { population, .. } => population,
        }
    }

    pub fn selection_weight(&self) -> f64 {
        match self.sizing {
            Sizing::Scaled { beta, w_scale, .. } => (w_scale * self.tau().powf(beta)).min(1.0),
            Sizing::Fixed { selection_weight, .. } => selection_weight,
        }
    }

    /// `t_h = h T / k`, exact at `h = k`.
    pub fn time(&self, h: usize) -> f64 {
        if h == self.resolution {
            self.horizon
        } else {
            h as f64 * self.horizon / self.resolution as f64
        }
    }

    /// Per-unit-time drift prefactor `w / (N tau)` of the chain.
    pub fn drift_scale(&self) -> f64 {
        self.selection_weight() / (self.population() as f64 * self.tau())
    }
}

/// States of one chain on the time grid `t_h = h tau`, `h = 0..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schedule: ScalingSchedule,
    pub seed: u64,
    pub stream: u64,
    pub states: Vec<DiscreteState>,
}

/// Runs one chain over the schedule, drawing from stream 0 of `seed`.
pub fn simulate(
    initial: &DiscreteState,
    payoff: &PayoffMatrix,
    schedule: &ScalingSchedule,
    seed: u64,
) -> Result<Trajectory> {
    simulate_stream(initial, payoff, schedule, seed, 0)
}

pub fn simulate_stream(
    initial: &DiscreteState,
    payoff: &PayoffMatrix,
    schedule: &ScalingSchedule,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    if initial.population() != schedule.population() {
        return Err(Error::Configuration(format!(
            "initial population {} does not match schedule population {}",
            initial.population(),
            schedule.population()
        )));
    }
    if initial.selection_weight() != schedule.selection_weight() {
        return Err(Error::Configuration(format!(
            "initial selection weight {} does not match schedule weight {}",
            initial.selection_weight(),
            schedule.selection_weight()
        )));
    }
    if initial.dim() != payoff.dim() {
        return Err(Error::Dimension { expected: payoff.dim(), found: initial.dim() });
    }
    let mut rng = stream_rng(seed, stream);
    let states = simulate_steps(initial, payoff, schedule.resolution(), &mut rng)?;
    Ok(Trajectory { schedule: schedule.clone(), seed, stream, states })
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Grid index and fractional offset of `t`.
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let horizon = self.schedule.horizon();
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, {horizon}]")));
        }
        let k = self.states.len() - 1;
        let pos = t / horizon * k as f64;
        let nearest = pos.round();
        let pos = if (pos - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest
        } else {
            pos
        };
        let h = (pos.floor() as usize).min(k);
        Ok((h, pos - h as f64))
    }

    /// Piecewise affine interpolation of the proportions.
    pub fn interpolate_affine(&self, t: f64) -> Result<SimplexPoint> {
        let (h, frac) = self.locate(t)?;
        if frac == 0.0 {
            return Ok(self.states[h].proportions());
        }
        let a = self.states[h].proportions();
        let b = self.states[h + 1].proportions();
        let coords = a
            .coords()
            .iter()
            .zip(b.coords())
            .map(|(x, y)| x + frac * (y - x))
            .collect();
        SimplexPoint::with_tolerance(coords, ALGEBRAIC_TOL)
    }

    /// Piecewise constant (left-continuous grid value) interpolation;
    /// returns the final state at `t = T`.
    pub fn interpolate_constant(&self, t: f64) -> Result<SimplexPoint> {
        let (h, _) = self.locate(t)?;
        Ok(self.states[h].proportions())
    }
}
