//! Fast self-check suite: exactness of the transition law, drift
//! consistency, metric axioms of the transport solver and RK4 order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{exact_drift, transition_table, DiscreteState, Outcome};
use crate::error::Result;
use crate::flow::{flow, FlowConfig};
use crate::rng::{derive_seed, domain, stream_rng};
use crate::simplex::{euclidean, PayoffMatrix, SimplexPoint};
use crate::transport::{w1_dual_lower_bound, w1_exact, standard_witnesses, EmpiricalMeasure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

/// Transition law of an explicit population of agents, by enumerating every
/// (reproducing agent, dying agent) pair. Returns row-major move
/// probabilities and the stay probability.
pub fn enumerate_agent_pairs(counts: &[u64], payoff: &PayoffMatrix, w: f64) -> (Vec<f64>, f64) {
    let agents: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(s, &c)| std::iter::repeat_n(s, c as usize))
        .collect();
    let n = agents.len();
    let fitness: Vec<f64> = (0..n)
        .map(|u| {
            let pay: f64 = (0..n).filter(|&o| o != u).map(|o| payoff.get(agents[u], agents[o])).sum();
            1.0 - w + w * pay / (n - 1) as f64
        })
        .collect();
    let total: f64 = fitness.iter().sum();
    let m = counts.len();
    let mut moves = vec![0.0; m * m];
    let mut stay = 0.0;
    for u in 0..n {
        let p = fitness[u] / total / n as f64;
        for v in 0..n {
            if agents[u] == agents[v] {
                stay += p;
            } else {
                moves[agents[u] * m + agents[v]] += p;
            }
        }
    }
    (moves, stay)
}

pub fn random_payoff<R: Rng + ?Sized>(m: usize, rng: &mut R) -> PayoffMatrix {
    PayoffMatrix::new((0..m).map(|_| (0..m).map(|_| rng.random_range(0.0..5.0)).collect()).collect())
        .expect("nonnegative entries")
}

pub fn random_counts<R: Rng + ?Sized>(m: usize, n: u64, rng: &mut R) -> Vec<u64> {
    let mut counts = vec![0u64; m];
    for _ in 0..n {
        counts[rng.random_range(0..m)] += 1;
    }
    counts
}

fn random_measure<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> EmpiricalMeasure {
    let pts: Vec<SimplexPoint> = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
            SimplexPoint::from_weights(&w).expect("positive weights")
        })
        .collect();
    EmpiricalMeasure::new(&pts).expect("nonempty")
}

fn check_transitions(seed: u64) -> Result<CheckResult> {
    let mut rng = stream_rng(derive_seed(seed, domain::VALIDATION, 1), 0);
    let mut worst_sum = 0.0f64;
    let mut worst_enum = 0.0f64;
    let mut cases = 0;
    for m in 2..=4 {
        for n in 2..=12u64 {
            for &w in &[0.0, 0.1, 1.0] {
                for _ in 0..4 {
                    let a = random_payoff(m, &mut rng);
                    let counts = random_counts(m, n, &mut rng);
                    let t = transition_table(&DiscreteState::new(counts.clone(), w)?, &a)?;
                    let (moves, stay) = enumerate_agent_pairs(&counts, &a, w);
                    worst_sum = worst_sum.max((t.total() - 1.0).abs());
                    worst_enum = worst_enum.max((t.stay_prob() - stay).abs());
                    for i in 0..m {
                        for j in 0..m {
                            worst_enum = worst_enum.max((t.move_prob(i, j) - moves[i * m + j]).abs());
                        }
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(CheckResult::new(
        "transition normalization",
        worst_sum <= 1e-12 && worst_enum <= 1e-12,
        format!("{cases} tables, max |sum-1| = {worst_sum:.1e}, max enumeration gap = {worst_enum:.1e}"),
    ))
}

fn check_drift(seed: u64) -> Result<CheckResult> {
    let mut rng = stream_rng(derive_seed(seed, domain::VALIDATION, 2), 0);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let m = rng.random_range(2..=4);
        let n = rng.random_range(2..=40u64);
        let w = rng.random_range(0.0..=1.0);
        let a = random_payoff(m, &mut rng);
        let s = DiscreteState::new(random_counts(m, n, &mut rng), w)?;
        let table = transition_table(&s, &a)?;
        let d = exact_drift(&s, &a)?;
        let mut mean = vec![0.0; m];
        for (o, p) in table.outcomes() {
            if let Outcome::Move { gain, lose } = o {
                mean[gain] += p / n as f64;
                mean[lose] -= p / n as f64;
            }
        }
        worst = worst.max(d.iter().zip(&mean).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    Ok(CheckResult::new("drift consistency", worst <= 1e-13, format!("300 states, max gap = {worst:.1e}")))
}

fn check_metric(seed: u64) -> Result<CheckResult> {
    let mut rng = stream_rng(derive_seed(seed, domain::VALIDATION, 3), 0);
    let mut failures = Vec::new();
    for trial in 0..60 {
        let m = rng.random_range(2..=4);
        let n = rng.random_range(1..=16);
        let (a, b, c) = (
            random_measure(m, n, &mut rng),
            random_measure(m, n, &mut rng),
            random_measure(m, n, &mut rng),
        );
        let ab = w1_exact(&a, &b)?.0;
        let ba = w1_exact(&b, &a)?.0;
        let bc = w1_exact(&b, &c)?.0;
        let ac = w1_exact(&a, &c)?.0;
        let aa = w1_exact(&a, &a)?.0;
        if (ab - ba).abs() > 1e-12 || ac > ab + bc + 1e-10 || aa != 0.0 {
            failures.push(trial);
        }
        let lb = w1_dual_lower_bound(&a, &b, &standard_witnesses(m, 8, seed))?;
        if lb > ab + 1e-10 {
            failures.push(trial);
        }
    }
    // brute force on R = 4
    for _ in 0..20 {
        let a = random_measure(3, 4, &mut rng);
        let b = random_measure(3, 4, &mut rng);
        let mut best = f64::INFINITY;
        for p in permutations4() {
            let c: f64 = (0..4).map(|i| euclidean(a.point(i), b.point(p[i]))).sum::<f64>() / 4.0;
            best = best.min(c);
        }
        if (w1_exact(&a, &b)?.0 - best).abs() > 1e-10 {
            failures.push(usize::MAX);
        }
    }
    Ok(CheckResult::new(
        "W1 metric axioms",
        failures.is_empty(),
        if failures.is_empty() { "60 triples, 20 brute-force instances".into() } else { format!("failed trials {failures:?}") },
    ))
}

fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    if (0..4).all(|x| p.contains(&x)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Observed RK4 order on `lambda_1' = -2 lambda_1 (1 - lambda_1)` against
/// the logistic solution, over step sizes `1/8, 1/16, 1/32`.
pub fn rk4_observed_orders() -> Result<Vec<f64>> {
    let a = PayoffMatrix::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]])?;
    let l0 = 0.7;
    let p = SimplexPoint::new(vec![l0, 1.0 - l0])?;
    let e = (-2.0f64).exp();
    let exact = l0 * e / (1.0 - l0 + l0 * e);
    let errs: Vec<f64> = [8.0, 16.0, 32.0]
        .iter()
        .map(|d| flow(&p, &a, 1.0, &FlowConfig::new(1.0 / d)?).map(|q| (q.coords()[0] - exact).abs()))
        .collect::<Result<_>>()?;
    Ok(errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
}

fn check_rk4() -> Result<CheckResult> {
    let orders = rk4_observed_orders()?;
    Ok(CheckResult::new(
        "RK4 order",
        orders.iter().all(|o| *o >= 3.7),
        format!("observed orders {:?}", orders.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>()),
    ))
}

/// Runs every check; the seed only changes the random instances.
pub fn run_validation(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![check_transitions(seed)?, check_drift(seed)?, check_metric(seed)?, check_rk4()?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in [0, 1, 2] {
            for c in run_validation(seed).unwrap() {
                assert!(c.passed, "seed {seed}: {} {}", c.name, c.detail);
            }
        }
    }

    #[test]
    fn permutation_table() {
        assert_eq!(permutations4().len(), 24);
    }
}
