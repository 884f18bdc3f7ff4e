//! Simplex geometry, payoffs, fitness and the replicator vector field.
//!
//! A population with `M` strategies is summarised by its proportions, a point
//! of the probability simplex. Everything in this module is a pure function of
//! such a point and a nonnegative payoff matrix.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for algebraic identities (sums, positivity after arithmetic).
pub const ALGEBRAIC_TOL: f64 = 1e-12;

/// Tolerance for states produced by numerical integration.
pub const INTEGRATION_TOL: f64 = 1e-9;

/// A point of the simplex: `M >= 2` nonnegative proportions summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexPoint {
    coords: Vec<f64>,
}

impl SimplexPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        Self::check(&coords, ALGEBRAIC_TOL)?;
        Ok(Self { coords })
    }

    /// Builds a point from coordinates produced by integration, accepting the
    /// looser post-integration tolerance.
    pub fn with_tolerance(coords: Vec<f64>, tol: f64) -> Result<Self> {
        Self::check(&coords, tol)?;
        Ok(Self { coords })
    }

    /// Normalizes nonnegative weights onto the simplex.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidPoint(format!(
                "weights must be finite and nonnegative, got {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidPoint("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    /// The vertex `e_i` of the simplex in dimension `m`.
    pub fn vertex(m: usize, i: usize) -> Result<Self> {
        if i >= m {
            return Err(Error::Dimension { expected: m, found: i + 1 });
        }
        let mut coords = vec![0.0; m];
        coords[i] = 1.0;
        Self::new(coords)
    }

    pub fn barycenter(m: usize) -> Result<Self> {
        Self::new(vec![1.0 / m as f64; m])
    }

    fn check(coords: &[f64], tol: f64) -> Result<()> {
        if coords.len() < 2 {
            return Err(Error::InvalidPoint(format!(
                "need at least 2 strategies, got {}",
                coords.len()
            )));
        }
        if let Some(c) = coords
            .iter()
            .find(|c| !c.is_finite() || **c < -tol || **c > 1.0 + tol)
        {
            return Err(Error::InvalidPoint(format!(
                "coordinate {c} outside [0, 1] in {coords:?}"
            )));
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidPoint(format!(
                "coordinates sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// Euclidean distance to another point of the same dimension.
    pub fn distance(&self, other: &SimplexPoint) -> f64 {
        euclidean(&self.coords, &other.coords)
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Self::new(coords)
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Self {
        p.coords
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Square matrix of nonnegative pairwise payoffs; `a_ij` is the payoff to a
/// strategy-`i` bearer meeting a strategy-`j` bearer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PayoffMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl PayoffMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if m < 2 {
            return Err(Error::InvalidPayoff(format!(
                "need at least 2 strategies, got {m}"
            )));
        }
        let mut entries = Vec::with_capacity(m * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidPayoff(format!(
                    "row {i} has {} entries, matrix is {m}x{m}",
                    row.len()
                )));
            }
            for (j, &a) in row.iter().enumerate() {
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::InvalidPayoff(format!(
                        "entry [{i}][{j}] = {a} is negative or not finite"
                    )));
                }
                entries.push(a);
            }
        }
        Ok(Self { m, entries })
    }

    /// Every entry equal to `c`.
    pub fn constant(m: usize, c: f64) -> Result<Self> {
        Self::new(vec![vec![c; m]; m])
    }

    /// Rock-paper-scissors with win 2, loss 1, tie 0.
    pub fn rock_paper_scissors() -> Self {
        Self::new(vec![
            vec![0.0, 2.0, 1.0],
            vec![1.0, 0.0, 2.0],
            vec![2.0, 1.0, 0.0],
        ])
        .expect("static matrix is valid")
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.m).map(<[f64]>::to_vec).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.get(i, i)).collect()
    }

    /// Returns `A + c * ones`.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        Self::new(
            self.rows()
                .into_iter()
                .map(|r| r.into_iter().map(|a| a + c).collect())
                .collect(),
        )
    }

    /// `A x` for a raw coordinate slice.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.apply_into(x, &mut out);
        out
    }

    #[inline]
    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.entries[i * self.m..(i + 1) * self.m];
            *o = row.iter().zip(x).map(|(a, v)| a * v).sum();
        }
    }

    pub(crate) fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.m {
            return Err(Error::Dimension { expected: self.m, found });
        }
        Ok(())
    }

    /// Serializes as a one-line structured-text block, `payoff = [[..], ..]`.
    /// Entries use the shortest decimal form that parses back to the same bits.
    pub fn to_toml_block(&self) -> String {
        let rows: Vec<String> = self
            .entries
            .chunks(self.m)
            .map(|r| {
                let cells: Vec<String> = r.iter().map(|a| format!("{a:?}")).collect();
                format!("[{}]", cells.join(", "))
            })
            .collect();
        format!("payoff = [{}]\n", rows.join(", "))
    }

    /// Parses a structured-text block containing a `payoff` key.
    pub fn from_toml_block(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Block {
            payoff: Vec<Vec<f64>>,
        }
        let block: Block = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(block.payoff)
    }
}

impl TryFrom<Vec<Vec<f64>>> for PayoffMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<PayoffMatrix> for Vec<Vec<f64>> {
    fn from(a: PayoffMatrix) -> Self {
        a.rows()
    }
}

impl fmt::Display for PayoffMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.entries.chunks(self.m) {
            let cells: Vec<String> = row.iter().map(|a| format!("{a:>8.4}")).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Expected payoff of each strategy when a bearer meets a uniformly chosen
/// *other* member of a population of size `population`:
/// `pi_i = N/(N-1) (A lambda)_i - a_ii/(N-1)`.
pub fn expected_payoff(
    point: &SimplexPoint,
    payoff: &PayoffMatrix,
    population: u64,
) -> Result<Vec<f64>> {
    payoff.check_dim(point.dim())?;
    if population < 2 {
        return Err(Error::Domain(format!(
            "population must be at least 2, got {population}"
        )));
    }
    let n = population as f64;
    let scale = n / (n - 1.0);
    let mut pi = payoff.apply(point.coords());
    for (i, p) in pi.iter_mut().enumerate() {
        *p = scale * *p - payoff.get(i, i) / (n - 1.0);
    }
    Ok(pi)
}

/// Payoffs, fitnesses and mean fitness at one population state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessProfile {
    pub payoffs: Vec<f64>,
    pub fitnesses: Vec<f64>,
    pub mean_fitness: f64,
    pub selection_weight: f64,
    pub population: u64,
}

/// Fitness `f_i = (1 - w) + w pi_i` and its population mean.
pub fn fitness_profile(
    point: &SimplexPoint,
    payoff: &PayoffMatrix,
    population: u64,
    selection_weight: f64,
) -> Result<FitnessProfile> {
    check_weight(selection_weight)?;
    let payoffs = expected_payoff(point, payoff, population)?;
    let w = selection_weight;
    let fitnesses: Vec<f64> = payoffs.iter().map(|p| (1.0 - w) + w * p).collect();
    let mean_fitness = point
        .coords()
        .iter()
        .zip(&fitnesses)
        .map(|(l, f)| l * f)
        .sum();
    Ok(FitnessProfile {
        payoffs,
        fitnesses,
        mean_fitness,
        selection_weight,
        population,
    })
}

pub(crate) fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!(
            "selection weight must lie in [0, 1], got {w}"
        )));
    }
    Ok(())
}

/// Mean fitness written out through the matrix:
/// `1 - w + w N/(N-1) (A lambda).lambda - w/(N-1) diag(A).lambda`.
pub fn mean_fitness_expanded(
    point: &SimplexPoint,
    payoff: &PayoffMatrix,
    population: u64,
    selection_weight: f64,
) -> Result<f64> {
    payoff.check_dim(point.dim())?;
    check_weight(selection_weight)?;
    let n = population as f64;
    let w = selection_weight;
    let lam = point.coords();
    let al = payoff.apply(lam);
    let quad: f64 = al.iter().zip(lam).map(|(a, l)| a * l).sum();
    let diag: f64 = payoff.diag().iter().zip(lam).map(|(a, l)| a * l).sum();
    Ok(1.0 - w + w * n / (n - 1.0) * quad - w / (n - 1.0) * diag)
}

/// Replicator field `b_i = lambda_i ((A lambda)_i - (A lambda).lambda)`.
pub fn replicator_field(point: &SimplexPoint, payoff: &PayoffMatrix) -> Result<Vec<f64>> {
    payoff.check_dim(point.dim())?;
    let mut out = vec![0.0; point.dim()];
    let mut scratch = vec![0.0; point.dim()];
    field_into(point.coords(), payoff, &mut scratch, &mut out);
    Ok(out)
}

/// Field evaluation on raw coordinates, used inside integrators where stage
/// points are only approximately on the simplex.
#[inline]
pub(crate) fn field_into(x: &[f64], payoff: &PayoffMatrix, ax: &mut [f64], out: &mut [f64]) {
    payoff.apply_into(x, ax);
    let mean: f64 = ax.iter().zip(x).map(|(a, l)| a * l).sum();
    for ((o, a), l) in out.iter_mut().zip(ax.iter()).zip(x) {
        *o = l * (a - mean);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn headline() -> PayoffMatrix {
        PayoffMatrix::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()
    }

    fn pt(c: &[f64]) -> SimplexPoint {
        SimplexPoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn rejects_degenerate_points() {
        assert!(SimplexPoint::new(vec![1.0]).is_err());
        assert!(SimplexPoint::new(vec![0.5, 0.4]).is_err());
        assert!(SimplexPoint::new(vec![1.5, -0.5]).is_err());
        assert!(SimplexPoint::new(vec![f64::NAN, 1.0]).is_err());
        assert!(SimplexPoint::new(vec![0.3, 0.7]).is_ok());
    }

    #[test]
    fn rejects_bad_payoffs() {
        assert!(PayoffMatrix::new(vec![vec![1.0]]).is_err());
        assert!(PayoffMatrix::new(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        let err = PayoffMatrix::new(vec![vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap_err();
        assert!(err.to_string().contains("[0][1]"), "{err}");
    }

    #[test]
    fn expected_payoff_two_strategy_example() {
        let pi = expected_payoff(&pt(&[0.6, 0.4]), &headline(), 5).unwrap();
        // a11 (N1-1)/(N-1) + a12 N2/(N-1) with N1 = 3, N2 = 2
        let expect1 = 1.0 * 2.0 / 4.0 + 2.0 * 2.0 / 4.0;
        let expect2 = 3.0 * 3.0 / 4.0 + 4.0 * 1.0 / 4.0;
        assert!((pi[0] - expect1).abs() < 1e-14 && (expect1 - 1.5).abs() < 1e-15);
        assert!((pi[1] - expect2).abs() < 1e-14 && (expect2 - 3.25).abs() < 1e-15);
    }

    #[test]
    fn expected_payoff_errors() {
        assert!(matches!(
            expected_payoff(&pt(&[0.5, 0.5]), &headline(), 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            expected_payoff(&pt(&[0.2, 0.3, 0.5]), &headline(), 5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn constant_payoff_gives_constant() {
        let a = PayoffMatrix::constant(3, 2.5).unwrap();
        for n in [2, 7, 100] {
            let pi = expected_payoff(&pt(&[0.2, 0.3, 0.5]), &a, n).unwrap();
            assert!(pi.iter().all(|p| (p - 2.5).abs() < 1e-14), "{pi:?}");
        }
    }

    #[test]
    fn payoff_approaches_mean_field() {
        let a = headline();
        let p = pt(&[0.3, 0.7]);
        let al = a.apply(p.coords());
        for n in [10u64, 100, 1000, 10000] {
            let pi = expected_payoff(&p, &a, n).unwrap();
            for i in 0..2 {
                // |pi_i - (A l)_i| = |(A l)_i - a_ii| / (N - 1) <= 8 / N
                assert!((pi[i] - al[i]).abs() <= 8.0 / n as f64);
            }
        }
    }

    #[test]
    fn fitness_examples() {
        let a = headline();
        let neutral = fitness_profile(&pt(&[0.6, 0.4]), &a, 5, 0.0).unwrap();
        assert!(neutral.fitnesses.iter().all(|f| *f == 1.0));
        assert_eq!(neutral.mean_fitness, 1.0);

        let strong = fitness_profile(&pt(&[0.6, 0.4]), &a, 5, 1.0).unwrap();
        assert!((strong.fitnesses[0] - 1.5).abs() < 1e-14);
        assert!((strong.fitnesses[1] - 3.25).abs() < 1e-14);
        assert!((strong.mean_fitness - 2.2).abs() < 1e-14);

        let mono = fitness_profile(&SimplexPoint::vertex(2, 0).unwrap(), &a, 9, 0.5).unwrap();
        assert_eq!(mono.mean_fitness, mono.fitnesses[0]);

        assert!(fitness_profile(&pt(&[0.6, 0.4]), &a, 5, 1.5).is_err());
        assert!(fitness_profile(&pt(&[0.6, 0.4]), &a, 5, -0.1).is_err());
    }

    #[test]
    fn replicator_field_examples() {
        let a = headline();
        for i in 0..2 {
            let b = replicator_field(&SimplexPoint::vertex(2, i).unwrap(), &a).unwrap();
            assert!(b.iter().all(|x| *x == 0.0));
        }
        let c = PayoffMatrix::constant(3, 4.0).unwrap();
        let b = replicator_field(&pt(&[0.1, 0.6, 0.3]), &c).unwrap();
        assert!(b.iter().all(|x| x.abs() < 1e-15));

        let rps = PayoffMatrix::rock_paper_scissors();
        let b = replicator_field(&SimplexPoint::barycenter(3).unwrap(), &rps).unwrap();
        assert!(b.iter().all(|x| x.abs() < 1e-15), "{b:?}");
    }

    #[test]
    fn toml_block_round_trip_is_exact() {
        let a = PayoffMatrix::new(vec![
            vec![0.1, 2.0 / 3.0, 1e-17],
            vec![3.0, 4.25, 123456789.125],
            vec![0.0, 1.0 / 7.0, 5.0],
        ])
        .unwrap();
        let text = a.to_toml_block();
        let b = PayoffMatrix::from_toml_block(&text).unwrap();
        assert_eq!(a, b);
        assert!(PayoffMatrix::from_toml_block("payoff = [[1, -1], [0, 1]]").is_err());
    }

    fn dirichlet_point(m: usize) -> impl Strategy<Value = SimplexPoint> {
        prop::collection::vec(1e-3f64..1.0, m).prop_map(|w| SimplexPoint::from_weights(&w).unwrap())
    }

    fn matrix(m: usize) -> impl Strategy<Value = PayoffMatrix> {
        prop::collection::vec(prop::collection::vec(0.0f64..10.0, m), m)
            .prop_map(|r| PayoffMatrix::new(r).unwrap())
    }

    proptest! {
        #[test]
        fn field_is_tangent((p, a) in (2usize..6).prop_flat_map(|m| (dirichlet_point(m), matrix(m)))) {
            let b = replicator_field(&p, &a).unwrap();
            prop_assert!(b.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn field_shift_invariant(
            (p, a) in (2usize..5).prop_flat_map(|m| (dirichlet_point(m), matrix(m))),
            c in 0.0f64..5.0,
        ) {
            let b0 = replicator_field(&p, &a).unwrap();
            let b1 = replicator_field(&p, &a.shifted(c).unwrap()).unwrap();
            for (x, y) in b0.iter().zip(&b1) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn fitness_positive_and_expansion_matches(
            (counts, a) in (2usize..5).prop_flat_map(|m| (prop::collection::vec(0u64..50, m), matrix(m))),
            w in 0.0f64..=1.0,
        ) {
            // positivity is a statement about lattice states, where every
            // present strategy has at least one bearer
            let n: u64 = counts.iter().sum();
            prop_assume!(n >= 2);
            let p = SimplexPoint::new(counts.iter().map(|&c| c as f64 / n as f64).collect()).unwrap();
            let prof = fitness_profile(&p, &a, n, w).unwrap();
            for (f, &c) in prof.fitnesses.iter().zip(&counts) {
                prop_assert!(c == 0 || *f >= 0.0);
            }
            if w < 1.0 {
                prop_assert!(prof.mean_fitness > 0.0);
            }
            for (f, pi) in prof.fitnesses.iter().zip(&prof.payoffs) {
                prop_assert!((f - ((1.0 - w) + w * pi)).abs() < 1e-14);
            }
            let expanded = mean_fitness_expanded(&p, &a, n, w).unwrap();
            prop_assert!((expanded - prof.mean_fitness).abs() < 1e-12);
        }

        #[test]
        fn fitness_gaps_shift_invariant(
            (p, a) in (2usize..5).prop_flat_map(|m| (dirichlet_point(m), matrix(m))),
            n in 2u64..50,
            c in 0.0f64..3.0,
        ) {
            // pi_i(A + c ones) = pi_i(A) + c, so f_i - fbar is unchanged.
            let f0 = fitness_profile(&p, &a, n, 0.3).unwrap();
            let f1 = fitness_profile(&p, &a.shifted(c).unwrap(), n, 0.3).unwrap();
            for i in 0..p.dim() {
                let g0 = f0.fitnesses[i] - f0.mean_fitness;
                let g1 = f1.fitnesses[i] - f1.mean_fitness;
                prop_assert!((g0 - g1).abs() < 1e-12);
            }
        }
    }

    /// Average payoff obtained by listing every agent and every possible
    /// partner explicitly.
    fn brute_force_payoff(counts: &[u64], a: &PayoffMatrix) -> Vec<f64> {
        let agents: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| std::iter::repeat_n(s, c as usize))
            .collect();
        let n = agents.len();
        (0..counts.len())
            .map(|s| {
                let Some(me) = agents.iter().position(|&x| x == s) else {
                    return f64::NAN;
                };
                let total: f64 = (0..n)
                    .filter(|&o| o != me)
                    .map(|o| a.get(s, agents[o]))
                    .sum();
                total / (n - 1) as f64
            })
            .collect()
    }

    #[test]
    fn expected_payoff_matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for m in 2..=3usize {
            for n in 2..=8u64 {
                for _ in 0..20 {
                    let a = PayoffMatrix::new(
                        (0..m)
                            .map(|_| (0..m).map(|_| rng.random_range(0.0..5.0)).collect())
                            .collect(),
                    )
                    .unwrap();
                    let mut counts = vec![0u64; m];
                    for _ in 0..n {
                        counts[rng.random_range(0..m)] += 1;
                    }
                    let p = SimplexPoint::new(
                        counts.iter().map(|&c| c as f64 / n as f64).collect(),
                    )
                    .unwrap();
                    let pi = expected_payoff(&p, &a, n).unwrap();
                    let brute = brute_force_payoff(&counts, &a);
                    for i in 0..m {
                        if counts[i] > 0 {
                            assert!((pi[i] - brute[i]).abs() < 1e-12, "{pi:?} vs {brute:?}");
                        }
                    }
                }
            }
        }
    }
}
