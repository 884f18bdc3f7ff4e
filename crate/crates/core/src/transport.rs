//! 1-Wasserstein distances between uniform empirical measures on the simplex,
//! with the Euclidean ground cost.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, domain, stream_rng};
use crate::simplex::{euclidean, SimplexPoint};

/// Largest ensemble accepted by [`w1_exact`].
pub const EXACT_CAP: usize = 4096;

/// Uniformly weighted multiset of simplex points, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    data: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: &[SimplexPoint]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::Domain("empirical measure needs at least one point".into()))?;
        let dim = first.dim();
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.dim() != dim {
                return Err(Error::Dimension { expected: dim, found: p.dim() });
            }
            data.extend_from_slice(p.coords());
        }
        Ok(Self { dim, data })
    }

    /// Builds a measure from concatenated coordinates, validating each point.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim < 2 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Domain(format!(
                "flat data of length {} does not split into points of dimension {dim}",
                data.len()
            )));
        }
        for chunk in data.chunks(dim) {
            SimplexPoint::new(chunk.to_vec())?;
        }
        Ok(Self { dim, data })
    }

    pub(crate) fn from_flat_unchecked(dim: usize, data: Vec<f64>) -> Self {
        debug_assert!(data.len().is_multiple_of(dim) && !data.is_empty());
        Self { dim, data }
    }

    pub fn singleton(point: &SimplexPoint) -> Self {
        Self { dim: point.dim(), data: point.coords().to_vec() }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks(self.dim)
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_points(&self) -> Vec<SimplexPoint> {
        self.iter()
            .map(|c| SimplexPoint::with_tolerance(c.to_vec(), 1e-9).expect("stored points are valid"))
            .collect()
    }

    /// Mean of `f` over the sample points.
    pub fn mean_of<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.iter().map(f).sum::<f64>() / self.len() as f64
    }

    /// Measure with points selected (with repetition) by `indices`.
    pub fn resample(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        Self { dim: self.dim, data }
    }
}

/// How mass moves between source and target samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Coupling {
    /// `assignment[i]` is the target of source `i`; each pair carries `1/R`.
    Assignment(Vec<usize>),
    /// `(source, target, mass)` triples.
    Sparse(Vec<(usize, usize, f64)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub coupling: Coupling,
    pub cost: f64,
}

/// One entry of a plan: source index, target index, mass, ground cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanEntry {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
    pub cost: f64,
}

impl TransportPlan {
    pub fn entries(&self, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<PlanEntry> {
        let cost = |i: usize, j: usize| euclidean(mu.point(i), nu.point(j));
        match &self.coupling {
            Coupling::Assignment(a) => {
                let mass = 1.0 / a.len() as f64;
                a.iter()
                    .enumerate()
                    .map(|(i, &j)| PlanEntry { source: i, target: j, mass, cost: cost(i, j) })
                    .collect()
            }
            Coupling::Sparse(entries) => entries
                .iter()
                .map(|&(i, j, mass)| PlanEntry { source: i, target: j, mass, cost: cost(i, j) })
                .collect(),
        }
    }

    /// Row and column sums of the coupling.
    pub fn marginals(&self, n_source: usize, n_target: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rows = vec![0.0; n_source];
        let mut cols = vec![0.0; n_target];
        match &self.coupling {
            Coupling::Assignment(a) => {
                let mass = 1.0 / a.len() as f64;
                for (i, &j) in a.iter().enumerate() {
                    rows[i] += mass;
                    cols[j] += mass;
                }
            }
            Coupling::Sparse(entries) => {
                for &(i, j, m) in entries {
                    rows[i] += m;
                    cols[j] += m;
                }
            }
        }
        (rows, cols)
    }
}

/// Exact optimum together with dual potentials `u` (sources) and `v`
/// (targets) satisfying `u_i + v_j <= c_ij`, scaled so that
/// `W1 = mean(u) + mean(v)` in the equal-size case.
#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub distance: f64,
    pub plan: TransportPlan,
    pub source_potential: Vec<f64>,
    pub target_potential: Vec<f64>,
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::Dimension { expected: mu.dim(), found: nu.dim() });
    }
    Ok(())
}

fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Vec<f64> {
    let cols = nu.len();
    let mut cost = vec![0.0; mu.len() * cols];
    cost.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
        let x = mu.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = euclidean(x, nu.point(j));
        }
    });
    cost
}

/// Exact `W1(mu, nu)` and an optimal plan.
pub fn w1_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<(f64, TransportPlan)> {
    let sol = w1_exact_with_potentials(mu, nu)?;
    Ok((sol.distance, sol.plan))
}

pub fn w1_exact_with_potentials(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<ExactSolution> {
    check_pair(mu, nu)?;
    let size = mu.len().max(nu.len());
    if size > EXACT_CAP {
        return Err(Error::Capacity { size, cap: EXACT_CAP });
    }
    // Solve in a canonical orientation so that W1(mu, nu) and W1(nu, mu)
    // are bit-identical even when optimal plans are not unique.
    if canonical_order(nu, mu) {
        return w1_exact_with_potentials_oriented(nu, mu).map(ExactSolution::transposed);
    }
    w1_exact_with_potentials_oriented(mu, nu)
}

fn canonical_order(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> bool {
    (a.len(), &a.data)
        .partial_cmp(&(b.len(), &b.data))
        .is_some_and(|o| o == std::cmp::Ordering::Less)
}

fn w1_exact_with_potentials_oriented(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<ExactSolution> {
    let cost = cost_matrix(mu, nu);
    if mu.len() == nu.len() {
        Ok(assignment(&cost, mu.len()))
    } else {
        Ok(transportation(&cost, mu.len(), nu.len()))
    }
}

impl ExactSolution {
    /// The same optimum seen from the other side.
    fn transposed(self) -> Self {
        let coupling = match self.plan.coupling {
            Coupling::Assignment(a) => {
                let mut inv = vec![0; a.len()];
                for (i, &j) in a.iter().enumerate() {
                    inv[j] = i;
                }
                Coupling::Assignment(inv)
            }
            Coupling::Sparse(e) => {
                let mut t: Vec<_> = e.into_iter().map(|(i, j, m)| (j, i, m)).collect();
                t.sort_by_key(|&(i, j, _)| (i, j));
                Coupling::Sparse(t)
            }
        };
        Self {
            distance: self.distance,
            plan: TransportPlan { coupling, cost: self.plan.cost },
            source_potential: self.target_potential,
            target_potential: self.source_potential,
        }
    }
}

/// Sum in ascending order, so that swapping the two measures (which
/// permutes the terms) gives a bit-identical value.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Shortest-augmenting-path Hungarian method on a square cost matrix.
fn assignment(cost: &[f64], n: usize) -> ExactSolution {
    const INF: f64 = f64::INFINITY;
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![INF; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.fill(INF);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut target = vec![0usize; n];
    for j in 1..=n {
        target[owner[j] - 1] = j - 1;
    }
    let distance = ordered_sum(target.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect()) / n as f64;
    ExactSolution {
        distance,
        plan: TransportPlan { coupling: Coupling::Assignment(target), cost: distance },
        source_potential: u[1..].to_vec(),
        target_potential: v[1..].to_vec(),
    }
}

/// Min-cost flow on the transportation polytope with integer masses
/// (`n_target` units per source, `n_source` units per target), solved by
/// successive shortest paths with Dijkstra on reduced costs.
fn transportation(cost: &[f64], rows: usize, cols: usize) -> ExactSolution {
    const INF: f64 = f64::INFINITY;
    let src = rows + cols;
    let sink = src + 1;
    let nodes = sink + 1;
    let mut supply = vec![cols as u64; rows];
    let mut demand = vec![rows as u64; cols];
    let mut flow = vec![0u64; rows * cols];
    let mut pot = vec![0.0f64; nodes];
    let mut dist = vec![INF; nodes];
    let mut prev = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];
    let mut remaining = (rows * cols) as u64;

    while remaining > 0 {
        dist.fill(INF);
        prev.fill(usize::MAX);
        done.fill(false);
        dist[src] = 0.0;
        loop {
            let mut x = usize::MAX;
            let mut best = INF;
            for (node, &d) in dist.iter().enumerate() {
                if !done[node] && d < best {
                    best = d;
                    x = node;
                }
            }
            if x == usize::MAX {
                break;
            }
            done[x] = true;
            let relax = |y: usize, c: f64, dist: &mut [f64], prev: &mut [usize]| {
                // settled nodes stay settled; rounding can make reduced costs
                // slightly negative
                if done[y] {
                    return;
                }
                let nd = dist[x] + c + pot[x] - pot[y];
                if nd < dist[y] {
                    dist[y] = nd;
                    prev[y] = x;
                }
            };
            if x == src {
                for i in 0..rows {
                    if supply[i] > 0 {
                        relax(i, 0.0, &mut dist, &mut prev);
                    }
                }
            } else if x < rows {
                for j in 0..cols {
                    relax(rows + j, cost[x * cols + j], &mut dist, &mut prev);
                }
            } else if x < src {
                let j = x - rows;
                for i in 0..rows {
                    if flow[i * cols + j] > 0 {
                        relax(i, -cost[i * cols + j], &mut dist, &mut prev);
                    }
                }
                if demand[j] > 0 {
                    relax(sink, 0.0, &mut dist, &mut prev);
                }
            }
        }
        let reach = dist[sink];
        debug_assert!(reach.is_finite());
        for node in 0..nodes {
            pot[node] += dist[node].min(reach);
        }
        // bottleneck along the path
        let mut amount = u64::MAX;
        let mut y = sink;
        while y != src {
            let x = prev[y];
            if x == src {
                amount = amount.min(supply[y]);
            } else if y == sink {
                amount = amount.min(demand[x - rows]);
            } else if x >= rows {
                amount = amount.min(flow[y * cols + (x - rows)]);
            }
            y = x;
        }
        let mut y = sink;
        while y != src {
            let x = prev[y];
            if x == src {
                supply[y] -= amount;
            } else if y == sink {
                demand[x - rows] -= amount;
            } else if x < rows {
                flow[x * cols + (y - rows)] += amount;
            } else {
                flow[y * cols + (x - rows)] -= amount;
            }
            y = x;
        }
        remaining -= amount;
    }

    let scale = 1.0 / (rows * cols) as f64;
    let mut entries = Vec::new();
    let mut terms = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let f = flow[i * cols + j];
            if f > 0 {
                let mass = f as f64 * scale;
                entries.push((i, j, mass));
                terms.push(mass * cost[i * cols + j]);
            }
        }
    }
    let total = ordered_sum(terms);
    // Dual: potentials of the residual graph give u_i = -pot_i, v_j = pot_j
    // up to the common offset, with u_i + v_j <= c_ij.
    let source_potential = (0..rows).map(|i| -pot[i]).collect();
    let target_potential = (0..cols).map(|j| pot[rows + j]).collect();
    ExactSolution {
        distance: total,
        plan: TransportPlan { coupling: Coupling::Sparse(entries), cost: total },
        source_potential,
        target_potential,
    }
}

/// A test function for the Kantorovich dual, expected to be 1-Lipschitz.
pub trait Witness: Send + Sync {
    fn name(&self) -> String;
    fn eval(&self, z: &[f64]) -> f64;
}

/// `psi(z) = z_c`.
#[derive(Clone, Debug)]
pub struct CoordinateProjection(pub usize);

impl Witness for CoordinateProjection {
    fn name(&self) -> String {
        format!("coordinate_{}", self.0)
    }
    fn eval(&self, z: &[f64]) -> f64 {
        z[self.0]
    }
}

/// `psi(z) = |z - p|`.
#[derive(Clone, Debug)]
pub struct DistanceToPoint(pub Vec<f64>);

impl Witness for DistanceToPoint {
    fn name(&self) -> String {
        format!("distance_to_{:?}", self.0)
    }
    fn eval(&self, z: &[f64]) -> f64 {
        euclidean(z, &self.0)
    }
}

/// `psi(z) = max_l (<s_l, z> + c_l)` with `|s_l| <= 1`.
#[derive(Clone, Debug)]
pub struct MaxAffine {
    pub slopes: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl MaxAffine {
    /// `pieces` affine pieces with unit-norm Gaussian slopes and offsets in
    /// `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(m: usize, pieces: usize, rng: &mut R) -> Self {
        let slopes = (0..pieces).map(|_| random_unit(m, false, rng)).collect();
        let offsets = (0..pieces).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self { slopes, offsets }
    }
}

impl Witness for MaxAffine {
    fn name(&self) -> String {
        format!("max_affine_{}", self.slopes.len())
    }
    fn eval(&self, z: &[f64]) -> f64 {
        self.slopes
            .iter()
            .zip(&self.offsets)
            .map(|(s, c)| s.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + c)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `psi(z) = min_i (|z - x_i| - u_i)` built from source points and source
/// potentials of an exact solution.
#[derive(Clone, Debug)]
pub struct PotentialWitness {
    anchors: EmpiricalMeasure,
    potential: Vec<f64>,
}

impl PotentialWitness {
    pub fn from_solution(mu: &EmpiricalMeasure, sol: &ExactSolution) -> Self {
        Self { anchors: mu.clone(), potential: sol.source_potential.clone() }
    }
}

impl Witness for PotentialWitness {
    fn name(&self) -> String {
        "optimal_potential".into()
    }
    fn eval(&self, z: &[f64]) -> f64 {
        self.anchors
            .iter()
            .zip(&self.potential)
            .map(|(x, u)| euclidean(z, x) - u)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Coordinate projections, distances to the vertices and barycenter, and
/// `n_random` random max-affine functions.
pub fn standard_witnesses(m: usize, n_random: usize, seed: u64) -> Vec<Box<dyn Witness>> {
    let mut out: Vec<Box<dyn Witness>> = Vec::new();
    for c in 0..m {
        out.push(Box::new(CoordinateProjection(c)));
        let mut e = vec![0.0; m];
        e[c] = 1.0;
        out.push(Box::new(DistanceToPoint(e)));
    }
    out.push(Box::new(DistanceToPoint(vec![1.0 / m as f64; m])));
    let mut rng = stream_rng(derive_seed(seed, domain::WITNESS, 0), 0);
    for _ in 0..n_random {
        out.push(Box::new(MaxAffine::random(m, 3, &mut rng)));
    }
    out
}

const LIPSCHITZ_PAIRS: usize = 4096;

fn check_lipschitz(w: &dyn Witness, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, values: &[f64]) -> Result<()> {
    let total = mu.len() + nu.len();
    let point = |i: usize| if i < mu.len() { mu.point(i) } else { nu.point(i - mu.len()) };
    let check = |a: usize, b: usize| -> Result<()> {
        let d = euclidean(point(a), point(b));
        if d > 1e-12 {
            let ratio = (values[a] - values[b]).abs() / d;
            if ratio > 1.0 + 1e-9 {
                return Err(Error::InvalidWitness { name: w.name(), ratio });
            }
        }
        Ok(())
    };
    if total * (total - 1) / 2 <= LIPSCHITZ_PAIRS {
        for a in 0..total {
            for b in a + 1..total {
                check(a, b)?;
            }
        }
    } else {
        let mut rng = stream_rng(derive_seed(0, domain::WITNESS, 1), 0);
        for _ in 0..LIPSCHITZ_PAIRS {
            check(rng.random_range(0..total), rng.random_range(0..total))?;
        }
    }
    Ok(())
}

/// Largest `|E_nu psi - E_mu psi|` over the witnesses; a certified lower
/// bound on `W1(mu, nu)` whenever every witness is 1-Lipschitz. Witnesses
/// whose Lipschitz ratio on sample pairs exceeds 1 are rejected.
pub fn w1_dual_lower_bound(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    witnesses: &[Box<dyn Witness>],
) -> Result<f64> {
    check_pair(mu, nu)?;
    let mut best = 0.0f64;
    for w in witnesses {
        let values: Vec<f64> = mu.iter().chain(nu.iter()).map(|z| w.eval(z)).collect();
        check_lipschitz(w.as_ref(), mu, nu, &values)?;
        let (a, b) = values.split_at(mu.len());
        let gap = b.iter().sum::<f64>() / b.len() as f64 - a.iter().sum::<f64>() / a.len() as f64;
        best = best.max(gap.abs());
    }
    Ok(best)
}

fn random_unit<R: Rng + ?Sized>(m: usize, tangent: bool, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        if tangent {
            let mean = v.iter().sum::<f64>() / m as f64;
            v.iter_mut().for_each(|x| *x -= mean);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// `W1` between two uniform measures on the line given sorted samples.
pub fn w1_sorted_1d(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / na as f64;
    }
    // integrate |F^-1 - G^-1| over the merged quantile breakpoints
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let qa = (i + 1) as f64 / na as f64;
        let qb = (j + 1) as f64 / nb as f64;
        let next = qa.min(qb);
        total += (next - q) * (a[i] - b[j]).abs();
        q = next;
        if qa <= next {
            i += 1;
        }
        if qb <= next {
            j += 1;
        }
    }
    total
}

/// `E|<u, theta>| / |u|` for `theta` uniform on the unit sphere of a
/// `d`-dimensional space.
pub fn projection_constant(d: usize) -> f64 {
    assert!(d >= 1);
    let mut c = if d % 2 == 1 { 1.0 } else { 2.0 / std::f64::consts::PI };
    let mut k = if d % 2 == 1 { 1 } else { 2 };
    while k < d {
        c *= k as f64 / (k + 1) as f64;
        k += 2;
    }
    c
}

/// Average projected `W1` over `n_projections` random unit directions in the
/// tangent space of the simplex, without normalization. Never exceeds
/// `W1(mu, nu)`.
pub fn w1_sliced_raw<R: Rng + ?Sized>(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    check_pair(mu, nu)?;
    if n_projections == 0 {
        return Err(Error::Domain("n_projections must be at least 1".into()));
    }
    let m = mu.dim();
    let dirs: Vec<Vec<f64>> = (0..n_projections).map(|_| random_unit(m, true, rng)).collect();
    let project = |meas: &EmpiricalMeasure, d: &[f64]| {
        let mut v: Vec<f64> = meas.iter().map(|z| z.iter().zip(d).map(|(a, b)| a * b).sum()).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let total: f64 = dirs
        .par_iter()
        .map(|d| w1_sorted_1d(&project(mu, d), &project(nu, d)))
        .sum();
    Ok(total / n_projections as f64)
}

/// Sliced approximation of `W1`: the raw sliced average divided by the
/// projection constant of the tangent space, so that it is exact for
/// translations. An approximation for ensembles beyond [`EXACT_CAP`].
pub fn w1_sliced<R: Rng + ?Sized>(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    n_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    let raw = w1_sliced_raw(mu, nu, n_projections, rng)?;
    Ok(raw / projection_constant(mu.dim() - 1))
}
