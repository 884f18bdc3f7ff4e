//! CSV and JSON export of trajectories, measures, plans and reports.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{DiscreteState, ScalingSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::lab::ConvergenceReport;
use crate::simplex::PayoffMatrix;
use crate::transport::{EmpiricalMeasure, TransportPlan};

pub const SIDECAR_SCHEMA_VERSION: u32 = 1;

/// Seventeen significant digits, enough to round-trip any `f64`.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn header(prefix: &str, m: usize) -> String {
    let mut h = prefix.to_string();
    for i in 1..=m {
        h.push_str(&format!(",lambda_{i}"));
    }
    h
}

/// Everything needed to rebuild a trajectory from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub schema_version: u32,
    pub schedule: ScalingSchedule,
    pub seed: u64,
    pub stream: u64,
    pub payoff: PayoffMatrix,
    pub population: u64,
    pub selection_weight: f64,
    pub counts: Vec<Vec<u64>>,
}

pub fn write_trajectory_csv<W: Write>(mut out: W, traj: &Trajectory) -> Result<()> {
    let m = traj.states.first().map_or(0, |s| s.dim());
    writeln!(out, "{}", header("t", m))?;
    for (h, s) in traj.states.iter().enumerate() {
        let mut line = num(traj.schedule.time(h));
        for x in s.proportions().coords() {
            line.push(',');
            line.push_str(&num(*x));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn sidecar(traj: &Trajectory, payoff: &PayoffMatrix) -> TrajectorySidecar {
    let first = &traj.states[0];
    TrajectorySidecar {
        schema_version: SIDECAR_SCHEMA_VERSION,
        schedule: traj.schedule.clone(),
        seed: traj.seed,
        stream: traj.stream,
        payoff: payoff.clone(),
        population: first.population(),
        selection_weight: first.selection_weight(),
        counts: traj.states.iter().map(|s| s.counts().to_vec()).collect(),
    }
}

/// Writes `<stem>.csv` and `<stem>.json`, returning both paths.
pub fn write_trajectory(stem: &Path, traj: &Trajectory, payoff: &PayoffMatrix) -> Result<(PathBuf, PathBuf)> {
    let csv = stem.with_extension("csv");
    let json = stem.with_extension("json");
    write_trajectory_csv(BufWriter::new(fs::File::create(&csv)?), traj)?;
    let mut f = BufWriter::new(fs::File::create(&json)?);
    serde_json::to_writer_pretty(&mut f, &sidecar(traj, payoff))?;
    writeln!(f)?;
    Ok((csv, json))
}

/// Rebuilds a trajectory from its sidecar and checks the CSV against it.
pub fn read_trajectory(csv: &Path, json: &Path) -> Result<(Trajectory, PayoffMatrix)> {
    let side: TrajectorySidecar = serde_json::from_reader(BufReader::new(fs::File::open(json)?))?;
    if side.schema_version != SIDECAR_SCHEMA_VERSION {
        return Err(Error::Parse(format!("unsupported sidecar schema {}", side.schema_version)));
    }
    let states: Vec<DiscreteState> = side
        .counts
        .iter()
        .map(|c| DiscreteState::new(c.clone(), side.selection_weight))
        .collect::<Result<_>>()?;
    let traj = Trajectory { schedule: side.schedule, seed: side.seed, stream: side.stream, states };
    let rows = read_rows(fs::File::open(csv)?, "t")?;
    if rows.len() != traj.states.len() {
        return Err(Error::Parse(format!(
            "{}: {} rows but sidecar lists {} states",
            csv.display(),
            rows.len(),
            traj.states.len()
        )));
    }
    for (h, (row, s)) in rows.iter().zip(&traj.states).enumerate() {
        if row[1..] != *s.proportions().coords() {
            return Err(Error::Parse(format!("{}: row {} disagrees with sidecar counts", csv.display(), h + 2)));
        }
    }
    Ok((traj, side.payoff))
}

fn read_rows<R: Read>(input: R, first_column: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = BufReader::new(input).lines();
    let head = lines.next().ok_or_else(|| Error::Parse("empty file".into()))??;
    let cols: Vec<&str> = head.trim().split(',').collect();
    if cols.first() != Some(&first_column) {
        return Err(Error::Parse(format!("expected header starting with `{first_column}`, got `{head}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", i + 2))))
            .collect::<Result<_>>()?;
        if row.len() != cols.len() {
            return Err(Error::Parse(format!("line {}: {} fields, expected {}", i + 2, row.len(), cols.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_measure_csv<W: Write>(mut out: W, measure: &EmpiricalMeasure) -> Result<()> {
    writeln!(out, "{}", header("sample_id", measure.dim()))?;
    for (i, p) in measure.iter().enumerate() {
        let mut line = i.to_string();
        for x in p {
            line.push(',');
            line.push_str(&num(*x));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_measure_csv<R: Read>(input: R) -> Result<EmpiricalMeasure> {
    let rows = read_rows(input, "sample_id")?;
    let dim = rows.first().map_or(0, |r| r.len() - 1);
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in &rows {
        data.extend_from_slice(&r[1..]);
    }
    EmpiricalMeasure::from_flat(dim, data)
}

pub fn write_plan_csv<W: Write>(
    mut out: W,
    plan: &TransportPlan,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<()> {
    writeln!(out, "src_id,dst_id,mass,cost")?;
    for e in plan.entries(mu, nu) {
        writeln!(out, "{},{},{},{}", e.source, e.target, num(e.mass), num(e.cost))?;
    }
    Ok(())
}

/// Flat table `k,t,w1,ci,w1_bar_gap,n_k,w_k,tau_k`.
pub fn write_report_csv<W: Write>(mut out: W, report: &ConvergenceReport) -> Result<()> {
    writeln!(out, "k,t,w1,ci,w1_bar_gap,n_k,w_k,tau_k")?;
    for r in &report.resolutions {
        for c in &r.checkpoints {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.k,
                num(c.t),
                num(c.w1_to_limit),
                num(c.ci_halfwidth),
                num(c.w1_affine_vs_constant),
                r.population,
                num(r.selection_weight),
                num(r.tau)
            )?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}
