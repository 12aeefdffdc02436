use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Config, Method, SystemName};
use super::{method_config, method_weights, run_once, Task};
use crate::data::file_digest;
use crate::error::{Error, Result};
use crate::grid::write_pgdf_file;

pub const RUNS_CSV: &str = "runs.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub system: SystemName,
    pub method: Method,
    pub particles: usize,
    pub sigma_o: f64,
    pub seed: u64,
    /// `ok`, or the error message of a failed run.
    pub status: String,
    pub err_a: Option<f64>,
    pub err_u: Option<f64>,
    pub err: Option<f64>,
    pub final_ess: Option<f64>,
    pub estimate_file: Option<String>,
    pub estimate_sha256: Option<String>,
    pub diagnostics_file: Option<String>,
    pub diagnostics_sha256: Option<String>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub system: SystemName,
    pub method: Method,
    pub particles: usize,
    pub sigma_o: f64,
    pub runs: usize,
    pub failures: usize,
    pub err_a: (f64, f64),
    pub err_u: (f64, f64),
    pub err: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Config,
    /// SHA-256 of each system's dataset specification.
    pub datasets: Vec<(SystemName, String)>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
    pub runs_sha256: String,
    pub aggregate_sha256: String,
}

struct Cell {
    system: SystemName,
    method: Method,
    particles: usize,
    sigma_o: f64,
    seed: u64,
}

impl Cell {
    fn dir_name(&self) -> String {
        format!("{}_{}_n{}_s{}_seed{}", self.system.name(), self.method.name(), self.particles, self.sigma_o, self.seed)
    }
}

/// Mean and sample standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs by `(system, method, particles, sigma_o)` in first-seen order.
pub fn aggregate(runs: &[RunRecord]) -> Vec<AggregateRow> {
    let mut rows: Vec<(AggregateRow, Vec<[f64; 3]>)> = Vec::new();
    for r in runs {
        let pos = rows.iter().position(|(a, _)| {
            a.system == r.system && a.method == r.method && a.particles == r.particles && a.sigma_o == r.sigma_o
        });
        let idx = pos.unwrap_or_else(|| {
            rows.push((
                AggregateRow {
                    system: r.system,
                    method: r.method,
                    particles: r.particles,
                    sigma_o: r.sigma_o,
                    runs: 0,
                    failures: 0,
                    err_a: (0.0, 0.0),
                    err_u: (0.0, 0.0),
                    err: (0.0, 0.0),
                },
                Vec::new(),
            ));
            rows.len() - 1
        });
        let (row, values) = &mut rows[idx];
        row.runs += 1;
        match (r.err_a, r.err_u, r.err) {
            (Some(a), Some(u), Some(e)) => values.push([a, u, e]),
            _ => row.failures += 1,
        }
    }
    rows.into_iter()
        .map(|(mut row, values)| {
            let col = |k: usize| mean_std(&values.iter().map(|v| v[k]).collect::<Vec<_>>());
            row.err_a = col(0);
            row.err_u = col(1);
            row.err = col(2);
            row
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn runs_csv(runs: &[RunRecord]) -> String {
    let mut out = String::from("system,method,particles,sigma_o,seed,status,err_a,err_u,err,final_ess\n");
    for r in runs {
        let status = if r.status == "ok" { "ok" } else { "failed" };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.system.name(),
            r.method.name(),
            r.particles,
            r.sigma_o,
            r.seed,
            status,
            opt(r.err_a),
            opt(r.err_u),
            opt(r.err),
            opt(r.final_ess)
        ));
    }
    out
}

fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "system,method,particles,sigma_o,runs,failures,err_a_mean,err_a_std,err_u_mean,err_u_std,err_mean,err_std\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.system.name(),
            r.method.name(),
            r.particles,
            r.sigma_o,
            r.runs,
            r.failures,
            r.err_a.0,
            r.err_a.1,
            r.err_u.0,
            r.err_u.1,
            r.err.0,
            r.err.1
        ));
    }
    out
}

fn spec_digest(task: &Task) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(&task.spec)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn run_cell(cell: &Cell, task: &Task, config: &Config, out: &Path) -> RunRecord {
    let start = Instant::now();
    let mut record = RunRecord {
        system: cell.system,
        method: cell.method,
        particles: cell.particles,
        sigma_o: cell.sigma_o,
        seed: cell.seed,
        status: "ok".into(),
        err_a: None,
        err_u: None,
        err: None,
        final_ess: None,
        estimate_file: None,
        estimate_sha256: None,
        diagnostics_file: None,
        diagnostics_sha256: None,
        wall_clock_s: 0.0,
    };
    let result = (|| -> Result<()> {
        let obs = task.observations(config, cell.sigma_o)?;
        let smc = method_config(config, cell.method, cell.particles, cell.seed)?;
        let outcome = run_once(task, &obs, &smc, &method_weights(config, cell.method))?;
        let rel = format!("runs/{}", cell.dir_name());
        let dir = out.join(&rel);
        fs::create_dir_all(&dir)?;
        write_pgdf_file(&outcome.estimate, dir.join("estimate.pgdf"))?;
        fs::write(dir.join("diagnostics.csv"), outcome.diagnostics.to_csv())?;
        record.err_a = Some(outcome.metrics.err_a);
        record.err_u = Some(outcome.metrics.err_u);
        record.err = Some(outcome.metrics.err);
        record.final_ess = Some(outcome.metrics.final_ess);
        record.estimate_sha256 = Some(file_digest(dir.join("estimate.pgdf"))?);
        record.diagnostics_sha256 = Some(file_digest(dir.join("diagnostics.csv"))?);
        record.estimate_file = Some(format!("{rel}/estimate.pgdf"));
        record.diagnostics_file = Some(format!("{rel}/diagnostics.csv"));
        Ok(())
    })();
    if let Err(e) = result {
        record.status = e.to_string();
    }
    record.wall_clock_s = start.elapsed().as_secs_f64();
    record
}

/// Runs every `(system, method, particles, σ_O, seed)` cell and writes
/// `runs.csv`, `aggregate.csv`, per-run outputs and `manifest.json`.
/// Failed cells are recorded and the sweep continues.
pub fn run_grid(config: &Config, out: impl AsRef<Path>) -> Result<RunManifest> {
    config.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let seeds: Vec<u64> = (0..config.grid.seeds as u64).map(|s| config.sampler.seed + s).collect();
    let mut records = Vec::new();
    let mut datasets = Vec::new();
    for system in config.systems() {
        let sys_config = config.with_system(system);
        sys_config.validate()?;
        let task = Task::build(&sys_config)?;
        datasets.push((system, spec_digest(&task)?));
        let mut cells = Vec::new();
        for &method in &config.grid.methods {
            let counts: Vec<usize> =
                if method.uses_particles() { config.grid.particle_counts.clone() } else { vec![1] };
            for particles in counts {
                for &sigma_o in &config.grid.noise_levels {
                    for &seed in &seeds {
                        cells.push(Cell { system, method, particles, sigma_o, seed });
                    }
                }
            }
        }
        let done: Vec<RunRecord> = cells.par_iter().map(|c| run_cell(c, &task, &sys_config, out)).collect();
        records.extend(done);
    }
    let rows = aggregate(&records);
    fs::write(out.join(RUNS_CSV), runs_csv(&records))?;
    fs::write(out.join(AGGREGATE_CSV), aggregate_csv(&rows))?;
    let manifest = RunManifest {
        config: config.clone(),
        datasets,
        seeds,
        runs: records,
        aggregate: rows,
        runs_sha256: file_digest(out.join(RUNS_CSV))?,
        aggregate_sha256: file_digest(out.join(AGGREGATE_CSV))?,
    };
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Checks that every file referenced by a manifest exists with its digest.
pub fn verify_manifest(dir: impl AsRef<Path>) -> Result<RunManifest> {
    let dir = dir.as_ref();
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let check = |file: &str, digest: &str| -> Result<()> {
        let got = file_digest(dir.join(file))?;
        if got != digest {
            return Err(Error::Format(format!("digest mismatch for {file}")));
        }
        Ok(())
    };
    check(RUNS_CSV, &manifest.runs_sha256)?;
    check(AGGREGATE_CSV, &manifest.aggregate_sha256)?;
    for r in &manifest.runs {
        for (file, digest) in [(&r.estimate_file, &r.estimate_sha256), (&r.diagnostics_file, &r.diagnostics_sha256)] {
            if let (Some(f), Some(d)) = (file, digest) {
                check(f, d)?;
            }
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: Method, seed: u64, err: Option<f64>) -> RunRecord {
        RunRecord {
            system: SystemName::Poisson,
            method,
            particles: 1,
            sigma_o: 0.0,
            seed,
            status: if err.is_some() { "ok".into() } else { "boom".into() },
            err_a: err.map(|e| e * 2.0),
            err_u: err,
            err: err.map(|e| e * 1.5),
            final_ess: Some(1.0),
            estimate_file: None,
            estimate_sha256: None,
            diagnostics_file: None,
            diagnostics_sha256: None,
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn aggregation_groups_and_skips_failures() {
        let runs = vec![
            record(Method::Nog, 0, Some(1.0)),
            record(Method::Sosag, 0, Some(0.2)),
            record(Method::Nog, 1, Some(3.0)),
            record(Method::Nog, 2, None),
        ];
        let rows = aggregate(&runs);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].method, Method::Nog);
        assert_eq!((rows[0].runs, rows[0].failures), (3, 1));
        assert_eq!(rows[0].err_u, (2.0, 2f64.sqrt()));
        assert_eq!(rows[1].err_u, (0.2, 0.0));
        let csv = runs_csv(&runs);
        assert!(csv.lines().nth(4).unwrap().contains(",failed,,,,1"));
    }
}
