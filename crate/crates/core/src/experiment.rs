//! Experiment orchestration: runs a validated config, writes CSV outputs and
//! a manifest, and turns a manifest back into a text report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    descent_experiment, deviation_scaling_sweep, empirical_escape_time, escape_time_bound, log_log_slope, EscapeOptions,
};
use crate::config::{to_json, ExperimentConfig, ExperimentSpec};
use crate::engine::{run, RunStatus};
use crate::error::{Error, Result};
use crate::problems::Problem;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: String,
    pub config_sha256: String,
    pub status: ExperimentStatus,
    #[serde(default)]
    pub message: Option<String>,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

type MomentOf = fn(&crate::analysis::DeviationRow) -> f64;

/// Scientific notation with 17 significant digits, which round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

struct Emitter {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Emitter {
    fn write(&mut self, name: &str, bytes: &[u8], seeds: Vec<u64>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.files.push(ManifestEntry { path: name.to_string(), sha256: sha256_hex(bytes), seeds });
        Ok(())
    }

    fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>], seeds: Vec<u64>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        self.write(name, &bytes, seeds)
    }
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn indexed(prefix: &str, m: usize) -> impl Iterator<Item = String> + '_ {
    (0..m).map(move |i| format!("{prefix}{i}"))
}

/// Execute a validated config and write its outputs under `config.output_dir`.
/// A divergence still writes partial outputs and the manifest; the returned
/// status says so.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let resolved = to_json(config);
    let config_sha256 = sha256_hex(resolved.as_bytes());
    let mut out = Emitter { dir: dir.clone(), files: Vec::new() };
    out.write(CONFIG_FILE, resolved.as_bytes(), vec![])?;

    let scenario = config.scenario()?;
    let init = config.initial_state()?;
    let m = scenario.dimension();
    let seeds = config.replica_seeds.clone();
    let mut status = ExperimentStatus::Completed;
    let mut message = None;

    match &config.experiment {
        ExperimentSpec::SingleRun => {
            let cfg = config.run_config()?;
            let outcome = run(&scenario, &cfg, init)?;
            if let RunStatus::Diverged { iteration, reason } = &outcome.status {
                status = ExperimentStatus::Diverged;
                message = Some(format!("diverged at iteration {iteration}: {reason}"));
            }
            let mut cols = vec!["iter".to_string()];
            cols.extend(indexed("wc_", m));
            cols.extend(header(&["loss", "grad_norm2", "disagree2", "disagree4", "label"]));
            let rows: Vec<Vec<String>> = outcome
                .trace
                .iter()
                .map(|r| {
                    let mut row = vec![r.iteration.to_string()];
                    row.extend(r.centroid.iter().map(|&x| fmt_f64(x)));
                    row.extend([r.centroid_loss, r.centroid_grad_norm2, r.disagreement2, r.disagreement4].map(fmt_f64));
                    row.push(r.set_label.map(|k| k.as_str().to_string()).unwrap_or_default());
                    row
                })
                .collect();
            out.write_csv("trace.csv", &cols, &rows, vec![cfg.seed])?;
            if cfg.record_agents {
                let mut cols = header(&["iter", "agent"]);
                cols.extend(indexed("w_", m));
                let mut rows = Vec::new();
                for r in &outcome.trace {
                    for (k, w) in r.per_agent_iterates.iter().flatten().enumerate() {
                        let mut row = vec![r.iteration.to_string(), k.to_string()];
                        row.extend(w.iter().map(|&x| fmt_f64(x)));
                        rows.push(row);
                    }
                }
                out.write_csv("agents.csv", &cols, &rows, vec![cfg.seed])?;
            }
        }
        ExperimentSpec::EscapeSweep { mu_list, criterion, horizon, run_to_horizon } => {
            let mut rows = Vec::new();
            let mut summary = Vec::new();
            let mut finals = Vec::new();
            for &mu in mu_list {
                let constants = config.constants.at(mu)?;
                let opts = EscapeOptions {
                    mu,
                    criterion: criterion.clone(),
                    horizon: *horizon,
                    run_to_horizon: *run_to_horizon,
                    divergence_cap: config.run.divergence_cap,
                };
                let stats = empirical_escape_time(&scenario, &init, &constants, &opts, &seeds)?;
                for (j, r) in stats.replicas.iter().enumerate() {
                    if let Some(it) = r.diverged {
                        status = ExperimentStatus::Diverged;
                        message.get_or_insert(format!("replica {j} at mu {mu} diverged at iteration {it}"));
                    }
                    rows.push(vec![
                        fmt_f64(mu),
                        j.to_string(),
                        r.escape_iter.unwrap_or(*horizon).to_string(),
                        u8::from(r.censored()).to_string(),
                    ]);
                    let mut f = vec![fmt_f64(mu), j.to_string()];
                    f.extend(r.final_centroid.iter().map(|&x| fmt_f64(x)));
                    finals.push(f);
                }
                let bound = escape_time_bound(m, constants.sigma_u2, constants.sigma_l2, mu, constants.tau)?;
                let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
                summary.push(vec![
                    fmt_f64(mu),
                    opt(stats.median),
                    opt(stats.q1),
                    opt(stats.q3),
                    stats.n_escaped().to_string(),
                    stats.replicas.len().to_string(),
                    bound.to_string(),
                ]);
            }
            out.write_csv("escape.csv", &header(&["mu", "replica", "escape_iter", "censored"]), &rows, seeds.clone())?;
            out.write_csv(
                "escape_summary.csv",
                &header(&["mu", "median", "q1", "q3", "escaped", "replicas", "bound"]),
                &summary,
                seeds.clone(),
            )?;
            let mut cols = header(&["mu", "replica"]);
            cols.extend(indexed("wc_", m));
            out.write_csv("escape_final.csv", &cols, &finals, seeds.clone())?;
        }
        ExperimentSpec::DeviationSweep { mu_list, horizon_t, anchor_iteration } => {
            let sweep = deviation_scaling_sweep(&scenario, mu_list, *horizon_t, &init, *anchor_iteration, &seeds)?;
            let mus: Vec<f64> = sweep.rows.iter().map(|r| r.mu).collect();
            let moments: [(&str, MomentOf); 5] =
                [("w2", |r| r.w2), ("w3", |r| r.w3), ("w4", |r| r.w4), ("gap2", |r| r.gap2), ("model2", |r| r.model2)];
            let mut rows = Vec::new();
            for (name, f) in moments {
                let vals: Vec<f64> = sweep.rows.iter().map(f).collect();
                let slope = log_log_slope(&mus, &vals).map(fmt_f64).unwrap_or_default();
                for (mu, v) in mus.iter().zip(&vals) {
                    rows.push(vec![fmt_f64(*mu), name.to_string(), fmt_f64(*v), slope.clone()]);
                }
            }
            out.write_csv("deviation.csv", &header(&["mu", "moment", "value", "slope"]), &rows, seeds.clone())?;
            if !sweep.warnings.is_empty() {
                message = Some(sweep.warnings.join("; "));
            }
        }
        ExperimentSpec::DescentCheck { region, sampler, n_replicas, max_attempts } => {
            let constants = config.constants.at(config.run.mu)?;
            let r = descent_experiment(
                *region,
                &scenario,
                &constants,
                sampler,
                *n_replicas,
                config.run.seed,
                *max_attempts,
                config.run.divergence_cap,
            )?;
            let mut cols = header(&["replica"]);
            cols.extend(indexed("start_", m));
            cols.push("delta_j".into());
            let rows: Vec<Vec<String>> = r
                .start_points
                .iter()
                .zip(&r.deltas)
                .enumerate()
                .map(|(j, (w, d))| {
                    let mut row = vec![j.to_string()];
                    row.extend(w.iter().map(|&x| fmt_f64(x)));
                    row.push(fmt_f64(*d));
                    row
                })
                .collect();
            out.write_csv("descent.csv", &cols, &rows, vec![config.run.seed])?;
            out.write_csv(
                "descent_summary.csv",
                &header(&["region", "iterations", "mean", "standard_error", "lower95"]),
                &[vec![
                    format!("{region:?}"),
                    r.iterations.to_string(),
                    fmt_f64(r.mean),
                    fmt_f64(r.standard_error),
                    fmt_f64(r.lower_confidence_95()),
                ]],
                vec![config.run.seed],
            )?;
        }
        ExperimentSpec::SurfaceGrid { lower, upper, points } => {
            let cost = scenario.cost();
            let step = |d: usize, i: usize| lower[d] + (upper[d] - lower[d]) * i as f64 / (*points - 1) as f64;
            let mut rows = Vec::with_capacity(points * points);
            for i in 0..*points {
                for j in 0..*points {
                    let w = [step(0, i), step(1, j)];
                    rows.push(vec![fmt_f64(w[0]), fmt_f64(w[1]), fmt_f64(cost.loss(&w))]);
                }
            }
            out.write_csv("surface.csv", &header(&["w_0", "w_1", "loss"]), &rows, vec![])?;
        }
    }

    let manifest = Manifest {
        schema_version: config.schema_version,
        experiment: config.experiment.name().to_string(),
        config_sha256,
        status,
        message,
        files: out.files,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::Io(format!("{}: {e}", manifest_path.display())))?;
    Ok(ExperimentOutcome { manifest_path, manifest })
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let head = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((head, rows))
}

fn column(head: &[String], name: &str) -> Result<usize> {
    head.iter().position(|h| h == name).ok_or_else(|| Error::Io(format!("missing column {name}")))
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Io(format!("not a number: {s:?}")))
}

/// Human-readable report for a finished experiment.
pub fn summarize(manifest_path: &Path) -> Result<String> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Io(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Io(format!("bad manifest: {e}")))?;
    if manifest.files.is_empty() {
        return Err(Error::Io("manifest lists no files".into()));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let missing: Vec<&str> =
        manifest.files.iter().filter(|f| !dir.join(&f.path).is_file()).map(|f| f.path.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Io(format!("missing files: {}", missing.join(", "))));
    }
    let path_of = |name: &str| -> Result<PathBuf> {
        manifest
            .files
            .iter()
            .find(|f| f.path == name)
            .map(|f| dir.join(&f.path))
            .ok_or_else(|| Error::Io(format!("manifest does not list {name}")))
    };

    let mut rep = String::new();
    writeln!(rep, "experiment: {}", manifest.experiment).ok();
    writeln!(rep, "status: {:?}", manifest.status).ok();
    if let Some(msg) = &manifest.message {
        writeln!(rep, "note: {msg}").ok();
    }
    match manifest.experiment.as_str() {
        "single_run" => {
            let (head, rows) = read_csv(&path_of("trace.csv")?)?;
            let last = rows.last().ok_or_else(|| Error::Io("trace.csv is empty".into()))?;
            let (li, gi, di) = (column(&head, "loss")?, column(&head, "disagree2")?, column(&head, "iter")?);
            writeln!(rep, "records: {}", rows.len()).ok();
            writeln!(rep, "final iteration: {}", last[di]).ok();
            writeln!(rep, "final centroid loss: {}", last[li]).ok();
            writeln!(rep, "final disagreement (second moment): {}", last[gi]).ok();
        }
        "escape_sweep" => {
            let (head, rows) = read_csv(&path_of("escape_summary.csv")?)?;
            let (mi, medi, ei, ri, bi) = (
                column(&head, "mu")?,
                column(&head, "median")?,
                column(&head, "escaped")?,
                column(&head, "replicas")?,
                column(&head, "bound")?,
            );
            writeln!(rep, "{:>12} {:>12} {:>12} {:>10}", "mu", "bound i^s", "median", "escaped").ok();
            let (mut inv_mu, mut med) = (Vec::new(), Vec::new());
            for r in &rows {
                let mu = num(&r[mi])?;
                let median = if r[medi].is_empty() { "censored".to_string() } else { format!("{:.1}", num(&r[medi])?) };
                writeln!(rep, "{mu:>12} {:>12} {median:>12} {:>10}", r[bi], format!("{}/{}", r[ei], r[ri])).ok();
                writeln!(rep, "{}/{} replicas escaped at mu = {mu}", r[ei], r[ri]).ok();
                if !r[medi].is_empty() {
                    inv_mu.push(1.0 / mu);
                    med.push(num(&r[medi])?);
                }
            }
            match log_log_slope(&inv_mu, &med) {
                Ok(s) => writeln!(rep, "log-log slope of median escape vs 1/mu: {s:.3} (reference 1)").ok(),
                Err(_) => writeln!(rep, "log-log slope of median escape vs 1/mu: unavailable").ok(),
            };
        }
        "deviation_sweep" => {
            let (head, rows) = read_csv(&path_of("deviation.csv")?)?;
            let (mi, si) = (column(&head, "moment")?, column(&head, "slope")?);
            writeln!(rep, "{:>8} {:>10} {:>10}", "moment", "slope", "reference").ok();
            let reference = |m: &str| match m {
                "w2" | "model2" => "1",
                "w3" => "1.5",
                "w4" | "gap2" => "2",
                _ => "",
            };
            let mut seen = Vec::new();
            for r in &rows {
                if !seen.contains(&r[mi]) {
                    seen.push(r[mi].clone());
                    let slope = if r[si].is_empty() { "n/a".to_string() } else { format!("{:.3}", num(&r[si])?) };
                    writeln!(rep, "{:>8} {slope:>10} {:>10}", r[mi], reference(&r[mi])).ok();
                }
            }
        }
        "descent_check" => {
            let (head, rows) = read_csv(&path_of("descent_summary.csv")?)?;
            let r = rows.first().ok_or_else(|| Error::Io("descent_summary.csv is empty".into()))?;
            for name in ["region", "iterations", "mean", "standard_error", "lower95"] {
                writeln!(rep, "{name}: {}", r[column(&head, name)?]).ok();
            }
        }
        "surface_grid" => {
            let (head, rows) = read_csv(&path_of("surface.csv")?)?;
            let li = column(&head, "loss")?;
            let mut best = (f64::INFINITY, 0);
            for (i, r) in rows.iter().enumerate() {
                let l = num(&r[li])?;
                if l < best.0 {
                    best = (l, i);
                }
            }
            writeln!(rep, "grid points: {}", rows.len()).ok();
            writeln!(rep, "minimum loss {} at ({}, {})", best.0, rows[best.1][0], rows[best.1][1]).ok();
        }
        other => return Err(Error::Io(format!("unknown experiment kind {other:?}"))),
    }
    Ok(rep)
}
