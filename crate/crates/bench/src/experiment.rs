use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mkv_core::solvers::{solve, RunReport, Status};
use serde::{Deserialize, Serialize};

use crate::config::{default_out_dir, ExperimentConfig};

/// Statistic of one quantity across repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcrossRuns {
    pub mean: f64,
    pub sd: f64,
    pub runs: usize,
}

impl AcrossRuns {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(AcrossRuns {
            mean,
            sd,
            runs: values.len(),
        })
    }
}

/// Everything written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunReport>,
    /// Coordinate-mean `E[X_T]` across converged runs.
    pub terminal_mean: Option<AcrossRuns>,
    /// Mean `Y_0` across converged runs.
    pub initial_value: Option<AcrossRuns>,
}

impl ExperimentReport {
    pub fn any_diverged(&self) -> bool {
        self.runs.iter().any(|r| r.status == Status::Diverged)
    }
}

pub fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.clone().unwrap_or_else(default_out_dir)
}

/// Runs every repetition; run `r` uses seed `seed + r`.
pub fn run_experiment(cfg: &ExperimentConfig) -> mkv_core::Result<ExperimentReport> {
    let model = cfg.model.build()?;
    let grid = cfg.grid.build()?;
    let mut runs = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let mut solver = cfg.solver.clone();
        solver.seed = cfg.solver.seed.wrapping_add(r as u64);
        runs.push(solve(&model, &grid, &solver)?);
    }
    let ok: Vec<&RunReport> = runs.iter().filter(|r| r.status != Status::Diverged).collect();
    let terminal: Vec<f64> = ok.iter().filter_map(|r| r.terminal_mean.as_ref().map(|s| s.mean)).collect();
    let initial: Vec<f64> = ok.iter().filter_map(|r| r.initial_value.as_ref().map(|s| s.mean)).collect();
    Ok(ExperimentReport {
        config: cfg.clone(),
        terminal_mean: AcrossRuns::of(&terminal),
        initial_value: AcrossRuns::of(&initial),
        runs,
    })
}

pub fn loss_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("run,iteration,loss\n");
    for (r, run) in report.runs.iter().enumerate() {
        for (i, l) in run.losses.iter().enumerate() {
            let _ = writeln!(s, "{r},{i},{l:e}");
        }
    }
    s
}

/// `run,step,t,uX_0..,uY_0..,uZ_0..`; `None` when no run recorded its law.
pub fn law_csv(report: &ExperimentReport) -> Option<String> {
    let first = report.runs.iter().find_map(|r| r.law_trajectory.as_ref())?.first()?;
    let mut s = String::from("run,step,t");
    for (tag, n) in [("uX", first.law.x.len()), ("uY", first.law.y.len()), ("uZ", first.law.z.len())] {
        for j in 0..n {
            let _ = write!(s, ",{tag}_{j}");
        }
    }
    s.push('\n');
    for (r, run) in report.runs.iter().enumerate() {
        for point in run.law_trajectory.iter().flatten() {
            let _ = write!(s, "{r},{},{}", point.step, point.t);
            for v in point.law.to_vec() {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
    }
    Some(s)
}

/// Writes `report.json`, `loss.csv` and, when recorded, `law.csv`.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    let report_path = dir.join("report.json");
    fs::write(&report_path, json + "\n")?;
    written.push(report_path);
    let loss_path = dir.join("loss.csv");
    fs::write(&loss_path, loss_csv(report))?;
    written.push(loss_path);
    if let Some(law) = law_csv(report) {
        let law_path = dir.join("law.csv");
        fs::write(&law_path, law)?;
        written.push(law_path);
    }
    Ok(written)
}
