//! Command execution and output files.

use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use modesched::gradient::field_csv;
use modesched::{integrate_state, optimize, receding_horizon, ModeSchedule, Termination};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Prepared, RunMode};

/// How a command ended.
#[derive(Debug)]
pub enum Outcome {
    Success,
    /// Results were written but the run did not finish cleanly.
    Failed(String),
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn config_hash(raw: &[u8]) -> String {
    hex::encode(Sha256::digest(raw))
}

fn uniform_grid(horizon: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|k| {
            if k == n {
                horizon
            } else {
                horizon * k as f64 / n as f64
            }
        })
        .collect()
}

fn termination_json(t: &Termination) -> serde_json::Value {
    match t {
        Termination::Failed { iteration, error } => json!({
            "reason": t.label(),
            "iteration": iteration,
            "message": error.to_string(),
        }),
        _ => json!({ "reason": t.label() }),
    }
}

pub fn run_optimize(p: &Prepared) -> anyhow::Result<Outcome> {
    let started = Instant::now();
    let sys = p.model.system();
    let run = optimize(sys, &p.x0, &p.u0, &p.config.optimizer)?;
    let elapsed = started.elapsed().as_secs_f64() * 1e3;
    std::fs::create_dir_all(&p.output)
        .with_context(|| format!("cannot create {}", p.output.display()))?;
    let names = p.model.state_names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    write(&p.output, "iterates.csv", &run.iterates_csv())?;
    write(&p.output, "schedule.json", &run.schedule.to_json())?;
    write(
        &p.output,
        "trajectory.csv",
        &run.trajectory.to_csv(p.samples, &names),
    )?;
    let field = run
        .final_field(sys)
        .map(|f| field_csv(&f, p.samples))
        .unwrap_or_else(|| "t\n".to_string());
    write(&p.output, "d_field.csv", &field)?;
    write(&p.output, "reports.jsonl", &run.reports_jsonl())?;
    let manifest = json!({
        "command": "optimize",
        "config_hash": config_hash(&p.raw),
        "config": p.config,
        "termination": termination_json(&run.termination),
        "iterations": run.iterations(),
        "initial_cost": run.initial_cost,
        "final_cost": run.cost,
        "initial_theta": run.initial_theta,
        "final_theta": run.final_theta,
        "theta_stop": run.theta_stop,
        "monitors": run.monitors,
        "num_intervals": run.schedule.len(),
        "timings_ms": {
            "total": elapsed,
            "iterations": run.reports.iter().map(|r| r.wall_time_ms).collect::<Vec<_>>(),
        },
    });
    write(
        &p.output,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    log::info!(
        "{}: J {:.6e} -> {:.6e} in {} iterations ({})",
        p.output.display(),
        run.initial_cost,
        run.cost,
        run.iterations(),
        run.termination.label()
    );
    Ok(match run.termination {
        Termination::Failed { iteration, error } => {
            Outcome::Failed(format!("iteration {iteration}: {error}"))
        }
        _ => Outcome::Success,
    })
}

pub fn run_horizon(p: &Prepared, baseline: bool) -> anyhow::Result<Outcome> {
    let started = Instant::now();
    let sys = p.model.system();
    let receding = p.config.receding.as_ref().expect("validated");
    let res = receding_horizon(sys, &p.x0, &p.u0, receding, &p.config.optimizer)?;
    let elapsed = started.elapsed().as_secs_f64() * 1e3;
    std::fs::create_dir_all(&p.output)
        .with_context(|| format!("cannot create {}", p.output.display()))?;
    let names = p.model.state_names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let grid = uniform_grid(receding.duration, p.samples);
    write(&p.output, "windows.csv", &res.windows_csv())?;
    write(&p.output, "schedule.json", &res.schedule.to_json())?;
    write(
        &p.output,
        "trajectory.csv",
        &res.trajectory.to_csv_at(&grid, &names),
    )?;
    let mut baseline_cost = None;
    if baseline {
        let mode = p.u0.sequence()[0];
        let sched = ModeSchedule::constant(mode, receding.duration, sys.num_modes())?;
        let opts = p.config.optimizer.integrator::<f64>();
        let traj = integrate_state(sys, &sched, &p.x0, &opts).context("baseline simulation")?;
        baseline_cost = traj.integral();
        write(
            &p.output,
            "trajectory_baseline.csv",
            &traj.to_csv_at(&grid, &names),
        )?;
    }
    let manifest = json!({
        "command": "horizon",
        "config_hash": config_hash(&p.raw),
        "config": p.config,
        "windows": res.windows.len(),
        "degraded_windows": res.degraded_windows(),
        "cost": res.trajectory.integral(),
        "baseline_cost": baseline_cost,
        "num_intervals": res.schedule.len(),
        "timings_ms": {
            "total": elapsed,
            "windows": res.windows.iter().map(|w| w.wall_time_ms).collect::<Vec<_>>(),
        },
    });
    write(
        &p.output,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    let degraded = res.degraded_windows();
    if !degraded.is_empty() {
        log::warn!(
            "{} window(s) fell back to the inherited schedule: {degraded:?}",
            degraded.len()
        );
    }
    Ok(Outcome::Success)
}

pub fn execute(p: &Prepared, baseline: bool) -> anyhow::Result<Outcome> {
    match p.config.mode {
        RunMode::Optimize => run_optimize(p),
        RunMode::Horizon => run_horizon(p, baseline),
    }
}
