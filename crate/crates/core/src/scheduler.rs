//! The descent iteration and the receding-horizon driver.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SchedError};
use crate::gradient::{insertion_gradient, optimality, scan_field, InsertionGradientField};
use crate::integrate::{
    evaluate_cost, integrate_adjoint, integrate_state, IntegratorOptions, SampledCurve,
    SwitchedSystem,
};
use crate::linesearch::{
    backtrack, descent_slope, estimate_gamma_one, gamma_three, greatest_type,
    initial_switch_events, monitor_assumptions, BacktrackParams, DescentStepReport, MonitorFlags,
    MonitorSample, SwitchType, DEFAULT_J_MAX, DEFAULT_MONITOR_FLOOR,
};
use crate::projection::{gamma_zero, project, ProjectionResult};
use crate::scalar::Real;
use crate::signals::ModeSchedule;

/// Relative stop threshold used by [`ThetaStop::Auto`].
pub const AUTO_THETA_STOP_FRACTION: f64 = 1e-2;

/// Stopping threshold on the optimality value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThetaStop {
    /// Stop once `θ ≥ value` (`value < 0`).
    Fixed(f64),
    /// Stop once `θ ≥ −10⁻² |θ⁰|`.
    Auto,
}

impl ThetaStop {
    pub fn resolve(self, theta0: f64) -> f64 {
        match self {
            ThetaStop::Fixed(v) => v,
            ThetaStop::Auto => -AUTO_THETA_STOP_FRACTION * theta0.abs(),
        }
    }
}

impl Serialize for ThetaStop {
    fn serialize<Ser: serde::Serializer>(
        &self,
        s: Ser,
    ) -> std::result::Result<Ser::Ok, Ser::Error> {
        match self {
            ThetaStop::Fixed(v) => s.serialize_f64(*v),
            ThetaStop::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for ThetaStop {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(ThetaStop::Fixed(v)),
            Raw::Text(s) if s == "auto" => Ok(ThetaStop::Auto),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "theta_stop must be a number or \"auto\", got {s:?}"
            ))),
        }
    }
}

fn default_alpha() -> f64 {
    0.4
}
fn default_beta() -> f64 {
    0.4
}
fn default_theta_stop() -> ThetaStop {
    ThetaStop::Auto
}
fn default_max_iter() -> usize {
    50
}
fn default_j_max() -> usize {
    DEFAULT_J_MAX
}
fn default_atol() -> f64 {
    1e-9
}
fn default_rtol() -> f64 {
    1e-8
}
fn default_monitor_floor() -> f64 {
    DEFAULT_MONITOR_FLOOR
}

/// Settings of [`optimize`]. Serialized field names double as the
/// configuration-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_theta_stop")]
    pub theta_stop: ThetaStop,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_j_max")]
    pub j_max: usize,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    /// Integrator step cap; `None` means horizon / 1024.
    #[serde(default)]
    pub max_step: Option<f64>,
    /// Spacing of the insertion-gradient scan grid; `None` means
    /// horizon / 2048.
    #[serde(default)]
    pub grid_spacing: Option<f64>,
    /// Shortest interval kept by the projection; `None` means 10⁻⁶ horizon.
    #[serde(default)]
    pub dwell: Option<f64>,
    #[serde(default = "default_monitor_floor")]
    pub monitor_floor: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            beta: default_beta(),
            theta_stop: default_theta_stop(),
            max_iter: default_max_iter(),
            j_max: default_j_max(),
            atol: default_atol(),
            rtol: default_rtol(),
            max_step: None,
            grid_spacing: None,
            dwell: None,
            monitor_floor: default_monitor_floor(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(SchedError::InvalidArgument(format!(
                "{what} out of range: {v}"
            )))
        };
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", self.alpha);
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta", self.beta);
        }
        if let ThetaStop::Fixed(v) = self.theta_stop {
            if !(v < 0.0) {
                return bad("theta_stop", v);
            }
        }
        if !(self.atol > 0.0) {
            return bad("atol", self.atol);
        }
        if !(self.rtol > 0.0) {
            return bad("rtol", self.rtol);
        }
        for (name, v) in [
            ("max_step", self.max_step),
            ("grid_spacing", self.grid_spacing),
            ("dwell", self.dwell),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(name, v);
                }
            }
        }
        if !(self.monitor_floor > 0.0) {
            return bad("monitor_floor", self.monitor_floor);
        }
        Ok(())
    }

    pub fn integrator<S: Real>(&self) -> IntegratorOptions<S> {
        IntegratorOptions {
            atol: S::lit(self.atol),
            rtol: S::lit(self.rtol),
            max_step: self.max_step.map(S::lit),
            ..IntegratorOptions::default()
        }
    }
}

/// Why an optimisation run stopped.
#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    /// `θ` reached the stop threshold.
    Converged,
    /// The iteration budget ran out.
    MaxIterations,
    /// Iteration `iteration` could not produce a step.
    Failed { iteration: usize, error: SchedError },
}

impl Termination {
    pub fn is_failure(&self) -> bool {
        matches!(self, Termination::Failed { .. })
    }

    /// Short machine-readable label.
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max_iterations",
            Termination::Failed { .. } => "failed",
        }
    }
}

/// Outcome of [`optimize`]. The stored schedule, trajectory and cost are
/// those of the last accepted iterate.
#[derive(Clone, Debug)]
pub struct RunResult<S: Real> {
    pub schedule: ModeSchedule<S>,
    pub trajectory: SampledCurve<S>,
    /// Adjoint of the last iterate, when its optimality value was computed.
    pub adjoint: Option<SampledCurve<S>>,
    pub cost: S,
    pub initial_cost: S,
    pub initial_theta: Option<f64>,
    /// Optimality value of the last iterate.
    pub final_theta: Option<f64>,
    /// Resolved stop threshold.
    pub theta_stop: Option<f64>,
    /// Iterates `u⁰, u¹, …`.
    pub iterates: Vec<ModeSchedule<S>>,
    pub reports: Vec<DescentStepReport>,
    pub monitors: MonitorFlags,
    pub termination: Termination,
}

impl<S: Real> RunResult<S> {
    pub fn iterations(&self) -> usize {
        self.reports.len()
    }

    /// One row per accepted step `k`: cost `Jᵏ`, `θᵏ`, `γ₀ᵏ`, `γᵏ`,
    /// backtracking index `jᵏ` and number of intervals `Mᵏ` of the iterate
    /// the step starts from.
    pub fn iterates_csv(&self) -> String {
        let mut out = String::from("k,J,theta,gamma0,gamma,j,M\n");
        for (r, u) in self.reports.iter().zip(&self.iterates) {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{},{}",
                r.k,
                r.cost_before,
                r.theta,
                r.gamma0,
                r.gamma,
                r.trials,
                u.len()
            );
        }
        out
    }

    /// Reports as JSON lines.
    pub fn reports_jsonl(&self) -> String {
        self.reports
            .iter()
            .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
            .collect()
    }

    /// Insertion gradient of the last iterate.
    pub fn final_field<'a>(
        &'a self,
        sys: &'a dyn SwitchedSystem<S>,
    ) -> Option<InsertionGradientField<'a, S>> {
        let rho = self.adjoint.as_ref()?;
        insertion_gradient(sys, &self.schedule, &self.trajectory, rho).ok()
    }
}

struct Step<S: Real> {
    report: DescentStepReport,
    sample: MonitorSample,
    projection: ProjectionResult<S>,
}

/// Runs the projection-based descent from `u0` until the optimality value
/// reaches the stop threshold or `max_iter` steps have been accepted.
///
/// Invalid inputs and a failing initial simulation are errors; failures
/// inside an iteration end the run with [`Termination::Failed`] and keep
/// everything accepted so far.
pub fn optimize<S: Real>(
    sys: &dyn SwitchedSystem<S>,
    x0: &[S],
    u0: &ModeSchedule<S>,
    cfg: &OptimizerConfig,
) -> Result<RunResult<S>> {
    cfg.validate()?;
    if u0.num_modes() != sys.num_modes() {
        return Err(SchedError::Mismatch(format!(
            "schedule has {} modes, system has {}",
            u0.num_modes(),
            sys.num_modes()
        )));
    }
    let opts = cfg.integrator::<S>();
    let trajectory = integrate_state(sys, u0, x0, &opts)?;
    let cost = evaluate_cost(sys, &trajectory);
    let mut run = RunResult {
        schedule: u0.clone(),
        trajectory,
        adjoint: None,
        cost,
        initial_cost: cost,
        initial_theta: None,
        final_theta: None,
        theta_stop: None,
        iterates: vec![u0.clone()],
        reports: Vec::new(),
        monitors: MonitorFlags::default(),
        termination: Termination::MaxIterations,
    };
    let mut history = Vec::new();
    let mut k = 0;
    loop {
        let started = Instant::now();
        let rho = match integrate_adjoint(sys, &run.schedule, &run.trajectory, &opts) {
            Ok(r) => r,
            Err(error) => {
                run.termination = Termination::Failed {
                    iteration: k,
                    error,
                };
                break;
            }
        };
        let field = match insertion_gradient(sys, &run.schedule, &run.trajectory, &rho) {
            Ok(f) => f,
            Err(error) => {
                run.termination = Termination::Failed {
                    iteration: k,
                    error,
                };
                break;
            }
        };
        let scan = scan_field(&field, cfg.grid_spacing.map(S::lit));
        let opt = optimality(&field, &scan);
        let theta = opt.theta.as_f64();
        let stop = *run
            .theta_stop
            .get_or_insert_with(|| cfg.theta_stop.resolve(theta));
        run.initial_theta.get_or_insert(theta);
        run.final_theta = Some(theta);
        if theta >= stop {
            log::info!("iteration {k}: theta = {theta:e} reached the stop threshold {stop:e}");
            run.termination = Termination::Converged;
            run.adjoint = Some(rho);
            break;
        }
        if k == cfg.max_iter {
            run.termination = Termination::MaxIterations;
            run.adjoint = Some(rho);
            break;
        }
        let step = (|| -> Result<Step<S>> {
            let gamma0 = gamma_zero(opt.theta)?.ok_or_else(|| {
                SchedError::Invariant("negative theta without a finite gamma0".into())
            })?;
            let events = initial_switch_events(&field, &scan, &opt)?;
            let order = greatest_type(&events)?;
            let slope = descent_slope(&events, opt.theta, order)?;
            let gamma3 = gamma_three(gamma0, S::lit(cfg.alpha))?;
            let params = BacktrackParams {
                cost0: run.cost,
                slope,
                order,
                gamma0,
                gamma3,
                alpha: S::lit(cfg.alpha),
                beta: S::lit(cfg.beta),
                j_max: cfg.j_max,
            };
            let dwell = cfg.dwell.map(S::lit);
            let outcome = backtrack(&params, |gamma| {
                let p = project(sys, x0, &field, &scan, gamma, &opts, dwell)?;
                Ok((p.cost, p))
            })?;
            if !(outcome.cost < run.cost) {
                return Err(SchedError::Invariant(
                    "accepted step does not decrease the cost".into(),
                ));
            }
            let count = |t: SwitchType| events.iter().filter(|e| e.kind == t).count();
            let min_curvature = events
                .iter()
                .filter(|e| e.kind == SwitchType::SquareRoot)
                .map(|e| e.curvature.as_f64())
                .reduce(f64::min);
            let sample = MonitorSample {
                theta,
                gamma0: gamma0.as_f64(),
                gamma1: estimate_gamma_one(&scan, &opt).map(|g| g.as_f64()),
                min_curvature,
            };
            let report = DescentStepReport {
                k,
                theta,
                gamma0: gamma0.as_f64(),
                gamma3: gamma3.as_f64(),
                trials: outcome.trials,
                gamma: outcome.gamma.as_f64(),
                cost_before: run.cost.as_f64(),
                cost_after: outcome.cost.as_f64(),
                greatest_type: order.order(),
                num_linear: count(SwitchType::Linear),
                num_square_root: count(SwitchType::SquareRoot),
                num_intervals: outcome.payload.schedule.len(),
                gamma1: sample.gamma1,
                min_curvature,
                gap_flag: false,
                curvature_flag: false,
                wall_time_ms: 0.0,
            };
            Ok(Step {
                report,
                sample,
                projection: outcome.payload,
            })
        })();
        let mut step = match step {
            Ok(s) => s,
            Err(error) => {
                log::warn!("iteration {k} failed: {error}");
                run.termination = Termination::Failed {
                    iteration: k,
                    error,
                };
                run.adjoint = Some(rho);
                break;
            }
        };
        history.push(step.sample);
        let flags = monitor_assumptions(&history, cfg.monitor_floor);
        if flags.gap_flag && !run.monitors.gap_flag {
            log::warn!(
                "iteration {k}: step gap shrinks faster than theta (ratio {:?})",
                flags.gap_ratio
            );
        }
        if flags.curvature_flag && !run.monitors.curvature_flag {
            log::warn!(
                "iteration {k}: curvature shrinks faster than theta (ratio {:?})",
                flags.curvature_ratio
            );
        }
        run.monitors = flags;
        step.report.gap_flag = flags.gap_flag;
        step.report.curvature_flag = flags.curvature_flag;
        step.report.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        log::info!(
            "iteration {k}: J {:.6e} -> {:.6e}, theta = {:.4e}, gamma = {:.4e} (j = {}), M = {}",
            step.report.cost_before,
            step.report.cost_after,
            theta,
            step.report.gamma,
            step.report.trials,
            step.report.num_intervals
        );
        run.reports.push(step.report);
        run.schedule = step.projection.schedule;
        run.trajectory = step.projection.trajectory;
        run.cost = step.projection.cost;
        run.iterates.push(run.schedule.clone());
        k += 1;
    }
    Ok(run)
}

/// Window layout of [`receding_horizon`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    /// Optimisation window length `T_w`.
    pub window: f64,
    /// Portion `dt ≤ T_w` of each window that is applied.
    pub advance: f64,
    pub iters_per_window: usize,
    /// Total simulated time.
    pub duration: f64,
}

impl HorizonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(SchedError::InvalidArgument(format!(
                "window must be positive, got {}",
                self.window
            )));
        }
        if !(self.advance > 0.0 && self.advance <= self.window) {
            return Err(SchedError::InvalidArgument(format!(
                "advance must lie in (0, window = {}], got {}",
                self.window, self.advance
            )));
        }
        if self.iters_per_window == 0 {
            return Err(SchedError::InvalidArgument(
                "iters_per_window must be at least 1".into(),
            ));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SchedError::InvalidArgument(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        Ok(())
    }
}

/// Summary of one receding-horizon window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub index: usize,
    pub start: f64,
    pub applied: f64,
    pub iterations: usize,
    pub cost_before: f64,
    pub cost_after: f64,
    pub theta: Option<f64>,
    /// The window fell back to its inherited schedule.
    pub degraded: bool,
    pub message: Option<String>,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug)]
pub struct HorizonResult<S: Real> {
    /// Applied schedule on `[0, duration]`.
    pub schedule: ModeSchedule<S>,
    /// Applied trajectory on `[0, duration]`.
    pub trajectory: SampledCurve<S>,
    pub windows: Vec<WindowRecord>,
}

impl<S: Real> HorizonResult<S> {
    pub fn degraded_windows(&self) -> Vec<usize> {
        self.windows
            .iter()
            .filter(|w| w.degraded)
            .map(|w| w.index)
            .collect()
    }

    pub fn windows_csv(&self) -> String {
        let mut out =
            String::from("window,t_start,applied,iterations,J_before,J_after,theta,degraded\n");
        for w in &self.windows {
            let theta = w.theta.map(|t| format!("{t:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:e},{},{}",
                w.index,
                w.start,
                w.applied,
                w.iterations,
                w.cost_before,
                w.cost_after,
                theta,
                w.degraded
            );
        }
        out
    }
}

/// Optimises over a sliding window of length `T_w` starting from `u0` (a
/// schedule on `[0, T_w]`), applies the first `dt` of each result, hands
/// the reached state to the next window and warm-starts it with the
/// remainder of the current schedule, holding its final mode.
pub fn receding_horizon<S: Real>(
    sys: &dyn SwitchedSystem<S>,
    x0: &[S],
    u0: &ModeSchedule<S>,
    horizon: &HorizonConfig,
    cfg: &OptimizerConfig,
) -> Result<HorizonResult<S>> {
    horizon.validate()?;
    cfg.validate()?;
    let window = S::lit(horizon.window);
    if (u0.horizon() - window).abs() > S::lit(1e-12) * window {
        return Err(SchedError::InvalidArgument(format!(
            "initial schedule spans {} but the window is {}",
            u0.horizon(),
            horizon.window
        )));
    }
    let opts = cfg.integrator::<S>();
    let window_cfg = OptimizerConfig {
        max_iter: horizon.iters_per_window,
        ..cfg.clone()
    };
    let duration = S::lit(horizon.duration);
    let advance = S::lit(horizon.advance);
    let mut x = x0.to_vec();
    let mut inherited = u0.clone();
    let mut t = S::zero();
    let mut schedule: Option<ModeSchedule<S>> = None;
    let mut trajectory: Option<SampledCurve<S>> = None;
    let mut windows = Vec::new();
    let end_tol = S::lit(1e-12) * duration;
    while duration - t > end_tol {
        let index = windows.len();
        let started = Instant::now();
        let applied = advance.min(duration - t);
        let (chosen, mut record) = match optimize(sys, &x, &inherited, &window_cfg) {
            Ok(run) if !run.termination.is_failure() => {
                let record = WindowRecord {
                    index,
                    start: t.as_f64(),
                    applied: applied.as_f64(),
                    iterations: run.iterations(),
                    cost_before: run.initial_cost.as_f64(),
                    cost_after: run.cost.as_f64(),
                    theta: run.initial_theta,
                    degraded: false,
                    message: None,
                    wall_time_ms: 0.0,
                };
                (run.schedule, record)
            }
            outcome => {
                let (message, before, theta) = match outcome {
                    Ok(run) => {
                        let msg = match &run.termination {
                            Termination::Failed { error, .. } => error.to_string(),
                            _ => unreachable!(),
                        };
                        (msg, run.initial_cost.as_f64(), run.initial_theta)
                    }
                    Err(e) => (e.to_string(), f64::NAN, None),
                };
                log::warn!("window {index} at t = {t}: {message}; applying the inherited schedule");
                let record = WindowRecord {
                    index,
                    start: t.as_f64(),
                    applied: applied.as_f64(),
                    iterations: 0,
                    cost_before: before,
                    cost_after: before,
                    theta,
                    degraded: true,
                    message: Some(message),
                    wall_time_ms: 0.0,
                };
                (inherited.clone(), record)
            }
        };
        let piece = chosen.window(S::zero(), applied)?;
        let segment = integrate_state(sys, &piece, &x, &opts)?;
        x = segment.final_value().to_vec();
        schedule = Some(match schedule {
            None => piece,
            Some(s) => s.concat(&piece)?,
        });
        trajectory = Some(match trajectory {
            None => segment,
            Some(c) => c.concat(&segment)?,
        });
        inherited = chosen.window(
            applied.min(chosen.horizon() * S::lit(1.0 - 1e-12)),
            applied + window,
        )?;
        if (inherited.horizon() - window).abs() > end_tol {
            inherited = inherited.window(S::zero(), window)?;
        }
        record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        log::info!(
            "window {index}: t = {:.4}, J {:.6e} -> {:.6e}{}",
            record.start,
            record.cost_before,
            record.cost_after,
            if record.degraded { " (degraded)" } else { "" }
        );
        windows.push(record);
        t += applied;
    }
    Ok(HorizonResult {
        schedule: schedule.expect("at least one window"),
        trajectory: trajectory.expect("at least one window"),
        windows,
    })
}
