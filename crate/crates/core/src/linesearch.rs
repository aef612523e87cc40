//! Step-size selection: switch events just past `γ₀`, their types, the
//! descent slope, the backtracking search and the assumption monitors.
//!
//! A switching time that appears or moves at `γ₀⁺` follows the crossing of
//! `d_{σ′}` with the threshold `−1/γ`. Near a simple slope the crossing moves
//! linearly in `γ − γ₀` (type 1); at a quadratic minimum it moves like
//! `(γ − γ₀)^{1/2}` (type 2). Existing switches untouched by the insertion
//! stay put (type 0).

use serde::{Deserialize, Serialize};

use crate::error::{Result, SchedError};
use crate::gradient::{
    curvature_tolerance, stationarity_tolerance, FieldScan, GradientSource, OptimalityResult,
};
use crate::scalar::Real;

/// Default cap on backtracking trials.
pub const DEFAULT_J_MAX: usize = 40;
/// Default floor of the normalised monitor ratios.
pub const DEFAULT_MONITOR_FLOOR: f64 = 1e-3;

/// Order of the first non-vanishing derivative governing a switch's motion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SwitchType {
    /// Does not move at `γ₀⁺`.
    Static,
    /// Moves linearly in `γ − γ₀`.
    Linear,
    /// Moves like `(γ − γ₀)^{1/2}`.
    SquareRoot,
}

impl SwitchType {
    pub fn order(self) -> u8 {
        match self {
            SwitchType::Static => 0,
            SwitchType::Linear => 1,
            SwitchType::SquareRoot => 2,
        }
    }
}

/// Direction of motion as `γ` grows past `γ₀`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Moves right (`ω = 0`).
    Increasing,
    /// Moves left (`ω = 1`).
    Decreasing,
}

impl Direction {
    /// `(−1)^ω`.
    pub fn sign<S: Real>(self) -> S {
        match self {
            Direction::Increasing => S::one(),
            Direction::Decreasing => -S::one(),
        }
    }
}

/// A switching time of the projected schedule at `γ₀⁺`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent<S> {
    /// Position among the switching times at `γ₀⁺`.
    pub index: usize,
    pub time: S,
    pub kind: SwitchType,
    pub direction: Direction,
    /// Modes before and after the switch.
    pub from_mode: usize,
    pub to_mode: usize,
    /// `ḋ` of the governing channel at the event (one-sided at boundaries).
    pub slope: S,
    /// `d̈` of the governing channel at the event.
    pub curvature: S,
    /// Created by the insertion rather than inherited from the schedule.
    pub inserted: bool,
}

impl<S: Real> SwitchEvent<S> {
    fn fixed(time: S, from_mode: usize, to_mode: usize) -> Self {
        Self {
            index: 0,
            time,
            kind: SwitchType::Static,
            direction: Direction::Increasing,
            from_mode,
            to_mode,
            slope: S::zero(),
            curvature: S::zero(),
            inserted: false,
        }
    }

    /// Predicted position at step `gamma` for an optimality value `theta`:
    /// linear motion with slope `θ²/ḋ`, or square-root motion with
    /// magnitude `√2 |θ| (γ − γ₀)^{1/2} / √d̈`.
    pub fn predicted_time(&self, theta: S, gamma0: S, gamma: S) -> S {
        let dg = gamma - gamma0;
        match self.kind {
            SwitchType::Static => self.time,
            SwitchType::Linear => self.time + theta * theta / self.slope * dg,
            SwitchType::SquareRoot => {
                let two = S::lit(2.0);
                self.time
                    + self.direction.sign::<S>() * two.sqrt() * theta.abs() * dg.sqrt()
                        / self.curvature.sqrt()
            }
        }
    }
}

fn classify<S: Real>(
    slope: S,
    curvature: S,
    stat_tol: S,
    curv_tol: S,
    where_: &str,
) -> Result<SwitchType> {
    if slope.abs() > stat_tol {
        Ok(SwitchType::Linear)
    } else if curvature > curv_tol {
        Ok(SwitchType::SquareRoot)
    } else {
        Err(SchedError::TypeFailure(format!(
            "{where_}: slope {slope:e} and curvature {curvature:e} both vanish"
        )))
    }
}

/// Switching times of `𝒫(u − γd)` for `γ` just above `γ₀`: the existing
/// switches plus the insertion at `(σ′, T′)`, each typed and oriented.
pub fn initial_switch_events<S: Real>(
    src: &dyn GradientSource<S>,
    scan: &FieldScan<S>,
    opt: &OptimalityResult<S>,
) -> Result<Vec<SwitchEvent<S>>> {
    if !(opt.theta < S::zero()) {
        return Err(SchedError::InvalidArgument(format!(
            "switch events need a negative optimality value, got {}",
            opt.theta
        )));
    }
    let sched = src.schedule();
    let seq = sched.sequence();
    let n = sched.num_modes();
    let stat_tol = stationarity_tolerance(scan);
    let curv_tol = curvature_tolerance(scan);
    let tie = S::lit(1e-9) * (S::one() + scan.sup_norm);
    let seg = opt.segment;
    let active = seq[seg];
    let new = opt.mode;
    let t = opt.time;
    let mut events: Vec<SwitchEvent<S>> = (0..sched.num_switches())
        .map(|i| SwitchEvent::fixed(sched.times()[i], seq[i], seq[i + 1]))
        .collect();
    let mut buf = vec![S::zero(); n];
    let moving = |kind, direction, from_mode, to_mode, slope, curvature, inserted| SwitchEvent {
        index: 0,
        time: t,
        kind,
        direction,
        from_mode,
        to_mode,
        slope,
        curvature,
        inserted,
    };

    if !opt.at_segment_start && !opt.at_segment_end {
        if !(opt.curvature > curv_tol) {
            return Err(SchedError::TypeFailure(format!(
                "interior minimum of mode {} at t = {t} has curvature {:e}",
                new + 1,
                opt.curvature
            )));
        }
        if opt.rate.abs() > stat_tol {
            log::warn!(
                "interior minimum at t = {t} has residual slope {:e}",
                opt.rate
            );
        }
        events.push(moving(
            SwitchType::SquareRoot,
            Direction::Decreasing,
            active,
            new,
            opt.rate,
            opt.curvature,
            true,
        ));
        events.push(moving(
            SwitchType::SquareRoot,
            Direction::Increasing,
            new,
            active,
            opt.rate,
            opt.curvature,
            true,
        ));
    } else if opt.at_segment_start {
        let kind = classify(
            opt.rate,
            opt.curvature,
            stat_tol,
            curv_tol,
            "insertion at interval start",
        )?;
        if kind == SwitchType::Linear && opt.rate < S::zero() {
            return Err(SchedError::TypeFailure(format!(
                "right-limit minimum at t = {t} has negative slope"
            )));
        }
        if seg > 0 && seq[seg - 1] == new {
            let e = &mut events[seg - 1];
            e.kind = kind;
            e.direction = Direction::Increasing;
            e.slope = opt.rate;
            e.curvature = opt.curvature;
        } else {
            events.push(moving(
                kind,
                Direction::Increasing,
                new,
                active,
                opt.rate,
                opt.curvature,
                true,
            ));
            if seg > 0 {
                let e = &mut events[seg - 1];
                e.to_mode = new;
                src.values_in(seg - 1, t, &mut buf);
                if (buf[new] - opt.theta).abs() <= tie {
                    // the left side reaches the threshold at the same step
                    src.rates_in(seg - 1, t, &mut buf);
                    let slope = buf[new];
                    src.curvatures_in(seg - 1, t, &mut buf);
                    e.kind = classify(
                        slope,
                        buf[new],
                        stat_tol,
                        curv_tol,
                        "left side of insertion",
                    )?;
                    e.direction = Direction::Decreasing;
                    e.slope = slope;
                    e.curvature = buf[new];
                }
            }
        }
    } else {
        let kind = classify(
            opt.rate,
            opt.curvature,
            stat_tol,
            curv_tol,
            "insertion at interval end",
        )?;
        if kind == SwitchType::Linear && opt.rate > S::zero() {
            return Err(SchedError::TypeFailure(format!(
                "left-limit minimum at t = {t} has positive slope"
            )));
        }
        if seg + 1 < sched.len() && seq[seg + 1] == new {
            let e = &mut events[seg];
            e.kind = kind;
            e.direction = Direction::Decreasing;
            e.slope = opt.rate;
            e.curvature = opt.curvature;
        } else {
            events.push(moving(
                kind,
                Direction::Decreasing,
                active,
                new,
                opt.rate,
                opt.curvature,
                true,
            ));
            if seg + 1 < sched.len() {
                let e = &mut events[seg];
                e.from_mode = new;
                src.values_in(seg + 1, t, &mut buf);
                if (buf[new] - opt.theta).abs() <= tie {
                    src.rates_in(seg + 1, t, &mut buf);
                    let slope = buf[new];
                    src.curvatures_in(seg + 1, t, &mut buf);
                    e.kind = classify(
                        slope,
                        buf[new],
                        stat_tol,
                        curv_tol,
                        "right side of insertion",
                    )?;
                    e.direction = Direction::Increasing;
                    e.slope = slope;
                    e.curvature = buf[new];
                }
            }
        }
    }
    // at equal times the left-moving switch comes first
    events.sort_by(|a, b| {
        a.time.partial_cmp(&b.time).unwrap().then_with(|| {
            (a.direction == Direction::Increasing).cmp(&(b.direction == Direction::Increasing))
        })
    });
    for (i, e) in events.iter_mut().enumerate() {
        e.index = i;
    }
    Ok(events)
}

/// Largest switch type among the events. Fails when nothing moves.
pub fn greatest_type<S: Real>(events: &[SwitchEvent<S>]) -> Result<SwitchType> {
    let top = events
        .iter()
        .map(|e| e.kind)
        .max()
        .unwrap_or(SwitchType::Static);
    if top == SwitchType::Static {
        return Err(SchedError::TypeFailure(
            "no switching time moves at gamma0+".into(),
        ));
    }
    Ok(top)
}

/// Descent slope `s₁ = Σ (−1)^ω θ³/ḋ` over linear events or
/// `s₂ = −Σ √2 θ²/√d̈` over square-root events.
pub fn descent_slope<S: Real>(events: &[SwitchEvent<S>], theta: S, order: SwitchType) -> Result<S> {
    let chosen: Vec<&SwitchEvent<S>> = events.iter().filter(|e| e.kind == order).collect();
    if chosen.is_empty() || order == SwitchType::Static {
        return Err(SchedError::InvalidArgument(format!(
            "no events of type {}",
            order.order()
        )));
    }
    let mut s = S::zero();
    for e in chosen {
        match order {
            SwitchType::Linear => {
                if e.slope == S::zero() {
                    return Err(SchedError::Invariant(format!(
                        "linear event {} has zero slope",
                        e.index
                    )));
                }
                s += e.direction.sign::<S>() * theta.powi(3) / e.slope;
            }
            SwitchType::SquareRoot => {
                if !(e.curvature > S::zero()) {
                    return Err(SchedError::Invariant(format!(
                        "square-root event {} has non-positive curvature",
                        e.index
                    )));
                }
                s -= S::lit(2.0).sqrt() * theta * theta / e.curvature.sqrt();
            }
            SwitchType::Static => unreachable!(),
        }
    }
    if !(s < S::zero()) {
        return Err(SchedError::Invariant(format!(
            "descent slope {s:e} is not negative"
        )));
    }
    Ok(s)
}

/// `γ₃ = γ₀ (2 − ∛(α · 3√2/2) / 3)`, the first backtracking trial.
pub fn gamma_three<S: Real>(gamma0: S, alpha: S) -> Result<S> {
    if !(alpha > S::zero() && alpha < S::one()) {
        return Err(SchedError::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if !(gamma0 > S::zero()) {
        return Err(SchedError::InvalidArgument(format!(
            "gamma0 must be positive, got {gamma0}"
        )));
    }
    let inner = alpha * S::lit(3.0) * S::lit(2.0).sqrt() / S::lit(2.0);
    Ok(gamma0 * (S::lit(2.0) - inner.cbrt() / S::lit(3.0)))
}

/// Inputs of the backtracking search.
#[derive(Clone, Copy, Debug)]
pub struct BacktrackParams<S> {
    pub cost0: S,
    pub slope: S,
    pub order: SwitchType,
    pub gamma0: S,
    pub gamma3: S,
    pub alpha: S,
    pub beta: S,
    pub j_max: usize,
}

/// Accepted trial of a backtracking search.
#[derive(Clone, Debug)]
pub struct BacktrackOutcome<S, P> {
    pub gamma: S,
    pub trials: usize,
    pub cost: S,
    pub payload: P,
    /// Cost of every trial in order; `NaN` where the evaluation failed.
    pub trial_costs: Vec<S>,
}

/// Tries `γ(j) = (γ₃ − γ₀)βʲ + γ₀` for `j = 0, 1, …, j_max` and accepts the
/// first with `J(γ) − J₀ < α s (γ − γ₀)^{1/m}`. A trial whose evaluation
/// errors counts as rejected.
pub fn backtrack<S: Real, P>(
    p: &BacktrackParams<S>,
    mut cost_at: impl FnMut(S) -> Result<(S, P)>,
) -> Result<BacktrackOutcome<S, P>> {
    if !(p.beta > S::zero() && p.beta < S::one()) {
        return Err(SchedError::InvalidArgument(format!(
            "beta must lie in (0, 1), got {}",
            p.beta
        )));
    }
    if !(p.slope < S::zero()) {
        return Err(SchedError::InvalidArgument(format!(
            "descent slope must be negative, got {}",
            p.slope
        )));
    }
    let exponent = match p.order {
        SwitchType::Linear => S::one(),
        SwitchType::SquareRoot => S::lit(0.5),
        SwitchType::Static => {
            return Err(SchedError::TypeFailure(
                "backtracking needs a moving switch".into(),
            ));
        }
    };
    let mut trial_costs = Vec::new();
    let mut scale = S::one();
    for j in 0..=p.j_max {
        let gamma = (p.gamma3 - p.gamma0) * scale + p.gamma0;
        scale *= p.beta;
        let rhs = p.alpha * p.slope * (gamma - p.gamma0).powf(exponent);
        match cost_at(gamma) {
            Ok((cost, payload)) => {
                trial_costs.push(cost);
                log::debug!(
                    "trial j = {j}: gamma = {gamma:e}, J = {cost:e}, bound = {:e}",
                    p.cost0 + rhs
                );
                if cost - p.cost0 < rhs {
                    return Ok(BacktrackOutcome {
                        gamma,
                        trials: j,
                        cost,
                        payload,
                        trial_costs,
                    });
                }
            }
            Err(e) => {
                log::debug!("trial j = {j}: gamma = {gamma:e} failed: {e}");
                trial_costs.push(S::nan());
            }
        }
    }
    Err(SchedError::LineSearch {
        trials: trial_costs.len(),
        gamma0: p.gamma0.as_f64(),
        gamma3: p.gamma3.as_f64(),
        costs: trial_costs.iter().map(|c| c.as_f64()).collect(),
    })
}

/// Estimate of the nearest step beyond `γ₀` at which the projected cost can
/// lose smoothness: the next local minimum (or boundary value of the
/// inserted channel) that the threshold `−1/γ` reaches.
pub fn estimate_gamma_one<S: Real>(scan: &FieldScan<S>, opt: &OptimalityResult<S>) -> Option<S> {
    let n = scan.num_modes;
    let near = S::lit(1e-9) * scan.horizon;
    let mut best: Option<S> = None;
    let mut offer = |v: S| {
        if v > opt.theta && v < S::zero() {
            let g = -S::one() / v;
            best = Some(best.map_or(g, |b: S| b.min(g)));
        }
    };
    for s in &scan.segments {
        for e in s.extrema.iter().filter(|e| e.is_min) {
            if e.mode == opt.mode && (e.time - opt.time).abs() <= near {
                continue;
            }
            offer(e.value);
        }
    }
    let s = &scan.segments[opt.segment];
    if opt.time != s.start {
        offer(s.row(0, n)[opt.mode]);
    }
    if opt.time != s.end {
        offer(s.row(s.times.len() - 1, n)[opt.mode]);
    }
    best
}

/// Per-iteration quantities watched by [`monitor_assumptions`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorSample {
    pub theta: f64,
    pub gamma0: f64,
    pub gamma1: Option<f64>,
    /// Smallest curvature among square-root events.
    pub min_curvature: Option<f64>,
}

/// Normalised trends of the monitored quantities relative to the first
/// iteration that reported them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorFlags {
    /// `((γ₁ − γ₀)/|θ|)_k / ((γ₁ − γ₀)/|θ|)_0`.
    pub gap_ratio: Option<f64>,
    /// `(d̈_min/|θ|)_k / (d̈_min/|θ|)_0`.
    pub curvature_ratio: Option<f64>,
    pub gap_flag: bool,
    pub curvature_flag: bool,
}

fn trend(history: &[MonitorSample], f: impl Fn(&MonitorSample) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = history
        .iter()
        .filter(|s| s.theta != 0.0)
        .filter_map(|s| f(s).map(|v| v / s.theta.abs()))
        .collect();
    if vals.len() < 2 || vals[0] <= 0.0 {
        return None;
    }
    Some(vals[vals.len() - 1] / vals[0])
}

/// Flags the step-gap and curvature conditions of the convergence analysis
/// when their normalised ratios fall below `floor`. Needs at least two
/// samples; never influences the iteration.
pub fn monitor_assumptions(history: &[MonitorSample], floor: f64) -> MonitorFlags {
    if history.len() < 2 {
        return MonitorFlags::default();
    }
    let gap_ratio = trend(history, |s| s.gamma1.map(|g1| g1 - s.gamma0));
    let curvature_ratio = trend(history, |s| s.min_curvature);
    MonitorFlags {
        gap_ratio,
        curvature_ratio,
        gap_flag: gap_ratio.is_some_and(|r| r < floor),
        curvature_flag: curvature_ratio.is_some_and(|r| r < floor),
    }
}

/// One accepted (or failed) descent iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentStepReport {
    pub k: usize,
    pub theta: f64,
    pub gamma0: f64,
    pub gamma3: f64,
    /// Backtracking trial index `j` of the accepted step.
    pub trials: usize,
    pub gamma: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    pub greatest_type: u8,
    pub num_linear: usize,
    pub num_square_root: usize,
    /// Number of schedule intervals after the step.
    pub num_intervals: usize,
    pub gamma1: Option<f64>,
    pub min_curvature: Option<f64>,
    pub gap_flag: bool,
    pub curvature_flag: bool,
    pub wall_time_ms: f64,
}
