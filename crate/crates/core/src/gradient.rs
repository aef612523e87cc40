//! Mode insertion gradient, switching time gradient and the optimality
//! function `θ`.
//!
//! The insertion gradient `d_a(t) = ρ(t)ᵀ(f_a(x(t)) − f_σ(t)(x(t)))` measures
//! the first-order cost change from inserting mode `a` at `t` for an
//! infinitesimal duration. Every consumer reads it through
//! [`GradientSource`], so the projection and line search can also run on
//! synthetic closed-form fields.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SchedError};
use crate::integrate::{adjoint_rhs, SampledCurve, SwitchedSystem};
use crate::scalar::{dot, Real};
use crate::signals::ModeSchedule;

/// Default grid spacing as a fraction of the horizon.
pub const DEFAULT_GRID_FRACTION: f64 = 1.0 / 2048.0;
/// Minimum number of grid cells per schedule interval.
pub const MIN_CELLS_PER_SEGMENT: usize = 64;
/// Stationarity tolerance `ε_stat`.
pub const STATIONARY_TOL: f64 = 1e-6;
/// Relative curvature positivity threshold.
pub const CURVATURE_TOL: f64 = 1e-8;
/// Relative step of the finite difference used for `d̈`.
pub const CURVATURE_STEP: f64 = 1e-5;
/// Relative time tolerance of extremum refinement.
pub const EXTREMUM_TIME_TOL: f64 = 1e-10;

/// Read access to the channels `d_1..d_N` of an insertion gradient.
///
/// The `*_in` methods evaluate the smooth data of schedule interval `seg`,
/// so calling them at an interval endpoint yields the one-sided limit.
pub trait GradientSource<S: Real>: Sync {
    fn schedule(&self) -> &ModeSchedule<S>;

    fn values_in(&self, seg: usize, t: S, out: &mut [S]);

    fn rates_in(&self, seg: usize, t: S, out: &mut [S]);

    /// `d̈` by central differences of the rate with step `10⁻⁵ ·` interval
    /// length, shifted inward near the interval ends.
    fn curvatures_in(&self, seg: usize, t: S, out: &mut [S]) {
        let (a, b) = self.schedule().interval(seg);
        let h = (b - a) * S::lit(CURVATURE_STEP);
        let centre = t.max(a + h).min(b - h);
        let n = out.len();
        let mut plus = vec![S::zero(); n];
        let mut minus = vec![S::zero(); n];
        self.rates_in(seg, centre + h, &mut plus);
        self.rates_in(seg, centre - h, &mut minus);
        for i in 0..n {
            out[i] = (plus[i] - minus[i]) / (h + h);
        }
    }

    fn num_modes(&self) -> usize {
        self.schedule().num_modes()
    }

    fn values(&self, t: S) -> Vec<S> {
        let mut out = vec![S::zero(); self.num_modes()];
        self.values_in(self.schedule().interval_index(t), t, &mut out);
        out
    }

    fn rates(&self, t: S) -> Vec<S> {
        let mut out = vec![S::zero(); self.num_modes()];
        self.rates_in(self.schedule().interval_index(t), t, &mut out);
        out
    }

    fn curvatures(&self, t: S) -> Vec<S> {
        let mut out = vec![S::zero(); self.num_modes()];
        self.curvatures_in(self.schedule().interval_index(t), t, &mut out);
        out
    }
}

/// Insertion gradient of a switched system along `(x, ρ)`.
pub struct InsertionGradientField<'a, S: Real> {
    sys: &'a dyn SwitchedSystem<S>,
    sched: &'a ModeSchedule<S>,
    x: &'a SampledCurve<S>,
    rho: &'a SampledCurve<S>,
}

/// Builds the insertion gradient field for `sched` from its state and
/// adjoint curves.
pub fn insertion_gradient<'a, S: Real>(
    sys: &'a dyn SwitchedSystem<S>,
    sched: &'a ModeSchedule<S>,
    x: &'a SampledCurve<S>,
    rho: &'a SampledCurve<S>,
) -> Result<InsertionGradientField<'a, S>> {
    let n = sys.num_states();
    if sys.num_modes() != sched.num_modes() {
        return Err(SchedError::Mismatch(
            "schedule and system mode counts differ".into(),
        ));
    }
    for (curve, name) in [(x, "state"), (rho, "adjoint")] {
        if curve.dim() != n {
            return Err(SchedError::Mismatch(format!(
                "{name} curve has dimension {}",
                curve.dim()
            )));
        }
        if curve.boundaries() != sched.boundaries().as_slice() {
            return Err(SchedError::Mismatch(format!(
                "{name} curve does not follow the schedule"
            )));
        }
    }
    Ok(InsertionGradientField { sys, sched, x, rho })
}

impl<S: Real> InsertionGradientField<'_, S> {
    fn fields(&self, x: &[S]) -> Vec<Vec<S>> {
        let n = x.len();
        (0..self.sched.num_modes())
            .map(|a| {
                let mut f = vec![S::zero(); n];
                self.sys.mode_field(a, x, &mut f);
                f
            })
            .collect()
    }
}

impl<S: Real> GradientSource<S> for InsertionGradientField<'_, S> {
    fn schedule(&self) -> &ModeSchedule<S> {
        self.sched
    }

    fn values_in(&self, seg: usize, t: S, out: &mut [S]) {
        let n = self.x.dim();
        let mut x = vec![S::zero(); n];
        let mut rho = vec![S::zero(); n];
        self.x.value_in(seg, t, &mut x);
        self.rho.value_in(seg, t, &mut rho);
        let active = self.sched.sequence()[seg];
        let fs = self.fields(&x);
        let base = dot(&rho, &fs[active]);
        for (a, o) in out.iter_mut().enumerate() {
            *o = if a == active {
                S::zero()
            } else {
                dot(&rho, &fs[a]) - base
            };
        }
    }

    fn rates_in(&self, seg: usize, t: S, out: &mut [S]) {
        let n = self.x.dim();
        let mut x = vec![S::zero(); n];
        let mut rho = vec![S::zero(); n];
        self.x.value_in(seg, t, &mut x);
        self.rho.value_in(seg, t, &mut rho);
        let active = self.sched.sequence()[seg];
        let fs = self.fields(&x);
        let mut rho_dot = vec![S::zero(); n];
        let mut jac = vec![S::zero(); n * n];
        let mut grad = vec![S::zero(); n];
        adjoint_rhs(
            self.sys,
            active,
            &x,
            &rho,
            &mut rho_dot,
            &mut jac,
            &mut grad,
        );
        let xdot = &fs[active];
        // ρᵀ Df_σ ẋ, reusing the active Jacobian left in `jac`
        let mut jx = vec![S::zero(); n];
        matvec(&jac, xdot, &mut jx);
        let base_rate = dot(&rho_dot, &fs[active]) + dot(&rho, &jx);
        for (a, o) in out.iter_mut().enumerate() {
            if a == active {
                *o = S::zero();
                continue;
            }
            self.sys.mode_jacobian(a, &x, &mut jac);
            matvec(&jac, xdot, &mut jx);
            *o = dot(&rho_dot, &fs[a]) + dot(&rho, &jx) - base_rate;
        }
    }
}

fn matvec<S: Real>(m: &[S], v: &[S], out: &mut [S]) {
    let n = v.len();
    for i in 0..n {
        out[i] = dot(&m[i * n..(i + 1) * n], v);
    }
}

/// Scalar function of time used by [`AnalyticField`].
pub type Channel<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

/// Synthetic field built from per-mode potentials `g_a(t)`:
/// `d_a(t) = g_a(t) − g_σ(t)(t)`. Mirrors the structure `ρᵀf_a − ρᵀf_σ` of a
/// real insertion gradient, so the active channel vanishes identically.
pub struct AnalyticField<S: Real> {
    sched: ModeSchedule<S>,
    potentials: Vec<Channel<S>>,
    derivatives: Vec<Channel<S>>,
}

impl<S: Real> AnalyticField<S> {
    pub fn new(
        sched: ModeSchedule<S>,
        potentials: Vec<Channel<S>>,
        derivatives: Vec<Channel<S>>,
    ) -> Result<Self> {
        if potentials.len() != sched.num_modes() || derivatives.len() != sched.num_modes() {
            return Err(SchedError::Mismatch(format!(
                "need one potential and derivative per mode ({})",
                sched.num_modes()
            )));
        }
        Ok(Self {
            sched,
            potentials,
            derivatives,
        })
    }

    /// Same potentials over a different schedule.
    pub fn with_schedule(&self, sched: ModeSchedule<S>) -> Result<Self> {
        Self::new(sched, self.potentials.clone(), self.derivatives.clone())
    }
}

impl<S: Real> GradientSource<S> for AnalyticField<S> {
    fn schedule(&self) -> &ModeSchedule<S> {
        &self.sched
    }

    fn values_in(&self, seg: usize, t: S, out: &mut [S]) {
        let active = self.sched.sequence()[seg];
        let base = (self.potentials[active])(t);
        for (a, o) in out.iter_mut().enumerate() {
            *o = if a == active {
                S::zero()
            } else {
                (self.potentials[a])(t) - base
            };
        }
    }

    fn rates_in(&self, seg: usize, t: S, out: &mut [S]) {
        let active = self.sched.sequence()[seg];
        let base = (self.derivatives[active])(t);
        for (a, o) in out.iter_mut().enumerate() {
            *o = if a == active {
                S::zero()
            } else {
                (self.derivatives[a])(t) - base
            };
        }
    }
}

/// Local extremum of one channel inside a schedule interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extremum<S> {
    pub mode: usize,
    pub time: S,
    pub value: S,
    pub is_min: bool,
}

/// Samples of all channels on one schedule interval.
#[derive(Clone, Debug)]
pub struct SegmentScan<S> {
    pub segment: usize,
    pub start: S,
    pub end: S,
    pub times: Vec<S>,
    /// Row-major `times.len() × N`; endpoints hold one-sided limits.
    pub values: Vec<S>,
    pub extrema: Vec<Extremum<S>>,
}

impl<S: Real> SegmentScan<S> {
    pub fn row(&self, k: usize, n: usize) -> &[S] {
        &self.values[k * n..(k + 1) * n]
    }
}

/// Grid samples and refined extrema of a gradient field.
#[derive(Clone, Debug)]
pub struct FieldScan<S> {
    pub num_modes: usize,
    pub horizon: S,
    pub segments: Vec<SegmentScan<S>>,
    /// Largest `|d_a(t)|` seen over samples and extrema.
    pub sup_norm: S,
}

/// Samples every interval at `max(64, ⌈len/Δ⌉)` cells (`Δ` defaults to
/// `T/2048`) and locates all interior extrema of every inactive channel by
/// bisection on `ḋ` (golden section on `d` when the rate gives no bracket).
pub fn scan_field<S: Real>(src: &dyn GradientSource<S>, spacing: Option<S>) -> FieldScan<S> {
    let sched = src.schedule();
    let n = sched.num_modes();
    let horizon = sched.horizon();
    let delta = spacing.unwrap_or(horizon * S::lit(DEFAULT_GRID_FRACTION));
    let tol = horizon * S::lit(EXTREMUM_TIME_TOL);
    let mut segments = Vec::with_capacity(sched.len());
    let mut sup = S::zero();
    let mut buf = vec![S::zero(); n];
    for (seg, (start, end, active)) in sched.intervals().enumerate() {
        let cells = ((end - start) / delta)
            .ceil()
            .to_usize()
            .unwrap_or(0)
            .max(MIN_CELLS_PER_SEGMENT);
        let step = (end - start) / S::from_count(cells);
        let times: Vec<S> = (0..=cells)
            .map(|k| {
                if k == cells {
                    end
                } else {
                    start + step * S::from_count(k)
                }
            })
            .collect();
        let mut values = Vec::with_capacity(times.len() * n);
        let mut rates = Vec::with_capacity(times.len() * n);
        for &t in &times {
            src.values_in(seg, t, &mut buf);
            values.extend_from_slice(&buf);
            src.rates_in(seg, t, &mut buf);
            rates.extend_from_slice(&buf);
        }
        sup = values.iter().fold(sup, |m, v| m.max(v.abs()));
        let mut extrema = Vec::new();
        for a in (0..n).filter(|&a| a != active) {
            for k in 0..cells {
                let (r0, r1) = (rates[k * n + a], rates[(k + 1) * n + a]);
                let min_bracket = r0 <= S::zero() && r1 > S::zero();
                let max_bracket = r0 >= S::zero() && r1 < S::zero();
                if min_bracket || max_bracket {
                    let t = bisect_rate(src, seg, a, times[k], times[k + 1], min_bracket, tol);
                    src.values_in(seg, t, &mut buf);
                    extrema.push(Extremum {
                        mode: a,
                        time: t,
                        value: buf[a],
                        is_min: min_bracket,
                    });
                }
            }
            // grid minima whose rate never changes sign nearby
            for k in 1..cells {
                let v = |j: usize| values[j * n + a];
                if v(k) < v(k - 1) && v(k) <= v(k + 1) {
                    let (lo, hi) = (times[k - 1], times[k + 1]);
                    let bracketed = extrema
                        .iter()
                        .any(|e| e.mode == a && e.is_min && e.time >= lo && e.time <= hi);
                    if !bracketed {
                        let t = golden_min(src, seg, a, lo, hi, tol);
                        src.values_in(seg, t, &mut buf);
                        extrema.push(Extremum {
                            mode: a,
                            time: t,
                            value: buf[a],
                            is_min: true,
                        });
                    }
                }
            }
        }
        extrema.sort_by(|p, q| {
            p.time
                .partial_cmp(&q.time)
                .unwrap()
                .then(p.mode.cmp(&q.mode))
        });
        sup = extrema.iter().fold(sup, |m, e| m.max(e.value.abs()));
        segments.push(SegmentScan {
            segment: seg,
            start,
            end,
            times,
            values,
            extrema,
        });
    }
    FieldScan {
        num_modes: n,
        horizon,
        segments,
        sup_norm: sup,
    }
}

fn bisect_rate<S: Real>(
    src: &dyn GradientSource<S>,
    seg: usize,
    mode: usize,
    mut lo: S,
    mut hi: S,
    rising: bool,
    tol: S,
) -> S {
    let mut buf = vec![S::zero(); src.num_modes()];
    let half = S::lit(0.5);
    while hi - lo > tol {
        let mid = (lo + hi) * half;
        if mid <= lo || mid >= hi {
            break;
        }
        src.rates_in(seg, mid, &mut buf);
        let below = if rising {
            buf[mode] <= S::zero()
        } else {
            buf[mode] >= S::zero()
        };
        if below {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) * half
}

fn golden_min<S: Real>(
    src: &dyn GradientSource<S>,
    seg: usize,
    mode: usize,
    mut lo: S,
    mut hi: S,
    tol: S,
) -> S {
    let mut buf = vec![S::zero(); src.num_modes()];
    let mut f = |t: S| {
        src.values_in(seg, t, &mut buf);
        buf[mode]
    };
    let r = S::lit(0.618_033_988_749_894_9);
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
        if d <= c {
            break;
        }
    }
    (lo + hi) * S::lit(0.5)
}

/// Minimum of the insertion gradient over modes and time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalityResult<S> {
    /// `θ = d_{σ′}(T′) ≤ 0`.
    pub theta: S,
    /// Minimising mode `σ′`.
    pub mode: usize,
    /// Minimising time `T′`.
    pub time: S,
    /// Interval whose (one-sided) data attains the minimum.
    pub segment: usize,
    /// `T′` lies strictly inside its interval and `ḋ_{σ′}(T′) ≈ 0`.
    pub is_interior_stationary: bool,
    /// `T′` coincides with the start or end of `segment`.
    pub at_segment_start: bool,
    pub at_segment_end: bool,
    /// `ḋ_{σ′}(T′)` (one-sided at interval ends).
    pub rate: S,
    /// `d̈_{σ′}(T′)` (one-sided at interval ends).
    pub curvature: S,
}

/// `ε_stat · (1 + ‖d‖∞ / T)`.
pub fn stationarity_tolerance<S: Real>(scan: &FieldScan<S>) -> S {
    S::lit(STATIONARY_TOL) * (S::one() + scan.sup_norm / scan.horizon)
}

/// `10⁻⁸ · (1 + ‖d‖∞)`.
pub fn curvature_tolerance<S: Real>(scan: &FieldScan<S>) -> S {
    S::lit(CURVATURE_TOL) * (S::one() + scan.sup_norm)
}

/// Global minimum of the field over the scan's samples and refined extrema.
/// Ties go to the earliest time, then the lowest mode index.
pub fn optimality<S: Real>(
    src: &dyn GradientSource<S>,
    scan: &FieldScan<S>,
) -> OptimalityResult<S> {
    let n = scan.num_modes;
    let tie = S::lit(16.0) * S::epsilon() * (S::one() + scan.sup_norm);
    // (value, time, mode, segment)
    let mut best: Option<(S, S, usize, usize)> = None;
    let mut consider = |v: S, t: S, a: usize, seg: usize| {
        let better = match best {
            None => true,
            Some((bv, bt, ba, _)) => {
                v < bv - tie || (v <= bv + tie && (t < bt || (t == bt && a < ba)))
            }
        };
        if better {
            best = Some((v, t, a, seg));
        }
    };
    for s in &scan.segments {
        for (k, &t) in s.times.iter().enumerate() {
            for (a, &v) in s.row(k, n).iter().enumerate() {
                consider(v, t, a, s.segment);
            }
        }
        for e in s.extrema.iter().filter(|e| e.is_min) {
            consider(e.value, e.time, e.mode, s.segment);
        }
    }
    let (theta, time, mode, segment) = best.expect("scan has samples");
    let theta = theta.min(S::zero());
    let sched = src.schedule();
    let (start, end) = sched.interval(segment);
    let mut buf = vec![S::zero(); n];
    src.rates_in(segment, time, &mut buf);
    let rate = buf[mode];
    src.curvatures_in(segment, time, &mut buf);
    let curvature = buf[mode];
    let at_segment_start = time == start;
    let at_segment_end = time == end;
    let is_interior_stationary =
        !at_segment_start && !at_segment_end && rate.abs() <= stationarity_tolerance(scan);
    OptimalityResult {
        theta,
        mode,
        time,
        segment,
        is_interior_stationary,
        at_segment_start,
        at_segment_end,
        rate,
        curvature,
    }
}

/// `∂J/∂T_i = ρ(T_i)ᵀ(f_{σ_i} − f_{σ_{i+1}})(x(T_i))` for every switching
/// time; empty for a single-interval schedule.
pub fn switching_time_gradient<S: Real>(
    sys: &dyn SwitchedSystem<S>,
    sched: &ModeSchedule<S>,
    x: &SampledCurve<S>,
    rho: &SampledCurve<S>,
) -> Result<Vec<S>> {
    if x.boundaries() != sched.boundaries().as_slice()
        || rho.boundaries() != sched.boundaries().as_slice()
    {
        return Err(SchedError::Mismatch(
            "curves do not follow the schedule".into(),
        ));
    }
    let n = sys.num_states();
    let mut fa = vec![S::zero(); n];
    let mut fb = vec![S::zero(); n];
    Ok((0..sched.num_switches())
        .map(|i| {
            let seg = x.segment(i + 1);
            let xt = seg.knot_value(0, n);
            let rt = rho.segment(i + 1).knot_value(0, n);
            sys.mode_field(sched.sequence()[i], xt, &mut fa);
            sys.mode_field(sched.sequence()[i + 1], xt, &mut fb);
            fa.iter()
                .zip(&fb)
                .zip(rt)
                .map(|((p, q), r)| (*p - *q) * *r)
                .sum()
        })
        .collect())
}

/// CSV `t,d1..dN` on `n + 1` uniformly spaced times.
pub fn field_csv<S: Real>(src: &dyn GradientSource<S>, n: usize) -> String {
    let modes = src.num_modes();
    let mut out = String::from("t");
    for a in 0..modes {
        let _ = write!(out, ",d{}", a + 1);
    }
    out.push('\n');
    let horizon = src.schedule().horizon();
    let n = n.max(1);
    for k in 0..=n {
        let t = if k == n {
            horizon
        } else {
            horizon * S::from_count(k) / S::from_count(n)
        };
        let _ = write!(out, "{t}");
        for v in src.values(t) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn parabola_field(horizon: f64) -> AnalyticField<f64> {
        let sched = ModeSchedule::constant(0, horizon, 2).unwrap();
        AnalyticField::new(
            sched,
            vec![
                Arc::new(|_| 0.0),
                Arc::new(|t| -2.0 + (t - 0.3) * (t - 0.3)),
            ],
            vec![Arc::new(|_| 0.0), Arc::new(|t| 2.0 * (t - 0.3))],
        )
        .unwrap()
    }

    #[test]
    fn parabolic_dip_minimum() {
        let field = parabola_field(1.0);
        let scan = scan_field(&field, None);
        let opt = optimality(&field, &scan);
        assert_abs_diff_eq!(opt.theta, -2.0, epsilon = 1e-12);
        assert_eq!(opt.mode, 1);
        assert_abs_diff_eq!(opt.time, 0.3, epsilon = 1e-9);
        assert!(opt.is_interior_stationary);
        assert_abs_diff_eq!(opt.curvature, 2.0, epsilon = 1e-6);
    }

    #[test]
    fn boundary_minimum_is_not_stationary() {
        let sched = ModeSchedule::constant(0, 2.0, 2).unwrap();
        let field = AnalyticField::new(
            sched,
            vec![Arc::new(|_| 0.0), Arc::new(|t| -2.0 + 5.0 * t)],
            vec![Arc::new(|_| 0.0), Arc::new(|_| 5.0)],
        )
        .unwrap();
        let scan = scan_field(&field, None);
        let opt = optimality(&field, &scan);
        assert_eq!(opt.time, 0.0);
        assert_eq!(opt.theta, -2.0);
        assert!(opt.at_segment_start);
        assert!(!opt.is_interior_stationary);
        assert_abs_diff_eq!(opt.rate, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn nonnegative_field_gives_zero_theta() {
        let sched = ModeSchedule::constant(1, 1.0, 2).unwrap();
        let field = AnalyticField::new(
            sched,
            vec![Arc::new(|t| 1.0 + t), Arc::new(|_| 0.0)],
            vec![Arc::new(|_| 1.0), Arc::new(|_| 0.0)],
        )
        .unwrap();
        let scan = scan_field(&field, None);
        let opt = optimality(&field, &scan);
        assert_eq!(opt.theta, 0.0);
        assert_eq!(opt.mode, 1);
        assert_eq!(opt.time, 0.0);
    }

    #[test]
    fn ties_prefer_earliest_then_lowest_mode() {
        let sched = ModeSchedule::constant(2, 1.0, 3).unwrap();
        let well = |c: f64| move |t: f64| -1.0 + (t - c) * (t - c);
        let dwell = |c: f64| move |t: f64| 2.0 * (t - c);
        let field = AnalyticField::new(
            sched,
            vec![
                Arc::new(well(0.75)),
                Arc::new(well(0.25)),
                Arc::new(|_| 0.0),
            ],
            vec![
                Arc::new(dwell(0.75)),
                Arc::new(dwell(0.25)),
                Arc::new(|_| 0.0),
            ],
        )
        .unwrap();
        let scan = scan_field(&field, None);
        let opt = optimality(&field, &scan);
        assert_eq!(opt.mode, 1);
        assert_abs_diff_eq!(opt.time, 0.25, epsilon = 1e-9);

        let sched = ModeSchedule::constant(2, 1.0, 3).unwrap();
        let field = AnalyticField::new(
            sched,
            vec![Arc::new(well(0.5)), Arc::new(well(0.5)), Arc::new(|_| 0.0)],
            vec![
                Arc::new(dwell(0.5)),
                Arc::new(dwell(0.5)),
                Arc::new(|_| 0.0),
            ],
        )
        .unwrap();
        let opt = optimality(&field, &scan_field(&field, None));
        assert_eq!(opt.mode, 0);
    }

    #[test]
    fn minimum_beats_dense_grid() {
        let sched = ModeSchedule::new(vec![0, 1, 0], vec![0.31, 0.77], 1.3, 3).unwrap();
        let field = AnalyticField::new(
            sched,
            vec![
                Arc::new(|t: f64| (7.0 * t).sin()),
                Arc::new(|t: f64| (3.0 * t).cos() - 0.4),
                Arc::new(|t: f64| t * t - 0.9 * t),
            ],
            vec![
                Arc::new(|t: f64| 7.0 * (7.0 * t).cos()),
                Arc::new(|t: f64| -3.0 * (3.0 * t).sin()),
                Arc::new(|t: f64| 2.0 * t - 0.9),
            ],
        )
        .unwrap();
        let scan = scan_field(&field, None);
        let opt = optimality(&field, &scan);
        let mut grid_min = f64::INFINITY;
        for k in 0..=10_000 {
            let t = 1.3 * k as f64 / 10_000.0;
            grid_min = field.values(t).into_iter().fold(grid_min, f64::min);
        }
        assert!(
            opt.theta <= grid_min + 1e-8,
            "θ = {}, grid = {grid_min}",
            opt.theta
        );
        assert!(opt.theta <= 0.0);
    }

    #[test]
    fn active_channel_vanishes() {
        let sched = ModeSchedule::new(vec![0, 1], vec![0.5], 1.0, 2).unwrap();
        let field = AnalyticField::new(
            sched,
            vec![Arc::new(|t: f64| t.sin()), Arc::new(|t: f64| t.cos())],
            vec![Arc::new(|t: f64| t.cos()), Arc::new(|t: f64| -t.sin())],
        )
        .unwrap();
        for t in [0.0, 0.2, 0.49, 0.5, 0.9] {
            let v = field.values(t);
            let active = if t < 0.5 { 0 } else { 1 };
            assert_eq!(v[active], 0.0);
        }
    }

    #[test]
    fn curvature_by_differences() {
        let field = parabola_field(1.0);
        assert_abs_diff_eq!(field.curvatures(0.0)[1], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(field.curvatures(0.5)[1], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(field.curvatures(1.0)[1], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn field_csv_layout() {
        let field = parabola_field(1.0);
        let csv = field_csv(&field, 2);
        assert_eq!(csv.lines().next().unwrap(), "t,d1,d2");
        assert_eq!(csv.lines().count(), 4);
    }
}
