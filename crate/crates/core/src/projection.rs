//! Max-projection of `u − γd` back onto feasible mode schedules.
//!
//! Because `u` is an indicator vector and the active channel of `d` is zero,
//! `argmax_a (u_a − γ d_a)` picks `argmin_a d_a(t)` wherever that minimum
//! drops below `−1/γ` and keeps the incumbent mode elsewhere. Label changes
//! are located on the gradient grid (plus every channel extremum, so narrow
//! dips between grid points are not missed) and refined by bisection.

use crate::error::{Result, SchedError};
use crate::gradient::{FieldScan, GradientSource};
use crate::integrate::{
    evaluate_cost, integrate_state, IntegratorOptions, SampledCurve, SwitchedSystem,
};
use crate::scalar::Real;
use crate::signals::ModeSchedule;

/// Relative time tolerance of crossing bisection.
pub const CROSSING_TIME_TOL: f64 = 1e-12;
/// Consecutive tied samples that count as a persistent tie.
const TIE_RUN: usize = 3;

/// Projected schedule with its re-integrated trajectory and cost.
#[derive(Clone, Debug)]
pub struct ProjectionResult<S> {
    pub schedule: ModeSchedule<S>,
    pub trajectory: SampledCurve<S>,
    pub cost: S,
}

/// `γ₀ = −1/θ`, the smallest step at which the projection departs from the
/// current schedule. `None` when `θ = 0`.
pub fn gamma_zero<S: Real>(theta: S) -> Result<Option<S>> {
    if theta > S::zero() || theta.is_nan() {
        return Err(SchedError::Invariant(format!(
            "optimality value must be non-positive, got {theta}"
        )));
    }
    if theta == S::zero() {
        Ok(None)
    } else {
        Ok(Some(-S::one() / theta))
    }
}

/// Direct evaluation of `argmax_a (u_a − γ d_a)` with lowest-index ties.
/// Independent of the threshold shortcut used by [`max_map`].
pub fn argmax_label<S: Real>(incumbent: usize, d: &[S], gamma: S) -> usize {
    let mut best = 0;
    let mut best_v = S::neg_infinity();
    for (a, &da) in d.iter().enumerate() {
        let u = if a == incumbent { S::one() } else { S::zero() };
        let v = u - gamma * da;
        if v > best_v {
            best = a;
            best_v = v;
        }
    }
    best
}

fn threshold_label<S: Real>(incumbent: usize, d: &[S], thr: S) -> usize {
    let mut arg = 0;
    for a in 1..d.len() {
        if d[a] < d[arg] {
            arg = a;
        }
    }
    if d[arg] < thr {
        arg
    } else {
        incumbent
    }
}

/// Two below-threshold channels equal to within rounding.
fn is_tied<S: Real>(d: &[S], thr: S) -> bool {
    let mut below: Vec<S> = d.iter().copied().filter(|&v| v < thr).collect();
    if below.len() < 2 {
        return false;
    }
    below.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (below[1] - below[0]).abs() <= S::lit(1e-12) * (S::one() + below[0].abs())
}

struct Labeller<'a, S: Real> {
    src: &'a dyn GradientSource<S>,
    seg: usize,
    incumbent: usize,
    thr: S,
    tol: S,
    buf: Vec<S>,
}

impl<S: Real> Labeller<'_, S> {
    fn label(&mut self, t: S) -> usize {
        self.src.values_in(self.seg, t, &mut self.buf);
        threshold_label(self.incumbent, &self.buf, self.thr)
    }

    /// Pushes `(time, new_label)` for every label change in `(lo, hi]`.
    fn resolve(&mut self, lo: S, l_lo: usize, hi: S, l_hi: usize, out: &mut Vec<(S, usize)>) {
        if l_lo == l_hi {
            return;
        }
        let mid = (lo + hi) * S::lit(0.5);
        if hi - lo <= self.tol || mid <= lo || mid >= hi {
            out.push((hi, l_hi));
            return;
        }
        let l_mid = self.label(mid);
        if l_mid == l_lo {
            self.resolve(mid, l_mid, hi, l_hi, out);
        } else if l_mid == l_hi {
            self.resolve(lo, l_lo, mid, l_mid, out);
        } else {
            self.resolve(lo, l_lo, mid, l_mid, out);
            self.resolve(mid, l_mid, hi, l_hi, out);
        }
    }

    /// Handles one sample cell, refining once when the midpoint reveals a
    /// change the endpoints hide.
    fn cell(
        &mut self,
        lo: S,
        l_lo: usize,
        hi: S,
        l_hi: usize,
        out: &mut Vec<(S, usize)>,
    ) -> Result<()> {
        let mid = (lo + hi) * S::lit(0.5);
        let l_mid = self.label(mid);
        if l_lo != l_hi || l_mid == l_lo {
            self.resolve(lo, l_lo, hi, l_hi, out);
            return Ok(());
        }
        let parts = 8;
        let width = (hi - lo) / S::from_count(parts);
        let mut prev = (lo, l_lo);
        for p in 1..=parts {
            let t = if p == parts {
                hi
            } else {
                lo + width * S::from_count(p)
            };
            let l = if p == parts { l_hi } else { self.label(t) };
            let sub_mid = (prev.0 + t) * S::lit(0.5);
            if prev.1 == l && self.label(sub_mid) != l {
                return Err(SchedError::AmbiguousCrossing {
                    start: prev.0.as_f64(),
                    end: t.as_f64(),
                });
            }
            self.resolve(prev.0, prev.1, t, l, out);
            prev = (t, l);
        }
        Ok(())
    }
}

/// Piecewise labels of `argmax(u − γd)` as `(start, mode)` pieces, one run
/// per schedule interval; not yet merged.
fn label_pieces<S: Real>(
    src: &dyn GradientSource<S>,
    scan: &FieldScan<S>,
    gamma: S,
) -> Result<Vec<(S, usize)>> {
    if !(gamma >= S::zero()) {
        return Err(SchedError::InvalidArgument(format!(
            "step size must be non-negative, got {gamma}"
        )));
    }
    let sched = src.schedule();
    if scan.segments.len() != sched.len() {
        return Err(SchedError::Mismatch(
            "scan does not belong to this field".into(),
        ));
    }
    if gamma == S::zero() {
        return Ok(sched.intervals().map(|(a, _, m)| (a, m)).collect());
    }
    let n = sched.num_modes();
    let thr = -S::one() / gamma;
    let tol = sched.horizon() * S::lit(CROSSING_TIME_TOL);
    let mut pieces = Vec::new();
    for seg_scan in &scan.segments {
        let seg = seg_scan.segment;
        let incumbent = sched.sequence()[seg];
        let mut lab = Labeller {
            src,
            seg,
            incumbent,
            thr,
            tol,
            buf: vec![S::zero(); n],
        };
        // grid samples merged with extrema, in time order
        let mut samples: Vec<(S, usize, bool)> =
            Vec::with_capacity(seg_scan.times.len() + seg_scan.extrema.len());
        for (k, &t) in seg_scan.times.iter().enumerate() {
            let row = seg_scan.row(k, n);
            samples.push((t, threshold_label(incumbent, row, thr), is_tied(row, thr)));
        }
        for e in &seg_scan.extrema {
            src.values_in(seg, e.time, &mut lab.buf);
            let tied = is_tied(&lab.buf, thr);
            samples.push((e.time, threshold_label(incumbent, &lab.buf, thr), tied));
        }
        samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        samples.dedup_by(|a, b| a.0 == b.0);

        let mut run = 0;
        for (k, s) in samples.iter().enumerate() {
            run = if s.2 { run + 1 } else { 0 };
            if run >= TIE_RUN {
                let from = samples[k + 1 - TIE_RUN].0;
                return Err(SchedError::Degenerate {
                    start: from.as_f64(),
                    end: s.0.as_f64(),
                    reason: "two channels tie below the threshold over an interval".into(),
                });
            }
        }

        pieces.push((seg_scan.start, samples[0].1));
        let mut changes = Vec::new();
        for w in samples.windows(2) {
            lab.cell(w[0].0, w[0].1, w[1].0, w[1].1, &mut changes)?;
        }
        pieces.extend(changes);
    }
    Ok(pieces)
}

/// Times where the label of `argmax(u − γd)` changes, with the mode that
/// takes over. Changes at existing switching times are included only when
/// the new label differs from the preceding one.
pub fn crossing_times<S: Real>(
    src: &dyn GradientSource<S>,
    scan: &FieldScan<S>,
    gamma: S,
) -> Result<Vec<(S, usize)>> {
    if !(gamma > S::zero()) {
        return Err(SchedError::InvalidArgument(format!(
            "step size must be positive, got {gamma}"
        )));
    }
    let pieces = label_pieces(src, scan, gamma)?;
    let horizon = src.schedule().horizon();
    let mut out: Vec<(S, usize)> = Vec::new();
    let mut current = pieces[0].1;
    for &(t, m) in pieces.iter().skip(1) {
        if m != current && t < horizon {
            out.push((t, m));
            current = m;
        }
    }
    Ok(out)
}

/// The schedule of `argmax_a (u_a − γ d_a)`, with intervals shorter than
/// `dwell` (default `10⁻⁶ T`) merged into their longer neighbour.
pub fn max_map<S: Real>(
    src: &dyn GradientSource<S>,
    scan: &FieldScan<S>,
    gamma: S,
    dwell: Option<S>,
) -> Result<ModeSchedule<S>> {
    let sched = src.schedule();
    let pieces = label_pieces(src, scan, gamma)?;
    let raw = ModeSchedule::from_pieces(&pieces, sched.horizon(), sched.num_modes())?;
    let dwell = dwell.unwrap_or_else(|| raw.default_dwell());
    let (merged, removed) = raw.merge_short_intervals(dwell);
    if removed > 0 {
        log::warn!(
            "projection at gamma = {gamma:e} merged {removed} interval(s) shorter than {dwell:e}"
        );
    }
    Ok(merged)
}

/// `𝒫(u − γd)`: the max-mapped schedule, its trajectory from `x0` and its
/// cost.
#[allow(clippy::too_many_arguments)]
pub fn project<S: Real>(
    sys: &dyn SwitchedSystem<S>,
    x0: &[S],
    src: &dyn GradientSource<S>,
    scan: &FieldScan<S>,
    gamma: S,
    opts: &IntegratorOptions<S>,
    dwell: Option<S>,
) -> Result<ProjectionResult<S>> {
    let schedule = max_map(src, scan, gamma, dwell)?;
    let trajectory = integrate_state(sys, &schedule, x0, opts)?;
    let cost = evaluate_cost(sys, &trajectory);
    Ok(ProjectionResult {
        schedule,
        trajectory,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient::{optimality, scan_field, AnalyticField};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn parabola(horizon: f64) -> AnalyticField<f64> {
        AnalyticField::new(
            ModeSchedule::constant(0, horizon, 2).unwrap(),
            vec![
                Arc::new(|_| 0.0),
                Arc::new(|t| -2.0 + (t - 0.5) * (t - 0.5)),
            ],
            vec![Arc::new(|_| 0.0), Arc::new(|t| 2.0 * (t - 0.5))],
        )
        .unwrap()
    }

    #[test]
    fn gamma_zero_values() {
        assert_eq!(gamma_zero(-2.0).unwrap(), Some(0.5));
        assert_eq!(gamma_zero(0.0).unwrap(), None);
        assert!(gamma_zero(0.1).is_err());
        assert_abs_diff_eq!(
            gamma_zero(-588.67).unwrap().unwrap(),
            1.699e-3,
            epsilon = 5e-7
        );
    }

    #[test]
    fn zero_step_is_identity() {
        let f = parabola(2.0);
        let scan = scan_field(&f, None);
        assert_eq!(&max_map(&f, &scan, 0.0, None).unwrap(), f.schedule());
    }

    #[test]
    fn parabola_unit_step() {
        // d₂ < −1 ⇔ |t − 0.5| < 1, so mode 2 runs on [0, 1.5)
        let f = parabola(2.0);
        let scan = scan_field(&f, None);
        let s = max_map(&f, &scan, 1.0, None).unwrap();
        assert_eq!(s.sequence(), &[1, 0]);
        assert_abs_diff_eq!(s.times()[0], 1.5, epsilon = 1e-11);
        let c = crossing_times(&f, &scan, 1.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].1, 0);
        assert_abs_diff_eq!(c[0].0, 1.5, epsilon = 1e-11);
    }

    #[test]
    fn below_gamma_zero_is_identity() {
        let f = parabola(2.0);
        let scan = scan_field(&f, None);
        let opt = optimality(&f, &scan);
        let g0 = gamma_zero(opt.theta).unwrap().unwrap();
        assert_abs_diff_eq!(g0, 0.5, epsilon = 1e-12);
        for frac in [0.1, 0.5, 0.9, 1.0 - 1e-6] {
            assert_eq!(&max_map(&f, &scan, g0 * frac, None).unwrap(), f.schedule());
            assert!(crossing_times(&f, &scan, g0 * frac).unwrap().is_empty());
        }
        let s = max_map(&f, &scan, g0 * (1.0 + 1e-3), None).unwrap();
        assert_eq!(s.sequence(), &[0, 1, 0]);
        // pair of crossings straddling T′ = 0.5
        let c = crossing_times(&f, &scan, g0 * (1.0 + 1e-3)).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c[0].0 < 0.5 && c[1].0 > 0.5);
    }

    #[test]
    fn narrow_dip_between_grid_points_is_found() {
        // a dip of half-width 2e-5 is far narrower than the grid spacing
        let f = AnalyticField::new(
            ModeSchedule::constant(0, 1.0, 2).unwrap(),
            vec![
                Arc::new(|_| 0.0),
                Arc::new(|t: f64| -2.0 * (-((t - 0.40003) / 2e-5).powi(2)).exp()),
            ],
            vec![
                Arc::new(|_| 0.0),
                Arc::new(|t: f64| {
                    let z = (t - 0.40003) / 2e-5;
                    4.0 * z / 2e-5 * (-z * z).exp()
                }),
            ],
        )
        .unwrap();
        let scan = scan_field(&f, None);
        let s = max_map(&f, &scan, 1.0, Some(1e-9)).unwrap();
        assert_eq!(s.sequence(), &[0, 1, 0]);
        assert!(s.times()[0] < 0.40003 && s.times()[1] > 0.40003);
    }

    #[test]
    fn threshold_rule_matches_direct_argmax() {
        let f = AnalyticField::new(
            ModeSchedule::new(vec![0, 2, 1], vec![0.3, 0.8], 1.2, 3).unwrap(),
            vec![
                Arc::new(|t: f64| (5.0 * t).sin()),
                Arc::new(|t: f64| (4.0 * t).cos() - 0.2),
                Arc::new(|t: f64| 0.7 * t - 0.5),
            ],
            vec![
                Arc::new(|t: f64| 5.0 * (5.0 * t).cos()),
                Arc::new(|t: f64| -4.0 * (4.0 * t).sin()),
                Arc::new(|_| 0.7),
            ],
        )
        .unwrap();
        let scan = scan_field(&f, None);
        for gamma in [0.3, 1.0, 2.5, 10.0] {
            let s = max_map(&f, &scan, gamma, Some(1e-12)).unwrap();
            for k in 0..997 {
                let t = 1.2 * (k as f64 + 0.5) / 997.0;
                let d = f.values(t);
                let incumbent = f.schedule().mode_at(t);
                let expected = argmax_label(incumbent, &d, gamma);
                // skip samples within bisection tolerance of a crossing
                if s.times().iter().any(|&c| (c - t).abs() < 1e-9) {
                    continue;
                }
                assert_eq!(s.mode_at(t), expected, "gamma = {gamma}, t = {t}");
            }
        }
    }

    #[test]
    fn projection_is_idempotent_on_synthetic_field() {
        let f = parabola(2.0);
        let scan = scan_field(&f, None);
        let s1 = max_map(&f, &scan, 1.0, None).unwrap();
        let f2 = f.with_schedule(s1.clone()).unwrap();
        let scan2 = scan_field(&f2, None);
        let s2 = max_map(&f2, &scan2, 1.0, None).unwrap();
        assert_eq!(s1.sequence(), s2.sequence());
        for (a, b) in s1.times().iter().zip(s2.times()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-11);
        }
    }

    #[test]
    fn persistent_tie_is_rejected() {
        let f = AnalyticField::new(
            ModeSchedule::constant(0, 1.0, 3).unwrap(),
            vec![Arc::new(|_| 0.0), Arc::new(|_| -3.0), Arc::new(|_| -3.0)],
            vec![Arc::new(|_| 0.0), Arc::new(|_| 0.0), Arc::new(|_| 0.0)],
        )
        .unwrap();
        let scan = scan_field(&f, None);
        assert!(matches!(
            max_map(&f, &scan, 1.0, None),
            Err(SchedError::Degenerate { .. })
        ));
    }

    #[test]
    fn negative_step_is_rejected() {
        let f = parabola(2.0);
        let scan = scan_field(&f, None);
        assert!(max_map(&f, &scan, -1.0, None).is_err());
        assert!(crossing_times(&f, &scan, 0.0).is_err());
    }
}
