//! Four-mode planar vehicle tracking a circular reference.
//!
//! State `[X, Y, ψ, s]`: position, heading and a clock `s` with `ṡ = 1`
//! that lets the time-varying reference enter an autonomous cost.

use std::f64::consts::FRAC_PI_3;

use crate::integrate::SwitchedSystem;
use crate::scalar::Real;

/// `(speed, turn rate)` of each mode.
pub const VEHICLE_MODES: [(f64, f64); 4] = [
    (4.5, FRAC_PI_3),
    (4.5, -FRAC_PI_3),
    (2.0, FRAC_PI_3),
    (2.0, -FRAC_PI_3),
];

/// Horizon of the tracking example.
pub const VEHICLE_HORIZON: f64 = 5.5;

/// Mode (zero-based) of the constant initial schedule of the tracking
/// example: fast right turn.
pub const VEHICLE_INITIAL_MODE: usize = 1;

/// Unicycle with four `(v, ω)` modes and cost `½‖(X, Y, ψ) − x_d(s)‖²`.
#[derive(Clone, Debug)]
pub struct VehicleModel<S> {
    modes: Vec<(S, S)>,
}

impl<S: Real> Default for VehicleModel<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> VehicleModel<S> {
    pub fn new() -> Self {
        Self {
            modes: VEHICLE_MODES
                .iter()
                .map(|&(v, w)| (S::lit(v), S::lit(w)))
                .collect(),
        }
    }

    pub fn mode_table(&self) -> &[(S, S)] {
        &self.modes
    }

    /// Reference `[6.5 − 4 cos t, −1.5 + 4 sin t, π/2 − t]`.
    pub fn desired(t: S) -> [S; 3] {
        [
            S::lit(6.5) - S::lit(4.0) * t.cos(),
            S::lit(-1.5) + S::lit(4.0) * t.sin(),
            S::lit(std::f64::consts::FRAC_PI_2) - t,
        ]
    }

    /// Time derivative of [`Self::desired`].
    pub fn desired_rate(t: S) -> [S; 3] {
        [S::lit(4.0) * t.sin(), S::lit(4.0) * t.cos(), -S::one()]
    }

    /// `[0, 0, 0]` with the clock at zero.
    pub fn initial_state() -> Vec<S> {
        vec![S::zero(); 4]
    }

    fn error(x: &[S]) -> [S; 3] {
        let d = Self::desired(x[3]);
        [x[0] - d[0], x[1] - d[1], x[2] - d[2]]
    }
}

impl<S: Real> SwitchedSystem<S> for VehicleModel<S> {
    fn num_modes(&self) -> usize {
        self.modes.len()
    }

    fn num_states(&self) -> usize {
        4
    }

    fn mode_field(&self, mode: usize, x: &[S], out: &mut [S]) {
        let (v, w) = self.modes[mode];
        out[0] = v * x[2].cos();
        out[1] = v * x[2].sin();
        out[2] = w;
        out[3] = S::one();
    }

    fn mode_jacobian(&self, mode: usize, x: &[S], out: &mut [S]) {
        let (v, _) = self.modes[mode];
        out.fill(S::zero());
        out[2] = -v * x[2].sin();
        out[4 + 2] = v * x[2].cos();
    }

    fn running_cost(&self, x: &[S]) -> S {
        let e = Self::error(x);
        S::lit(0.5) * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
    }

    fn running_cost_gradient(&self, x: &[S], out: &mut [S]) {
        let e = Self::error(x);
        let r = Self::desired_rate(x[3]);
        out[0] = e[0];
        out[1] = e[1];
        out[2] = e[2];
        out[3] = -(e[0] * r[0] + e[1] * r[1] + e[2] * r[2]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate_state, jacobian_fd_error, IntegratorOptions};
    use crate::signals::ModeSchedule;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn mode_table_rows() {
        let m = VehicleModel::<f64>::new();
        let mut out = [0.0; 4];
        m.mode_field(0, &[0.0, 0.0, 0.0, 0.0], &mut out);
        assert_abs_diff_eq!(out[0], 4.5);
        assert_abs_diff_eq!(out[1], 0.0);
        assert_abs_diff_eq!(out[2], PI / 3.0);
        m.mode_field(3, &[0.0, 0.0, FRAC_PI_2, 0.0], &mut out);
        assert_abs_diff_eq!(out[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 2.0);
        assert_abs_diff_eq!(out[2], -PI / 3.0);
    }

    #[test]
    fn reference_points() {
        let d = VehicleModel::<f64>::desired(0.0);
        assert_abs_diff_eq!(d[0], 2.5);
        assert_abs_diff_eq!(d[1], -1.5);
        assert_abs_diff_eq!(d[2], FRAC_PI_2);
        let d = VehicleModel::<f64>::desired(PI);
        assert_abs_diff_eq!(d[0], 10.5, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], -1.5, epsilon = 1e-14);
        assert_abs_diff_eq!(d[2], -FRAC_PI_2, epsilon = 1e-14);
        for t in [0.0, 0.7, 2.9] {
            let r = VehicleModel::<f64>::desired_rate(t);
            assert_abs_diff_eq!(r[0].hypot(r[1]), 4.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn jacobians_match_differences() {
        let m = VehicleModel::<f64>::new();
        for mode in 0..4 {
            for x in [[0.1, -0.3, 0.7, 0.2], [2.0, 1.0, -2.5, 3.0]] {
                assert!(jacobian_fd_error(&m, mode, &x, 1e-6) < 1e-6);
            }
        }
    }

    #[test]
    fn cost_gradient_matches_differences() {
        let m = VehicleModel::<f64>::new();
        let x = [0.4, -0.2, 1.1, 0.9];
        let mut g = [0.0; 4];
        m.running_cost_gradient(&x, &mut g);
        for i in 0..4 {
            let mut p = x;
            let mut q = x;
            p[i] += 1e-6;
            q[i] -= 1e-6;
            let fd = (m.running_cost(&p) - m.running_cost(&q)) / 2e-6;
            assert_abs_diff_eq!(fd, g[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn slow_left_turn_closed_form() {
        let m = VehicleModel::<f64>::new();
        let sched = ModeSchedule::constant(2, 3.0, 4).unwrap();
        let opts = IntegratorOptions::with_tolerance(1e-12, 1e-12);
        let x = integrate_state(&m, &sched, &VehicleModel::initial_state(), &opts).unwrap();
        for t in [0.5, 1.7, 3.0] {
            let v = x.value(t);
            let w = PI / 3.0;
            assert_abs_diff_eq!(v[2], w * t, epsilon = 1e-9);
            assert_abs_diff_eq!(v[0], (6.0 / PI) * (w * t).sin(), epsilon = 1e-9);
            assert_abs_diff_eq!(v[1], (6.0 / PI) * (1.0 - (w * t).cos()), epsilon = 1e-9);
            assert_abs_diff_eq!(v[3], t, epsilon = 1e-12);
        }
    }
}
