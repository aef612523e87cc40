//! Swing-equation model of a multimachine network with two admittance
//! configurations (switchable series capacitors all off or all on).
//!
//! State `[δ_1..δ_m, δ̇_1..δ̇_m]` with absolute rotor angles, so `δ̇ = ω_s`
//! at synchronous speed.

use crate::error::{Result, SchedError};
use crate::integrate::SwitchedSystem;
use crate::scalar::Real;

/// Default system frequency in Hz.
pub const DEFAULT_FREQUENCY: f64 = 60.0;

/// Classical machine parameters (per unit on the system base).
#[derive(Clone, Debug, PartialEq)]
pub struct Machine<S> {
    /// Inertia constant `H` in seconds.
    pub inertia: S,
    /// Mechanical input power `P_m`.
    pub mech_power: S,
    /// Internal voltage magnitude `|E|`.
    pub voltage: S,
}

/// Reduced multimachine network; mode `c` uses admittance `Y⁽ᶜ⁺¹⁾`.
#[derive(Clone, Debug)]
pub struct PowerNetwork<S> {
    machines: Vec<Machine<S>>,
    /// Row-major conductance `Re Y` per configuration.
    conductance: [Vec<S>; 2],
    /// Row-major susceptance `Im Y` per configuration.
    susceptance: [Vec<S>; 2],
    omega_s: S,
    frequency: S,
    equilibrium: Vec<S>,
}

impl<S: Real> PowerNetwork<S> {
    /// Builds a network from reduced admittances given as row-major
    /// `(G, B)` pairs. The equilibrium defaults to all angles zero until
    /// [`Self::set_equilibrium`] is called.
    pub fn new(
        machines: Vec<Machine<S>>,
        y1: Vec<(S, S)>,
        y2: Vec<(S, S)>,
        frequency: S,
    ) -> Result<Self> {
        let m = machines.len();
        if m == 0 {
            return Err(SchedError::Network("network has no generators".into()));
        }
        for (c, y) in [&y1, &y2].iter().enumerate() {
            if y.len() != m * m {
                return Err(SchedError::Network(format!(
                    "Y{} has {} entries, expected {m}x{m}",
                    c + 1,
                    y.len()
                )));
            }
            for i in 0..m {
                for j in 0..i {
                    let (a, b) = (y[i * m + j], y[j * m + i]);
                    let scale = S::one() + a.0.abs() + a.1.abs();
                    if (a.0 - b.0).abs() > S::lit(1e-9) * scale
                        || (a.1 - b.1).abs() > S::lit(1e-9) * scale
                    {
                        return Err(SchedError::Network(format!(
                            "Y{} is not symmetric at ({}, {})",
                            c + 1,
                            i + 1,
                            j + 1
                        )));
                    }
                }
            }
        }
        for (i, g) in machines.iter().enumerate() {
            if !(g.inertia > S::zero()) {
                return Err(SchedError::Network(format!(
                    "generator {} has non-positive inertia",
                    i + 1
                )));
            }
        }
        if !(frequency > S::zero()) {
            return Err(SchedError::Network(format!(
                "frequency must be positive, got {frequency}"
            )));
        }
        let split = |y: &[(S, S)]| -> (Vec<S>, Vec<S>) {
            (
                y.iter().map(|p| p.0).collect(),
                y.iter().map(|p| p.1).collect(),
            )
        };
        let (g1, b1) = split(&y1);
        let (g2, b2) = split(&y2);
        Ok(Self {
            machines,
            conductance: [g1, g2],
            susceptance: [b1, b2],
            omega_s: S::lit(2.0 * std::f64::consts::PI) * frequency,
            frequency,
            equilibrium: vec![S::zero(); m],
        })
    }

    pub fn num_generators(&self) -> usize {
        self.machines.len()
    }

    pub fn machines(&self) -> &[Machine<S>] {
        &self.machines
    }

    /// Synchronous speed `ω_s = 2π f_s`.
    pub fn omega_s(&self) -> S {
        self.omega_s
    }

    pub fn frequency(&self) -> S {
        self.frequency
    }

    /// `Y⁽ᶜ⁾_{ij}` as `(G, B)`, with configurations numbered from 0.
    pub fn admittance(&self, config: usize, i: usize, j: usize) -> (S, S) {
        let m = self.num_generators();
        (
            self.conductance[config][i * m + j],
            self.susceptance[config][i * m + j],
        )
    }

    pub fn equilibrium(&self) -> &[S] {
        &self.equilibrium
    }

    pub fn set_equilibrium(&mut self, delta: Vec<S>) -> Result<()> {
        if delta.len() != self.num_generators() {
            return Err(SchedError::Network(
                "equilibrium has the wrong length".into(),
            ));
        }
        self.equilibrium = delta;
        Ok(())
    }

    pub fn set_mech_power(&mut self, i: usize, pm: S) {
        self.machines[i].mech_power = pm;
    }

    /// `P_e,i = |E_i|² G_ii + Σ_{j≠i} |E_i||E_j| (G_ij cos δ_ij + B_ij sin δ_ij)`,
    /// which equals the `|Y_ij| cos(δ_ij − ψ_ij)` form.
    pub fn electrical_power(&self, config: usize, delta: &[S], out: &mut [S]) -> Result<()> {
        let m = self.num_generators();
        if delta.len() != m || out.len() != m {
            return Err(SchedError::Mismatch(format!(
                "angle vector has length {}, network has {m} generators",
                delta.len()
            )));
        }
        self.power_unchecked(config, delta, out);
        Ok(())
    }

    fn power_unchecked(&self, config: usize, delta: &[S], out: &mut [S]) {
        let m = self.num_generators();
        let (g, b) = (&self.conductance[config], &self.susceptance[config]);
        for i in 0..m {
            let ei = self.machines[i].voltage;
            let mut p = ei * ei * g[i * m + i];
            for j in (0..m).filter(|&j| j != i) {
                let dij = delta[i] - delta[j];
                p += ei
                    * self.machines[j].voltage
                    * (g[i * m + j] * dij.cos() + b[i * m + j] * dij.sin());
            }
            out[i] = p;
        }
    }

    /// `∂P_e,i/∂δ_j` as a row-major `m × m` matrix.
    pub fn power_jacobian(&self, config: usize, delta: &[S], out: &mut [S]) {
        let m = self.num_generators();
        let (g, b) = (&self.conductance[config], &self.susceptance[config]);
        out.fill(S::zero());
        for i in 0..m {
            let ei = self.machines[i].voltage;
            let mut diag = S::zero();
            for j in (0..m).filter(|&j| j != i) {
                let dij = delta[i] - delta[j];
                let v = ei
                    * self.machines[j].voltage
                    * (g[i * m + j] * dij.sin() - b[i * m + j] * dij.cos());
                out[i * m + j] = v;
                diag -= v;
            }
            out[i * m + i] = diag;
        }
    }

    /// Rotor angles at `δ_ss + disturbance` with every machine at
    /// synchronous speed.
    pub fn initial_state(&self, disturbance: &[S]) -> Result<Vec<S>> {
        let m = self.num_generators();
        if disturbance.len() != m {
            return Err(SchedError::Mismatch(
                "disturbance has the wrong length".into(),
            ));
        }
        let mut x: Vec<S> = self
            .equilibrium
            .iter()
            .zip(disturbance)
            .map(|(a, b)| *a + *b)
            .collect();
        x.extend(std::iter::repeat_n(self.omega_s, m));
        Ok(x)
    }

    /// Kinetic plus potential energy of a lossless network,
    /// `Σ (H_i/ω_s)(δ̇_i − ω_s)² − Σ P_m,i δ_i − Σ_{i<j} |E_i||E_j| B_ij cos δ_ij`.
    /// Conserved under a single configuration when `G ≡ 0` and `Σ P_m = 0`.
    pub fn energy(&self, config: usize, x: &[S]) -> S {
        let m = self.num_generators();
        let b = &self.susceptance[config];
        let mut e = S::zero();
        for i in 0..m {
            let w = x[m + i] - self.omega_s;
            e += self.machines[i].inertia / self.omega_s * w * w;
            e -= self.machines[i].mech_power * x[i];
            for j in i + 1..m {
                e -= self.machines[i].voltage
                    * self.machines[j].voltage
                    * b[i * m + j]
                    * (x[i] - x[j]).cos();
            }
        }
        e
    }

    /// `max δ − min δ` of a state vector.
    pub fn phase_spread(&self, x: &[S]) -> S {
        let m = self.num_generators();
        let hi = x[..m].iter().copied().fold(S::neg_infinity(), S::max);
        let lo = x[..m].iter().copied().fold(S::infinity(), S::min);
        hi - lo
    }
}

impl<S: Real> SwitchedSystem<S> for PowerNetwork<S> {
    fn num_modes(&self) -> usize {
        2
    }

    fn num_states(&self) -> usize {
        2 * self.num_generators()
    }

    fn mode_field(&self, mode: usize, x: &[S], out: &mut [S]) {
        let m = self.num_generators();
        let (delta, rate) = x.split_at(m);
        let (dd, acc) = out.split_at_mut(m);
        dd.copy_from_slice(rate);
        self.power_unchecked(mode, delta, acc);
        for i in 0..m {
            let g = &self.machines[i];
            acc[i] = self.omega_s / (S::lit(2.0) * g.inertia) * (g.mech_power - acc[i]);
        }
    }

    fn mode_jacobian(&self, mode: usize, x: &[S], out: &mut [S]) {
        let m = self.num_generators();
        let n = 2 * m;
        out.fill(S::zero());
        let mut dp = vec![S::zero(); m * m];
        self.power_jacobian(mode, &x[..m], &mut dp);
        for i in 0..m {
            out[i * n + m + i] = S::one();
            let k = -self.omega_s / (S::lit(2.0) * self.machines[i].inertia);
            for j in 0..m {
                out[(m + i) * n + j] = k * dp[i * m + j];
            }
        }
    }

    /// `½‖δ − δ̄‖² + (1/40)‖δ̇ − 2π f_s‖²` with `δ̄` the mean angle.
    fn running_cost(&self, x: &[S]) -> S {
        let m = self.num_generators();
        let mean = x[..m].iter().copied().sum::<S>() / S::from_count(m);
        let mut c = S::zero();
        for i in 0..m {
            let a = x[i] - mean;
            let w = x[m + i] - self.omega_s;
            c += S::lit(0.5) * a * a + S::lit(1.0 / 40.0) * w * w;
        }
        c
    }

    fn running_cost_gradient(&self, x: &[S], out: &mut [S]) {
        let m = self.num_generators();
        let mean = x[..m].iter().copied().sum::<S>() / S::from_count(m);
        for i in 0..m {
            out[i] = x[i] - mean;
            out[m + i] = S::lit(1.0 / 20.0) * (x[m + i] - self.omega_s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate_state, jacobian_fd_error, IntegratorOptions};
    use crate::signals::ModeSchedule;
    use approx::assert_abs_diff_eq;

    fn machine(h: f64, pm: f64, e: f64) -> Machine<f64> {
        Machine {
            inertia: h,
            mech_power: pm,
            voltage: e,
        }
    }

    fn two_machine(b: f64) -> PowerNetwork<f64> {
        let y = vec![(0.0, -b), (0.0, b), (0.0, b), (0.0, -b)];
        let y2 = y.iter().map(|&(g, s)| (g, 0.5 * s)).collect();
        PowerNetwork::new(
            vec![machine(4.0, 0.3, 1.0), machine(6.0, -0.3, 1.0)],
            y,
            y2,
            60.0,
        )
        .unwrap()
    }

    #[test]
    fn isolated_generator_has_no_output() {
        let net = PowerNetwork::new(
            vec![machine(3.0, 0.0, 1.1)],
            vec![(0.0, 0.0)],
            vec![(0.0, 0.0)],
            60.0,
        )
        .unwrap();
        let mut p = [1.0];
        net.electrical_power(0, &[0.4], &mut p).unwrap();
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn lossless_pair_closed_form() {
        let net = two_machine(2.0);
        let mut p = [0.0; 2];
        net.electrical_power(0, &[0.0, 0.0], &mut p).unwrap();
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-15);
        net.electrical_power(0, &[std::f64::consts::PI / 6.0, 0.0], &mut p)
            .unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p[1], -1.0, epsilon = 1e-14);
        assert!(net.electrical_power(0, &[0.0], &mut p).is_err());
    }

    #[test]
    fn jacobian_matches_differences() {
        let y = vec![
            (0.3, -4.0),
            (0.1, 1.5),
            (0.05, 2.0),
            (0.1, 1.5),
            (0.2, -3.0),
            (0.0, 1.0),
            (0.05, 2.0),
            (0.0, 1.0),
            (0.1, -2.5),
        ];
        let net = PowerNetwork::new(
            vec![
                machine(5.0, 0.8, 1.05),
                machine(3.0, -0.2, 1.0),
                machine(4.0, -0.4, 0.98),
            ],
            y.clone(),
            y.iter().map(|&(g, b)| (g, 0.7 * b)).collect(),
            60.0,
        )
        .unwrap();
        let x = [0.2, -0.1, 0.4, 377.0, 376.5, 377.2];
        for mode in 0..2 {
            assert!(jacobian_fd_error(&net, mode, &x, 1e-6) < 1e-5);
        }
        let mut g = [0.0; 6];
        net.running_cost_gradient(&x, &mut g);
        for i in 0..6 {
            let mut p = x;
            let mut q = x;
            p[i] += 1e-6;
            q[i] -= 1e-6;
            assert_abs_diff_eq!(
                (net.running_cost(&p) - net.running_cost(&q)) / 2e-6,
                g[i],
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn energy_is_conserved_without_losses() {
        let net = two_machine(1.5);
        let x0 = [0.5, -0.2, net.omega_s() + 0.3, net.omega_s() - 0.1];
        let sched = ModeSchedule::constant(0, 5.0, 2).unwrap();
        let x = integrate_state(&net, &sched, &x0, &IntegratorOptions::default()).unwrap();
        let e0 = net.energy(0, &x0);
        for t in [1.0, 2.5, 5.0] {
            assert_abs_diff_eq!(net.energy(0, &x.value(t)), e0, epsilon = 1e-6);
        }
    }

    #[test]
    fn equilibrium_has_zero_acceleration() {
        let mut net = two_machine(2.0);
        // P_e,1 = 2 sin(δ₁ − δ₂) = 0.3
        let d = (0.15f64).asin();
        net.set_equilibrium(vec![d, 0.0]).unwrap();
        let x0 = net.initial_state(&[0.0, 0.0]).unwrap();
        let mut f = [0.0; 4];
        net.mode_field(0, &x0, &mut f);
        assert_abs_diff_eq!(f[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f[3], 0.0, epsilon = 1e-12);
        assert_eq!(f[0], net.omega_s());
    }

    #[test]
    fn rejects_asymmetric_admittance() {
        let y = vec![(0.0, -1.0), (0.0, 1.0), (0.0, 0.5), (0.0, -1.0)];
        assert!(PowerNetwork::new(
            vec![machine(1.0, 0.0, 1.0), machine(1.0, 0.0, 1.0)],
            y.clone(),
            y,
            60.0
        )
        .is_err());
    }
}
