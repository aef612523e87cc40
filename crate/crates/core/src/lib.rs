//! Mode scheduling for switched dynamical systems.
//!
//! Given a finite family of vector fields and a running cost, the library
//! optimises the sequence of active modes and their switching times. Each
//! iteration integrates the state forward and the adjoint backward, builds
//! the mode insertion gradient, projects a gradient step back onto feasible
//! schedules and picks the step size with an Armijo-type backtracking rule.
//!
//! The numerics are generic over the scalar type ([`Real`], implemented for
//! `f32` and `f64`); the `*F64` aliases name the common double-precision
//! instantiations.
//!
//! ```
//! use modesched::models::{VehicleModel, VEHICLE_HORIZON, VEHICLE_INITIAL_MODE};
//! use modesched::scheduler::{optimize, OptimizerConfig};
//! use modesched::ModeSchedule;
//!
//! let sys = VehicleModel::<f64>::new();
//! let u0 = ModeSchedule::constant(VEHICLE_INITIAL_MODE, VEHICLE_HORIZON, 4).unwrap();
//! let cfg = OptimizerConfig { max_iter: 2, ..Default::default() };
//! let run = optimize(&sys, &VehicleModel::initial_state(), &u0, &cfg).unwrap();
//! assert!(run.cost < run.initial_cost);
//! ```

#![allow(
    clippy::excessive_precision,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop
)]

pub mod error;
pub mod gradient;
pub mod integrate;
pub mod linesearch;
pub mod models;
pub mod projection;
pub mod scalar;
pub mod scheduler;
pub mod signals;

pub use error::{Result, SchedError};
pub use gradient::{insertion_gradient, optimality, scan_field, GradientSource, OptimalityResult};
pub use integrate::{
    evaluate_cost, integrate_adjoint, integrate_state, IntegratorOptions, SampledCurve,
    SwitchedSystem,
};
pub use linesearch::{DescentStepReport, MonitorFlags};
pub use models::{PowerNetwork, VehicleModel};
pub use scalar::Real;
pub use scheduler::{
    optimize, receding_horizon, HorizonConfig, HorizonResult, OptimizerConfig, RunResult,
    Termination, ThetaStop,
};
pub use signals::{
    check_non_chattering, control_to_schedule, schedule_to_control, ModeSchedule, SwitchingControl,
};

pub type ModeScheduleF64 = ModeSchedule<f64>;
pub type SwitchingControlF64 = SwitchingControl<f64>;
pub type SampledCurveF64 = SampledCurve<f64>;
pub type IntegratorOptionsF64 = IntegratorOptions<f64>;
pub type VehicleModelF64 = VehicleModel<f64>;
pub type PowerNetworkF64 = PowerNetwork<f64>;
pub type RunResultF64 = RunResult<f64>;
pub type HorizonResultF64 = HorizonResult<f64>;
