//! Built-in switched systems: a planar vehicle and multimachine power
//! networks.

pub mod network;
pub mod power;
pub mod vehicle;

pub use network::{build_network, load_network, make_disturbance, NetworkFile};
pub use power::{Machine, PowerNetwork};
pub use vehicle::{VehicleModel, VEHICLE_HORIZON, VEHICLE_INITIAL_MODE, VEHICLE_MODES};
