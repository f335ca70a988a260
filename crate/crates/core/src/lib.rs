//! Planning and tracking for an articulated wheel loader.

pub mod controllers;
pub mod error;
pub mod io;
pub mod lpv;
pub mod model;
pub mod planner;
pub mod qp;
pub mod sim;
pub mod sqp;
pub mod trajectory;

pub use error::{Error, Result};
pub use model::{ControlInput, Frame, VehicleParams, VehicleState};
pub use trajectory::{Trajectory, TrajectoryStep};
