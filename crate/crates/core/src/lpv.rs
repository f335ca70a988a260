//! Discrete LPV embedding along a nominal trajectory.
//!
//! The tracking error `x_e = x - x*` evolves as
//! `x_e(k+1) = A(rho(k)) x_e(k) + B(rho(k)) u_e(k)` with
//! `A = I + ts df/dx` and `B = ts df/du` evaluated at the scheduled nominal
//! point `rho(k) = (theta*, gamma*, v*, gamma_rate*)`.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::model::{jacobian_control, jacobian_state, ControlInput, Frame, VehicleParams, VehicleState};
use crate::trajectory::TrajectoryStep;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulingPoint {
    pub theta_nom: f64,
    pub gamma_nom: f64,
    pub v_nom: f64,
    pub gamma_rate_nom: f64,
    pub frame: Frame,
}

impl SchedulingPoint {
    pub fn from_state_input(state: &VehicleState, input: &ControlInput, frame: Frame) -> Self {
        Self {
            theta_nom: state.theta,
            gamma_nom: state.gamma,
            v_nom: input.v,
            gamma_rate_nom: input.gamma_rate,
            frame,
        }
    }

    /// Scheduling point of a nominal step in its own tracking frame.
    pub fn from_step(step: &TrajectoryStep) -> Self {
        Self::from_state_input(&step.state, &step.input, step.frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpvMatrices {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
}

impl LpvMatrices {
    pub fn predict(&self, x_e: &Vector4<f64>, u_e: &Vector2<f64>) -> Vector4<f64> {
        self.a * x_e + self.b * u_e
    }
}

/// Discrete LPV matrices at one scheduling point.
pub fn embed_at(rho: &SchedulingPoint, params: &VehicleParams, ts: f64) -> LpvMatrices {
    debug_assert!(ts > 0.0);
    // Positions do not enter the Jacobians.
    let state = VehicleState::new(0.0, 0.0, rho.theta_nom, rho.gamma_nom, rho.frame);
    let input = ControlInput::new(rho.v_nom, rho.gamma_rate_nom);
    LpvMatrices {
        a: Matrix4::identity() + jacobian_state(&state, &input, params) * ts,
        b: jacobian_control(&state, &input, params) * ts,
    }
}

/// Matrices for `n` steps starting at `start`. The caller passes a single
/// same-frame segment; indices past its end hold the final step.
pub fn embed_horizon(
    nominal: &[TrajectoryStep],
    start: usize,
    n: usize,
    params: &VehicleParams,
    ts: f64,
) -> Result<Vec<LpvMatrices>> {
    if nominal.is_empty() {
        return Err(Error::NoNominalTrajectory);
    }
    let last = nominal.len() - 1;
    let frame = nominal[start.min(last)].frame;
    Ok((0..n)
        .map(|i| {
            let step = &nominal[(start + i).min(last)];
            let rho = SchedulingPoint::from_state_input(&step.state, &step.input, frame);
            embed_at(&rho, params, ts)
        })
        .collect())
}
