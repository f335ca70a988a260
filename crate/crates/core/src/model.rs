//! Kinematics of the articulated vehicle.
//!
//! The state is `(x, y, theta, gamma)` where `(x, y)` is either the rear or the
//! front axle center (see [`Frame`]), `theta` is the rear body heading and
//! `gamma` the articulation angle. The input is `(v, gamma_rate)`. A single
//! speed `v` drives every equation of the active frame.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use crate::error::{Error, Result};

/// Which axle center the `(x, y)` components of a state refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Rear,
    Front,
}

impl Frame {
    pub fn as_str(self) -> &'static str {
        match self {
            Frame::Rear => "rear",
            Frame::Front => "front",
        }
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rear" => Ok(Frame::Rear),
            "front" => Ok(Frame::Front),
            other => Err(Error::Parse(format!("unknown frame tag `{other}`"))),
        }
    }
}

/// Geometry and actuation limits of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Articulation joint to front axle [m].
    pub l_front: f64,
    /// Articulation joint to rear axle [m].
    pub l_rear: f64,
    /// Articulation angle limit [rad].
    pub gamma_max: f64,
    /// Speed limit [m/s], symmetric for forward and reverse.
    pub v_max: f64,
    /// Articulation rate limit [rad/s].
    pub gamma_rate_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            l_front: 1.6,
            l_rear: 1.7,
            gamma_max: 0.40,
            v_max: 2.0,
            gamma_rate_max: 0.35,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.l_front,
            self.l_rear,
            self.gamma_max,
            self.v_max,
            self.gamma_rate_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("vehicle parameters must be finite".into()));
        }
        if self.l_front <= 0.0 {
            return Err(Error::InvalidParams("l_front must be > 0".into()));
        }
        if self.l_rear <= 0.0 {
            return Err(Error::InvalidParams("l_rear must be > 0".into()));
        }
        if !(self.gamma_max > 0.0 && self.gamma_max < FRAC_PI_2) {
            return Err(Error::InvalidParams(format!(
                "gamma_max must be in (0, pi/2), got {}",
                self.gamma_max
            )));
        }
        if self.v_max <= 0.0 {
            return Err(Error::InvalidParams("v_max must be > 0".into()));
        }
        if self.gamma_rate_max <= 0.0 {
            return Err(Error::InvalidParams("gamma_rate_max must be > 0".into()));
        }
        Ok(())
    }

    /// `L_f cos(gamma) + L_r`, the common denominator of the heading rate.
    #[inline]
    pub fn denominator(&self, gamma: f64) -> f64 {
        self.l_front * gamma.cos() + self.l_rear
    }
}

/// Pose of the vehicle. Angles are kept unwrapped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub gamma: f64,
    pub frame: Frame,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64, gamma: f64, frame: Frame) -> Self {
        Self {
            x,
            y,
            theta,
            gamma,
            frame,
        }
    }

    pub fn rear(x: f64, y: f64, theta: f64, gamma: f64) -> Self {
        Self::new(x, y, theta, gamma, Frame::Rear)
    }

    pub fn front(x: f64, y: f64, theta: f64, gamma: f64) -> Self {
        Self::new(x, y, theta, gamma, Frame::Front)
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.theta, self.gamma)
    }

    pub fn from_vector(v: &Vector4<f64>, frame: Frame) -> Self {
        Self::new(v[0], v[1], v[2], v[3], frame)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Heading wrapped to (-pi, pi], for display only.
    pub fn wrapped_theta(&self) -> f64 {
        wrap_angle(self.theta)
    }
}

/// Speed and articulation rate command.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    /// Signed speed [m/s]; negative is reversing.
    pub v: f64,
    /// Articulation rate [rad/s].
    pub gamma_rate: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput {
        v: 0.0,
        gamma_rate: 0.0,
    };

    pub fn new(v: f64, gamma_rate: f64) -> Self {
        Self { v, gamma_rate }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.v, self.gamma_rate)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    /// Clamp to the symmetric input boxes of `params`.
    pub fn clamped(&self, params: &VehicleParams) -> Self {
        Self::new(
            self.v.clamp(-params.v_max, params.v_max),
            self.gamma_rate.clamp(-params.gamma_rate_max, params.gamma_rate_max),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub dgamma: f64,
}

impl StateDerivative {
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.dx, self.dy, self.dtheta, self.dgamma)
    }
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Continuous-time kinematics of the active frame.
pub fn dynamics_continuous(state: &VehicleState, input: &ControlInput, params: &VehicleParams) -> StateDerivative {
    let ControlInput { v, gamma_rate } = *input;
    let (sg, cg) = state.gamma.sin_cos();
    let heading = match state.frame {
        Frame::Rear => state.theta,
        Frame::Front => state.theta + state.gamma,
    };
    let (sh, ch) = heading.sin_cos();
    let dtheta = (v * sg - params.l_rear * gamma_rate * cg) / params.denominator(state.gamma);
    StateDerivative {
        dx: v * ch,
        dy: v * sh,
        dtheta,
        dgamma: gamma_rate,
    }
}

/// One forward-Euler step of length `ts`.
pub fn step_euler(state: &VehicleState, input: &ControlInput, params: &VehicleParams, ts: f64) -> VehicleState {
    debug_assert!(ts > 0.0);
    let d = dynamics_continuous(state, input, params);
    VehicleState {
        x: state.x + ts * d.dx,
        y: state.y + ts * d.dy,
        theta: state.theta + ts * d.dtheta,
        gamma: state.gamma + ts * d.dgamma,
        frame: state.frame,
    }
}

/// Partial derivative of the heading rate with respect to `gamma`.
fn heading_rate_dgamma(gamma: f64, input: &ControlInput, params: &VehicleParams) -> f64 {
    let ControlInput { v, gamma_rate } = *input;
    let (sg, cg) = gamma.sin_cos();
    let den = params.denominator(gamma);
    (v * cg + params.l_rear * gamma_rate * sg) / den
        + params.l_front * sg * (v * sg - params.l_rear * gamma_rate * cg) / (den * den)
}

/// Analytic `df/dx` of [`dynamics_continuous`].
pub fn jacobian_state(state: &VehicleState, input: &ControlInput, params: &VehicleParams) -> Matrix4<f64> {
    let v = input.v;
    let mut jac = Matrix4::zeros();
    match state.frame {
        Frame::Rear => {
            let (s, c) = state.theta.sin_cos();
            jac[(0, 2)] = -v * s;
            jac[(1, 2)] = v * c;
        }
        Frame::Front => {
            let (s, c) = (state.theta + state.gamma).sin_cos();
            jac[(0, 2)] = -v * s;
            jac[(0, 3)] = -v * s;
            jac[(1, 2)] = v * c;
            jac[(1, 3)] = v * c;
        }
    }
    jac[(2, 3)] = heading_rate_dgamma(state.gamma, input, params);
    jac
}

/// Analytic `df/du` of [`dynamics_continuous`].
pub fn jacobian_control(state: &VehicleState, _input: &ControlInput, params: &VehicleParams) -> Matrix4x2<f64> {
    let heading = match state.frame {
        Frame::Rear => state.theta,
        Frame::Front => state.theta + state.gamma,
    };
    let (sh, ch) = heading.sin_cos();
    let (sg, cg) = state.gamma.sin_cos();
    let den = params.denominator(state.gamma);
    Matrix4x2::new(ch, 0.0, sh, 0.0, sg / den, -params.l_rear * cg / den, 0.0, 1.0)
}

/// Express a rear-axle state in front-axle coordinates.
pub fn rear_to_front(state: &VehicleState, params: &VehicleParams) -> VehicleState {
    debug_assert_eq!(state.frame, Frame::Rear);
    VehicleState {
        x: state.x + params.l_rear * state.theta.cos() + params.l_front * (state.theta + state.gamma).cos(),
        y: state.y + params.l_rear * state.theta.sin() + params.l_front * (state.theta + state.gamma).sin(),
        theta: state.theta,
        gamma: state.gamma,
        frame: Frame::Front,
    }
}

/// Inverse of [`rear_to_front`].
pub fn front_to_rear(state: &VehicleState, params: &VehicleParams) -> VehicleState {
    debug_assert_eq!(state.frame, Frame::Front);
    VehicleState {
        x: state.x - params.l_rear * state.theta.cos() - params.l_front * (state.theta + state.gamma).cos(),
        y: state.y - params.l_rear * state.theta.sin() - params.l_front * (state.theta + state.gamma).sin(),
        theta: state.theta,
        gamma: state.gamma,
        frame: Frame::Rear,
    }
}

/// Convert `state` into `frame`, a no-op when it is already there.
pub fn to_frame(state: &VehicleState, frame: Frame, params: &VehicleParams) -> VehicleState {
    match (state.frame, frame) {
        (Frame::Rear, Frame::Front) => rear_to_front(state, params),
        (Frame::Front, Frame::Rear) => front_to_rear(state, params),
        _ => *state,
    }
}

/// Representation used for tracking at speed `v`: forward motion tracks the
/// front axle, reverse tracks the rear axle. Near-zero speed keeps `previous`.
pub fn select_frame(v: f64, previous: Frame) -> Frame {
    if v > 1e-6 {
        Frame::Front
    } else if v < -1e-6 {
        Frame::Rear
    } else {
        previous
    }
}

/// Position of the articulation joint.
pub fn joint_position(rear: &VehicleState, params: &VehicleParams) -> Vector2<f64> {
    let r = to_frame(rear, Frame::Rear, params);
    Vector2::new(r.x + params.l_rear * r.theta.cos(), r.y + params.l_rear * r.theta.sin())
}
