//! Closed-loop simulation and controller benchmarks.
//!
//! The plant is the rear-axle kinematic model integrated with several Euler
//! substeps per control period. Disturbances are a first-order lag on the
//! applied speed, Gaussian measurement noise and an offset on the initial
//! state. The controller follows the nominal trajectory by time: at control
//! step `k` of a leg it tracks nominal index `k`.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::Vector4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controllers::{
    nearest_index, Controller, ControllerKind, ControllerStatus, DeviationBounds, TrackingWeights,
};
use crate::error::{Error, Result};
use crate::model::{step_euler, to_frame, ControlInput, Frame, VehicleParams, VehicleState};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// Time constant of the lag between commanded and applied speed [s];
    /// zero disables it.
    pub speed_lag_tau: f64,
    /// Measurement noise standard deviations for `(x, y, theta, gamma)`.
    pub meas_noise_std: [f64; 4],
    /// Added to the first leg's start state.
    pub initial_offset: [f64; 4],
    pub rng_seed: u64,
}

impl Default for DisturbanceConfig {
    /// The reference disturbance used for controller comparisons.
    fn default() -> Self {
        Self {
            speed_lag_tau: 0.4,
            meas_noise_std: [0.01, 0.01, 0.005, 0.005],
            initial_offset: [0.0, 0.5, 0.0, 0.0],
            rng_seed: 42,
        }
    }
}

impl DisturbanceConfig {
    /// No lag, no noise, no offset.
    pub fn none() -> Self {
        Self {
            speed_lag_tau: 0.0,
            meas_noise_std: [0.0; 4],
            initial_offset: [0.0; 4],
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed_lag_tau >= 0.0 && self.speed_lag_tau.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "speed_lag_tau must be >= 0, got {}",
                self.speed_lag_tau
            )));
        }
        if self.meas_noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidParams("meas_noise_std must be >= 0".into()));
        }
        if self.initial_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("initial_offset must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    /// Euler substeps of the plant per control period.
    pub substeps: usize,
    /// Consecutive controller failures tolerated before aborting.
    pub max_consecutive_failures: usize,
    pub reference: ReferenceMode,
}

/// How the tracked nominal index advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// Index `k` at control step `k`.
    Time,
    /// Nearest nominal sample to the measured position, never moving back.
    /// A leg ends when its final sample is the nearest one.
    Nearest,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            substeps: 10,
            max_consecutive_failures: 10,
            reference: ReferenceMode::Time,
        }
    }
}

/// Rear-axle plant with a lagged speed actuator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plant {
    pub state: VehicleState,
    /// Speed currently applied to the wheels.
    pub speed: f64,
}

impl Plant {
    pub fn new(state: VehicleState, params: &VehicleParams) -> Self {
        Self {
            state: to_frame(&state, Frame::Rear, params),
            speed: 0.0,
        }
    }

    /// Hold `cmd` for one period of `ts`. Returns the input applied at the
    /// end of the period.
    pub fn advance(
        &mut self,
        cmd: &ControlInput,
        tau: f64,
        ts: f64,
        substeps: usize,
        params: &VehicleParams,
    ) -> ControlInput {
        let substeps = substeps.max(1);
        let dt = ts / substeps as f64;
        let blend = if tau > 0.0 { 1.0 - (-dt / tau).exp() } else { 1.0 };
        for _ in 0..substeps {
            self.speed += blend * (cmd.v - self.speed);
            let applied = ControlInput::new(self.speed, cmd.gamma_rate);
            self.state = step_euler(&self.state, &applied, params, dt);
        }
        ControlInput::new(self.speed, cmd.gamma_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub leg: usize,
    /// Nominal index the controller tracked.
    pub index: usize,
    pub frame: Frame,
    /// Rear-axle measurement given to the controller.
    pub measured: VehicleState,
    pub commanded: ControlInput,
    pub applied: ControlInput,
    pub solve_time: f64,
    pub status: ControllerStatus,
    /// Distance from the true tracked point to the nearest nominal sample.
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub mean_abs_error: f64,
    pub max_error: f64,
    /// Position distance between the final plant pose and the final
    /// nominal pose, rear axle.
    pub terminal_error: f64,
    pub infeasible_count: usize,
    pub relaxed_count: usize,
    pub median_solve_time: f64,
    pub mean_solve_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub kind: ControllerKind,
    pub records: Vec<StepRecord>,
    pub final_state: VehicleState,
    pub final_nominal: VehicleState,
    pub summary: RunSummary,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

impl RunLog {
    /// Turn an aborted run into an error.
    pub fn into_result(self) -> Result<RunLog> {
        match &self.aborted {
            Some(reason) => Err(Error::SimulationAborted {
                steps: self.records.len(),
                reason: reason.clone(),
            }),
            None => Ok(self),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl RunSummary {
    pub fn from_records(records: &[StepRecord], final_state: &VehicleState, final_nominal: &VehicleState) -> Self {
        let n = records.len();
        let errors = records.iter().map(|r| r.error);
        let times: Vec<f64> = records.iter().map(|r| r.solve_time).collect();
        let count = |s: ControllerStatus| records.iter().filter(|r| r.status == s).count();
        Self {
            mean_abs_error: if n == 0 {
                f64::NAN
            } else {
                errors.clone().sum::<f64>() / n as f64
            },
            max_error: errors.fold(0.0, f64::max),
            terminal_error: (final_state.position() - final_nominal.position()).norm(),
            infeasible_count: count(ControllerStatus::NominalFallback),
            relaxed_count: count(ControllerStatus::Relaxed),
            median_solve_time: median(&times),
            mean_solve_time: if n == 0 {
                f64::NAN
            } else {
                times.iter().sum::<f64>() / n as f64
            },
        }
    }
}

/// Run `kind` over the legs in order, starting from the first leg's
/// initial state plus the configured offset.
pub fn simulate(
    legs: &[Trajectory],
    kind: ControllerKind,
    weights: &TrackingWeights,
    bounds: &DeviationBounds,
    disturbance: &DisturbanceConfig,
    params: &VehicleParams,
    options: &SimOptions,
) -> Result<RunLog> {
    disturbance.validate()?;
    let first = legs.iter().find_map(|l| l.first()).ok_or(Error::NoNominalTrajectory)?;
    let mut controller = Controller::new(kind, weights.clone(), *bounds, *params)?;

    let start = VehicleState::from_vector(
        &(first.state.to_vector() + Vector4::from(disturbance.initial_offset)),
        Frame::Rear,
    );
    let mut plant = Plant::new(start, params);
    let mut rng = ChaCha8Rng::seed_from_u64(disturbance.rng_seed);
    let std = Vector4::from(disturbance.meas_noise_std);

    let mut records = Vec::new();
    let mut aborted = None;
    let mut failures = 0;
    let mut t = 0.0;
    let mut final_nominal = first.state;

    'legs: for (leg, traj) in legs.iter().enumerate() {
        if traj.is_empty() {
            continue;
        }
        controller.reset();
        final_nominal = traj.last().map(|s| s.state).unwrap_or(final_nominal);
        let last = traj.len() - 1;
        let mut index = 0;
        let mut hint = 0;
        for step in 0.. {
            if step >= 3 * last {
                warn!("sim: {kind} leg {leg} did not reach its end in {step} steps");
                break;
            }
            let ts = traj.ts;
            let noise = Vector4::from_fn(|i, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std[i]
            });
            let measured = VehicleState::from_vector(&(plant.state.to_vector() + noise), Frame::Rear);
            index = match options.reference {
                ReferenceMode::Time => step,
                ReferenceMode::Nearest => {
                    let frame = traj.steps[index].frame;
                    let p = to_frame(&measured, frame, params).position();
                    nearest_index(traj, &p, frame, index, params)
                }
            };
            if index >= last {
                break;
            }

            let frame = traj.steps[index].frame;
            let true_point = to_frame(&plant.state, frame, params).position();
            hint = nearest_index(traj, &true_point, frame, hint, params);
            let error = (traj.steps[hint].state_in(frame, params).position() - true_point).norm();

            let clock = Instant::now();
            let (commanded, solve_time, status) = match controller.step(&measured, traj, index) {
                Ok(out) => {
                    failures = 0;
                    (out.input, out.solve_time, out.status)
                }
                Err(e) => {
                    failures += 1;
                    warn!("sim: {kind} leg {leg} step {index}: {e}; applying nominal input");
                    (
                        traj.steps[index].input,
                        clock.elapsed().as_secs_f64(),
                        ControllerStatus::NominalFallback,
                    )
                }
            };
            let applied = plant.advance(&commanded, disturbance.speed_lag_tau, ts, options.substeps, params);
            records.push(StepRecord {
                t,
                leg,
                index,
                frame,
                measured,
                commanded,
                applied,
                solve_time,
                status,
                error,
            });
            t += ts;
            if failures > options.max_consecutive_failures {
                aborted = Some(format!("{failures} consecutive controller failures in leg {leg}"));
                break 'legs;
            }
        }
    }

    let summary = RunSummary::from_records(&records, &plant.state, &final_nominal);
    debug!(
        "sim: {kind} mean error {:.4} m, max {:.4} m, {} fallbacks",
        summary.mean_abs_error, summary.max_error, summary.infeasible_count
    );
    Ok(RunLog {
        kind,
        records,
        final_state: plant.state,
        final_nominal,
        summary,
        aborted,
    })
}

/// One row of a controller comparison.
#[derive(Debug)]
pub struct CompareRow {
    pub kind: ControllerKind,
    pub result: Result<RunLog>,
}

/// Run every controller on the same legs and disturbance, concurrently.
pub fn compare_controllers(
    legs: &[Trajectory],
    weights: &TrackingWeights,
    bounds: &DeviationBounds,
    disturbance: &DisturbanceConfig,
    params: &VehicleParams,
    options: &SimOptions,
) -> Vec<CompareRow> {
    std::thread::scope(|s| {
        let handles: Vec<_> = ControllerKind::ALL
            .iter()
            .map(|&kind| {
                s.spawn(move || CompareRow {
                    kind,
                    result: simulate(legs, kind, weights, bounds, disturbance, params, options)
                        .and_then(RunLog::into_result),
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    })
}

/// A logged state to replay in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchState {
    pub leg: usize,
    pub index: usize,
    pub measured: VehicleState,
}

/// The first `count` measured states of a run.
pub fn bench_states(log: &RunLog, count: usize) -> Vec<BenchState> {
    log.records
        .iter()
        .take(count)
        .map(|r| BenchState {
            leg: r.leg,
            index: r.index,
            measured: r.measured,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub kind: ControllerKind,
    pub horizon: usize,
    /// Per-step solve time statistics [s].
    pub mean: f64,
    pub variance: f64,
    pub median: f64,
    pub samples: usize,
    pub failures: usize,
}

/// Per-step solve times for every controller and horizon. Each repetition
/// replays `states` in order with a fresh controller, so warm starts carry
/// over between consecutive states as in closed loop.
pub fn bench_horizon_sweep(
    legs: &[Trajectory],
    states: &[BenchState],
    horizons: &[usize],
    repetitions: usize,
    weights: &TrackingWeights,
    bounds: &DeviationBounds,
    params: &VehicleParams,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &horizon in horizons {
        let w = TrackingWeights {
            n: horizon,
            ..weights.clone()
        };
        // Repetitions are interleaved across controllers so that machine
        // noise spreads evenly over them.
        let mut times = vec![Vec::with_capacity(repetitions * states.len()); ControllerKind::ALL.len()];
        let mut failures = vec![0; ControllerKind::ALL.len()];
        for _ in 0..repetitions {
            for (k, kind) in ControllerKind::ALL.into_iter().enumerate() {
                let mut c = Controller::new(kind, w.clone(), *bounds, *params)?;
                let mut leg = usize::MAX;
                for s in states {
                    let traj = legs.get(s.leg).ok_or(Error::NoNominalTrajectory)?;
                    if s.leg != leg {
                        c.reset();
                        leg = s.leg;
                    }
                    match c.step(&s.measured, traj, s.index) {
                        Ok(out) => times[k].push(out.solve_time),
                        Err(_) => failures[k] += 1,
                    }
                }
            }
        }
        for (k, kind) in ControllerKind::ALL.into_iter().enumerate() {
            let times = &times[k];
            let n = times.len().max(1) as f64;
            let mean = times.iter().sum::<f64>() / n;
            let variance = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
            rows.push(BenchRow {
                kind,
                horizon,
                mean,
                variance,
                median: median(times),
                samples: times.len(),
                failures: failures[k],
            });
        }
    }
    Ok(rows)
}
