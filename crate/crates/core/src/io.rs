//! Configuration files and delimited-text outputs.
//!
//! The config is TOML with the sections `[vehicle]`, `[scenario]`,
//! `[planner]`, `[controller]` and `[disturbance]`. Absent keys take their
//! defaults (each one is reported); unknown keys are errors.
//!
//! Trajectories, run logs and tables are CSV. Numbers are written with nine
//! significant digits. Run logs end with a `#` footer: `# summary` lines are
//! deterministic, `# timing` lines are wall-clock measurements.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use log::info;
use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::controllers::{ControllerKind, DeviationBounds, TrackingWeights};
use crate::error::{Error, Result};
use crate::model::{rear_to_front, ControlInput, Frame, VehicleParams, VehicleState};
use crate::planner::{PlannerConfig, RectObstacle, Scenario};
use crate::sim::{BenchRow, CompareRow, DisturbanceConfig, ReferenceMode, RunLog, SimOptions};
use crate::trajectory::{Trajectory, TrajectoryStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// `(x, y, theta, gamma)` of the rear axle at the pile.
    pub loading_pose: [f64; 4],
    /// Rear-axle pose at the truck.
    pub unloading_pose: [f64; 4],
    pub obstacles: Vec<RectObstacle>,
    pub d_safe: f64,
    pub ts: f64,
    /// Planning horizon per leg, in steps.
    pub n_plan: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let s = Scenario::default();
        let pose = |p: &VehicleState| [p.x, p.y, p.theta, p.gamma];
        Self {
            loading_pose: pose(&s.loading_pose),
            unloading_pose: pose(&s.unloading_pose),
            obstacles: s.obstacles,
            d_safe: s.d_safe,
            ts: s.ts,
            n_plan: s.n_plan,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub horizon: usize,
    /// Diagonal of `Q` for `(x, y, theta, gamma)` errors.
    pub q_diag: [f64; 4],
    /// Diagonal of the terminal weight.
    pub q_f_diag: [f64; 4],
    /// Diagonal of `R` for `(v, gamma_rate)` deviations.
    pub r_diag: [f64; 2],
    /// Half-widths of the tracking-error boxes.
    pub state_box: [f64; 4],
    /// Plant Euler substeps per control period.
    pub plant_substeps: usize,
    /// Consecutive controller failures tolerated before a run aborts.
    pub fallback_budget: usize,
    /// `nearest` or `time`.
    pub reference: ReferenceMode,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let w = TrackingWeights::default();
        let sim = SimOptions::default();
        Self {
            horizon: w.n,
            q_diag: w.q.diagonal().into(),
            q_f_diag: w.q_f.diagonal().into(),
            r_diag: w.r.diagonal().into(),
            state_box: DeviationBounds::default().state_box.into(),
            plant_substeps: sim.substeps,
            fallback_budget: sim.max_consecutive_failures,
            reference: sim.reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub vehicle: VehicleParams,
    pub scenario: ScenarioConfig,
    pub planner: PlannerConfig,
    pub controller: ControllerConfig,
    pub disturbance: DisturbanceConfig,
}

impl Config {
    pub fn scenario(&self) -> Scenario {
        let pose = |p: [f64; 4]| VehicleState::rear(p[0], p[1], p[2], p[3]);
        Scenario {
            params: self.vehicle,
            loading_pose: pose(self.scenario.loading_pose),
            unloading_pose: pose(self.scenario.unloading_pose),
            obstacles: self.scenario.obstacles.clone(),
            d_safe: self.scenario.d_safe,
            ts: self.scenario.ts,
            n_plan: self.scenario.n_plan,
        }
    }

    pub fn weights(&self) -> TrackingWeights {
        let c = &self.controller;
        TrackingWeights {
            q: Matrix4::from_diagonal(&Vector4::from(c.q_diag)),
            q_f: Matrix4::from_diagonal(&Vector4::from(c.q_f_diag)),
            r: Matrix2::from_diagonal(&Vector2::from(c.r_diag)),
            n: c.horizon,
            ts: self.scenario.ts,
        }
    }

    pub fn bounds(&self) -> DeviationBounds {
        DeviationBounds {
            state_box: Vector4::from(self.controller.state_box),
        }
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            substeps: self.controller.plant_substeps,
            max_consecutive_failures: self.controller.fallback_budget,
            reference: self.controller.reference,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario().validate()?;
        self.weights().validate()?;
        self.bounds().validate()?;
        self.disturbance.validate()?;
        if self.controller.plant_substeps == 0 {
            return Err(Error::InvalidParams("plant_substeps must be >= 1".into()));
        }
        let p = &self.planner;
        if p.r.iter().chain(&p.r_d).any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParams("planner weights must be positive".into()));
        }
        if !(p.terminal_tol > 1e-9 && p.margin >= 0.0) {
            return Err(Error::InvalidParams(
                "terminal_tol must be > 1e-9 and margin >= 0".into(),
            ));
        }
        if !(p.gamma_margin >= 0.0 && p.gamma_margin < self.vehicle.gamma_max) {
            return Err(Error::InvalidParams("gamma_margin must be in [0, gamma_max)".into()));
        }
        Ok(())
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

/// Parse a config document. Returns the config and one notice per key that
/// was absent and took its default.
pub fn parse_config(text: &str) -> Result<(Config, Vec<String>)> {
    let user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut merged = toml::Table::try_from(Config::default()).expect("default config serializes");
    let mut notices = Vec::new();

    for (section, value) in &user {
        let Some(defaults) = merged.get_mut(section) else {
            return Err(Error::Config(format!("unknown section `{section}`")));
        };
        let (Some(defaults), Some(given)) = (defaults.as_table_mut(), value.as_table()) else {
            return Err(Error::Config(format!("`{section}` must be a table")));
        };
        for (key, v) in given {
            if !defaults.contains_key(key) {
                return Err(Error::Config(format!("unknown key `{section}.{key}`")));
            }
            defaults.insert(key.clone(), v.clone());
        }
    }
    for (section, defaults) in &merged {
        let given = user.get(section).and_then(|v| v.as_table());
        for (key, v) in defaults.as_table().into_iter().flatten() {
            if given.is_none_or(|g| !g.contains_key(key)) {
                notices.push(format!("{section}.{key} not set, using default {v}"));
            }
        }
    }

    let config: Config = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok((config, notices))
}

/// Read, parse and validate a config file, logging defaulted keys.
pub fn load_config(path: &Path) -> Result<Config> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    let (config, notices) = parse_config(&text)?;
    for n in notices {
        info!("config: {n}");
    }
    Ok(config)
}

/// Nine significant digits.
fn num(v: f64) -> String {
    format!("{v:.8e}")
}

/// `v` as it reads back from its written form.
fn quantize(v: f64) -> f64 {
    num(v).parse().expect("formatted float parses")
}

pub const TRAJECTORY_HEADER: [&str; 12] = [
    "k",
    "t",
    "x_r",
    "y_r",
    "x_f",
    "y_f",
    "theta",
    "gamma",
    "v",
    "gamma_rate",
    "frame",
    "leg",
];

/// Write one leg. The front-axle columns are derived from the rear columns
/// as written, so a file read back and written again is byte-identical.
pub fn write_trajectory<W: Write>(out: W, traj: &Trajectory, leg: usize, params: &VehicleParams) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for (k, step) in traj.steps.iter().enumerate() {
        let s = &step.state;
        let rear = VehicleState::rear(quantize(s.x), quantize(s.y), quantize(s.theta), quantize(s.gamma));
        let front = rear_to_front(&rear, params);
        w.write_record([
            k.to_string(),
            num(k as f64 * traj.ts),
            num(rear.x),
            num(rear.y),
            num(front.x),
            num(front.y),
            num(rear.theta),
            num(rear.gamma),
            num(step.input.v),
            num(step.input.gamma_rate),
            step.frame.to_string(),
            leg.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trajectory(path: &Path, traj: &Trajectory, leg: usize, params: &VehicleParams) -> Result<()> {
    write_trajectory(BufWriter::new(File::create(path)?), traj, leg, params)
}

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    k: usize,
    t: f64,
    x_r: f64,
    y_r: f64,
    #[allow(dead_code)]
    x_f: f64,
    #[allow(dead_code)]
    y_f: f64,
    theta: f64,
    gamma: f64,
    v: f64,
    gamma_rate: f64,
    frame: String,
    leg: usize,
}

/// Read one leg; returns the trajectory and its leg number.
pub fn read_trajectory<R: Read>(input: R) -> Result<(Trajectory, usize)> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRAJECTORY_HEADER {
        return Err(Error::Parse(format!("unexpected trajectory header {header:?}")));
    }
    let mut steps = Vec::new();
    let mut times = Vec::new();
    let mut leg = 0;
    for (i, row) in r.deserialize::<TrajectoryRow>().enumerate() {
        let row = row?;
        if row.k != i {
            return Err(Error::Parse(format!("row {i} has k = {}", row.k)));
        }
        leg = row.leg;
        times.push(row.t);
        steps.push(TrajectoryStep {
            state: VehicleState::rear(row.x_r, row.y_r, row.theta, row.gamma),
            input: ControlInput::new(row.v, row.gamma_rate),
            frame: row.frame.parse::<Frame>()?,
        });
    }
    if steps.is_empty() {
        return Err(Error::NoNominalTrajectory);
    }
    let ts = if times.len() > 1 {
        times[1] - times[0]
    } else {
        Scenario::default().ts
    };
    if ts.is_nan() || ts <= 0.0 {
        return Err(Error::Parse("time column must increase".into()));
    }
    Ok((Trajectory::from_steps(ts, steps), leg))
}

pub fn load_trajectory(path: &Path) -> Result<(Trajectory, usize)> {
    read_trajectory(File::open(path)?)
}

pub const RUN_LOG_HEADER: [&str; 15] = [
    "k",
    "t",
    "leg",
    "index",
    "frame",
    "x",
    "y",
    "theta",
    "gamma",
    "v_cmd",
    "gamma_rate_cmd",
    "v_applied",
    "gamma_rate_applied",
    "status",
    "error_m",
];

/// Write a run log: one row per control step, then the footer. Per-step
/// solve times appear only in the footer statistics.
pub fn write_run_log<W: Write>(mut out: W, log: &RunLog, wall_clock: f64) -> Result<()> {
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(RUN_LOG_HEADER)?;
        for (k, r) in log.records.iter().enumerate() {
            let m = &r.measured;
            w.write_record([
                k.to_string(),
                num(r.t),
                r.leg.to_string(),
                r.index.to_string(),
                r.frame.to_string(),
                num(m.x),
                num(m.y),
                num(m.theta),
                num(m.gamma),
                num(r.commanded.v),
                num(r.commanded.gamma_rate),
                num(r.applied.v),
                num(r.applied.gamma_rate),
                r.status.to_string(),
                num(r.error),
            ])?;
        }
        w.flush()?;
    }
    let s = &log.summary;
    writeln!(out, "# summary controller={}", log.kind)?;
    writeln!(out, "# summary steps={}", log.records.len())?;
    writeln!(out, "# summary mean_abs_error_m={}", num(s.mean_abs_error))?;
    writeln!(out, "# summary max_error_m={}", num(s.max_error))?;
    writeln!(out, "# summary terminal_error_m={}", num(s.terminal_error))?;
    writeln!(out, "# summary infeasible_count={}", s.infeasible_count)?;
    writeln!(out, "# summary relaxed_count={}", s.relaxed_count)?;
    writeln!(out, "# summary aborted={}", log.aborted.as_deref().unwrap_or("no"))?;
    writeln!(out, "# timing median_solve_ms={:.4}", s.median_solve_time * 1e3)?;
    writeln!(out, "# timing mean_solve_ms={:.4}", s.mean_solve_time * 1e3)?;
    writeln!(out, "# timing wall_clock_s={wall_clock:.3}")?;
    out.flush()?;
    Ok(())
}

pub const COMPARE_HEADER: [&str; 8] = [
    "controller",
    "mean_abs_err_m",
    "max_err_m",
    "median_solve_ms",
    "mean_solve_ms",
    "infeasible_count",
    "relaxed_count",
    "status",
];

/// One row per controller. Failed rows carry the error in `status` and
/// empty numeric fields.
pub fn write_compare_table<W: Write>(out: W, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARE_HEADER)?;
    for row in rows {
        let record = match &row.result {
            Ok(log) => {
                let s = &log.summary;
                [
                    row.kind.to_string(),
                    num(s.mean_abs_error),
                    num(s.max_error),
                    format!("{:.4}", s.median_solve_time * 1e3),
                    format!("{:.4}", s.mean_solve_time * 1e3),
                    s.infeasible_count.to_string(),
                    s.relaxed_count.to_string(),
                    "ok".to_string(),
                ]
            }
            Err(e) => [
                row.kind.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                format!("{}: {e}", e.class()),
            ],
        };
        w.write_record(record)?;
    }
    w.flush()?;
    Ok(())
}

pub const BENCH_HEADER: [&str; 7] = [
    "controller",
    "horizon",
    "mean_ms",
    "variance_ms2",
    "median_ms",
    "samples",
    "failures",
];

pub fn write_bench_table<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        w.write_record([
            r.kind.to_string(),
            r.horizon.to_string(),
            format!("{:.6}", r.mean * 1e3),
            format!("{:.6}", r.variance * 1e6),
            format!("{:.6}", r.median * 1e3),
            r.samples.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parse `"5,10,15"`.
pub fn parse_horizons(s: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = s
        .split(',')
        .map(|p| {
            let p = p.trim();
            match p.parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(Error::Config(format!("invalid horizon `{p}`"))),
            }
        })
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("no horizons given".into()));
    }
    Ok(out)
}

/// Parse a controller name.
pub fn parse_controller(s: &str) -> Result<ControllerKind> {
    s.parse()
}
