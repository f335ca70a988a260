//! Offline multiple-shooting planner for the loading cycle.
//!
//! Decision vector `z = [x_0, u_0, x_1, u_1, ..., x_{N-1}, u_{N-1}, x_N]`
//! with rear-frame states. The cost is
//! `sum_i |R u_i|^2 + |R_d (u_i - u_{i-1})|^2` with `u_{-1} = u0`, subject to
//! Euler dynamics, boundary conditions, articulation and input limits and a
//! safety distance from rectangular obstacles for three points of the body.

use std::time::Instant;

use log::{debug, info};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Matrix4x2, Rotation2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    jacobian_control, jacobian_state, joint_position, rear_to_front, step_euler, ControlInput, VehicleParams,
    VehicleState,
};
use crate::sqp::{HessianMode, NlpProblem, NlpStatus, SqpConfig, SqpSolver};
use crate::trajectory::Trajectory;

/// Oriented rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectObstacle {
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
    #[serde(default)]
    pub rotation: f64,
}

impl RectObstacle {
    pub fn new(center: [f64; 2], half_extents: [f64; 2], rotation: f64) -> Self {
        Self {
            center,
            half_extents,
            rotation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.half_extents.iter().all(|h| *h > 0.0 && h.is_finite())
            && self.center.iter().all(|c| c.is_finite())
            && self.rotation.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(
                "obstacle half_extents must be > 0 and all fields finite".into(),
            ))
        }
    }

    /// Squared distance from `p` to the rectangle (zero inside) and its
    /// gradient with respect to `p`.
    pub fn distance_sq_grad(&self, p: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let rot = Rotation2::new(self.rotation);
        let local = rot.inverse() * (p - Vector2::from(self.center));
        let clamped = Vector2::new(
            local.x.clamp(-self.half_extents[0], self.half_extents[0]),
            local.y.clamp(-self.half_extents[1], self.half_extents[1]),
        );
        let diff = local - clamped;
        (diff.norm_squared(), rot * diff * 2.0)
    }

    pub fn distance_sq(&self, p: &Vector2<f64>) -> f64 {
        self.distance_sq_grad(p).0
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        self.distance_sq(p) == 0.0
    }
}

/// The three checked body points of a rear-frame state: rear axle,
/// articulation joint, front axle.
pub fn body_points(state: &VehicleState, params: &VehicleParams) -> [Vector2<f64>; 3] {
    let rear = crate::model::to_frame(state, crate::model::Frame::Rear, params);
    let front = rear_to_front(&rear, params);
    [rear.position(), joint_position(&rear, params), front.position()]
}

/// Jacobians of [`body_points`] with respect to a rear-frame state.
fn body_point_jacobians(state: &VehicleState, params: &VehicleParams) -> [nalgebra::Matrix2x4<f64>; 3] {
    let (s, c) = state.theta.sin_cos();
    let (sf, cf) = (state.theta + state.gamma).sin_cos();
    let (lr, lf) = (params.l_rear, params.l_front);
    let rear = nalgebra::Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let mut joint = rear;
    joint[(0, 2)] = -lr * s;
    joint[(1, 2)] = lr * c;
    let mut front = joint;
    front[(0, 2)] -= lf * sf;
    front[(1, 2)] += lf * cf;
    front[(0, 3)] = -lf * sf;
    front[(1, 3)] = lf * cf;
    [rear, joint, front]
}

/// Smallest squared distance from any checked body point to any obstacle.
pub fn obstacle_clearance_sq(state: &VehicleState, obstacles: &[RectObstacle], params: &VehicleParams) -> f64 {
    body_points(state, params)
        .iter()
        .flat_map(|p| obstacles.iter().map(move |o| o.distance_sq(p)))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: VehicleParams,
    pub loading_pose: VehicleState,
    pub unloading_pose: VehicleState,
    pub obstacles: Vec<RectObstacle>,
    pub d_safe: f64,
    pub ts: f64,
    pub n_plan: usize,
}

impl Default for Scenario {
    /// Reference loading cycle: the loader faces the pile along +x and
    /// dumps into a truck parked below and to the left of the pile.
    fn default() -> Self {
        let params = VehicleParams::default();
        let reach = params.l_front + params.l_rear;
        let gap = 0.8;
        Self {
            params,
            loading_pose: VehicleState::rear(0.0, 0.0, 0.0, 0.0),
            unloading_pose: VehicleState::rear(-3.0, -3.0, -std::f64::consts::FRAC_PI_2, 0.0),
            obstacles: vec![
                RectObstacle::new([reach + gap + 1.5, 0.0], [1.5, 2.5], 0.0),
                RectObstacle::new([-3.0, -3.0 - reach - gap - 1.0], [2.5, 1.0], 0.0),
            ],
            d_safe: 0.5,
            ts: 0.2,
            n_plan: 100,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for o in &self.obstacles {
            o.validate()?;
        }
        if !(self.d_safe >= 0.0 && self.d_safe.is_finite()) {
            return Err(Error::InvalidParams("d_safe must be >= 0".into()));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(Error::InvalidParams("ts must be > 0".into()));
        }
        if self.n_plan < 2 {
            return Err(Error::InvalidParams("n_plan must be >= 2".into()));
        }
        for (name, pose) in [
            ("loading_pose", &self.loading_pose),
            ("unloading_pose", &self.unloading_pose),
        ] {
            if pose.gamma.abs() > self.params.gamma_max {
                return Err(Error::InvalidParams(format!("{name} articulation exceeds gamma_max")));
            }
            let clearance = obstacle_clearance_sq(pose, &self.obstacles, &self.params).sqrt();
            if clearance < self.d_safe {
                return Err(Error::InvalidParams(format!(
                    "{name} is within d_safe of an obstacle (clearance {clearance:.3} m)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    /// Diagonal of `R`.
    pub r: [f64; 2],
    /// Diagonal of `R_d`.
    pub r_d: [f64; 2],
    /// Terminal box half-width on every state component.
    pub terminal_tol: f64,
    /// Extra distance added to `d_safe` inside the optimizer.
    pub margin: f64,
    /// Articulation headroom left to the tracking controllers: the plan
    /// keeps `|gamma| <= gamma_max - gamma_margin`.
    pub gamma_margin: f64,
    pub max_iter: usize,
    pub tol_feas: f64,
    pub tol_step: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            r: [1.0, 1.0],
            r_d: [8.0, 24.0],
            terminal_tol: 1e-3,
            margin: 1e-3,
            gamma_margin: 0.05,
            max_iter: 300,
            tol_feas: 1e-9,
            tol_step: 1e-6,
        }
    }
}

/// Transcription of one leg.
pub struct PlanningNlp<'a> {
    scenario: &'a Scenario,
    config: &'a PlannerConfig,
    x0: VehicleState,
    xf: VehicleState,
    u0: ControlInput,
    uf: ControlInput,
    /// Constant cost Hessian.
    hessian: DMatrix<f64>,
}

const NX: usize = 4;
const NU: usize = 2;
const STRIDE: usize = NX + NU;

impl<'a> PlanningNlp<'a> {
    pub fn new(
        scenario: &'a Scenario,
        config: &'a PlannerConfig,
        x0: VehicleState,
        xf: VehicleState,
        u0: ControlInput,
        uf: ControlInput,
    ) -> Self {
        let n = scenario.n_plan;
        let nv = STRIDE * n + NX;
        let r2 = Matrix2::from_diagonal(&Vector2::new(config.r[0].powi(2), config.r[1].powi(2)));
        let rd2 = Matrix2::from_diagonal(&Vector2::new(config.r_d[0].powi(2), config.r_d[1].powi(2)));
        let mut hessian = DMatrix::zeros(nv, nv);
        for i in 0..n {
            let a = Self::iu(i);
            let mut block = r2 * 2.0 + rd2 * 2.0;
            if i + 1 < n {
                block += rd2 * 2.0;
                let b = Self::iu(i + 1);
                hessian.fixed_view_mut::<2, 2>(a, b).copy_from(&(-rd2 * 2.0));
                hessian.fixed_view_mut::<2, 2>(b, a).copy_from(&(-rd2 * 2.0));
            }
            hessian.fixed_view_mut::<2, 2>(a, a).copy_from(&block);
        }
        Self {
            scenario,
            config,
            x0: VehicleState {
                frame: crate::model::Frame::Rear,
                ..x0
            },
            xf: VehicleState {
                frame: crate::model::Frame::Rear,
                ..xf
            },
            u0,
            uf,
            hessian,
        }
    }

    fn horizon(&self) -> usize {
        self.scenario.n_plan
    }

    fn ix(k: usize) -> usize {
        STRIDE * k
    }

    fn iu(k: usize) -> usize {
        STRIDE * k + NX
    }

    fn state(z: &DVector<f64>, k: usize) -> VehicleState {
        let i = Self::ix(k);
        VehicleState::rear(z[i], z[i + 1], z[i + 2], z[i + 3])
    }

    fn input(z: &DVector<f64>, k: usize) -> ControlInput {
        let i = Self::iu(k);
        ControlInput::new(z[i], z[i + 1])
    }

    fn prev_input(&self, z: &DVector<f64>, k: usize) -> ControlInput {
        if k == 0 {
            self.u0
        } else {
            Self::input(z, k - 1)
        }
    }

    fn weights(&self) -> (Vector2<f64>, Vector2<f64>) {
        let c = self.config;
        (
            Vector2::new(c.r[0].powi(2), c.r[1].powi(2)),
            Vector2::new(c.r_d[0].powi(2), c.r_d[1].powi(2)),
        )
    }

    /// Linear interpolation between the boundary states with zero inputs.
    pub fn initial_guess(&self) -> DVector<f64> {
        let n = self.horizon();
        let mut z = DVector::zeros(self.num_vars());
        let a = self.x0.to_vector();
        let b = self.xf.to_vector();
        for k in 0..=n {
            let s = k as f64 / n as f64;
            z.fixed_rows_mut::<4>(Self::ix(k)).copy_from(&(a * (1.0 - s) + b * s));
        }
        z
    }

    fn pairs(&self) -> usize {
        3 * self.scenario.obstacles.len()
    }

    /// Split a solution into a trajectory whose states are the Euler replay
    /// of the inputs from `x0`.
    pub fn to_trajectory(&self, z: &DVector<f64>) -> Trajectory {
        let n = self.horizon();
        let p = &self.scenario.params;
        let inputs: Vec<ControlInput> = (0..n).map(|k| Self::input(z, k)).collect();
        let mut states = Vec::with_capacity(n + 1);
        let mut x = self.x0;
        states.push(x);
        for u in &inputs {
            x = step_euler(&x, u, p, self.scenario.ts);
            states.push(x);
        }
        Trajectory::from_states_inputs(self.scenario.ts, &states, &inputs, self.uf)
    }

    /// Raw states stored in `z`, without replay.
    pub fn stored_states(&self, z: &DVector<f64>) -> Vec<VehicleState> {
        (0..=self.horizon()).map(|k| Self::state(z, k)).collect()
    }
}

impl NlpProblem for PlanningNlp<'_> {
    fn num_vars(&self) -> usize {
        STRIDE * self.horizon() + NX
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let (r2, rd2) = self.weights();
        (0..self.horizon())
            .map(|k| {
                let u = Self::input(z, k).to_vector();
                let du = u - self.prev_input(z, k).to_vector();
                u.component_mul(&u).dot(&r2) + du.component_mul(&du).dot(&rd2)
            })
            .sum()
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let (r2, rd2) = self.weights();
        let mut g = DVector::zeros(self.num_vars());
        for k in 0..n {
            let u = Self::input(z, k).to_vector();
            let du = u - self.prev_input(z, k).to_vector();
            let mut gk = u.component_mul(&r2) * 2.0 + du.component_mul(&rd2) * 2.0;
            if k + 1 < n {
                let dn = Self::input(z, k + 1).to_vector() - u;
                gk -= dn.component_mul(&rd2) * 2.0;
            }
            g.fixed_rows_mut::<2>(Self::iu(k)).copy_from(&gk);
        }
        g
    }

    fn objective_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.hessian.clone())
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let p = &self.scenario.params;
        let mut c = DVector::zeros(NX * n);
        for k in 0..n {
            let pred = step_euler(&Self::state(z, k), &Self::input(z, k), p, self.scenario.ts);
            let next = Self::state(z, k + 1);
            c.fixed_rows_mut::<4>(NX * k)
                .copy_from(&(next.to_vector() - pred.to_vector()));
        }
        c
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.horizon();
        let p = &self.scenario.params;
        let ts = self.scenario.ts;
        let mut j = DMatrix::zeros(NX * n, self.num_vars());
        for k in 0..n {
            let x = Self::state(z, k);
            let u = Self::input(z, k);
            let a: Matrix4<f64> = -(Matrix4::identity() + jacobian_state(&x, &u, p) * ts);
            let b: Matrix4x2<f64> = -jacobian_control(&x, &u, p) * ts;
            let row = NX * k;
            j.fixed_view_mut::<4, 4>(row, Self::ix(k)).copy_from(&a);
            j.fixed_view_mut::<4, 2>(row, Self::iu(k)).copy_from(&b);
            j.fixed_view_mut::<4, 4>(row, Self::ix(k + 1)).fill_with_identity();
        }
        j
    }

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let sc = self.scenario;
        let req = (sc.d_safe + self.config.margin).powi(2);
        let mut c = DVector::zeros(n * self.pairs());
        let mut row = 0;
        for k in 1..=n {
            let pts = body_points(&Self::state(z, k), &sc.params);
            for pt in &pts {
                for o in &sc.obstacles {
                    c[row] = req - o.distance_sq(pt);
                    row += 1;
                }
            }
        }
        c
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.horizon();
        let sc = self.scenario;
        let mut j = DMatrix::zeros(n * self.pairs(), self.num_vars());
        let mut row = 0;
        for k in 1..=n {
            let x = Self::state(z, k);
            let pts = body_points(&x, &sc.params);
            let jacs = body_point_jacobians(&x, &sc.params);
            for (pt, jp) in pts.iter().zip(&jacs) {
                for o in &sc.obstacles {
                    let (_, grad) = o.distance_sq_grad(pt);
                    let dz = -(grad.transpose() * jp);
                    j.fixed_view_mut::<1, 4>(row, Self::ix(k)).copy_from(&dz);
                    row += 1;
                }
            }
        }
        j
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.horizon();
        let p = &self.scenario.params;
        let nv = self.num_vars();
        let mut lb = DVector::from_element(nv, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(nv, f64::INFINITY);
        // Boxes are shrunk slightly so that rounding in the replay cannot
        // push an audited quantity past its limit.
        let shrink = 1e-9;
        let g_lim = p.gamma_max - self.config.gamma_margin - shrink;
        for k in 0..=n {
            let g = Self::ix(k) + 3;
            lb[g] = -g_lim;
            ub[g] = g_lim;
        }
        for k in 0..n {
            let i = Self::iu(k);
            lb[i] = -p.v_max;
            ub[i] = p.v_max;
            lb[i + 1] = -p.gamma_rate_max;
            ub[i + 1] = p.gamma_rate_max;
        }
        let x0 = self.x0.to_vector();
        let xf = self.xf.to_vector();
        let tol = self.config.terminal_tol - shrink;
        for r in 0..NX {
            lb[Self::ix(0) + r] = x0[r];
            ub[Self::ix(0) + r] = x0[r];
            lb[Self::ix(n) + r] = (xf[r] - tol).max(lb[Self::ix(n) + r]);
            ub[Self::ix(n) + r] = (xf[r] + tol).min(ub[Self::ix(n) + r]);
        }
        for (k, u) in [(0, self.u0), (n - 1, self.uf)] {
            let i = Self::iu(k);
            lb[i] = u.v;
            ub[i] = u.v;
            lb[i + 1] = u.gamma_rate;
            ub[i + 1] = u.gamma_rate;
        }
        (lb, ub)
    }
}

/// Post-hoc constraint check of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanAudit {
    pub max_abs_gamma: f64,
    pub min_clearance: f64,
    /// Largest terminal error over position, heading and articulation.
    pub terminal_error: f64,
    /// Largest Euler defect between consecutive stored steps.
    pub max_defect: f64,
    /// Largest excursion of any input outside its box (zero when inside).
    pub input_excess: f64,
    pub direction_changes: usize,
}

impl PlanAudit {
    pub fn passes(&self, scenario: &Scenario, terminal_tol: f64) -> bool {
        self.max_abs_gamma <= scenario.params.gamma_max + 1e-6
            && self.min_clearance >= scenario.d_safe - 1e-4
            && self.terminal_error <= terminal_tol + 1e-9
            && self.max_defect <= 1e-8
            && self.input_excess <= 1e-9
    }
}

pub fn audit(traj: &Trajectory, scenario: &Scenario, xf: &VehicleState) -> PlanAudit {
    let p = &scenario.params;
    let max_abs_gamma = traj.states().map(|s| s.gamma.abs()).fold(0.0, f64::max);
    let min_clearance = traj
        .states()
        .map(|s| obstacle_clearance_sq(s, &scenario.obstacles, p).sqrt())
        .fold(f64::INFINITY, f64::min);
    let terminal_error = traj
        .last()
        .map(|s| (s.state.to_vector() - xf.to_vector()).amax())
        .unwrap_or(f64::INFINITY);
    let input_excess = traj
        .inputs()
        .map(|u| {
            (u.v.abs() - p.v_max)
                .max(u.gamma_rate.abs() - p.gamma_rate_max)
                .max(0.0)
        })
        .fold(0.0, f64::max);
    PlanAudit {
        max_abs_gamma,
        min_clearance,
        terminal_error,
        max_defect: traj.max_defect(p),
        input_excess,
        direction_changes: traj.direction_changes(),
    }
}

/// Plan one leg from `x0` to `xf`.
pub fn plan_segment(
    scenario: &Scenario,
    config: &PlannerConfig,
    x0: &VehicleState,
    xf: &VehicleState,
    u0: ControlInput,
    uf: ControlInput,
) -> Result<Trajectory> {
    scenario.validate()?;
    let nlp = PlanningNlp::new(scenario, config, *x0, *xf, u0, uf);
    let sqp_config = SqpConfig {
        tol_feas: config.tol_feas,
        tol_step: config.tol_step,
        max_iter: config.max_iter,
        hessian: HessianMode::GaussNewton,
        ..SqpConfig::default()
    };
    let started = Instant::now();
    let sol = SqpSolver::new(sqp_config).solve(&nlp, &nlp.initial_guess())?;
    let traj = nlp.to_trajectory(&sol.z);
    let report = audit(&traj, scenario, &nlp.xf);
    info!(
        "planned leg in {:.2} s: {:?}, {} SQP steps, cost {:.4}, violation {:.2e}",
        started.elapsed().as_secs_f64(),
        sol.status,
        sol.iterations,
        sol.objective,
        sol.constraint_violation
    );
    debug!("audit: {report:?}");
    let reason = if sol.status == NlpStatus::QpFailed {
        Some("step subproblem failed".to_string())
    } else if !report.passes(scenario, config.terminal_tol) {
        Some(format!(
            "constraint audit failed (SQP {:?}, violation {:.2e}, max |gamma| {:.4}, clearance {:.4}, terminal error {:.2e})",
            sol.status, sol.constraint_violation, report.max_abs_gamma, report.min_clearance, report.terminal_error
        ))
    } else {
        None
    };
    match reason {
        Some(reason) => Err(Error::PlannerInfeasible {
            reason,
            best: Box::new(traj),
        }),
        None => {
            if sol.status != NlpStatus::Converged {
                log::warn!(
                    "planner stopped with {:?} but the trajectory passes the audit",
                    sol.status
                );
            }
            Ok(traj)
        }
    }
}

/// Plan both legs of the cycle, pile to truck and back. The return leg
/// starts where the first leg actually ends, so the cycle is continuous.
pub fn plan_cycle(scenario: &Scenario, config: &PlannerConfig) -> Result<(Trajectory, Trajectory)> {
    scenario.validate()?;
    let (l, u) = (scenario.loading_pose, scenario.unloading_pose);
    let zero = ControlInput::ZERO;
    let out = plan_segment(scenario, config, &l, &u, zero, zero)?;
    let end = out.last().map(|s| s.state).unwrap_or(u);
    let back = plan_segment(scenario, config, &end, &l, zero, zero)?;
    Ok((out, back))
}
