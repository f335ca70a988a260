//! Receding-horizon tracking controllers.
//!
//! All three controllers minimize the same quadratic cost in the tracking
//! error `x_e = x - x*` and input deviation `u_e = u - u*`:
//!
//! ```text
//! x_e(N)' Q_f x_e(N) + sum_i x_e(i)' Q x_e(i) + u_e(i)' R u_e(i)
//! ```
//!
//! They differ only in the prediction model: the scheduled LPV sequence,
//! one linearization frozen over the horizon, or the nonlinear error
//! dynamics. A horizon never crosses a change of tracking frame; past the
//! end of the current same-frame run the final nominal step is held.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::lpv::{embed_at, embed_horizon, LpvMatrices, SchedulingPoint};
use crate::model::{
    dynamics_continuous, jacobian_control, jacobian_state, to_frame, ControlInput, Frame, VehicleParams, VehicleState,
};
use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus};
use crate::sqp::{NlpProblem, NlpStatus, SqpConfig, SqpSolver};
use crate::trajectory::Trajectory;

pub use crate::model::select_frame;

/// Forward search width of [`nearest_index`], in steps.
pub const INDEX_WINDOW: usize = 5;

/// Weight on state-box slacks when the hard problem is infeasible.
const SLACK_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Nl,
    Lpv,
    Lti,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Nl, ControllerKind::Lpv, ControllerKind::Lti];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Nl => "nl",
            ControllerKind::Lpv => "lpv",
            ControllerKind::Lti => "lti",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nl" => Ok(ControllerKind::Nl),
            "lpv" => Ok(ControllerKind::Lpv),
            "lti" => Ok(ControllerKind::Lti),
            other => Err(Error::Parse(format!(
                "unknown controller `{other}` (expected nl, lpv or lti)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingWeights {
    /// State-error weight.
    pub q: Matrix4<f64>,
    /// Terminal state-error weight.
    pub q_f: Matrix4<f64>,
    /// Input-deviation weight.
    pub r: Matrix2<f64>,
    /// Horizon length in steps.
    pub n: usize,
    /// Control period [s].
    pub ts: f64,
}

impl Default for TrackingWeights {
    fn default() -> Self {
        let q = Matrix4::from_diagonal(&Vector4::new(4.0, 4.0, 3.0, 2.0)) * 8.0;
        Self {
            q,
            q_f: q * 10.0,
            r: Matrix2::from_diagonal(&Vector2::new(0.1, 0.5)),
            n: 10,
            ts: 0.2,
        }
    }
}

impl TrackingWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.n == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad(format!("ts must be positive, got {}", self.ts));
        }
        let q = DMatrix::from_iterator(4, 4, self.q.iter().copied());
        let q_f = DMatrix::from_iterator(4, 4, self.q_f.iter().copied());
        let r = DMatrix::from_iterator(2, 2, self.r.iter().copied());
        for (name, m, floor) in [("q", &q, 0.0), ("q_f", &q_f, 0.0), ("r", &r, f64::MIN_POSITIVE)] {
            if m.iter().any(|v| !v.is_finite()) {
                return bad(format!("{name} must be finite"));
            }
            if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return bad(format!("{name} must be symmetric"));
            }
            let min_eig = m.clone().symmetric_eigenvalues().min();
            if min_eig < floor - 1e-12 * m.amax().max(1.0) || (floor > 0.0 && min_eig <= 0.0) {
                let what = if floor > 0.0 {
                    "positive definite"
                } else {
                    "positive semidefinite"
                };
                return bad(format!("{name} must be {what}"));
            }
        }
        Ok(())
    }
}

/// Symmetric boxes on the tracking error over the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationBounds {
    pub state_box: Vector4<f64>,
}

impl Default for DeviationBounds {
    fn default() -> Self {
        Self {
            state_box: Vector4::new(1.0, 1.0, 0.5, 0.3),
        }
    }
}

impl DeviationBounds {
    pub fn validate(&self) -> Result<()> {
        if self.state_box.iter().all(|b| *b > 0.0 && !b.is_nan()) {
            Ok(())
        } else {
            Err(Error::InvalidParams("deviation bounds must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerStatus {
    Optimal,
    /// State boxes were softened to restore feasibility.
    Relaxed,
    /// The nonlinear solve failed and the LPV command was used instead.
    LpvFallback,
    /// No admissible command; the nominal input was applied. Set by the
    /// simulator, never by a controller.
    NominalFallback,
}

impl ControllerStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerStatus::Optimal => "optimal",
            ControllerStatus::Relaxed => "relaxed",
            ControllerStatus::LpvFallback => "lpv_fallback",
            ControllerStatus::NominalFallback => "nominal_fallback",
        }
    }
}

impl fmt::Display for ControllerStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ControllerStatus::Optimal,
            ControllerStatus::Relaxed,
            ControllerStatus::LpvFallback,
            ControllerStatus::NominalFallback,
        ]
        .into_iter()
        .find(|c| c.as_str() == s.trim())
        .ok_or_else(|| Error::Parse(format!("unknown solver status `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    /// Absolute command `u* + u_e(0)`.
    pub input: ControlInput,
    /// Predicted errors `x_e(0..=N)`.
    pub predicted_error: Vec<Vector4<f64>>,
    /// Wall-clock time of the step [s].
    pub solve_time: f64,
    pub status: ControllerStatus,
}

/// Index of the trajectory step nearest to `position`, both expressed in
/// `frame`. Only `hint..=hint + INDEX_WINDOW` is searched, so the result
/// never moves backwards; ties go to the larger index.
pub fn nearest_index(
    traj: &Trajectory,
    position: &Vector2<f64>,
    frame: Frame,
    hint: usize,
    params: &VehicleParams,
) -> usize {
    assert!(!traj.is_empty(), "nearest_index on an empty trajectory");
    let last = traj.len() - 1;
    let lo = hint.min(last);
    let hi = (hint + INDEX_WINDOW).min(last);
    let mut best = (f64::INFINITY, lo);
    for k in lo..=hi {
        let d = (traj.steps[k].state_in(frame, params).position() - position).norm_squared();
        if d <= best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Nominal data over one horizon, expressed in the tracking frame.
struct Horizon {
    frame: Frame,
    /// `x*(0..=n)`.
    x_nom: Vec<Vector4<f64>>,
    /// `u*(0..n)`.
    u_nom: Vec<ControlInput>,
    mats: Vec<LpvMatrices>,
}

impl Horizon {
    fn new(traj: &Trajectory, index: usize, n: usize, params: &VehicleParams) -> Result<Self> {
        if traj.is_empty() {
            return Err(Error::NoNominalTrajectory);
        }
        let index = index.min(traj.len() - 1);
        let seg = traj.segment_range(index);
        let steps = &traj.steps[seg.clone()];
        let start = index - seg.start;
        let frame = steps[start].frame;
        let last = steps.len() - 1;
        let at = |i: usize| &steps[(start + i).min(last)];
        Ok(Self {
            frame,
            x_nom: (0..=n).map(|i| at(i).state_in(frame, params).to_vector()).collect(),
            u_nom: (0..n).map(|i| at(i).input).collect(),
            mats: embed_horizon(steps, start, n, params, traj.ts)?,
        })
    }

    fn n(&self) -> usize {
        self.u_nom.len()
    }

    /// `u_e` boxes that keep `u* + u_e` inside the global limits. The speed
    /// also keeps the driving direction of the tracking frame: reversing in
    /// `Rear`, forward in `Front`.
    fn input_bounds(&self, params: &VehicleParams) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
        let (v_lo, v_hi) = match self.frame {
            Frame::Rear => (-params.v_max, 0.0),
            Frame::Front => (0.0, params.v_max),
        };
        let lo = Vector2::new(v_lo, -params.gamma_rate_max);
        let hi = Vector2::new(v_hi, params.gamma_rate_max);
        self.u_nom
            .iter()
            .map(|u| {
                (
                    (lo - u.to_vector()).inf(&Vector2::zeros()),
                    (hi - u.to_vector()).sup(&Vector2::zeros()),
                )
            })
            .unzip()
    }

    /// Boxes on `x_e(1..=N)`: the deviation box, with the articulation
    /// component further limited so that `|gamma| <= gamma_max`.
    fn state_bounds(&self, bounds: &DeviationBounds, params: &VehicleParams) -> Vec<(Vector4<f64>, Vector4<f64>)> {
        self.x_nom[1..]
            .iter()
            .map(|x| {
                let mut lo = -bounds.state_box;
                let mut hi = bounds.state_box;
                lo[3] = lo[3].max(-params.gamma_max - x[3]).min(0.0);
                hi[3] = hi[3].min(params.gamma_max - x[3]).max(0.0);
                (lo, hi)
            })
            .collect()
    }
}

/// Free response and input-to-state map of `x_e(1..=N)`.
struct Condensed {
    /// `x_e(i + 1)` under zero input, stacked.
    free: DVector<f64>,
    /// `4N x 2N`, block lower triangular.
    gamma: DMatrix<f64>,
}

fn condense(mats: &[LpvMatrices], x0: &Vector4<f64>) -> Condensed {
    let n = mats.len();
    let mut free = DVector::zeros(4 * n);
    let mut gamma = DMatrix::zeros(4 * n, 2 * n);
    let mut x = *x0;
    for (i, m) in mats.iter().enumerate() {
        x = m.a * x;
        free.fixed_rows_mut::<4>(4 * i).copy_from(&x);
        if i > 0 {
            for j in 0..i {
                let prev = gamma.fixed_view::<4, 2>(4 * (i - 1), 2 * j).into_owned();
                gamma.fixed_view_mut::<4, 2>(4 * i, 2 * j).copy_from(&(m.a * prev));
            }
        }
        gamma.fixed_view_mut::<4, 2>(4 * i, 2 * i).copy_from(&m.b);
    }
    Condensed { free, gamma }
}

/// Dense QP in the stacked input deviations.
fn tracking_qp(
    cond: &Condensed,
    weights: &TrackingWeights,
    x_box: &[(Vector4<f64>, Vector4<f64>)],
    u_lo: &[Vector2<f64>],
    u_hi: &[Vector2<f64>],
) -> QpProblem {
    let n = u_lo.len();
    let nu = 2 * n;
    let mut h = DMatrix::zeros(nu, nu);
    let mut g = DVector::zeros(nu);
    for i in 0..n {
        let w = if i + 1 == n { &weights.q_f } else { &weights.q };
        // Only the first i + 1 input blocks reach x_e(i + 1).
        let cols = 2 * (i + 1);
        let gi = cond.gamma.view((4 * i, 0), (4, cols));
        let wg = w * gi;
        let mut hb = h.view_mut((0, 0), (cols, cols));
        hb.gemm_tr(2.0, &gi, &wg, 1.0);
        let fi = cond.free.fixed_rows::<4>(4 * i);
        let mut gb = g.rows_mut(0, cols);
        gb.gemv_tr(2.0, &wg, &fi, 1.0);
    }
    for i in 0..n {
        let mut blk = h.fixed_view_mut::<2, 2>(2 * i, 2 * i);
        blk += weights.r * 2.0;
    }

    let rows = 4 * n + nu;
    let mut c = DMatrix::zeros(rows, nu);
    let mut lower = DVector::zeros(rows);
    let mut upper = DVector::zeros(rows);
    c.view_mut((0, 0), (4 * n, nu)).copy_from(&cond.gamma);
    for i in 0..n {
        for s in 0..4 {
            let r = 4 * i + s;
            lower[r] = x_box[i].0[s] - cond.free[r];
            upper[r] = x_box[i].1[s] - cond.free[r];
        }
        for s in 0..2 {
            let r = 4 * n + 2 * i + s;
            c[(r, 2 * i + s)] = 1.0;
            lower[r] = u_lo[i][s];
            upper[r] = u_hi[i][s];
        }
    }
    QpProblem::new(h, g).with_inequalities(c, lower, upper)
}

/// Same problem with one slack per state-box row, penalized by
/// `SLACK_PENALTY (s + s^2)`. Always feasible.
fn soften(p: &QpProblem, n_state_rows: usize) -> QpProblem {
    let nu = p.num_vars();
    let ns = n_state_rows;
    let nz = nu + ns;
    let n_in = p.c_in.nrows() - ns;

    let mut h = DMatrix::zeros(nz, nz);
    h.view_mut((0, 0), (nu, nu)).copy_from(&p.h);
    let mut g = DVector::zeros(nz);
    g.rows_mut(0, nu).copy_from(&p.g);
    for k in 0..ns {
        h[(nu + k, nu + k)] = 2.0 * SLACK_PENALTY;
        g[nu + k] = SLACK_PENALTY;
    }

    // Upper rows, lower rows, slack signs, input rows.
    let rows = 2 * ns + ns + n_in;
    let mut c = DMatrix::zeros(rows, nz);
    let mut lower = DVector::from_element(rows, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(rows, f64::INFINITY);
    for k in 0..ns {
        let row = p.c_in.view((k, 0), (1, nu));
        c.view_mut((k, 0), (1, nu)).copy_from(&row);
        c[(k, nu + k)] = -1.0;
        upper[k] = p.upper[k];
        c.view_mut((ns + k, 0), (1, nu)).copy_from(&row);
        c[(ns + k, nu + k)] = 1.0;
        lower[ns + k] = p.lower[k];
        c[(2 * ns + k, nu + k)] = 1.0;
        lower[2 * ns + k] = 0.0;
    }
    for k in 0..n_in {
        let r = 3 * ns + k;
        c.view_mut((r, 0), (1, nu))
            .copy_from(&p.c_in.view((ns + k, 0), (1, nu)));
        lower[r] = p.lower[ns + k];
        upper[r] = p.upper[ns + k];
    }
    QpProblem::new(h, g).with_inequalities(c, lower, upper)
}

/// Nonlinear error dynamics over one horizon, multiple-shooting form.
///
/// Variables are `[u_e(0), x_e(1), u_e(1), ..., u_e(N-1), x_e(N)]`; the
/// defects are `x_e(i+1) - x_e(i) - ts (f(x* + x_e, u* + u_e) - f(x*, u*))`.
struct NlTracking<'a> {
    horizon: &'a Horizon,
    x0: Vector4<f64>,
    weights: &'a TrackingWeights,
    bounds: &'a DeviationBounds,
    params: &'a VehicleParams,
    /// `f(x*(i), u*(i))`.
    f_nom: Vec<Vector4<f64>>,
}

impl<'a> NlTracking<'a> {
    fn new(
        horizon: &'a Horizon,
        x0: Vector4<f64>,
        weights: &'a TrackingWeights,
        bounds: &'a DeviationBounds,
        params: &'a VehicleParams,
    ) -> Self {
        let f_nom = (0..horizon.n())
            .map(|i| {
                let s = VehicleState::from_vector(&horizon.x_nom[i], horizon.frame);
                dynamics_continuous(&s, &horizon.u_nom[i], params).to_vector()
            })
            .collect();
        Self {
            horizon,
            x0,
            weights,
            bounds,
            params,
            f_nom,
        }
    }

    fn n(&self) -> usize {
        self.horizon.n()
    }

    fn u(&self, z: &DVector<f64>, i: usize) -> Vector2<f64> {
        z.fixed_rows::<2>(6 * i).into_owned()
    }

    /// `x_e(i)`, with `x_e(0)` fixed.
    fn x(&self, z: &DVector<f64>, i: usize) -> Vector4<f64> {
        if i == 0 {
            self.x0
        } else {
            z.fixed_rows::<4>(6 * (i - 1) + 2).into_owned()
        }
    }

    /// Absolute state and input at step `i`.
    fn absolute(&self, z: &DVector<f64>, i: usize) -> (VehicleState, ControlInput) {
        let s = VehicleState::from_vector(&(self.horizon.x_nom[i] + self.x(z, i)), self.horizon.frame);
        let u = ControlInput::from_vector(&(self.horizon.u_nom[i].to_vector() + self.u(z, i)));
        (s, u)
    }

    fn next_error(&self, x: &Vector4<f64>, u: &Vector2<f64>, i: usize) -> Vector4<f64> {
        let s = VehicleState::from_vector(&(self.horizon.x_nom[i] + x), self.horizon.frame);
        let uu = ControlInput::from_vector(&(self.horizon.u_nom[i].to_vector() + u));
        let f = dynamics_continuous(&s, &uu, self.params).to_vector();
        x + (f - self.f_nom[i]) * self.weights.ts
    }

    /// Roll the error dynamics forward under the given deviations.
    fn rollout(&self, us: &[Vector2<f64>]) -> DVector<f64> {
        let n = self.n();
        let mut z = DVector::zeros(6 * n);
        let mut x = self.x0;
        for (i, u) in us.iter().enumerate().take(n) {
            z.fixed_rows_mut::<2>(6 * i).copy_from(u);
            x = self.next_error(&x, u, i);
            z.fixed_rows_mut::<4>(6 * i + 2).copy_from(&x);
        }
        z
    }

    fn weight(&self, i: usize) -> &Matrix4<f64> {
        if i == self.n() {
            &self.weights.q_f
        } else {
            &self.weights.q
        }
    }
}

impl NlpProblem for NlTracking<'_> {
    fn num_vars(&self) -> usize {
        6 * self.n()
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        (0..self.n())
            .map(|i| {
                let u = self.u(z, i);
                let x = self.x(z, i + 1);
                (u.transpose() * self.weights.r * u)[0] + (x.transpose() * self.weight(i + 1) * x)[0]
            })
            .sum()
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        for i in 0..self.n() {
            g.fixed_rows_mut::<2>(6 * i)
                .copy_from(&(self.weights.r * self.u(z, i) * 2.0));
            g.fixed_rows_mut::<4>(6 * i + 2)
                .copy_from(&(self.weight(i + 1) * self.x(z, i + 1) * 2.0));
        }
        g
    }

    fn objective_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.num_vars();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..self.n() {
            h.fixed_view_mut::<2, 2>(6 * i, 6 * i)
                .copy_from(&(self.weights.r * 2.0));
            h.fixed_view_mut::<4, 4>(6 * i + 2, 6 * i + 2)
                .copy_from(&(self.weight(i + 1) * 2.0));
        }
        Some(h)
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(4 * self.n());
        for i in 0..self.n() {
            let pred = self.next_error(&self.x(z, i), &self.u(z, i), i);
            c.fixed_rows_mut::<4>(4 * i).copy_from(&(self.x(z, i + 1) - pred));
        }
        c
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let ts = self.weights.ts;
        let mut j = DMatrix::zeros(4 * n, 6 * n);
        for i in 0..n {
            let (s, u) = self.absolute(z, i);
            j.fixed_view_mut::<4, 2>(4 * i, 6 * i)
                .copy_from(&(-jacobian_control(&s, &u, self.params) * ts));
            j.fixed_view_mut::<4, 4>(4 * i, 6 * i + 2)
                .copy_from(&Matrix4::identity());
            if i > 0 {
                let a = Matrix4::identity() + jacobian_state(&s, &u, self.params) * ts;
                j.fixed_view_mut::<4, 4>(4 * i, 6 * (i - 1) + 2).copy_from(&(-a));
            }
        }
        j
    }

    fn ineq_constraints(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, self.num_vars())
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        let mut lb = DVector::from_element(6 * n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(6 * n, f64::INFINITY);
        let (u_lo, u_hi) = self.horizon.input_bounds(self.params);
        let x_box = self.horizon.state_bounds(self.bounds, self.params);
        for i in 0..n {
            lb.fixed_rows_mut::<2>(6 * i).copy_from(&u_lo[i]);
            ub.fixed_rows_mut::<2>(6 * i).copy_from(&u_hi[i]);
            lb.fixed_rows_mut::<4>(6 * i + 2).copy_from(&x_box[i].0);
            ub.fixed_rows_mut::<4>(6 * i + 2).copy_from(&x_box[i].1);
        }
        (lb, ub)
    }
}

/// One tracking controller with its own solver workspaces and warm-start
/// memory.
#[derive(Debug, Clone)]
pub struct Controller {
    kind: ControllerKind,
    weights: TrackingWeights,
    bounds: DeviationBounds,
    params: VehicleParams,
    qp: QpSolver,
    /// Separate workspace for the softened problem, whose multipliers are
    /// of the order of the slack penalty.
    qp_soft: QpSolver,
    sqp: SqpSolver,
    /// Index and input deviations of the previous solve.
    warm: Option<(usize, Vec<Vector2<f64>>)>,
}

impl Controller {
    pub fn new(
        kind: ControllerKind,
        weights: TrackingWeights,
        bounds: DeviationBounds,
        params: VehicleParams,
    ) -> Result<Self> {
        weights.validate()?;
        bounds.validate()?;
        params.validate()?;
        let sqp = SqpSolver::new(SqpConfig {
            tol_feas: 1e-9,
            tol_step: 1e-8,
            max_iter: 50,
            qp: QpSettings {
                tol_kkt: 1e-9,
                ..QpSettings::default()
            },
            ..SqpConfig::default()
        });
        Ok(Self {
            kind,
            weights,
            bounds,
            params,
            qp: QpSolver::new(QpSettings {
                tol_kkt: 1e-8,
                ..QpSettings::default()
            }),
            qp_soft: QpSolver::new(QpSettings::default()),
            sqp,
            warm: None,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn weights(&self) -> &TrackingWeights {
        &self.weights
    }

    /// Forget warm-start memory.
    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Compute the command at nominal index `index` from a measured state
    /// given in either frame.
    pub fn step(&mut self, measured: &VehicleState, traj: &Trajectory, index: usize) -> Result<ControllerOutput> {
        let start = Instant::now();
        let horizon = Horizon::new(traj, index, self.weights.n, &self.params)?;
        let x0 = to_frame(measured, horizon.frame, &self.params).to_vector() - horizon.x_nom[0];
        let warm = self.shifted_warm(index, horizon.n());

        let result = match self.kind {
            ControllerKind::Lpv => self.solve_linear(&horizon, &horizon.mats, &x0, warm.as_deref(), index),
            ControllerKind::Lti => {
                let rho = SchedulingPoint::from_state_input(
                    &VehicleState::from_vector(&(horizon.x_nom[0] + x0), horizon.frame),
                    &horizon.u_nom[0],
                    horizon.frame,
                );
                let frozen = vec![embed_at(&rho, &self.params, traj.ts); horizon.n()];
                self.solve_linear(&horizon, &frozen, &x0, warm.as_deref(), index)
            }
            ControllerKind::Nl => self.solve_nonlinear(&horizon, &x0, warm.as_deref(), index),
        };
        let (us, xs, status) = result?;
        let input = ControlInput::from_vector(&(horizon.u_nom[0].to_vector() + us[0]));
        self.warm = Some((index, us));
        Ok(ControllerOutput {
            input,
            predicted_error: xs,
            solve_time: start.elapsed().as_secs_f64(),
            status,
        })
    }

    fn shifted_warm(&self, index: usize, n: usize) -> Option<Vec<Vector2<f64>>> {
        let (prev, us) = self.warm.as_ref()?;
        let shift = index.checked_sub(*prev)?;
        if shift > 1 || us.is_empty() {
            return None;
        }
        let last = *us.last()?;
        Some((0..n).map(|i| us.get(i + shift).copied().unwrap_or(last)).collect())
    }

    #[allow(clippy::type_complexity)]
    fn solve_linear(
        &mut self,
        horizon: &Horizon,
        mats: &[LpvMatrices],
        x0: &Vector4<f64>,
        warm: Option<&[Vector2<f64>]>,
        index: usize,
    ) -> Result<(Vec<Vector2<f64>>, Vec<Vector4<f64>>, ControllerStatus)> {
        let n = horizon.n();
        let cond = condense(mats, x0);
        let (u_lo, u_hi) = horizon.input_bounds(&self.params);
        let x_box = horizon.state_bounds(&self.bounds, &self.params);
        let qp = tracking_qp(&cond, &self.weights, &x_box, &u_lo, &u_hi);
        let warm_z = warm.map(|w| DVector::from_iterator(2 * n, w.iter().flat_map(|u| [u[0], u[1]])));

        let sol = self.qp.solve(&qp, warm_z.as_ref())?;
        let (z, status) = if sol.status == QpStatus::Optimal {
            (sol.z, ControllerStatus::Optimal)
        } else {
            debug!(
                "controller: step {index} hard QP {:?}, retrying with slacks",
                sol.status
            );
            let soft = soften(&qp, 4 * n);
            let sol = self.qp_soft.solve(&soft, None)?;
            if sol.status != QpStatus::Optimal {
                return Err(Error::ControllerInfeasible {
                    step: index,
                    reason: format!("relaxed QP {:?}, kkt {:.3e}", sol.status, sol.kkt_residual),
                });
            }
            (sol.z.rows(0, 2 * n).into_owned(), ControllerStatus::Relaxed)
        };
        let us: Vec<Vector2<f64>> = (0..n).map(|i| z.fixed_rows::<2>(2 * i).into_owned()).collect();
        let pred = &cond.free + &cond.gamma * &z;
        let xs = std::iter::once(*x0)
            .chain((0..n).map(|i| pred.fixed_rows::<4>(4 * i).into_owned()))
            .collect();
        Ok((us, xs, status))
    }

    #[allow(clippy::type_complexity)]
    fn solve_nonlinear(
        &mut self,
        horizon: &Horizon,
        x0: &Vector4<f64>,
        warm: Option<&[Vector2<f64>]>,
        index: usize,
    ) -> Result<(Vec<Vector2<f64>>, Vec<Vector4<f64>>, ControllerStatus)> {
        let n = horizon.n();
        let nlp = NlTracking::new(horizon, *x0, &self.weights, &self.bounds, &self.params);
        let us0 = warm.map(<[_]>::to_vec).unwrap_or_else(|| vec![Vector2::zeros(); n]);
        let z0 = nlp.rollout(&us0);
        let sol = self.sqp.solve(&nlp, &z0);
        match sol {
            // A feasible iterate after the iteration limit still improved on
            // the warm start; use it.
            Ok(sol)
                if sol.is_converged()
                    || sol.constraint_violation <= 1e-6
                        && (sol.step_norm <= 1e-4 || sol.status == NlpStatus::MaxIter) =>
            {
                let us = (0..n).map(|i| nlp.u(&sol.z, i)).collect();
                let xs = (0..=n).map(|i| nlp.x(&sol.z, i)).collect();
                Ok((us, xs, ControllerStatus::Optimal))
            }
            other => {
                let why = match other {
                    Ok(s) => format!("{:?}, violation {:.3e}", s.status, s.constraint_violation),
                    Err(e) => e.to_string(),
                };
                warn!("controller: step {index} nonlinear solve failed ({why}), using LPV command");
                let (us, xs, _) = self.solve_linear(horizon, &horizon.mats, x0, warm, index)?;
                Ok((us, xs, ControllerStatus::LpvFallback))
            }
        }
    }
}

/// One-shot LPV-MPC step without warm start.
pub fn lpv_mpc_step(
    measured: &VehicleState,
    traj: &Trajectory,
    index: usize,
    weights: &TrackingWeights,
    bounds: &DeviationBounds,
    params: &VehicleParams,
) -> Result<ControllerOutput> {
    Controller::new(ControllerKind::Lpv, weights.clone(), *bounds, *params)?.step(measured, traj, index)
}

/// One-shot adaptive LTI-MPC step without warm start.
pub fn lti_mpc_step(
    measured: &VehicleState,
    traj: &Trajectory,
    index: usize,
    weights: &TrackingWeights,
    bounds: &DeviationBounds,
    params: &VehicleParams,
) -> Result<ControllerOutput> {
    Controller::new(ControllerKind::Lti, weights.clone(), *bounds, *params)?.step(measured, traj, index)
}

/// One-shot nonlinear MPC step without warm start.
pub fn nl_mpc_step(
    measured: &VehicleState,
    traj: &Trajectory,
    index: usize,
    weights: &TrackingWeights,
    bounds: &DeviationBounds,
    params: &VehicleParams,
) -> Result<ControllerOutput> {
    Controller::new(ControllerKind::Nl, weights.clone(), *bounds, *params)?.step(measured, traj, index)
}
