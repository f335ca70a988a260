//! Line-search SQP for smooth nonlinear programs
//!
//! ```text
//! min f(z)  s.t.  c_eq(z) = 0,  c_in(z) <= 0,  lb <= z <= ub
//! ```
//!
//! Each iteration solves a QP in the step `d` with the dense active-set
//! solver and globalizes with an l1 merit function. When the linearized
//! constraints are inconsistent the subproblem is relaxed with l1 slacks.

use log::{debug, trace, warn};
use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::qp::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};

/// Problem callbacks. Jacobians are dense, one row per constraint.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;

    fn objective(&self, z: &DVector<f64>) -> f64;
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    /// Variable box. Infinite entries are allowed.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_vars();
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    /// Hessian of the objective, used in Gauss-Newton mode. Problems with
    /// least-squares structure return the Gauss-Newton approximation.
    fn objective_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianMode {
    /// Objective Hessian from the problem, constraint curvature ignored.
    #[default]
    GaussNewton,
    /// Damped BFGS approximation of the Lagrangian Hessian.
    Bfgs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpConfig {
    pub tol_feas: f64,
    pub tol_step: f64,
    pub max_iter: usize,
    pub hessian: HessianMode,
    /// Sufficient decrease parameter of the Armijo test.
    pub armijo: f64,
    /// Smallest line-search step before giving up.
    pub min_alpha: f64,
    /// Slack weight floor in the relaxed subproblem.
    pub elastic_weight: f64,
    pub qp: QpSettings,
}

impl Default for SqpConfig {
    fn default() -> Self {
        Self {
            tol_feas: 1e-5,
            tol_step: 1e-6,
            max_iter: 200,
            hessian: HessianMode::GaussNewton,
            armijo: 1e-4,
            min_alpha: 1e-10,
            elastic_weight: 1e3,
            qp: QpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlpStatus {
    Converged,
    MaxIter,
    QpFailed,
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: NlpStatus,
    /// Infinity norm of equality residuals, positive inequality parts and
    /// bound violations.
    pub constraint_violation: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    /// Norm of the last computed step.
    pub step_norm: f64,
    pub lambda_eq: DVector<f64>,
    pub lambda_ineq: DVector<f64>,
    /// Merit value after each accepted step, each with the penalty in force
    /// when the step was taken, paired with the value before it.
    pub merit_history: Vec<(f64, f64)>,
    /// Whether the returned point is the final iterate or an earlier one
    /// kept because it was better.
    pub returned_best: bool,
}

impl NlpSolution {
    pub fn is_converged(&self) -> bool {
        self.status == NlpStatus::Converged
    }
}

struct Eval {
    f: f64,
    ceq: DVector<f64>,
    cin: DVector<f64>,
}

impl Eval {
    fn new<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>) -> Self {
        Self {
            f: p.objective(z),
            ceq: p.eq_constraints(z),
            cin: p.ineq_constraints(z),
        }
    }

    fn l1_violation(&self) -> f64 {
        self.ceq.iter().map(|c| c.abs()).sum::<f64>() + self.cin.iter().map(|c| c.max(0.0)).sum::<f64>()
    }

    fn inf_violation(&self) -> f64 {
        let e = self.ceq.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        self.cin.iter().fold(e, |m, c| m.max(*c))
    }

    fn merit(&self, mu: f64) -> f64 {
        self.f + mu * self.l1_violation()
    }
}

fn bound_violation(z: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> f64 {
    z.iter()
        .zip(lb.iter().zip(ub.iter()))
        .fold(0.0, |m, (v, (l, u))| m.max(l - v).max(v - u))
}

#[derive(Debug, Clone)]
pub struct SqpSolver {
    config: SqpConfig,
    qp: QpSolver,
}

impl SqpSolver {
    pub fn new(config: SqpConfig) -> Self {
        Self {
            config,
            qp: QpSolver::new(config.qp),
        }
    }

    pub fn config(&self) -> &SqpConfig {
        &self.config
    }

    pub fn solve<P: NlpProblem + ?Sized>(&mut self, problem: &P, z0: &DVector<f64>) -> Result<NlpSolution> {
        let cfg = self.config;
        let n = problem.num_vars();
        let (lb, ub) = problem.bounds();
        let mut z = z0.zip_zip_map(&lb, &ub, |v, l, u| v.clamp(l, u.max(l)));

        let mut ev = Eval::new(problem, &z);
        let mut grad = problem.gradient(&z);
        let mut jeq = problem.eq_jacobian(&z);
        let mut jin = problem.ineq_jacobian(&z);
        let mut lam_eq = DVector::zeros(ev.ceq.len());
        let mut lam_in = DVector::zeros(ev.cin.len());
        let mut bfgs = DMatrix::<f64>::identity(n, n);
        let mut mu = 1.0_f64;

        let mut history = Vec::new();
        let mut iterations = 0;
        let mut step_norm = f64::INFINITY;
        let mut status = NlpStatus::MaxIter;
        let mut best: Option<(DVector<f64>, f64, f64)> = None;

        for it in 0..=cfg.max_iter {
            let viol = ev.inf_violation().max(bound_violation(&z, &lb, &ub));
            update_best(&mut best, &z, ev.f, viol, cfg.tol_feas);

            let hess = match cfg.hessian {
                HessianMode::GaussNewton => problem.objective_hessian(&z).unwrap_or_else(|| DMatrix::identity(n, n)),
                HessianMode::Bfgs => bfgs.clone(),
            };

            let qp_started = std::time::Instant::now();
            let Some(sub) = self.subproblem(&hess, &grad, &ev, &jeq, &jin, &z, &lb, &ub, mu)? else {
                warn!("sqp: subproblem failed at iteration {it}");
                status = NlpStatus::QpFailed;
                break;
            };
            let d = sub.d;
            step_norm = d.amax();
            trace!(
                "sqp it {it}: subproblem {:.1} ms, relaxed {}, |d| {step_norm:.3e}, violation {viol:.3e}",
                qp_started.elapsed().as_secs_f64() * 1e3,
                sub.relaxed
            );
            if step_norm <= cfg.tol_step && viol <= cfg.tol_feas {
                lam_eq = sub.lam_eq;
                lam_in = sub.lam_in;
                status = NlpStatus::Converged;
                break;
            }
            if it == cfg.max_iter {
                break;
            }

            // Penalty large enough for the step to be a descent direction.
            let lam_max = if sub.relaxed {
                0.0
            } else {
                sub.lam_eq.amax().max(sub.lam_in.amax())
            };
            if mu < 1.1 * lam_max {
                mu = (1.5 * lam_max).max(2.0 * mu);
            }
            let lin_viol = sub.linear_violation;
            let mut dd = grad.dot(&d) + mu * (lin_viol - ev.l1_violation());
            let dhd = d.dot(&(&hess * &d));
            if dd >= 0.0 || dd > -0.5 * dhd.max(0.0) {
                let reduction = ev.l1_violation() - lin_viol;
                if reduction > 1e-14 {
                    let need = (grad.dot(&d) + 0.5 * dhd.max(0.0)) / (0.9 * reduction);
                    if need > mu {
                        mu = need;
                    }
                }
                dd = grad.dot(&d) + mu * (lin_viol - ev.l1_violation());
            }
            if dd >= 0.0 {
                // No descent even after the penalty update; accept only if
                // the merit actually decreases below.
                dd = -f64::EPSILON * (1.0 + ev.merit(mu).abs());
            }

            let phi0 = ev.merit(mu);
            let mut alpha = 1.0;
            let accepted = loop {
                let trial = &z + &d * alpha;
                let te = Eval::new(problem, &trial);
                let phi = te.merit(mu);
                if phi.is_finite() && phi <= phi0 + cfg.armijo * alpha * dd {
                    break Some((trial, te, phi));
                }
                alpha *= 0.5;
                if alpha < cfg.min_alpha {
                    break None;
                }
            };
            let Some((z_new, ev_new, phi_new)) = accepted else {
                debug!("sqp: line search stalled at iteration {it} (step {step_norm:.3e}, violation {viol:.3e})");
                lam_eq = sub.lam_eq;
                lam_in = sub.lam_in;
                break;
            };
            trace!("sqp it {it}: alpha {alpha:.3e} merit {phi0:.6e} -> {phi_new:.6e} mu {mu:.3e}");
            history.push((phi0, phi_new));
            iterations += 1;

            let grad_new = problem.gradient(&z_new);
            let jeq_new = problem.eq_jacobian(&z_new);
            let jin_new = problem.ineq_jacobian(&z_new);
            if cfg.hessian == HessianMode::Bfgs {
                let s = &z_new - &z;
                let lag = |g: &DVector<f64>, je: &DMatrix<f64>, ji: &DMatrix<f64>| {
                    g + je.tr_mul(&sub.lam_eq) + ji.tr_mul(&sub.lam_in)
                };
                let y = lag(&grad_new, &jeq_new, &jin_new) - lag(&grad, &jeq, &jin);
                damped_bfgs_update(&mut bfgs, &s, &y);
            }

            z = z_new;
            ev = ev_new;
            grad = grad_new;
            jeq = jeq_new;
            jin = jin_new;
            lam_eq = sub.lam_eq;
            lam_in = sub.lam_in;
        }

        let viol = ev.inf_violation().max(bound_violation(&z, &lb, &ub));
        let mut returned_best = false;
        if status != NlpStatus::Converged {
            if let Some((bz, bf, bv)) = best {
                if better(bf, bv, ev.f, viol, cfg.tol_feas) {
                    z = bz;
                    ev = Eval::new(problem, &z);
                    returned_best = true;
                }
            }
        }
        let viol = ev.inf_violation().max(bound_violation(&z, &lb, &ub));
        debug!(
            "sqp: {:?} after {iterations} steps, f = {:.6e}, violation = {viol:.3e}",
            status, ev.f
        );
        Ok(NlpSolution {
            z,
            objective: ev.f,
            status,
            constraint_violation: viol,
            iterations,
            step_norm,
            lambda_eq: lam_eq,
            lambda_ineq: lam_in,
            merit_history: history,
            returned_best,
        })
    }

    /// Build and solve the step subproblem, relaxing it when needed.
    #[allow(clippy::too_many_arguments)]
    fn subproblem(
        &mut self,
        hess: &DMatrix<f64>,
        grad: &DVector<f64>,
        ev: &Eval,
        jeq: &DMatrix<f64>,
        jin: &DMatrix<f64>,
        z: &DVector<f64>,
        lb: &DVector<f64>,
        ub: &DVector<f64>,
        mu: f64,
    ) -> Result<Option<Step>> {
        let n = z.len();
        let me = jeq.nrows();
        let mi = jin.nrows();
        let boxed: Vec<usize> = (0..n).filter(|&j| lb[j].is_finite() || ub[j].is_finite()).collect();

        // Plain subproblem.
        let rows = mi + boxed.len();
        let mut c = DMatrix::zeros(rows, n);
        let mut lo = DVector::from_element(rows, f64::NEG_INFINITY);
        let mut hi = DVector::zeros(rows);
        c.view_mut((0, 0), (mi, n)).copy_from(jin);
        hi.rows_mut(0, mi).copy_from(&(-&ev.cin));
        for (r, &j) in boxed.iter().enumerate() {
            c[(mi + r, j)] = 1.0;
            lo[mi + r] = lb[j] - z[j];
            hi[mi + r] = ub[j] - z[j];
        }
        let qp = QpProblem::new(hess.clone(), grad.clone())
            .with_equalities(jeq.clone(), -&ev.ceq)
            .with_inequalities(c.clone(), lo.clone(), hi.clone());
        let sol = self.qp.solve(&qp, None)?;
        if sol.status == QpStatus::Optimal {
            return Ok(Some(Step {
                lam_eq: sol.y_eq.clone(),
                lam_in: sol.y_in.rows(0, mi).into_owned(),
                d: sol.z,
                linear_violation: 0.0,
                relaxed: false,
            }));
        }
        debug!("sqp: subproblem {:?}, relaxing", sol.status);

        // First relaxation: quadratic penalty on the linearized equalities,
        // inequalities kept hard. Same size as the plain subproblem.
        if me > 0 {
            let scale = hess.diagonal().amax().max(1.0);
            let rho = self.config.elastic_weight * scale;
            let hp = hess + jeq.tr_mul(jeq) * rho;
            let gp = grad + jeq.tr_mul(&ev.ceq) * rho;
            let pqp = QpProblem::new(hp, gp).with_inequalities(c.clone(), lo.clone(), hi.clone());
            let psol = self.qp.solve(&pqp, None)?;
            if psol.status == QpStatus::Optimal {
                let d = psol.z;
                let lin = jeq * &d + &ev.ceq;
                return Ok(Some(Step {
                    lam_eq: DVector::zeros(me),
                    lam_in: psol.y_in.rows(0, mi).into_owned(),
                    linear_violation: lin.lp_norm(1),
                    d,
                    relaxed: true,
                }));
            }
            debug!("sqp: penalized subproblem {:?}", psol.status);
        }

        // Elastic subproblem: variables [d, p, q, s] with
        // jeq d + ceq = p - q, jin d + cin <= s, p, q, s >= 0.
        let w = mu.max(self.config.elastic_weight);
        let nv = n + 2 * me + mi;
        let mut h = DMatrix::zeros(nv, nv);
        h.view_mut((0, 0), (n, n)).copy_from(hess);
        let scale = hess.diagonal().amax().max(1.0);
        for j in 0..nv {
            if h[(j, j)] <= 1e-12 * scale {
                h[(j, j)] += 1e-6 * scale;
            }
        }
        let mut g = DVector::from_element(nv, w);
        g.rows_mut(0, n).copy_from(grad);
        let mut a = DMatrix::zeros(me, nv);
        a.view_mut((0, 0), (me, n)).copy_from(jeq);
        for r in 0..me {
            a[(r, n + r)] = -1.0;
            a[(r, n + me + r)] = 1.0;
        }
        let erows = mi + boxed.len() + 2 * me + mi;
        let mut ce = DMatrix::zeros(erows, nv);
        let mut elo = DVector::from_element(erows, f64::NEG_INFINITY);
        let mut ehi = DVector::from_element(erows, f64::INFINITY);
        ce.view_mut((0, 0), (rows, n)).copy_from(&c);
        elo.rows_mut(0, rows).copy_from(&lo);
        ehi.rows_mut(0, rows).copy_from(&hi);
        for r in 0..mi {
            ce[(r, n + 2 * me + r)] = -1.0;
        }
        for k in 0..(2 * me + mi) {
            ce[(rows + k, n + k)] = 1.0;
            elo[rows + k] = 0.0;
        }
        let eqp = QpProblem::new(h, g)
            .with_equalities(a, -&ev.ceq)
            .with_inequalities(ce, elo, ehi);
        let esol: QpSolution = self.qp.solve(&eqp, None)?;
        if esol.status != QpStatus::Optimal {
            warn!("sqp: relaxed subproblem {:?}", esol.status);
            return Ok(None);
        }
        let d = esol.z.rows(0, n).into_owned();
        let linear_violation = esol.z.rows(n, nv - n).sum();
        Ok(Some(Step {
            d,
            lam_eq: esol.y_eq.clone(),
            lam_in: esol.y_in.rows(0, mi).into_owned(),
            linear_violation,
            relaxed: true,
        }))
    }
}

struct Step {
    d: DVector<f64>,
    lam_eq: DVector<f64>,
    lam_in: DVector<f64>,
    /// l1 violation of the linearized constraints at the step.
    linear_violation: f64,
    /// Whether the linearized constraints had to be relaxed. Multipliers of
    /// a relaxed step do not drive the penalty update.
    relaxed: bool,
}

/// Feasible points beat infeasible ones; among feasible points the lower
/// objective wins, otherwise the lower violation.
fn better(f_a: f64, v_a: f64, f_b: f64, v_b: f64, tol: f64) -> bool {
    match (v_a <= tol, v_b <= tol) {
        (true, true) => f_a < f_b,
        (true, false) => true,
        (false, true) => false,
        (false, false) => v_a < v_b,
    }
}

fn update_best(best: &mut Option<(DVector<f64>, f64, f64)>, z: &DVector<f64>, f: f64, v: f64, tol: f64) {
    let replace = match best {
        None => true,
        Some((_, bf, bv)) => better(f, v, *bf, *bv, tol),
    };
    if replace {
        *best = Some((z.clone(), f, v));
    }
}

/// Powell-damped BFGS update keeping `b` positive definite.
pub fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-16 {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= 1e-16 {
        return;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

pub fn sqp_solve<P: NlpProblem + ?Sized>(problem: &P, z0: &DVector<f64>, config: &SqpConfig) -> Result<NlpSolution> {
    SqpSolver::new(*config).solve(problem, z0)
}

/// Largest relative discrepancy between analytic derivatives and central
/// differences at `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub gradient: f64,
    pub eq_jacobian: f64,
    pub ineq_jacobian: f64,
}

impl DerivativeCheck {
    pub fn max(&self) -> f64 {
        self.gradient.max(self.eq_jacobian).max(self.ineq_jacobian)
    }
}

pub fn check_derivatives<P: NlpProblem + ?Sized>(problem: &P, z: &DVector<f64>, h: f64) -> DerivativeCheck {
    let n = z.len();
    let g = problem.gradient(z);
    let je = problem.eq_jacobian(z);
    let ji = problem.ineq_jacobian(z);
    let mut fd_g = DVector::zeros(n);
    let mut fd_e = DMatrix::zeros(je.nrows(), n);
    let mut fd_i = DMatrix::zeros(ji.nrows(), n);
    for j in 0..n {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += h;
        zm[j] -= h;
        fd_g[j] = (problem.objective(&zp) - problem.objective(&zm)) / (2.0 * h);
        fd_e.set_column(
            j,
            &((problem.eq_constraints(&zp) - problem.eq_constraints(&zm)) / (2.0 * h)),
        );
        fd_i.set_column(
            j,
            &((problem.ineq_constraints(&zp) - problem.ineq_constraints(&zm)) / (2.0 * h)),
        );
    }
    let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + b.abs());
    let worst =
        |a: &DMatrix<f64>, b: &DMatrix<f64>| a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| f64::max(m, rel(*x, *y)));
    DerivativeCheck {
        gradient: g.iter().zip(fd_g.iter()).fold(0.0, |m, (x, y)| m.max(rel(*x, *y))),
        eq_jacobian: worst(&je, &fd_e),
        ineq_jacobian: worst(&ji, &fd_i),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::qp_solve;

    /// min (z1-1)^2 + (z2-2)^2 on the unit circle.
    struct Circle;

    impl NlpProblem for Circle {
        fn num_vars(&self) -> usize {
            2
        }
        fn objective(&self, z: &DVector<f64>) -> f64 {
            (z[0] - 1.0).powi(2) + (z[1] - 2.0).powi(2)
        }
        fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * (z[0] - 1.0), 2.0 * (z[1] - 2.0)])
        }
        fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, z[0] * z[0] + z[1] * z[1] - 1.0)
        }
        fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[2.0 * z[0], 2.0 * z[1]])
        }
        fn ineq_constraints(&self, _z: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(0, 2)
        }
        fn objective_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::identity(2, 2) * 2.0)
        }
    }

    /// Quadratic objective with linear constraints.
    struct Lq {
        qp: QpProblem,
    }

    impl Lq {
        fn new() -> Self {
            let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
            let g = DVector::from_vec(vec![-1.0, 2.0, -3.0]);
            let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
            let b = DVector::from_element(1, 1.0);
            let c = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.0]);
            Self {
                qp: QpProblem::new(h, g).with_equalities(a, b).with_inequalities(
                    c,
                    DVector::from_element(1, f64::NEG_INFINITY),
                    DVector::from_element(1, -0.5),
                ),
            }
        }
    }

    impl NlpProblem for Lq {
        fn num_vars(&self) -> usize {
            3
        }
        fn objective(&self, z: &DVector<f64>) -> f64 {
            self.qp.objective(z)
        }
        fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
            &self.qp.h * z + &self.qp.g
        }
        fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
            &self.qp.a_eq * z - &self.qp.b_eq
        }
        fn eq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
            self.qp.a_eq.clone()
        }
        fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
            &self.qp.c_in * z - &self.qp.upper
        }
        fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
            self.qp.c_in.clone()
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (DVector::from_element(3, -0.2), DVector::from_element(3, 2.0))
        }
        fn objective_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(self.qp.h.clone())
        }
    }

    #[test]
    fn circle_with_bfgs_and_exact_hessian() {
        let expected = DVector::from_vec(vec![1.0, 2.0]) / 5f64.sqrt();
        for mode in [HessianMode::Bfgs, HessianMode::GaussNewton] {
            let cfg = SqpConfig {
                hessian: mode,
                ..SqpConfig::default()
            };
            let sol = sqp_solve(&Circle, &DVector::from_vec(vec![1.0, 0.0]), &cfg).unwrap();
            assert!(sol.is_converged(), "{mode:?}: {:?}", sol.status);
            assert!((&sol.z - &expected).amax() < 1e-6, "{mode:?}: {}", sol.z);
            assert!(sol.constraint_violation <= cfg.tol_feas);
        }
    }

    #[test]
    fn linear_quadratic_takes_one_step() {
        let lq = Lq::new();
        let sol = sqp_solve(&lq, &DVector::zeros(3), &SqpConfig::default()).unwrap();
        assert!(sol.is_converged());
        assert_eq!(sol.iterations, 1);

        let mut reference = lq.qp.clone();
        let rows = reference.c_in.nrows();
        let mut c = DMatrix::zeros(rows + 3, 3);
        c.view_mut((0, 0), (rows, 3)).copy_from(&reference.c_in);
        c.view_mut((rows, 0), (3, 3)).fill_with_identity();
        let lo = DVector::from_vec(vec![f64::NEG_INFINITY, -0.2, -0.2, -0.2]);
        let hi = DVector::from_vec(vec![-0.5, 2.0, 2.0, 2.0]);
        reference = reference.with_inequalities(c, lo, hi);
        let qp = qp_solve(&reference, QpSettings::default()).unwrap();
        assert!((&sol.z - &qp.z).amax() < 1e-8);
    }

    #[test]
    fn warm_start_from_solution() {
        let cfg = SqpConfig {
            hessian: HessianMode::Bfgs,
            ..SqpConfig::default()
        };
        let first = sqp_solve(&Circle, &DVector::from_vec(vec![-0.3, 0.2]), &cfg).unwrap();
        assert!(first.is_converged());
        let again = sqp_solve(&Circle, &first.z, &cfg).unwrap();
        assert!(again.is_converged());
        assert!(again.iterations <= 2, "{}", again.iterations);
    }

    #[test]
    fn merit_never_increases() {
        let cfg = SqpConfig {
            hessian: HessianMode::Bfgs,
            ..SqpConfig::default()
        };
        let sol = sqp_solve(&Circle, &DVector::from_vec(vec![3.0, -2.0]), &cfg).unwrap();
        assert!(!sol.merit_history.is_empty());
        for (before, after) in &sol.merit_history {
            assert!(after <= before, "{after} > {before}");
        }
    }

    #[test]
    fn inconsistent_linearization_is_relaxed() {
        // At the origin the circle's linearization reads 0 * d = 1.
        let sol = sqp_solve(&Circle, &DVector::zeros(2), &SqpConfig::default()).unwrap();
        assert!(sol.is_converged(), "{:?}", sol.status);
        let expected = DVector::from_vec(vec![1.0, 2.0]) / 5f64.sqrt();
        assert!((&sol.z - &expected).amax() < 1e-6);
    }

    #[test]
    fn derivative_check_flags_wrong_gradient() {
        struct Wrong;
        impl NlpProblem for Wrong {
            fn num_vars(&self) -> usize {
                1
            }
            fn objective(&self, z: &DVector<f64>) -> f64 {
                z[0].powi(3)
            }
            fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
                DVector::from_element(1, 2.0 * z[0] * z[0])
            }
            fn eq_constraints(&self, _z: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(0)
            }
            fn eq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(0, 1)
            }
            fn ineq_constraints(&self, _z: &DVector<f64>) -> DVector<f64> {
                DVector::zeros(0)
            }
            fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::zeros(0, 1)
            }
        }
        let z = DVector::from_element(1, 1.5);
        assert!(check_derivatives(&Wrong, &z, 1e-6).gradient > 0.1);
        assert!(check_derivatives(&Circle, &z.push(0.3), 1e-6).max() < 1e-8);
    }

    #[test]
    fn damped_update_stays_positive_definite() {
        let mut b = DMatrix::identity(2, 2);
        let s = DVector::from_vec(vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![-1.0, 0.5]);
        damped_bfgs_update(&mut b, &s, &y);
        assert!(b.clone().cholesky().is_some());
        // Damped secant condition: theta = 0.4 for this pair.
        let r = &y * 0.4 + &s * 0.6;
        assert!((&b * &s - r).amax() < 1e-12);
    }
}
