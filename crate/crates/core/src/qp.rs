//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize     1/2 z' H z + g' z
//!     subject to   A_eq z  = b_eq
//!                  lower <= C z <= upper
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The method starts
//! from the unconstrained minimizer and adds violated constraints one at a
//! time while keeping the multipliers dual feasible, so an empty violation
//! list certifies optimality and a constraint that cannot be added certifies
//! primal infeasibility. It needs `H` positive definite; a `H` that is only
//! positive definite on the null space of the equalities is handled by adding
//! a multiple of `A_eq' A_eq`, which leaves the minimizer unchanged.
//!
//! Rows of `C` with `lower == upper` are treated as equalities. Infinite
//! bounds switch the corresponding side off.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c_in: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            c_in: DMatrix::zeros(0, n),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn with_inequalities(mut self, c_in: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.c_in = c_in;
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    fn check_dims(&self) -> Result<()> {
        let n = self.g.len();
        let bad = |what: &str| Err(Error::Dimension(format!("qp: {what}")));
        if self.h.nrows() != n || self.h.ncols() != n {
            return bad("h must be n x n");
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("a_eq / b_eq");
        }
        if self.c_in.ncols() != n || self.c_in.nrows() != self.lower.len() || self.c_in.nrows() != self.upper.len() {
            return bad("c_in / lower / upper");
        }
        if n == 0 {
            return bad("no variables");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Equality multipliers, `H z + g + A_eq' y_eq + C' y_in = 0`.
    pub y_eq: DVector<f64>,
    /// Inequality multipliers: positive on an active upper bound, negative
    /// on an active lower bound.
    pub y_in: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol_kkt: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-6,
            max_iter: 4000,
        }
    }
}

/// Infinity-norm KKT residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Residuals computed directly from the problem data, independent of the
/// solver's internal factorizations.
pub fn kkt_residuals(p: &QpProblem, z: &DVector<f64>, y_eq: &DVector<f64>, y_in: &DVector<f64>) -> KktResiduals {
    let grad = &p.h * z + &p.g + p.a_eq.tr_mul(y_eq) + p.c_in.tr_mul(y_in);
    let stationarity = grad.amax();

    let mut primal: f64 = 0.0;
    if p.a_eq.nrows() > 0 {
        primal = primal.max((&p.a_eq * z - &p.b_eq).amax());
    }
    let mut complementarity: f64 = 0.0;
    if p.c_in.nrows() > 0 {
        let cz = &p.c_in * z;
        for i in 0..cz.len() {
            let (lo, hi, y) = (p.lower[i], p.upper[i], y_in[i]);
            primal = primal.max(lo - cz[i]).max(cz[i] - hi);
            if y > 0.0 {
                // Upper side active; a multiplier on an infinite side is wrong.
                let slack = if hi.is_finite() {
                    (hi - cz[i]).abs()
                } else {
                    f64::INFINITY
                };
                complementarity = complementarity.max(y * slack);
            } else if y < 0.0 {
                let slack = if lo.is_finite() {
                    (cz[i] - lo).abs()
                } else {
                    f64::INFINITY
                };
                complementarity = complementarity.max(-y * slack);
            }
        }
    }
    KktResiduals {
        stationarity,
        primal,
        complementarity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Source {
    /// Row of `a_eq`.
    Eq(usize),
    /// Row of `c_in` with `lower == upper`.
    Fixed(usize),
    /// `c z >= lower`.
    Lower(usize),
    /// `-c z >= -upper`.
    Upper(usize),
}

impl Source {
    fn is_equality(self) -> bool {
        matches!(self, Source::Eq(_) | Source::Fixed(_))
    }
}

/// Constraint in `n' z >= rhs` form (or `=` for equalities).
#[derive(Debug, Clone, Copy)]
struct Constraint {
    source: Source,
    sign: f64,
}

impl Constraint {
    fn normal(&self, p: &QpProblem) -> DVector<f64> {
        let row = match self.source {
            Source::Eq(i) => p.a_eq.row(i).transpose(),
            Source::Fixed(i) | Source::Lower(i) | Source::Upper(i) => p.c_in.row(i).transpose(),
        };
        row * self.sign
    }

    fn rhs(&self, p: &QpProblem) -> f64 {
        let raw = match self.source {
            Source::Eq(i) => p.b_eq[i],
            Source::Fixed(i) | Source::Lower(i) => p.lower[i],
            Source::Upper(i) => p.upper[i],
        };
        raw * self.sign
    }
}

/// Goldfarb-Idnani solver. Holds its working matrices; one solve at a time.
#[derive(Debug, Clone)]
pub struct QpSolver {
    settings: QpSettings,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Default for QpSolver {
    fn default() -> Self {
        Self::new(QpSettings::default())
    }
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self {
            settings,
            j: DMatrix::zeros(0, 0),
            r: DMatrix::zeros(0, 0),
        }
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    /// Solve `p`. `warm` is an initial guess; inequality constraints that
    /// are active at the guess are tried first.
    pub fn solve(&mut self, p: &QpProblem, warm: Option<&DVector<f64>>) -> Result<QpSolution> {
        p.check_dims()?;
        let n = p.num_vars();

        let mut problem_sym;
        let p = {
            let asym = (&p.h - p.h.transpose()).amax();
            if asym > 1e-10 {
                warn!("qp: cost matrix asymmetric by {asym:.3e}, symmetrizing");
            }
            if asym > 0.0 {
                problem_sym = p.clone();
                problem_sym.h = (&p.h + p.h.transpose()) * 0.5;
                &problem_sym
            } else {
                p
            }
        };

        for i in 0..p.lower.len() {
            if p.lower[i] > p.upper[i] || p.lower[i].is_nan() || p.upper[i].is_nan() {
                return Ok(self.infeasible(p, DVector::zeros(n), 0));
            }
        }

        let mut equalities = Vec::new();
        let mut inequalities = Vec::new();
        for i in 0..p.a_eq.nrows() {
            equalities.push(Constraint {
                source: Source::Eq(i),
                sign: 1.0,
            });
        }
        for i in 0..p.c_in.nrows() {
            let (lo, hi) = (p.lower[i], p.upper[i]);
            if lo == hi {
                equalities.push(Constraint {
                    source: Source::Fixed(i),
                    sign: 1.0,
                });
                continue;
            }
            if lo.is_finite() {
                inequalities.push(Constraint {
                    source: Source::Lower(i),
                    sign: 1.0,
                });
            }
            if hi.is_finite() {
                inequalities.push(Constraint {
                    source: Source::Upper(i),
                    sign: -1.0,
                });
            }
        }

        let (h_work, g_work) = self.regularized_cost(p, &equalities);
        let chol = match factor(&h_work) {
            Some(l) => l,
            None => {
                // Not even positive definite on the equality null space.
                let scale = max_diag(&h_work).max(1.0);
                let mut ridge = 1e-10 * scale;
                loop {
                    let mut hr = h_work.clone();
                    for i in 0..n {
                        hr[(i, i)] += ridge;
                    }
                    if let Some(l) = factor(&hr) {
                        warn!("qp: cost not positive definite, added ridge {ridge:.1e}");
                        break l;
                    }
                    ridge *= 100.0;
                    if ridge > scale {
                        return Err(Error::InvalidParams(
                            "qp: cost matrix is not positive semidefinite".into(),
                        ));
                    }
                }
            }
        };

        // J = L^{-T}, so that J J' = H^{-1}.
        let l_inv = chol
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("cholesky factor has a nonzero diagonal");
        self.j = l_inv.transpose();
        if self.r.nrows() != n {
            self.r = DMatrix::zeros(n, n);
        } else {
            self.r.fill(0.0);
        }

        let mut z = -(&self.j * self.j.tr_mul(&g_work));
        let mut active: Vec<Constraint> = Vec::new();
        let mut mult: Vec<f64> = Vec::new();
        let mut iterations = 0usize;

        let norms: Vec<f64> = inequalities.iter().map(|c| c.normal(p).norm()).collect();
        let index_of: std::collections::HashMap<Source, usize> =
            inequalities.iter().enumerate().map(|(k, c)| (c.source, k)).collect();
        let viol_tol = 1e-3 * self.settings.tol_kkt;

        // Equalities first; they are never dropped.
        for mut c in equalities.iter().copied() {
            let nv = c.normal(p);
            let nn = nv.norm();
            let resid = nv.dot(&z) - c.rhs(p);
            if nn == 0.0 {
                if resid.abs() > viol_tol {
                    return Ok(self.infeasible(p, z, iterations));
                }
                continue;
            }
            if resid > 0.0 {
                c.sign = -1.0;
            }
            match self.add_constraint(p, c, &mut z, &mut active, &mut mult, &mut iterations, true) {
                AddOutcome::Added => {}
                AddOutcome::Dependent => {
                    let resid = c.normal(p).dot(&z) - c.rhs(p);
                    if resid.abs() > viol_tol * nn.max(1.0) {
                        return Ok(self.infeasible(p, z, iterations));
                    }
                    debug!("qp: redundant equality {:?} skipped", c.source);
                }
                AddOutcome::Infeasible => return Ok(self.infeasible(p, z, iterations)),
                AddOutcome::MaxIter => return Ok(self.finish(p, z, &active, &mult, QpStatus::MaxIter, iterations)),
            }
        }

        let hinted: Vec<bool> = match warm {
            Some(w) if w.len() == n => inequalities
                .iter()
                .map(|c| (c.normal(p).dot(w) - c.rhs(p)).abs() <= 1e-7 * (1.0 + c.rhs(p).abs()))
                .collect(),
            _ => vec![false; inequalities.len()],
        };

        for (k, c) in inequalities.iter().enumerate() {
            // Zero rows never change; they are either always satisfied or not.
            if norms[k] == 0.0 && c.rhs(p) > viol_tol {
                return Ok(self.infeasible(p, z, iterations));
            }
        }

        let c_rows = SparseRows::new(&p.c_in);
        let mut is_active = vec![false; inequalities.len()];
        loop {
            // Pick the most violated constraint, preferring hinted ones.
            let cz = c_rows.mul(&z);
            let mut best: Option<(usize, f64)> = None;
            let mut best_hinted: Option<(usize, f64)> = None;
            for (k, c) in inequalities.iter().enumerate() {
                if is_active[k] || norms[k] == 0.0 {
                    continue;
                }
                let slack = match c.source {
                    Source::Lower(i) => cz[i] - p.lower[i],
                    Source::Upper(i) => p.upper[i] - cz[i],
                    _ => unreachable!("equalities are not in the inequality list"),
                } / norms[k];
                if slack < -viol_tol {
                    let v = -slack;
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((k, v));
                    }
                    if hinted[k] && best_hinted.is_none_or(|(_, b)| v > b) {
                        best_hinted = Some((k, v));
                    }
                }
            }
            let Some((k, _)) = best_hinted.or(best) else {
                break;
            };
            let c = inequalities[k];
            match self.add_constraint(p, c, &mut z, &mut active, &mut mult, &mut iterations, false) {
                AddOutcome::Added => {}
                AddOutcome::Dependent | AddOutcome::Infeasible => return Ok(self.infeasible(p, z, iterations)),
                AddOutcome::MaxIter => return Ok(self.finish(p, z, &active, &mult, QpStatus::MaxIter, iterations)),
            }
            is_active.fill(false);
            for a in &active {
                if let Some(&pos) = index_of.get(&a.source) {
                    is_active[pos] = true;
                }
            }
        }

        Ok(self.finish(p, z, &active, &mult, QpStatus::Optimal, iterations))
    }

    /// Cost used by the factorization: `H + rho A'A` when `H` alone is not
    /// positive definite and there are equality rows to borrow curvature from.
    fn regularized_cost(&self, p: &QpProblem, equalities: &[Constraint]) -> (DMatrix<f64>, DVector<f64>) {
        if factor(&p.h).is_some() || equalities.is_empty() {
            return (p.h.clone(), p.g.clone());
        }
        let n = p.num_vars();
        let m = equalities.len();
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        let mut max_row: f64 = 0.0;
        for (i, c) in equalities.iter().enumerate() {
            let nv = c.normal(p);
            max_row = max_row.max(nv.norm_squared());
            a.set_row(i, &nv.transpose());
            b[i] = c.rhs(p);
        }
        if max_row == 0.0 {
            return (p.h.clone(), p.g.clone());
        }
        let rho = max_diag(&p.h).max(1.0) / max_row;
        debug!("qp: augmenting cost with rho = {rho:.3e}");
        let mut h = p.h.clone();
        let mut nz = Vec::with_capacity(n);
        for i in 0..m {
            nz.clear();
            nz.extend((0..n).filter(|&j| a[(i, j)] != 0.0));
            for &j in &nz {
                let aj = rho * a[(i, j)];
                for &k in &nz {
                    h[(k, j)] += aj * a[(i, k)];
                }
            }
        }
        let g = &p.g - a.tr_mul(&b) * rho;
        (h, g)
    }

    #[allow(clippy::too_many_arguments)]
    fn add_constraint(
        &mut self,
        p: &QpProblem,
        c: Constraint,
        z: &mut DVector<f64>,
        active: &mut Vec<Constraint>,
        mult: &mut Vec<f64>,
        iterations: &mut usize,
        equality_phase: bool,
    ) -> AddOutcome {
        let n = z.len();
        let np = c.normal(p);
        let rhs = c.rhs(p);
        let mut u_new = 0.0;
        loop {
            *iterations += 1;
            if *iterations > self.settings.max_iter {
                return AddOutcome::MaxIter;
            }
            let q = active.len();
            let d = sparse_tr_mul(&self.j, &np);
            let d_norm2 = d.norm_squared();
            let tail = d.rows(q, n - q);
            let tail_norm2 = tail.norm_squared();
            let dir = self.j.columns(q, n - q) * tail;

            // Dual direction r = R^{-1} d[..q].
            let mut r = DVector::zeros(q);
            for i in (0..q).rev() {
                let mut s = d[i];
                for k in i + 1..q {
                    s -= self.r[(i, k)] * r[k];
                }
                r[i] = s / self.r[(i, i)];
            }

            let rmax = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (k, a) in active.iter().enumerate() {
                if a.source.is_equality() {
                    continue;
                }
                if r[k] > 1e-12 * rmax {
                    let t = mult[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(k);
                    }
                }
            }

            let slack = np.dot(z) - rhs;
            let dependent = tail_norm2 <= 1e-20 * d_norm2.max(f64::MIN_POSITIVE);
            let t2 = if dependent {
                f64::INFINITY
            } else {
                (-slack / tail_norm2).max(0.0)
            };

            if t1.is_infinite() && t2.is_infinite() {
                return if equality_phase {
                    AddOutcome::Dependent
                } else {
                    AddOutcome::Infeasible
                };
            }

            if t2.is_infinite() {
                // Dual step only, then drop the blocking constraint.
                for k in 0..q {
                    mult[k] -= t1 * r[k];
                }
                u_new += t1;
                self.drop_constraint(drop_at.unwrap(), active, mult);
                continue;
            }

            let t = t1.min(t2);
            z.axpy(t, &dir, 1.0);
            for k in 0..q {
                mult[k] -= t * r[k];
            }
            u_new += t;

            if t2 <= t1 {
                self.append(d, q, n);
                active.push(c);
                mult.push(u_new);
                return AddOutcome::Added;
            }
            self.drop_constraint(drop_at.unwrap(), active, mult);
        }
    }

    /// Rotate `d` so that only its first `q + 1` entries are nonzero and
    /// append it as the new column of R.
    fn append(&mut self, mut d: DVector<f64>, q: usize, n: usize) {
        for j in (q + 1..n).rev() {
            let (a, b) = (d[j - 1], d[j]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[j - 1] = h;
            d[j] = 0.0;
            rotate_columns(&mut self.j, j - 1, j, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
    }

    fn drop_constraint(&mut self, k: usize, active: &mut Vec<Constraint>, mult: &mut Vec<f64>) {
        let q = active.len();
        active.remove(k);
        mult.remove(k);
        for col in k..q - 1 {
            for row in 0..q {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        // Restore triangular form.
        for j in k..q - 1 {
            let (a, b) = (self.r[(j, j)], self.r[(j + 1, j)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in j..q - 1 {
                let (x, y) = (self.r[(j, col)], self.r[(j + 1, col)]);
                self.r[(j, col)] = c * x + s * y;
                self.r[(j + 1, col)] = -s * x + c * y;
            }
            self.r[(j + 1, j)] = 0.0;
            rotate_columns(&mut self.j, j, j + 1, c, s);
        }
    }

    fn finish(
        &self,
        p: &QpProblem,
        z: DVector<f64>,
        active: &[Constraint],
        mult: &[f64],
        mut status: QpStatus,
        iterations: usize,
    ) -> QpSolution {
        let mut y_eq = DVector::zeros(p.a_eq.nrows());
        let mut y_in = DVector::zeros(p.c_in.nrows());
        // H z + g = sum u_i n_i with n_i = sign * row.
        for (c, &u) in active.iter().zip(mult) {
            match c.source {
                Source::Eq(i) => y_eq[i] = -u * c.sign,
                Source::Fixed(i) | Source::Lower(i) | Source::Upper(i) => y_in[i] += -u * c.sign,
            }
        }
        let kkt = kkt_residuals(p, &z, &y_eq, &y_in);
        let kkt_residual = kkt.max();
        if status == QpStatus::Optimal && kkt_residual > self.settings.tol_kkt {
            warn!(
                "qp: active set converged but KKT residual {kkt_residual:.3e} exceeds {:.1e} ({kkt:?})",
                self.settings.tol_kkt
            );
            status = QpStatus::MaxIter;
        }
        QpSolution {
            objective: p.objective(&z),
            z,
            status,
            kkt_residual,
            iterations,
            y_eq,
            y_in,
        }
    }

    fn infeasible(&self, p: &QpProblem, z: DVector<f64>, iterations: usize) -> QpSolution {
        let y_eq = DVector::zeros(p.a_eq.nrows());
        let y_in = DVector::zeros(p.c_in.nrows());
        let kkt_residual = kkt_residuals(p, &z, &y_eq, &y_in).max();
        QpSolution {
            objective: p.objective(&z),
            z,
            status: QpStatus::Infeasible,
            kkt_residual,
            iterations,
            y_eq,
            y_in,
        }
    }
}

enum AddOutcome {
    Added,
    Dependent,
    Infeasible,
    MaxIter,
}

/// Convenience wrapper around a fresh [`QpSolver`].
pub fn qp_solve(p: &QpProblem, settings: QpSettings) -> Result<QpSolution> {
    QpSolver::new(settings).solve(p, None)
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    debug_assert!(a < b);
    let n = m.nrows();
    let (head, tail) = m.as_mut_slice().split_at_mut(b * n);
    let ca = &mut head[a * n..(a + 1) * n];
    let cb = &mut tail[..n];
    for (x, y) in ca.iter_mut().zip(cb.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa + s * yb;
        *y = -s * xa + c * yb;
    }
}

/// Row-compressed copy of a matrix for repeated products.
struct SparseRows {
    start: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl SparseRows {
    fn new(m: &DMatrix<f64>) -> Self {
        let mut start = Vec::with_capacity(m.nrows() + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        start.push(0);
        for i in 0..m.nrows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v != 0.0 {
                    col.push(j);
                    val.push(v);
                }
            }
            start.push(col.len());
        }
        Self { start, col, val }
    }

    fn mul(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.start.len() - 1,
            self.start
                .windows(2)
                .map(|w| (w[0]..w[1]).map(|k| self.val[k] * z[self.col[k]]).sum::<f64>()),
        )
    }
}

/// `m' v`, skipping the zero entries of `v`.
fn sparse_tr_mul(m: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let nnz = v.iter().filter(|x| **x != 0.0).count();
    if 4 * nnz > v.len() {
        return m.tr_mul(v);
    }
    let (rows, cols) = m.shape();
    let data = m.as_slice();
    let mut out = DVector::zeros(cols);
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += data[j * rows + i] * vi;
        }
    }
    out
}

fn max_diag(h: &DMatrix<f64>) -> f64 {
    h.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Lower Cholesky factor, rejecting numerically singular matrices.
fn factor(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::linalg::Cholesky::new(h.clone())?;
    let l = chol.unpack();
    let scale = max_diag(h).max(f64::MIN_POSITIVE);
    let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if min_pivot <= 1e-13 * scale {
        return None;
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn solve(p: &QpProblem) -> QpSolution {
        qp_solve(p, QpSettings::default()).unwrap()
    }

    #[test]
    fn unconstrained_scalar() {
        let p = QpProblem::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -1.0));
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(s.objective, -0.5, epsilon = 1e-14);
    }

    #[test]
    fn active_lower_bound() {
        // min z^2 s.t. z >= 2
        let p = QpProblem::new(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1)).with_inequalities(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 2.0),
            DVector::from_element(1, f64::INFINITY),
        );
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 2.0, epsilon = 1e-14);
        assert_relative_eq!(s.objective, 4.0, epsilon = 1e-12);
        assert_relative_eq!(s.y_in[0], -4.0, epsilon = 1e-12);
    }

    #[test]
    fn equality_constrained_matches_kkt_system() {
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let g = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0]);
        let p = QpProblem::new(h.clone(), g.clone()).with_equalities(a.clone(), b.clone());
        let s = solve(&p);

        let mut kkt = DMatrix::zeros(4, 4);
        kkt.view_mut((0, 0), (3, 3)).copy_from(&h);
        kkt.view_mut((0, 3), (3, 1)).copy_from(&a.transpose());
        kkt.view_mut((3, 0), (1, 3)).copy_from(&a);
        let rhs = DVector::from_vec(vec![-g[0], -g[1], -g[2], b[0]]);
        let sol = kkt.lu().solve(&rhs).unwrap();
        for i in 0..3 {
            assert_relative_eq!(s.z[i], sol[i], epsilon = 1e-12);
        }
        assert_relative_eq!(s.y_eq[0], sol[3], epsilon = 1e-12);
    }

    #[test]
    fn infeasible_bounds_detected() {
        // z >= 1 and z <= 0 through two separate rows.
        let p = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1)).with_inequalities(
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            DVector::from_vec(vec![f64::INFINITY, 0.0]),
        );
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn inconsistent_equalities_detected() {
        let p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2)).with_equalities(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            DVector::from_vec(vec![1.0, 3.0]),
        );
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_equalities_tolerated() {
        let p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2)).with_equalities(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            DVector::from_vec(vec![1.0, 2.0]),
        );
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn semidefinite_cost_with_equalities() {
        // Only z0 carries curvature; z1 is pinned by the equality.
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = QpProblem::new(h, DVector::from_vec(vec![-2.0, 1.0]))
            .with_equalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_vec(vec![3.0]));
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        // z0 + z1 = 3, minimize z0^2 - 2 z0 + z1 = z0^2 - 3 z0 + 3 -> z0 = 1.5
        assert_relative_eq!(s.z[0], 1.5, epsilon = 1e-10);
        assert_relative_eq!(s.z[1], 1.5, epsilon = 1e-10);
    }

    #[test]
    fn two_sided_rows_and_fixed_rows() {
        let h = DMatrix::identity(3, 3);
        let g = DVector::from_vec(vec![-5.0, 5.0, 0.0]);
        let c = DMatrix::identity(3, 3);
        let lo = DVector::from_vec(vec![-1.0, -1.0, 0.25]);
        let hi = DVector::from_vec(vec![1.0, 1.0, 0.25]);
        let p = QpProblem::new(h, g).with_inequalities(c, lo, hi);
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z, DVector::from_vec(vec![1.0, -1.0, 0.25]), epsilon = 1e-12);
        assert!(s.y_in[0] > 0.0 && s.y_in[1] < 0.0);
    }

    #[test]
    fn max_iter_reported() {
        let n = 6;
        let p = QpProblem::new(DMatrix::identity(n, n), DVector::from_element(n, -10.0)).with_inequalities(
            DMatrix::identity(n, n),
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, 1.0),
        );
        let s = qp_solve(
            &p,
            QpSettings {
                tol_kkt: 1e-6,
                max_iter: 2,
            },
        )
        .unwrap();
        assert_eq!(s.status, QpStatus::MaxIter);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(3));
        assert!(qp_solve(&p, QpSettings::default()).is_err());
    }
}
