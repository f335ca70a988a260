//! Two-step toy trajectory problem checked against a dense grid search over
//! the inputs (the states follow from the dynamics).

use loader_mpc::sqp::{check_derivatives, sqp_solve, HessianMode, NlpProblem, SqpConfig};
use nalgebra::{DMatrix, DVector};

const X0: f64 = 0.2;
const TARGET: f64 = 0.9;

fn step(x: f64, u: f64) -> f64 {
    x + 0.5 * u.sin() + 0.1 * x * x
}

fn cost(x2: f64, u0: f64, u1: f64) -> f64 {
    (x2 - TARGET).powi(2) + 0.1 * (u0 * u0 + u1 * u1)
}

/// z = (u0, x1, u1, x2).
struct Toy;

impl NlpProblem for Toy {
    fn num_vars(&self) -> usize {
        4
    }
    fn objective(&self, z: &DVector<f64>) -> f64 {
        cost(z[3], z[0], z[2])
    }
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![0.2 * z[0], 0.0, 0.2 * z[2], 2.0 * (z[3] - TARGET)])
    }
    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![step(X0, z[0]) - z[1], step(z[1], z[2]) - z[3]])
    }
    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            4,
            &[
                0.5 * z[0].cos(),
                -1.0,
                0.0,
                0.0,
                0.0,
                1.0 + 0.2 * z[1],
                0.5 * z[2].cos(),
                -1.0,
            ],
        )
    }
    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        // Keep the intermediate state below 0.55.
        DVector::from_element(1, z[1] - 0.55)
    }
    fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 0.0])
    }
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let inf = f64::INFINITY;
        (
            DVector::from_vec(vec![-1.0, -inf, -1.0, -inf]),
            DVector::from_vec(vec![1.0, inf, 1.0, inf]),
        )
    }
    fn objective_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.0, 0.2, 2.0])))
    }
}

fn grid_search() -> (f64, f64, f64) {
    let n = 1000;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=n {
        let u0 = -1.0 + 2.0 * i as f64 / n as f64;
        let x1 = step(X0, u0);
        if x1 > 0.55 {
            continue;
        }
        for j in 0..=n {
            let u1 = -1.0 + 2.0 * j as f64 / n as f64;
            let f = cost(step(x1, u1), u0, u1);
            if f < best.0 {
                best = (f, u0, u1);
            }
        }
    }
    best
}

#[test]
fn derivatives_are_consistent() {
    let z = DVector::from_vec(vec![0.3, 0.4, -0.2, 0.7]);
    assert!(check_derivatives(&Toy, &z, 1e-6).max() < 1e-8);
}

#[test]
fn matches_grid_search() {
    let (f_grid, u0, u1) = grid_search();
    let resolution = 2.0 / 1000.0;
    for mode in [HessianMode::GaussNewton, HessianMode::Bfgs] {
        let cfg = SqpConfig {
            hessian: mode,
            ..SqpConfig::default()
        };
        let sol = sqp_solve(&Toy, &DVector::zeros(4), &cfg).unwrap();
        assert!(sol.is_converged(), "{mode:?}");
        assert!(
            sol.objective <= f_grid + 1e-9,
            "{mode:?}: {} vs {f_grid}",
            sol.objective
        );
        assert!((sol.z[0] - u0).abs() <= resolution, "{mode:?}: u0 {} vs {u0}", sol.z[0]);
        assert!((sol.z[2] - u1).abs() <= resolution, "{mode:?}: u1 {} vs {u1}", sol.z[2]);
    }
}
