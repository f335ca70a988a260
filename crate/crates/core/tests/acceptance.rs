//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use loader_mpc::controllers::{ControllerKind, ControllerStatus, DeviationBounds, TrackingWeights};
use loader_mpc::io::{write_compare_table, write_run_log, write_trajectory};
use loader_mpc::lpv::{embed_at, SchedulingPoint};
use loader_mpc::model::{dynamics_continuous, jacobian_control, jacobian_state, step_euler};
use loader_mpc::planner::{audit, obstacle_clearance_sq, plan_segment, PlannerConfig, Scenario};
use loader_mpc::qp::{kkt_residuals, qp_solve, QpProblem, QpSettings, QpStatus};
use loader_mpc::sim::{
    bench_horizon_sweep, bench_states, compare_controllers, simulate, DisturbanceConfig, RunLog, SimOptions,
};
use loader_mpc::sqp::{sqp_solve, HessianMode, NlpProblem, NlpStatus, SqpConfig};
use loader_mpc::{ControlInput, Frame, Trajectory, VehicleParams, VehicleState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_point(rng: &mut ChaCha8Rng) -> (VehicleState, ControlInput) {
    let frame = if rng.random_bool(0.5) {
        Frame::Front
    } else {
        Frame::Rear
    };
    let s = VehicleState::new(
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-4.0..4.0),
        rng.random_range(-0.4..=0.4),
        frame,
    );
    let u = ControlInput::new(rng.random_range(-2.0..2.0), rng.random_range(-0.35..0.35));
    (s, u)
}

fn jacobians() -> Outcome {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    let f = |s: &VehicleState, u: &ControlInput| dynamics_continuous(s, u, &p).to_vector();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (s, u) = random_point(&mut rng);
        let jx = jacobian_state(&s, &u, &p);
        let ju = jacobian_control(&s, &u, &p);
        let mut fx = Matrix4::zeros();
        for c in 0..4 {
            let mut e = Vector4::zeros();
            e[c] = h;
            let sp = VehicleState::from_vector(&(s.to_vector() + e), s.frame);
            let sm = VehicleState::from_vector(&(s.to_vector() - e), s.frame);
            fx.set_column(c, &((f(&sp, &u) - f(&sm, &u)) / (2.0 * h)));
        }
        let mut fu = Matrix4x2::zeros();
        for c in 0..2 {
            let mut e = Vector2::zeros();
            e[c] = h;
            let up = ControlInput::from_vector(&(u.to_vector() + e));
            let um = ControlInput::from_vector(&(u.to_vector() - e));
            fu.set_column(c, &((f(&s, &up) - f(&s, &um)) / (2.0 * h)));
        }
        for (a, b) in jx.iter().zip(fx.iter()).chain(ju.iter().zip(fu.iter())) {
            worst = worst.max(rel(*a, *b));
        }
    }
    outcome(worst < 1e-6, format!("max relative error {worst:.2e} over 1000 points"))
}

fn lpv_taylor(legs: &[Trajectory]) -> Outcome {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ratios = Vec::new();
    while ratios.len() < 100 {
        let traj = &legs[rng.random_range(0..legs.len())];
        let step = &traj.steps[rng.random_range(0..traj.len())];
        let frame = step.frame;
        let nom = step.state_in(frame, &p);
        let u = step.input;
        let m = embed_at(&SchedulingPoint::from_state_input(&nom, &u, frame), &p, traj.ts);
        let dx = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let du = Vector2::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let err = |eps: f64| {
            let x = VehicleState::from_vector(&(nom.to_vector() + dx * eps), frame);
            let uu = ControlInput::from_vector(&(u.to_vector() + du * eps));
            let exact = step_euler(&x, &uu, &p, traj.ts).to_vector() - step_euler(&nom, &u, &p, traj.ts).to_vector();
            (exact - m.predict(&(dx * eps), &(du * eps))).norm()
        };
        ratios.push(err(1e-2) / err(5e-3));
    }
    let worst = ratios.iter().map(|r| (r - 4.0).abs()).fold(0.0, f64::max);
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    outcome(
        worst <= 0.8,
        format!("ratio range [{lo:.3}, {hi:.3}] at 100 nominal points"),
    )
}

/// Accelerated projected gradient on a box, iterated to a fixed point.
fn projected_gradient(h: &DMatrix<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    let l = h.clone().symmetric_eigenvalues().max();
    let project = |v: DVector<f64>| v.zip_zip_map(lo, hi, |v, a, b| v.clamp(a, b));
    let mut z = project(DVector::zeros(g.len()));
    let mut y = z.clone();
    let mut t: f64 = 1.0;
    for _ in 0..200_000 {
        let next = project(&y - (h * &y + g) / l);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let moved = (&next - &z).amax();
        y = &next + (&next - &z) * ((t - 1.0) / t_next);
        // Restart the momentum when the objective would go up.
        if (h * &next + g).dot(&(&next - &z)) > 0.0 {
            y = next.clone();
            t = 1.0;
        } else {
            t = t_next;
        }
        z = next;
        if moved < 1e-15 {
            break;
        }
    }
    z
}

fn qp_certification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_kkt, mut worst_gap) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=30);
        // Spectrum in [0.1, 10].
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let d = DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(-1.0..1.0)));
        let h = &q * DMatrix::from_diagonal(&d) * q.transpose();
        let h = (&h + h.transpose()) * 0.5;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let lo = DVector::from_fn(n, |_, _| {
            if rng.random_bool(0.2) {
                f64::NEG_INFINITY
            } else {
                rng.random_range(-1.0..0.0)
            }
        });
        let hi = DVector::from_fn(n, |i, _| {
            if rng.random_bool(0.2) {
                f64::INFINITY
            } else {
                lo[i].max(-1.0) + rng.random_range(0.0..1.5)
            }
        });
        let p = QpProblem::new(h.clone(), g.clone()).with_inequalities(DMatrix::identity(n, n), lo.clone(), hi.clone());
        let sol = qp_solve(&p, QpSettings::default()).expect("well-formed problem");
        if sol.status != QpStatus::Optimal {
            failures += 1;
            continue;
        }
        worst_kkt = worst_kkt.max(kkt_residuals(&p, &sol.z, &sol.y_eq, &sol.y_in).max());
        worst_gap = worst_gap.max((&sol.z - projected_gradient(&h, &g, &lo, &hi)).amax());
    }
    outcome(
        failures == 0 && worst_kkt <= 1e-6 && worst_gap <= 1e-5,
        format!("500 problems, {failures} not optimal, max KKT {worst_kkt:.2e}, max argmin gap {worst_gap:.2e}"),
    )
}

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

/// Quadratic objective, one linear equality, one linear inequality, boxes.
struct LinearQuadratic {
    h: DMatrix<f64>,
    g: DVector<f64>,
}

impl NlpProblem for LinearQuadratic {
    fn num_vars(&self) -> usize {
        3
    }
    fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.h * z + &self.g
    }
    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, z.sum() - 1.0)
    }
    fn eq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 3, 1.0)
    }
    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, z[0] - z[1] + 0.5)
    }
    fn ineq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.0])
    }
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_element(3, -0.2), DVector::from_element(3, 2.0))
    }
    fn objective_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.h.clone())
    }
}

fn sqp_analytic() -> Outcome {
    let expected = DVector::from_vec(vec![1.0, 2.0]) / 5f64.sqrt();
    let mut circle_err: f64 = 0.0;
    let mut statuses = Vec::new();
    for mode in [HessianMode::GaussNewton, HessianMode::Bfgs] {
        let cfg = SqpConfig {
            hessian: mode,
            ..SqpConfig::default()
        };
        let sol = sqp_solve(&Circle, &DVector::from_vec(vec![1.0, 0.0]), &cfg).unwrap();
        statuses.push(sol.status);
        circle_err = circle_err.max((&sol.z - &expected).amax());
    }
    let circle_ok = statuses.iter().all(|s| *s == NlpStatus::Converged);
    let lq = LinearQuadratic {
        h: DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]),
        g: DVector::from_vec(vec![-1.0, 2.0, -3.0]),
    };
    let sol = sqp_solve(&lq, &DVector::zeros(3), &SqpConfig::default()).unwrap();
    outcome(
        circle_ok && circle_err <= 1e-6 && sol.is_converged() && sol.iterations == 1,
        format!(
            "circle error {circle_err:.2e} ({statuses:?}), linear-quadratic {:?} in {} iteration(s)",
            sol.status, sol.iterations
        ),
    )
}

struct Planned {
    scenario: Scenario,
    legs: Vec<Trajectory>,
    seconds: [f64; 2],
}

fn plan_reference() -> Planned {
    let scenario = Scenario::default();
    let config = PlannerConfig::default();
    let zero = ControlInput::ZERO;
    let t = Instant::now();
    let out = plan_segment(
        &scenario,
        &config,
        &scenario.loading_pose,
        &scenario.unloading_pose,
        zero,
        zero,
    )
    .expect("reference leg 1 plans");
    let first = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let start = out.last().unwrap().state;
    let back =
        plan_segment(&scenario, &config, &start, &scenario.loading_pose, zero, zero).expect("reference leg 2 plans");
    let second = t.elapsed().as_secs_f64();
    Planned {
        scenario,
        legs: vec![out, back],
        seconds: [first, second],
    }
}

fn planner_audit(plan: &Planned) -> Outcome {
    let sc = &plan.scenario;
    let p = &sc.params;
    let targets = [sc.unloading_pose, sc.loading_pose];
    let mut pass = plan.seconds.iter().all(|&s| s < 120.0);
    let mut details = Vec::new();
    for (k, (traj, xf)) in plan.legs.iter().zip(&targets).enumerate() {
        let r = audit(traj, sc, xf);
        let min_clear = traj
            .states()
            .map(|s| obstacle_clearance_sq(s, &sc.obstacles, p).sqrt())
            .fold(f64::INFINITY, f64::min);
        // Open-loop replay of the planned inputs.
        let mut x = traj.steps[0].state;
        let mut replay: f64 = 0.0;
        for w in traj.steps.windows(2) {
            x = step_euler(&x, &w[0].input, p, traj.ts);
            replay = replay.max((x.to_vector() - w[1].state.to_vector()).amax());
        }
        pass &= r.max_abs_gamma <= 0.40 && min_clear >= sc.d_safe - 1e-4 && r.terminal_error <= 1e-3 && replay <= 1e-8;
        details.push(format!(
            "leg{} max|gamma| {:.4}, clearance {:.4}, terminal {:.2e}, replay {:.2e}, {:.1} s",
            k + 1,
            r.max_abs_gamma,
            min_clear,
            r.terminal_error,
            replay,
            plan.seconds[k]
        ));
    }
    outcome(pass, details.join("; "))
}

fn run(legs: &[Trajectory], kind: ControllerKind, d: &DisturbanceConfig, opts: &SimOptions) -> RunLog {
    simulate(
        legs,
        kind,
        &TrackingWeights::default(),
        &DeviationBounds::default(),
        d,
        &VehicleParams::default(),
        opts,
    )
    .expect("simulation runs")
}

fn comparison_ordering(legs: &[Trajectory]) -> Outcome {
    let rows = compare_controllers(
        legs,
        &TrackingWeights::default(),
        &DeviationBounds::default(),
        &DisturbanceConfig::default(),
        &VehicleParams::default(),
        &SimOptions::default(),
    );
    let err = |k: ControllerKind| {
        rows.iter()
            .find(|r| r.kind == k)
            .and_then(|r| r.result.as_ref().ok())
            .map_or(f64::NAN, |l| l.summary.mean_abs_error)
    };
    let (nl, lpv, lti) = (
        err(ControllerKind::Nl),
        err(ControllerKind::Lpv),
        err(ControllerKind::Lti),
    );
    let first = nl <= lpv && lpv <= 1.5 * nl;
    let second = lti >= 1.5 * lpv;
    outcome(
        first && second,
        format!(
            "NL {nl:.4} m, LPV {lpv:.4} m, LTI {lti:.4} m; NL <= LPV <= 1.5 NL: {first}; LTI >= 1.5 LPV: {second} (LTI/LPV = {:.2})",
            lti / lpv
        ),
    )
}

fn zero_error_invariance(legs: &[Trajectory]) -> Outcome {
    // Plant identical to the prediction model: one Euler step per period.
    let exact = SimOptions {
        substeps: 1,
        ..SimOptions::default()
    };
    let mut pass = true;
    let mut details = Vec::new();
    for kind in ControllerKind::ALL {
        let log = run(legs, kind, &DisturbanceConfig::none(), &exact);
        let du = log
            .records
            .iter()
            .map(|r| (r.commanded.to_vector() - legs[r.leg].steps[r.index].input.to_vector()).amax())
            .fold(0.0, f64::max);
        let coarse = run(legs, kind, &DisturbanceConfig::none(), &SimOptions::default());
        pass &= du < 1e-6 && log.summary.mean_abs_error < 1e-3;
        details.push(format!(
            "{kind} mean {:.2e} m, max input deviation {du:.2e} (10 substeps: {:.2e} m)",
            log.summary.mean_abs_error, coarse.summary.mean_abs_error
        ));
    }
    outcome(pass, details.join("; "))
}

fn compute_scaling(legs: &[Trajectory]) -> Outcome {
    let reference = run(
        legs,
        ControllerKind::Lpv,
        &DisturbanceConfig::default(),
        &SimOptions::default(),
    );
    let states = bench_states(&reference, 50);
    let horizons = [5, 10, 15, 20, 25];
    let rows = bench_horizon_sweep(
        legs,
        &states,
        &horizons,
        3,
        &TrackingWeights::default(),
        &DeviationBounds::default(),
        &VehicleParams::default(),
    )
    .expect("benchmark runs");
    let t = |k: ControllerKind, n: usize| rows.iter().find(|r| r.kind == k && r.horizon == n).unwrap().median;
    // Medians: single descheduled samples otherwise dominate the
    // microsecond-scale linear solves.
    let nl_ratio = t(ControllerKind::Nl, 25) / t(ControllerKind::Nl, 5);
    let lpv_ratio = t(ControllerKind::Lpv, 25) / t(ControllerKind::Lpv, 5);
    let medians: Vec<f64> = horizons
        .iter()
        .map(|&n| t(ControllerKind::Lpv, n) / t(ControllerKind::Lti, n))
        .collect();
    let medians_ok = medians.iter().all(|r| (1.0 / 1.5..=1.5).contains(r));
    outcome(
        nl_ratio >= 3.0 * lpv_ratio && medians_ok,
        format!(
            "NL 25/5 median ratio {nl_ratio:.1}, LPV {lpv_ratio:.1}; LPV/LTI medians {}",
            medians.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn without_timing(text: &[u8]) -> String {
    String::from_utf8_lossy(text)
        .lines()
        .filter(|l| !l.starts_with("# timing"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Compare table without its timing columns.
fn compare_data(text: &[u8]) -> String {
    String::from_utf8_lossy(text)
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            [&f[..3], &f[5..]].concat().join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(plan: &Planned) -> Outcome {
    let p = VehicleParams::default();
    let again = plan_reference();
    let write_legs = |legs: &[Trajectory]| {
        let mut out = Vec::new();
        for (k, t) in legs.iter().enumerate() {
            write_trajectory(&mut out, t, k + 1, &p).unwrap();
        }
        out
    };
    let plans_equal = write_legs(&plan.legs) == write_legs(&again.legs);

    let mut logs_equal = true;
    for kind in ControllerKind::ALL {
        let texts: Vec<String> = (0..2)
            .map(|_| {
                let mut out = Vec::new();
                write_run_log(
                    &mut out,
                    &run(&plan.legs, kind, &DisturbanceConfig::default(), &SimOptions::default()),
                    0.0,
                )
                .unwrap();
                without_timing(&out)
            })
            .collect();
        logs_equal &= texts[0] == texts[1];
    }

    let tables: Vec<String> = (0..2)
        .map(|_| {
            let rows = compare_controllers(
                &plan.legs,
                &TrackingWeights::default(),
                &DeviationBounds::default(),
                &DisturbanceConfig::default(),
                &p,
                &SimOptions::default(),
            );
            let mut out = Vec::new();
            write_compare_table(&mut out, &rows).unwrap();
            compare_data(&out)
        })
        .collect();
    let tables_equal = tables[0] == tables[1];
    outcome(
        plans_equal && logs_equal && tables_equal,
        format!("trajectories {plans_equal}, run logs {logs_equal}, compare tables {tables_equal}"),
    )
}

fn frame_switching(legs: &[Trajectory]) -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for kind in ControllerKind::ALL {
        let log = run(legs, kind, &DisturbanceConfig::none(), &SimOptions::default());
        let switches: Vec<usize> = (1..log.records.len())
            .filter(|&k| log.records[k].frame != log.records[k - 1].frame)
            .collect();
        let bad = switches
            .iter()
            .flat_map(|&k| [k - 1, k])
            .filter(|&k| log.records[k].status != ControllerStatus::Optimal)
            .count();
        pass &= switches.len() >= 2 && bad == 0 && log.summary.infeasible_count == 0;
        details.push(format!(
            "{kind} {} switches, {bad} non-optimal at switches",
            switches.len()
        ));
    }
    outcome(pass, details.join("; "))
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 Jacobian correctness", jacobians()),
        ("3 QP certification", qp_certification()),
        ("4 SQP analytic check", sqp_analytic()),
    ];
    let plan = plan_reference();
    results.push(("2 LPV first-order validity", lpv_taylor(&plan.legs)));
    results.push(("5 planner feasibility audit", planner_audit(&plan)));
    results.push(("6 controller comparison ordering", comparison_ordering(&plan.legs)));
    results.push(("7 zero-error invariance", zero_error_invariance(&plan.legs)));
    results.push(("8 compute-burden scaling", compute_scaling(&plan.legs)));
    results.push(("9 determinism", determinism(&plan)));
    results.push(("10 frame switching", frame_switching(&plan.legs)));
    results.sort_by_key(|(name, _)| name.split(' ').next().unwrap().parse::<u32>().unwrap());

    let mut out = std::io::stdout().lock();
    for (name, o) in &results {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        writeln!(out, "criterion {name}: {verdict} ({})", o.detail).unwrap();
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    writeln!(
        out,
        "acceptance: {} passed, {failed} failed in {:.1} s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    )
    .unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
