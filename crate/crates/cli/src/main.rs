//! `loader-mpc`: plan a loading cycle, track it in simulation, compare the
//! three controllers and benchmark their solve times.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use loader_mpc::controllers::ControllerKind;
use loader_mpc::io::{self as lio, Config};
use loader_mpc::planner::{audit, plan_cycle};
use loader_mpc::sim::{bench_horizon_sweep, bench_states, compare_controllers, simulate};
use loader_mpc::{Error, Result, Trajectory};

const CONTROLLERS: [&str; 3] = ["nl", "lpv", "lti"];

#[derive(Parser)]
#[command(
    name = "loader-mpc",
    version,
    about = "Wheel-loader trajectory planning and tracking MPC"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective config to stdout before running.
    #[arg(long)]
    print_config: bool,
    /// Override `disturbance.rng_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Legs {
    /// Planned legs: a directory holding leg1.csv and leg2.csv, or the leg
    /// files themselves. Planned from the config when absent.
    #[arg(long, num_args = 1..)]
    trajectories: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Plan both legs of the cycle and write <OUT>/leg1.csv and <OUT>/leg2.csv.
    ///
    /// Columns: k, t, x_r, y_r, x_f, y_f, theta, gamma, v, gamma_rate, frame, leg.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one controller over the full cycle and write its run log.
    ///
    /// One row per control step, then `# summary` lines (deterministic) and
    /// `# timing` lines (wall clock).
    Track {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        legs: Legs,
        #[arg(long, value_parser = CONTROLLERS)]
        controller: String,
        /// Run log path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all three controllers on the same legs and disturbance.
    ///
    /// Columns: controller, mean_abs_err_m, max_err_m, median_solve_ms,
    /// mean_solve_ms, infeasible_count, relaxed_count, status.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        legs: Legs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one controller step per horizon on states logged from an LPV run.
    ///
    /// Columns: controller, horizon, mean_ms, variance_ms2, median_ms,
    /// samples, failures.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        legs: Legs,
        /// Comma-separated horizons.
        #[arg(long, default_value = "5,10,15,20,25")]
        horizons: String,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Number of logged states to replay.
        #[arg(long, default_value_t = 50)]
        states: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        "config" | "input" => 2,
        "io" => 4,
        _ => 3,
    }
}

fn load(common: &Common) -> Result<Config> {
    let mut config = match &common.config {
        Some(path) => lio::load_config(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        config.disturbance.rng_seed = seed;
    }
    if common.print_config {
        print!("{}", config.to_toml());
    }
    Ok(config)
}

fn leg_paths(paths: &[PathBuf]) -> Vec<PathBuf> {
    match paths {
        [dir] if dir.is_dir() => vec![dir.join("leg1.csv"), dir.join("leg2.csv")],
        _ => paths.to_vec(),
    }
}

/// Read the given legs, or plan them when none are given.
fn legs(config: &Config, legs: &Legs) -> Result<Vec<Trajectory>> {
    if legs.trajectories.is_empty() {
        info!("no trajectories given, planning the cycle");
        let (a, b) = plan_cycle(&config.scenario(), &config.planner)?;
        return Ok(vec![a, b]);
    }
    let mut read = leg_paths(&legs.trajectories)
        .iter()
        .map(|p| lio::load_trajectory(p))
        .collect::<Result<Vec<_>>>()?;
    read.sort_by_key(|(_, leg)| *leg);
    let ts = config.scenario.ts;
    if let Some((t, leg)) = read.iter().find(|(t, _)| (t.ts - ts).abs() > 1e-9) {
        return Err(Error::Config(format!(
            "leg {leg} is sampled at {} s but scenario.ts is {ts} s",
            t.ts
        )));
    }
    Ok(read.into_iter().map(|(t, _)| t).collect())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn plan(common: &Common, out: &Path) -> Result<()> {
    let config = load(common)?;
    let scenario = config.scenario();
    let (a, b) = plan_cycle(&scenario, &config.planner)?;
    fs::create_dir_all(out)?;
    let targets = [scenario.unloading_pose, scenario.loading_pose];
    for (leg, (traj, xf)) in [&a, &b].into_iter().zip(&targets).enumerate() {
        let leg = leg + 1;
        lio::save_trajectory(&out.join(format!("leg{leg}.csv")), traj, leg, &scenario.params)?;
        let r = audit(traj, &scenario, xf);
        println!(
            "leg{leg} steps={} max_abs_gamma_rad={:.6} min_clearance_m={:.6} terminal_error={:.3e} max_defect={:.3e} direction_changes={}",
            traj.len(),
            r.max_abs_gamma,
            r.min_clearance,
            r.terminal_error,
            r.max_defect,
            r.direction_changes
        );
    }
    Ok(())
}

fn track(common: &Common, l: &Legs, controller: &str, out: &Path) -> Result<()> {
    let config = load(common)?;
    let kind: ControllerKind = controller.parse()?;
    let legs = legs(&config, l)?;
    let started = Instant::now();
    let log = simulate(
        &legs,
        kind,
        &config.weights(),
        &config.bounds(),
        &config.disturbance,
        &config.vehicle,
        &config.sim_options(),
    )?;
    let wall = started.elapsed().as_secs_f64();
    let mut w = create(out)?;
    lio::write_run_log(&mut w, &log, wall)?;
    w.flush()?;
    println!(
        "controller={kind} steps={} mean_abs_error_m={:.6} max_error_m={:.6}",
        log.records.len(),
        log.summary.mean_abs_error,
        log.summary.max_error
    );
    // The partial log is on disk; the abort is still an error.
    log.into_result().map(|_| ())
}

fn compare(common: &Common, l: &Legs, out: &Path) -> Result<()> {
    let config = load(common)?;
    let legs = legs(&config, l)?;
    let rows = compare_controllers(
        &legs,
        &config.weights(),
        &config.bounds(),
        &config.disturbance,
        &config.vehicle,
        &config.sim_options(),
    );
    let mut w = create(out)?;
    lio::write_compare_table(&mut w, &rows)?;
    w.flush()?;
    for row in &rows {
        match &row.result {
            Ok(log) => println!("{}: mean_abs_error_m={:.6}", row.kind, log.summary.mean_abs_error),
            Err(e) => println!("{}: failed ({e})", row.kind),
        }
    }
    // Failed rows are reported in the table; only a total failure is an error.
    if rows.iter().all(|r| r.result.is_err()) {
        return rows.into_iter().find_map(|r| r.result.err()).map_or(Ok(()), Err);
    }
    Ok(())
}

fn bench(common: &Common, l: &Legs, horizons: &str, repetitions: usize, states: usize, out: &Path) -> Result<()> {
    let config = load(common)?;
    let horizons = lio::parse_horizons(horizons)?;
    let legs = legs(&config, l)?;
    let reference = simulate(
        &legs,
        ControllerKind::Lpv,
        &config.weights(),
        &config.bounds(),
        &config.disturbance,
        &config.vehicle,
        &config.sim_options(),
    )?
    .into_result()?;
    let states = bench_states(&reference, states);
    let rows = bench_horizon_sweep(
        &legs,
        &states,
        &horizons,
        repetitions.max(1),
        &config.weights(),
        &config.bounds(),
        &config.vehicle,
    )?;
    let mut w = create(out)?;
    lio::write_bench_table(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan { common, out } => plan(common, out),
        Command::Track {
            common,
            legs,
            controller,
            out,
        } => track(common, legs, controller, out),
        Command::Compare { common, legs, out } => compare(common, legs, out),
        Command::Bench {
            common,
            legs,
            horizons,
            repetitions,
            states,
            out,
        } => bench(common, legs, horizons, *repetitions, *states, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: class={} message={message}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}
