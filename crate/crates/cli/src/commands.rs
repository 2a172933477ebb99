use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use asapp_core::evaluation::{centralized_oracle, evaluate, round_to_sed, spanning_tree_init, MetricsReport};
use asapp_core::graph::{generate_grid_world, parse_g2o, partition, GridWorldSpec, MultiRobotProblem};
use asapp_core::objective::{estimate_lipschitz, global_cost, LipschitzEstimate, RobotVariable};
use asapp_core::sim::{measured_max_delay, run_simulation, SimulationOptions, SimulationOutcome, GENERATOR};
use asapp_core::worker::{StepsizeMode, StepsizePolicy, WorkerConfig};
use serde::Serialize;

use crate::config::{ProblemSource, RunConfig};
use crate::CliError;

/// A problem together with its initial iterate.
pub struct Instance {
    pub problem: MultiRobotProblem,
    pub x0: Vec<RobotVariable>,
}

fn infer_dim(text: &str) -> usize {
    if text
        .lines()
        .any(|l| l.trim_start().starts_with("VERTEX_SE3") || l.trim_start().starts_with("EDGE_SE3"))
    {
        3
    } else {
        2
    }
}

pub fn build_instance(config: &RunConfig, seed: u64) -> Result<Instance, CliError> {
    let problem = match &config.problem {
        ProblemSource::Synthetic(spec) => {
            let spec = GridWorldSpec { seed, ..spec.clone() };
            generate_grid_world(&spec)?.problem
        }
        ProblemSource::G2o { path, robots, dim } => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            let dim = dim.unwrap_or_else(|| infer_dim(&text));
            let graph = parse_g2o(text.as_bytes(), dim)?;
            log::info!(
                "{}: {} poses, {} edges",
                path.display(),
                graph.num_poses(),
                graph.num_edges()
            );
            partition(&graph, *robots)?
        }
    };
    let problem = problem.with_rank(config.rank)?;
    let x0 = spanning_tree_init(&problem)?;
    Ok(Instance { problem, x0 })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub seed: u64,
    pub generator: &'static str,
    pub robots: usize,
    pub poses: usize,
    pub edges: usize,
    pub initial_cost: f64,
    pub measured_b: u64,
    pub assumption_violated: bool,
    pub lipschitz: LipschitzEstimate,
    pub gamma: f64,
    pub stepsize: StepsizePolicy,
    pub heuristic: bool,
    pub iterations: u64,
    pub simulated_s: f64,
    pub min_gradnorm_sq: f64,
    pub reference_cost: f64,
    pub reference_converged: bool,
    pub metrics: Option<MetricsReport>,
}

/// Simulates one seed. Metrics against the centralized reference are
/// computed when `with_metrics` is set.
pub fn simulate_seed(
    config: &RunConfig,
    seed: u64,
    with_metrics: bool,
) -> Result<(RunSummary, SimulationOutcome), CliError> {
    let Instance { problem, x0 } = build_instance(config, seed)?;
    let lipschitz = estimate_lipschitz(&problem, config.lipschitz_safety)?;
    let stepsize = match config.gamma_mode {
        StepsizeMode::Theorem => StepsizePolicy::theorem_for(&problem, config.assumed_delay, config.alpha, &lipschitz)?,
        StepsizeMode::Fixed => {
            let gamma = config
                .gamma
                .ok_or_else(|| CliError::Usage("fixed stepsize mode needs --gamma".into()))?;
            let mut policy = StepsizePolicy::fixed(gamma)?;
            policy.lipschitz = lipschitz.l_hat;
            policy.rho = problem.sparsity();
            policy.alpha = config.alpha;
            policy
        }
    };
    let workers = WorkerConfig::uniform(
        problem.num_robots(),
        config.clock_rate_hz,
        stepsize,
        config.preconditioned,
    );
    let options = SimulationOptions {
        seed,
        trace_stride: config.trace_stride,
        ..Default::default()
    };
    let outcome = run_simulation(
        &problem,
        &x0,
        &workers,
        &config.delay_model()?,
        &config.horizon_value()?,
        &options,
    )?;
    let measured_b = measured_max_delay(&outcome.trace);
    let assumption_violated = config.gamma_mode == StepsizeMode::Theorem && measured_b > config.assumed_delay;
    if assumption_violated {
        log::warn!(
            "seed {seed}: measured delay B = {measured_b} exceeds assumed B = {}",
            config.assumed_delay
        );
    }
    let (reference_cost, reference_converged, metrics) = if with_metrics {
        let reference = centralized_oracle(&problem, &x0, config.oracle_tol, config.oracle_iters)?;
        if !reference.converged {
            log::warn!(
                "seed {seed}: reference solver stopped at gradient norm {:.3e}",
                reference.gradnorm
            );
        }
        let rounded = round_to_sed(&reference.x, problem.dim())?;
        let metrics = evaluate(&problem, &outcome.x, &rounded, reference.cost)?;
        (reference.cost, reference.converged, Some(metrics))
    } else {
        (f64::NAN, false, None)
    };
    let mut echoed = config.clone();
    if let ProblemSource::Synthetic(spec) = &mut echoed.problem {
        spec.seed = seed;
    }
    let summary = RunSummary {
        config: echoed,
        seed,
        generator: GENERATOR,
        robots: problem.num_robots(),
        poses: problem.num_poses(),
        edges: problem.edges().len(),
        initial_cost: global_cost(&problem, &x0)?,
        measured_b,
        assumption_violated,
        lipschitz,
        gamma: stepsize.gamma,
        stepsize,
        heuristic: config.preconditioned && stepsize.mode == StepsizeMode::Theorem,
        iterations: outcome.trace.iterations,
        simulated_s: outcome.trace.elapsed_s,
        min_gradnorm_sq: outcome.trace.min_gradnorm_sq,
        reference_cost,
        reference_converged,
        metrics,
    };
    Ok((summary, outcome))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_outputs(dir: &Path, summary: &RunSummary, outcome: &SimulationOutcome) -> Result<(), CliError> {
    ensure_dir(dir)?;
    write_file(
        &dir.join(format!("trace_{}.csv", summary.seed)),
        &outcome.trace.to_csv(),
    )?;
    let json = serde_json::to_string_pretty(summary).expect("summaries serialize");
    write_file(&dir.join(format!("metrics_{}.json", summary.seed)), &(json + "\n"))
}

/// Runs every seed and writes `trace_<seed>.csv` and `metrics_<seed>.json`.
pub fn cmd_run(config: &RunConfig) -> Result<Vec<RunSummary>, CliError> {
    config.validate()?;
    let mut summaries = Vec::new();
    for &seed in &config.seeds {
        let (summary, outcome) = simulate_seed(config, seed, true)?;
        write_outputs(&config.out, &summary, &outcome)?;
        println!(
            "seed {seed}: f {:.6} -> {:.6}, gradnorm {:.3e}, B {}, {} iterations",
            summary.initial_cost,
            outcome.trace.final_cost,
            outcome.trace.final_gradnorm,
            summary.measured_b,
            summary.iterations
        );
        summaries.push(summary);
    }
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub delay_s: f64,
    pub seed: u64,
    pub final_gradnorm: f64,
    pub measured_b: u64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("delay_s,seed,final_gradnorm,measured_B\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.delay_s, r.seed, r.final_gradnorm, r.measured_b);
    }
    out
}

/// Fixed delays swept over shared seeds; writes per-delay run outputs and
/// `sweep.csv`.
pub fn cmd_sweep_delay(config: &RunConfig, delays: &[f64]) -> Result<Vec<SweepRow>, CliError> {
    if delays.len() < 2 {
        return Err(CliError::Usage("a sweep needs at least two delays".into()));
    }
    config.validate()?;
    let mut rows = Vec::new();
    for &delay in delays {
        let run = RunConfig {
            delay: format!("fixed:{delay}"),
            out: config.out.join(format!("delay_{delay}")),
            ..config.clone()
        };
        run.validate()?;
        let mut total = 0.0;
        for &seed in &run.seeds {
            let (summary, outcome) = simulate_seed(&run, seed, false)?;
            write_outputs(&run.out, &summary, &outcome)?;
            total += outcome.trace.final_gradnorm;
            rows.push(SweepRow {
                delay_s: delay,
                seed,
                final_gradnorm: outcome.trace.final_gradnorm,
                measured_b: summary.measured_b,
            });
        }
        println!(
            "delay {delay} s: mean final gradnorm {:.6e}",
            total / run.seeds.len() as f64
        );
    }
    ensure_dir(&config.out)?;
    write_file(&config.out.join("sweep.csv"), &sweep_csv(&rows))?;
    Ok(rows)
}

pub const VERIFY_MIN_SEEDS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seeds: usize,
    pub iterations: u64,
    /// Mean over seeds of `min_k ‖rgrad f(x^k)‖²`.
    pub mean_min_gradnorm_sq: f64,
    /// Mean over seeds of `2 n f(x⁰) / (γ K)`.
    pub mean_bound: f64,
    pub max_measured_b: u64,
    pub assumed_b: u64,
    pub assumption_violated: bool,
    pub holds: bool,
}

impl VerifyReport {
    pub fn margin(&self) -> f64 {
        self.mean_bound / self.mean_min_gradnorm_sq
    }
}

/// Checks the sublinear-rate bound with `f* = 0` over all seeds. The trace
/// must record every iterate, so the configured stride is ignored.
pub fn cmd_verify(config: &RunConfig) -> Result<VerifyReport, CliError> {
    config.validate()?;
    if config.gamma_mode != StepsizeMode::Theorem {
        return Err(CliError::Usage("verify needs --gamma-mode theorem".into()));
    }
    if config.seeds.len() < VERIFY_MIN_SEEDS {
        return Err(CliError::Usage(format!(
            "verify needs at least {VERIFY_MIN_SEEDS} seeds, got {}",
            config.seeds.len()
        )));
    }
    let run = RunConfig {
        trace_stride: 1,
        ..config.clone()
    };
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut max_b = 0;
    let mut iterations = 0;
    for &seed in &run.seeds {
        let (summary, outcome) = simulate_seed(&run, seed, false)?;
        let k = outcome.trace.iterations.max(1);
        iterations = k;
        lhs += outcome.trace.min_gradnorm_sq;
        rhs += 2.0 * summary.robots as f64 * summary.initial_cost / (summary.gamma * k as f64);
        max_b = max_b.max(summary.measured_b);
    }
    let n = run.seeds.len() as f64;
    let assumption_violated = max_b > run.assumed_delay;
    let report = VerifyReport {
        seeds: run.seeds.len(),
        iterations,
        mean_min_gradnorm_sq: lhs / n,
        mean_bound: rhs / n,
        max_measured_b: max_b,
        assumed_b: run.assumed_delay,
        assumption_violated,
        holds: !assumption_violated && lhs / n <= rhs / n,
    };
    println!(
        "mean min ||rgrad f||^2 = {:.6e}, bound 2n f(x0)/(gamma K) = {:.6e}, margin {:.3}x, measured B {} (assumed {})",
        report.mean_min_gradnorm_sq,
        report.mean_bound,
        report.margin(),
        report.max_measured_b,
        report.assumed_b
    );
    if assumption_violated {
        return Err(CliError::CheckFailed(format!(
            "assumption violated: measured B = {max_b} exceeds assumed B = {}",
            run.assumed_delay
        )));
    }
    if !report.holds {
        return Err(CliError::CheckFailed(format!(
            "bound violated: {:.6e} > {:.6e}",
            report.mean_min_gradnorm_sq, report.mean_bound
        )));
    }
    Ok(report)
}
