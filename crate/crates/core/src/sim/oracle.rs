use super::{validate_inputs, MergedClock, PoissonClocks, Recorder, SimulationOptions, SimulationOutcome};
use crate::error::Result;
use crate::graph::MultiRobotProblem;
use crate::objective::{GlobalView, RobotVariable};
use crate::worker::{worker_step, StepsizePolicy, WorkerConfig};

/// Straight-line randomized coordinate descent: at every global iteration
/// the robot whose clock fires next steps with up-to-date neighbor values.
/// Robot selection uses the same clock streams as [`super::run_simulation`].
pub fn synchronous_rcd_oracle(
    problem: &MultiRobotProblem,
    x0: &[RobotVariable],
    gamma: f64,
    iterations: u64,
    clock_rate_hz: f64,
    options: &SimulationOptions,
) -> Result<SimulationOutcome> {
    let stepsize = StepsizePolicy::fixed(gamma)?;
    let configs = WorkerConfig::uniform(problem.num_robots(), clock_rate_hz, stepsize, false);
    validate_inputs(problem, x0, &configs)?;
    let mut x = x0.to_vec();
    let mut recorder = Recorder::new(problem, x0, options)?;
    let mut clock = MergedClock::new(PoissonClocks::new(options.seed, problem.num_robots(), clock_rate_hz)?);
    let mut now = 0.0;
    for k in 1..=iterations {
        let Some((i, t)) = clock.next_tick() else {
            break;
        };
        now = t;
        let outcome = worker_step(&configs[i], problem, &x[i], &GlobalView(&x))?;
        let pre = if recorder.wants(k) {
            Some(Recorder::pre_update(problem, i, &x)?)
        } else {
            None
        };
        x[i] = outcome.x_i;
        let staleness = problem.neighbors(i).iter().map(|&j| (j, 0)).collect();
        let eta_sq = outcome.diagnostics.eta_norm * outcome.diagnostics.eta_norm;
        recorder.record(problem, &x, k, now, i, pre, eta_sq, staleness)?;
    }
    let (mut trace, snapshots) = recorder.finish(problem, &x)?;
    trace.elapsed_s = now;
    Ok(SimulationOutcome {
        x,
        trace,
        messages: Vec::new(),
        states: Vec::new(),
        snapshots,
    })
}
