//! Truly concurrent execution: one thread per robot, per-pose locks.
//!
//! Robots never wait for each other. A robot publishes each pose under its
//! own lock after every Update; neighbors receive copies through inboxes that
//! release messages once their delivery time has passed. The trace is sampled
//! by the calling thread and is not reproducible.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{send_lists, validate_inputs, DelayModel, NeighborCache};
use crate::error::{Error, Result};
use crate::graph::{MultiRobotProblem, PoseId};
use crate::manifold::orthonormality_residual;
use crate::objective::{global_cost, global_gradient_norm, LiftedPose, RobotVariable};
use crate::worker::{worker_step, WorkerConfig};

const SAMPLES: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcurrentSample {
    pub time_s: f64,
    pub cost: f64,
    pub gradnorm: f64,
    /// Largest `‖YᵀY − I‖` among the sampled poses.
    pub max_residual: f64,
}

#[derive(Clone, Debug)]
pub struct ConcurrentOutcome {
    pub x: Vec<RobotVariable>,
    pub samples: Vec<ConcurrentSample>,
    pub updates_per_robot: Vec<u64>,
    pub elapsed_s: f64,
}

struct Pending {
    due: Instant,
    version: u64,
    poses: Vec<(PoseId, LiftedPose)>,
}

struct Shared<'a> {
    problem: &'a MultiRobotProblem,
    board: Vec<Vec<Mutex<LiftedPose>>>,
    inboxes: Vec<Mutex<Vec<Pending>>>,
    updates: Vec<AtomicU64>,
    stop: AtomicBool,
    failure: Mutex<Option<Error>>,
}

impl Shared<'_> {
    fn read_all(&self) -> Vec<RobotVariable> {
        self.board
            .iter()
            .map(|poses| RobotVariable::new(poses.iter().map(|p| *p.lock().unwrap()).collect()))
            .collect()
    }
}

fn robot_loop(
    shared: &Shared<'_>,
    config: &WorkerConfig,
    delay: &DelayModel,
    x0: RobotVariable,
    lists: &[(usize, Vec<PoseId>)],
    seed: u64,
) -> Result<()> {
    let problem = shared.problem;
    let i = config.robot;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    let mut x_i = x0;
    let mut cache = NeighborCache::default();
    for &id in problem.all_neighbor_poses(i) {
        cache.store(id, *shared.board[id.robot][id.step].lock().unwrap(), 0);
    }
    let mut commits = 0u64;
    let mut last_send = Instant::now();
    let period = delay.send_period();
    while !shared.stop.load(Ordering::Relaxed) {
        let u: f64 = rng.random();
        let pause = -(-u).ln_1p() / config.clock_rate_hz;
        std::thread::sleep(Duration::from_secs_f64(pause));

        // Read
        let now = Instant::now();
        {
            let mut inbox = shared.inboxes[i].lock().unwrap();
            inbox.retain(|m| {
                if m.due <= now {
                    for (id, value) in &m.poses {
                        cache.store(*id, *value, m.version);
                    }
                    false
                } else {
                    true
                }
            });
        }
        // Compute, Update
        let outcome = worker_step(config, problem, &x_i, &cache)?;
        x_i = outcome.x_i;
        for (slot, pose) in shared.board[i].iter().zip(&x_i.poses) {
            *slot.lock().unwrap() = *pose;
        }
        commits += 1;
        shared.updates[i].fetch_add(1, Ordering::Relaxed);

        // Send
        let now = Instant::now();
        let due_send = match period {
            None => true,
            Some(p) => now.duration_since(last_send).as_secs_f64() >= p,
        };
        if due_send {
            last_send = now;
            for (to, ids) in lists {
                let d = delay.sample(&mut rng);
                let message = Pending {
                    due: now + Duration::from_secs_f64(d),
                    version: commits,
                    poses: ids.iter().map(|&id| (id, x_i.poses[id.step])).collect(),
                };
                shared.inboxes[*to].lock().unwrap().push(message);
            }
        }
    }
    Ok(())
}

/// Runs every robot on its own thread for `wall_horizon` of real time.
pub fn run_concurrent(
    problem: &MultiRobotProblem,
    x0: &[RobotVariable],
    configs: &[WorkerConfig],
    delay: &DelayModel,
    wall_horizon: Duration,
    seed: u64,
) -> Result<ConcurrentOutcome> {
    validate_inputs(problem, x0, configs)?;
    delay.validate()?;
    let n = problem.num_robots();
    let lists = send_lists(problem);
    let shared = Shared {
        problem,
        board: x0
            .iter()
            .map(|xi| xi.poses.iter().map(|p| Mutex::new(*p)).collect())
            .collect(),
        inboxes: (0..n).map(|_| Mutex::new(Vec::new())).collect(),
        updates: (0..n).map(|_| AtomicU64::new(0)).collect(),
        stop: AtomicBool::new(false),
        failure: Mutex::new(None),
    };
    let d = problem.dim();
    let start = Instant::now();
    let mut samples = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        for (i, config) in configs.iter().enumerate() {
            let shared = &shared;
            let lists = &lists[i];
            let xi = x0[i].clone();
            scope.spawn(move || {
                if let Err(e) = robot_loop(shared, config, delay, xi, lists, seed) {
                    shared.failure.lock().unwrap().get_or_insert(e);
                    shared.stop.store(true, Ordering::Relaxed);
                }
            });
        }
        let interval = wall_horizon / SAMPLES;
        let mut sample = || -> Result<()> {
            for _ in 0..SAMPLES {
                if shared.stop.load(Ordering::Relaxed) {
                    break;
                }
                std::thread::sleep(interval);
                let x = shared.read_all();
                let max_residual = x
                    .iter()
                    .flat_map(|xi| xi.poses.iter())
                    .map(|p| orthonormality_residual(&p.y, d))
                    .fold(0.0, f64::max);
                debug_assert!(max_residual < 1e-6, "torn pose read");
                samples.push(ConcurrentSample {
                    time_s: start.elapsed().as_secs_f64(),
                    cost: global_cost(problem, &x)?,
                    gradnorm: global_gradient_norm(problem, &x)?,
                    max_residual,
                });
            }
            Ok(())
        };
        let result = sample();
        shared.stop.store(true, Ordering::Relaxed);
        result
    })?;
    if let Some(e) = shared.failure.lock().unwrap().take() {
        return Err(e);
    }
    Ok(ConcurrentOutcome {
        x: shared.read_all(),
        samples,
        updates_per_robot: shared.updates.iter().map(|u| u.load(Ordering::Relaxed)).collect(),
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
