//! Deterministic discrete-event simulation of the asynchronous system.
//!
//! Each robot owns a Poisson clock; a tick runs one worker step against the
//! robot's cache. Robots periodically send the poses their neighbors need,
//! and messages arrive after a configurable delay. A global counter `k` counts
//! applied Updates and every Update records the staleness of the neighbor
//! values it used.

mod clock;
mod concurrent;
mod oracle;
mod trace;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MultiRobotProblem, PoseId};
use crate::manifold::orthonormality_residual;
use crate::objective::{
    check_conforms, global_cost, global_gradient_norm, local_cost, local_riemannian_gradient, norm_squared, GlobalView,
    LiftedPose, NeighborPoses, RobotVariable,
};
use crate::worker::{worker_step, DivergenceGuard, WorkerConfig};

pub use clock::{MergedClock, PoissonClocks, GENERATOR};
pub use concurrent::{run_concurrent, ConcurrentOutcome, ConcurrentSample};
pub use oracle::synchronous_rcd_oracle;
pub use trace::{measured_max_delay, MessageRecord, SimulationTrace, TraceRecord, TRACE_CSV_HEADER};

const MIN_SEND_PERIOD_S: f64 = 1e-3;
const SEND_PERIOD_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelayKind {
    /// Every Update is visible to the neighbors immediately.
    None,
    Fixed {
        seconds: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub kind: DelayKind,
    /// Seconds between Send operations; defaults to a fifth of the mean
    /// delay, at least one millisecond.
    #[serde(default)]
    pub send_period_s: Option<f64>,
}

impl DelayModel {
    pub fn none() -> Self {
        DelayModel {
            kind: DelayKind::None,
            send_period_s: None,
        }
    }

    pub fn fixed(seconds: f64) -> Self {
        DelayModel {
            kind: DelayKind::Fixed { seconds },
            send_period_s: None,
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        DelayModel {
            kind: DelayKind::Uniform { lo, hi },
            send_period_s: None,
        }
    }

    pub fn with_send_period(mut self, seconds: f64) -> Self {
        self.send_period_s = Some(seconds);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        let valid = match self.kind {
            DelayKind::None => true,
            DelayKind::Fixed { seconds } => ok(seconds),
            DelayKind::Uniform { lo, hi } => ok(lo) && ok(hi) && lo <= hi,
        };
        if !valid {
            return Err(Error::Domain(format!("invalid delay model {:?}", self.kind)));
        }
        if let Some(p) = self.send_period_s {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Domain(format!("send period must be positive, got {p}")));
            }
        }
        Ok(())
    }

    pub fn mean_delay(&self) -> f64 {
        match self.kind {
            DelayKind::None => 0.0,
            DelayKind::Fixed { seconds } => seconds,
            DelayKind::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    /// Period of the SendTimer, or `None` when updates are written through.
    pub fn send_period(&self) -> Option<f64> {
        match self.kind {
            DelayKind::None => None,
            _ => Some(
                self.send_period_s
                    .unwrap_or_else(|| (SEND_PERIOD_FRACTION * self.mean_delay()).max(MIN_SEND_PERIOD_S)),
            ),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.kind {
            DelayKind::None => 0.0,
            DelayKind::Fixed { seconds } => seconds,
            DelayKind::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }
}

/// Stopping rule; the run ends at whichever limit is hit first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub max_time_s: Option<f64>,
    pub max_iterations: Option<u64>,
}

impl Horizon {
    pub fn seconds(t: f64) -> Self {
        Horizon {
            max_time_s: Some(t),
            max_iterations: None,
        }
    }

    pub fn iterations(k: u64) -> Self {
        Horizon {
            max_time_s: None,
            max_iterations: Some(k),
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.max_time_s, self.max_iterations) {
            (None, None) => Err(Error::Domain("horizon needs a time or an iteration limit".into())),
            (Some(t), _) if !(t >= 0.0 && t.is_finite()) => Err(Error::Domain(format!("invalid time horizon {t}"))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub seed: u64,
    /// Record every `trace_stride`-th Update in the trace.
    pub trace_stride: u64,
    /// Keep a copy of the whole iterate every this many Updates.
    pub snapshot_stride: Option<u64>,
    pub divergence_guard: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            seed: 0,
            trace_stride: 1,
            snapshot_stride: None,
            divergence_guard: true,
        }
    }
}

impl SimulationOptions {
    pub fn seeded(seed: u64) -> Self {
        SimulationOptions {
            seed,
            ..Default::default()
        }
    }
}

/// A cached neighbor pose with the sender's commit count at emission.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CachedPose {
    pub value: LiftedPose,
    pub version: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborCache {
    entries: BTreeMap<PoseId, CachedPose>,
}

impl NeighborCache {
    pub fn get(&self, id: PoseId) -> Option<&CachedPose> {
        self.entries.get(&id)
    }

    /// Stores `value` unless a newer version is already cached.
    pub fn store(&mut self, id: PoseId, value: LiftedPose, version: u64) {
        match self.entries.get_mut(&id) {
            Some(entry) if entry.version > version => {}
            Some(entry) => *entry = CachedPose { value, version },
            None => {
                self.entries.insert(id, CachedPose { value, version });
            }
        }
    }

    /// Oldest cached version among the poses of `robot`.
    pub fn version_of(&self, robot: usize) -> Option<u64> {
        self.entries
            .range(PoseId::new(robot, 0)..PoseId::new(robot + 1, 0))
            .map(|(_, c)| c.version)
            .min()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl NeighborPoses for NeighborCache {
    fn neighbor_pose(&self, id: PoseId) -> Option<&LiftedPose> {
        self.entries.get(&id).map(|c| &c.value)
    }
}

/// A robot's own variable, its cache, and its commit count.
#[derive(Clone, Debug)]
pub struct RobotState {
    pub x_i: RobotVariable,
    pub cache: NeighborCache,
    pub commits: u64,
}

/// Global iterate after the Update that set the counter to `k`.
pub type Snapshot = (u64, Vec<RobotVariable>);

#[derive(Clone, Debug)]
pub struct SimulationOutcome {
    pub x: Vec<RobotVariable>,
    pub trace: SimulationTrace,
    pub messages: Vec<MessageRecord>,
    /// Final caches and commit counts.
    pub states: Vec<RobotState>,
    /// `(k, x^k)` pairs, when requested in the options.
    pub snapshots: Vec<Snapshot>,
}

#[derive(Clone, Debug)]
struct Message {
    from: usize,
    version: u64,
    poses: Vec<(PoseId, LiftedPose)>,
}

#[derive(Debug)]
enum EventKind {
    ClockTick,
    Deliver(Message),
    SendTimer,
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::ClockTick => 0,
            EventKind::Deliver(_) => 1,
            EventKind::SendTimer => 2,
        }
    }
}

/// `robot` is the acting robot for ticks and timers and the receiver for
/// deliveries.
#[derive(Debug)]
struct Event {
    time: f64,
    robot: usize,
    kind: EventKind,
    seq: u64,
}

impl Event {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.robot.cmp(&other.robot))
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed so the max-heap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

struct EventQueue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: f64, robot: usize, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            robot,
            kind,
            seq: self.seq,
        });
    }
}

/// Values taken before an Update for the trace audit.
pub(crate) struct PreUpdate {
    local_cost: f64,
    robot_gradnorm_sq: f64,
}

/// Trace bookkeeping shared by the event simulation and the oracle.
pub(crate) struct Recorder {
    stride: u64,
    snapshot_stride: Option<u64>,
    guard: Option<DivergenceGuard>,
    trace: SimulationTrace,
    snapshots: Vec<Snapshot>,
}

impl Recorder {
    pub(crate) fn new(problem: &MultiRobotProblem, x0: &[RobotVariable], options: &SimulationOptions) -> Result<Self> {
        if options.trace_stride == 0 || options.snapshot_stride == Some(0) {
            return Err(Error::Domain("strides must be positive".into()));
        }
        let initial_cost = global_cost(problem, x0)?;
        let initial_gradnorm = global_gradient_norm(problem, x0)?;
        let mut snapshots = Vec::new();
        if options.snapshot_stride.is_some() {
            snapshots.push((0, x0.to_vec()));
        }
        Ok(Recorder {
            stride: options.trace_stride,
            snapshot_stride: options.snapshot_stride,
            guard: options.divergence_guard.then(|| DivergenceGuard::new(initial_cost)),
            trace: SimulationTrace {
                robots: problem.num_robots(),
                initial_cost,
                initial_gradnorm,
                stride: options.trace_stride,
                min_gradnorm_sq: initial_gradnorm * initial_gradnorm,
                updates_per_robot: vec![0; problem.num_robots()],
                ..Default::default()
            },
            snapshots,
        })
    }

    /// Whether the Update that advances the counter to `k` is recorded.
    pub(crate) fn wants(&self, k: u64) -> bool {
        k.is_multiple_of(self.stride)
    }

    pub(crate) fn pre_update(problem: &MultiRobotProblem, robot: usize, x: &[RobotVariable]) -> Result<PreUpdate> {
        let view = GlobalView(x);
        Ok(PreUpdate {
            local_cost: local_cost(problem, robot, &x[robot], &view)?,
            robot_gradnorm_sq: norm_squared(&local_riemannian_gradient(problem, robot, &x[robot], &view)?),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn record(
        &mut self,
        problem: &MultiRobotProblem,
        x: &[RobotVariable],
        k: u64,
        time_s: f64,
        robot: usize,
        pre: Option<PreUpdate>,
        eta_norm_sq: f64,
        staleness: Vec<(usize, u64)>,
    ) -> Result<()> {
        let max_staleness = staleness.iter().map(|s| s.1).max().unwrap_or(0);
        self.trace.iterations = k;
        self.trace.elapsed_s = time_s;
        self.trace.updates_per_robot[robot] += 1;
        self.trace.max_staleness = self.trace.max_staleness.max(max_staleness);
        if let Some(pre) = pre {
            let after = local_cost(problem, robot, &x[robot], &GlobalView(x))?;
            let cost = global_cost(problem, x)?;
            if let Some(guard) = &self.guard {
                guard.check(cost, k)?;
            }
            let gradnorm = global_gradient_norm(problem, x)?;
            self.trace.min_gradnorm_sq = self.trace.min_gradnorm_sq.min(gradnorm * gradnorm);
            self.trace.records.push(TraceRecord {
                k,
                time_s,
                robot,
                cost,
                gradnorm,
                cost_change: after - pre.local_cost,
                robot_gradnorm_sq: pre.robot_gradnorm_sq,
                eta_norm_sq,
                staleness,
                max_staleness,
            });
        }
        if self.snapshot_stride.is_some_and(|s| k.is_multiple_of(s)) {
            self.snapshots.push((k, x.to_vec()));
        }
        Ok(())
    }

    pub(crate) fn finish(
        mut self,
        problem: &MultiRobotProblem,
        x: &[RobotVariable],
    ) -> Result<(SimulationTrace, Vec<Snapshot>)> {
        self.trace.final_cost = global_cost(problem, x)?;
        self.trace.final_gradnorm = global_gradient_norm(problem, x)?;
        if let Some(guard) = &self.guard {
            guard.check(self.trace.final_cost, self.trace.iterations)?;
        }
        Ok((self.trace, self.snapshots))
    }
}

pub(crate) fn validate_inputs(
    problem: &MultiRobotProblem,
    x0: &[RobotVariable],
    configs: &[WorkerConfig],
) -> Result<f64> {
    check_conforms(problem, x0)?;
    for (i, xi) in x0.iter().enumerate() {
        for (s, pose) in xi.poses.iter().enumerate() {
            let residual = orthonormality_residual(&pose.y, problem.dim());
            if residual > 1e-8 {
                return Err(Error::Domain(format!(
                    "initial pose {} is off the manifold (residual {residual:.3e})",
                    PoseId::new(i, s)
                )));
            }
        }
    }
    if configs.len() != problem.num_robots() {
        return Err(Error::Structural(format!(
            "{} worker configs for {} robots",
            configs.len(),
            problem.num_robots()
        )));
    }
    for (i, c) in configs.iter().enumerate() {
        if c.robot != i {
            return Err(Error::Structural(format!("worker config {i} is for robot {}", c.robot)));
        }
    }
    let rate = configs.first().map(|c| c.clock_rate_hz).unwrap_or(1.0);
    if configs.iter().any(|c| c.clock_rate_hz != rate) {
        return Err(Error::Domain("clock rates must be equal across robots".into()));
    }
    Ok(rate)
}

/// The poses of `from` that `to` needs, for every neighbor `to` of `from`.
fn send_lists(problem: &MultiRobotProblem) -> Vec<Vec<(usize, Vec<PoseId>)>> {
    (0..problem.num_robots())
        .map(|from| {
            problem
                .neighbors(from)
                .iter()
                .map(|&to| {
                    let ids = problem
                        .all_neighbor_poses(to)
                        .iter()
                        .copied()
                        .filter(|id| id.robot == from)
                        .collect();
                    (to, ids)
                })
                .collect()
        })
        .collect()
}

/// Runs the event loop from `x0` until the horizon. Caches start filled with
/// `x0` (version 0), as if the initialization had been exchanged at `t = 0`.
pub fn run_simulation(
    problem: &MultiRobotProblem,
    x0: &[RobotVariable],
    configs: &[WorkerConfig],
    delay: &DelayModel,
    horizon: &Horizon,
    options: &SimulationOptions,
) -> Result<SimulationOutcome> {
    let rate = validate_inputs(problem, x0, configs)?;
    delay.validate()?;
    horizon.validate()?;
    let n = problem.num_robots();
    let lists = send_lists(problem);

    let mut x: Vec<RobotVariable> = x0.to_vec();
    let mut caches: Vec<NeighborCache> = (0..n)
        .map(|i| {
            let mut cache = NeighborCache::default();
            for &id in problem.all_neighbor_poses(i) {
                cache.store(id, x0[id.robot].poses[id.step], 0);
            }
            cache
        })
        .collect();
    let mut commits = vec![0u64; n];
    // global counter value after each commit of each robot; entry 0 is x⁰
    let mut commit_steps: Vec<Vec<u64>> = vec![vec![0]; n];
    let mut messages = Vec::new();
    let mut recorder = Recorder::new(problem, x0, options)?;

    let mut clocks = PoissonClocks::new(options.seed, n, rate)?;
    let mut aux = ChaCha8Rng::seed_from_u64(options.seed);
    aux.set_stream(clock::AUX_STREAM);
    let mut queue = EventQueue {
        heap: BinaryHeap::new(),
        seq: 0,
    };
    for i in 0..n {
        let t = clocks.interarrival(i);
        queue.push(t, i, EventKind::ClockTick);
    }
    if let Some(period) = delay.send_period() {
        for i in 0..n {
            let phase = period * aux.random::<f64>();
            queue.push(phase, i, EventKind::SendTimer);
        }
    }

    let mut k = 0u64;
    let mut now = 0.0;
    loop {
        if horizon.max_iterations.is_some_and(|m| k >= m) {
            break;
        }
        let Some(event) = queue.heap.pop() else {
            break;
        };
        if horizon.max_time_s.is_some_and(|t| event.time > t) {
            now = horizon.max_time_s.unwrap();
            break;
        }
        now = event.time;
        let i = event.robot;
        match event.kind {
            EventKind::ClockTick => {
                let staleness: Vec<(usize, u64)> = problem
                    .neighbors(i)
                    .iter()
                    .map(|&j| {
                        let v = caches[i].version_of(j).unwrap_or(0);
                        let b = if v >= commits[j] {
                            0
                        } else {
                            k + 1 - commit_steps[j][v as usize + 1]
                        };
                        (j, b)
                    })
                    .collect();
                let outcome = worker_step(&configs[i], problem, &x[i], &caches[i])?;
                let pre = if recorder.wants(k + 1) {
                    Some(Recorder::pre_update(problem, i, &x)?)
                } else {
                    None
                };
                x[i] = outcome.x_i;
                k += 1;
                commits[i] += 1;
                commit_steps[i].push(k);
                if delay.send_period().is_none() {
                    for (to, ids) in &lists[i] {
                        for &id in ids {
                            caches[*to].store(id, x[i].poses[id.step], commits[i]);
                        }
                        messages.push(MessageRecord {
                            sent_s: now,
                            delivered_s: now,
                            from: i,
                            to: *to,
                            version: commits[i],
                            poses: ids.clone(),
                        });
                    }
                }
                let eta_sq = outcome.diagnostics.eta_norm * outcome.diagnostics.eta_norm;
                recorder.record(problem, &x, k, now, i, pre, eta_sq, staleness)?;
                let next = now + clocks.interarrival(i);
                queue.push(next, i, EventKind::ClockTick);
            }
            EventKind::SendTimer => {
                for (to, ids) in &lists[i] {
                    let d = delay.sample(&mut aux);
                    let message = Message {
                        from: i,
                        version: commits[i],
                        poses: ids.iter().map(|&id| (id, x[i].poses[id.step])).collect(),
                    };
                    messages.push(MessageRecord {
                        sent_s: now,
                        delivered_s: now + d,
                        from: i,
                        to: *to,
                        version: commits[i],
                        poses: ids.clone(),
                    });
                    queue.push(now + d, *to, EventKind::Deliver(message));
                }
                let period = delay.send_period().expect("timers only run with a send period");
                queue.push(now + period, i, EventKind::SendTimer);
            }
            EventKind::Deliver(message) => {
                debug_assert!(message.poses.iter().all(|(id, _)| id.robot == message.from));
                for (id, value) in message.poses {
                    caches[i].store(id, value, message.version);
                }
            }
        }
    }
    let (mut trace, snapshots) = recorder.finish(problem, &x)?;
    trace.elapsed_s = now;
    let states = x
        .iter()
        .zip(caches)
        .zip(commits)
        .map(|((x_i, cache), commits)| RobotState {
            x_i: x_i.clone(),
            cache,
            commits,
        })
        .collect();
    Ok(SimulationOutcome {
        x,
        trace,
        messages,
        states,
        snapshots,
    })
}

/// Private poses found in a message log, which must be empty.
pub fn private_pose_transmissions(problem: &MultiRobotProblem, messages: &[MessageRecord]) -> Vec<PoseId> {
    messages
        .iter()
        .flat_map(|m| m.poses.iter().copied())
        .filter(|&id| !problem.is_public(id))
        .collect()
}
