//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Lines are written straight to the process stdout so they show without
//! `--nocapture`. The test fails on any FAIL outside `KNOWN_RED`, and also
//! when a known-red criterion starts passing so the list stays honest.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use asapp_cli::commands::cmd_verify;
use asapp_cli::config::{ProblemSource, RunConfig};
use asapp_core::evaluation::{round_to_sed, rounded_cost, spanning_tree_init};
use asapp_core::graph::{generate_grid_world, parse_g2o, partition, GridWorldSpec, MultiRobotProblem};
use asapp_core::manifold::{
    orthonormality_residual, random_frame, random_stiefel, random_tangent_frame, stiefel_project, stiefel_retract,
    Frame,
};
use asapp_core::objective::{
    estimate_lipschitz, global_cost, global_euclidean_gradient, global_riemannian_gradient, retract_variable,
    LiftedPose, PoseTangent, RobotVariable,
};
use asapp_core::sim::{
    private_pose_transmissions, run_simulation, synchronous_rcd_oracle, DelayModel, Horizon, MergedClock,
    PoissonClocks, SimulationOptions,
};
use asapp_core::worker::{gamma_bar, stepsize_condition, StepsizeMode, StepsizePolicy, WorkerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Criteria expected to fail; see the README for the analysis.
const KNOWN_RED: &[u32] = &[7];

struct Verdict {
    id: String,
    pass: Option<bool>,
    detail: String,
}

impl Verdict {
    fn new(id: impl Into<String>, pass: bool, detail: String) -> Self {
        Verdict {
            id: id.into(),
            pass: Some(pass),
            detail,
        }
    }

    fn skip(id: impl Into<String>, detail: String) -> Self {
        Verdict {
            id: id.into(),
            pass: None,
            detail,
        }
    }
}

fn emit(v: &Verdict, elapsed: Duration) {
    let tag = match v.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    let line = format!(
        "{tag} criterion {:<3} {} [{:.1} s]\n",
        v.id,
        v.detail,
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn grid(robots: usize, poses: usize, seed: u64) -> MultiRobotProblem {
    generate_grid_world(&GridWorldSpec {
        robots,
        poses_per_robot: poses,
        seed,
        ..GridWorldSpec::default()
    })
    .unwrap()
    .problem
    .with_rank(5)
    .unwrap()
}

fn c1_manifold() -> Verdict {
    const CHECKS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_orth, mut worst_idem, mut worst_perp, mut worst_fd) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..CHECKS {
        let d = rng.random_range(2..=3);
        let r = rng.random_range(d..=10);
        let y = random_stiefel(&mut rng, d, r);
        let v = random_frame(&mut rng, d, r) * 10f64.powf(rng.random_range(-3.0..1.0));
        let t = stiefel_project(&y, &v);
        let scale = v.norm().max(f64::MIN_POSITIVE);
        worst_idem = worst_idem.max((stiefel_project(&y, &t) - t).norm() / scale);
        worst_perp = worst_perp.max((v - t).dot(&t).abs() / (scale * scale));
        let moved = stiefel_retract(&y, &t);
        worst_orth = worst_orth.max(orthonormality_residual(&moved, d));
        // d/dh R(y, h ξ) at h = 0 is ξ
        let xi = random_tangent_frame(&mut rng, &y, d, r);
        let h = 1e-4 / xi.norm();
        let fd: Frame = (stiefel_retract(&y, &(xi * h)) - stiefel_retract(&y, &(xi * -h))) / (2.0 * h);
        worst_fd = worst_fd.max((fd - xi).norm() / xi.norm());
    }
    let pass = worst_orth <= 1e-12 && worst_idem <= 1e-10 && worst_perp <= 1e-10 && worst_fd <= 1e-6;
    Verdict::new(
        "1",
        pass,
        format!(
            "manifold suite, {CHECKS} checks: orthonormality {worst_orth:.1e} (<= 1e-12), idempotence {worst_idem:.1e}, \
             orthogonality {worst_perp:.1e} (<= 1e-10), retraction derivative {worst_fd:.1e} (<= 1e-6)"
        ),
    )
}

fn random_point(rng: &mut ChaCha8Rng, problem: &MultiRobotProblem) -> Vec<RobotVariable> {
    (0..problem.num_robots())
        .map(|i| {
            RobotVariable::new(
                (0..problem.robot_size(i))
                    .map(|_| LiftedPose::random(rng, problem.dim(), problem.rank(), 2.0))
                    .collect(),
            )
        })
        .collect()
}

fn c2_gradients() -> Verdict {
    let mut worst_e = 0f64;
    let mut worst_r = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20u64 {
        let robots = 2 + (seed as usize % 2);
        let problem = generate_grid_world(&GridWorldSpec {
            robots,
            poses_per_robot: 30 / robots,
            dim: 2 + (seed as usize % 2),
            loop_radius_m: 1.5,
            seed,
            ..GridWorldSpec::default()
        })
        .unwrap()
        .problem;
        let problem = problem.clone().with_rank(problem.dim() + 2).unwrap();
        let (d, r) = (problem.dim(), problem.rank());
        let x = random_point(&mut rng, &problem);

        // coordinatewise central differences of the Euclidean gradient
        let grad = global_euclidean_gradient(&problem, &x).unwrap();
        let (mut err, mut norm) = (0.0, 0.0);
        let h = 1e-4;
        for (i, grad_i) in grad.iter().enumerate() {
            for (s, grad_is) in grad_i.iter().enumerate() {
                let mut coords: Vec<(bool, usize, usize)> = Vec::new();
                for row in 0..r {
                    for c in 0..d {
                        coords.push((true, row, c));
                    }
                    coords.push((false, row, 0));
                }
                for (is_y, row, c) in coords {
                    let eval = |delta: f64| {
                        let mut xx = x.clone();
                        if is_y {
                            xx[i].poses[s].y[(row, c)] += delta;
                        } else {
                            xx[i].poses[s].p[row] += delta;
                        }
                        global_cost(&problem, &xx).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let exact = if is_y { grad_is.y[(row, c)] } else { grad_is.p[row] };
                    err += (fd - exact).powi(2);
                    norm += exact * exact;
                }
            }
        }
        worst_e = worst_e.max((err / norm).sqrt());

        // directional derivatives along the retraction
        let rgrad = global_riemannian_gradient(&problem, &x).unwrap();
        for _ in 0..10 {
            let xi: Vec<Vec<PoseTangent>> = x
                .iter()
                .map(|xi| {
                    xi.poses
                        .iter()
                        .map(|pose| PoseTangent {
                            y: random_tangent_frame(&mut rng, &pose.y, d, r),
                            p: asapp_core::manifold::random_liftvec(&mut rng, r),
                        })
                        .collect()
                })
                .collect();
            let xi_norm: f64 = xi.iter().flatten().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            let g_norm: f64 = rgrad.iter().flatten().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            let moved = |t: f64| -> Vec<RobotVariable> {
                x.iter()
                    .zip(&xi)
                    .map(|(xv, s)| retract_variable(xv, &s.iter().map(|v| v.scale(t)).collect::<Vec<_>>()))
                    .collect()
            };
            let h = 1e-5 / xi_norm;
            let fd =
                (global_cost(&problem, &moved(h)).unwrap() - global_cost(&problem, &moved(-h)).unwrap()) / (2.0 * h);
            let exact: f64 = rgrad
                .iter()
                .flatten()
                .zip(xi.iter().flatten())
                .map(|(a, b)| a.dot(b))
                .sum();
            worst_r = worst_r.max((fd - exact).abs() / (g_norm * xi_norm));
        }
    }
    Verdict::new(
        "2",
        worst_e <= 1e-6 && worst_r <= 1e-6,
        format!("gradients vs central differences on 20 problems: Euclidean {worst_e:.1e}, Riemannian {worst_r:.1e} (<= 1e-6)"),
    )
}

fn c3_oracle_equivalence() -> Verdict {
    let problem = grid(5, 20, 0);
    let x0 = spanning_tree_init(&problem).unwrap();
    let gamma = 1.0 / estimate_lipschitz(&problem, 2.0).unwrap().l_hat;
    let options = SimulationOptions {
        seed: 3,
        snapshot_stride: Some(1),
        ..SimulationOptions::default()
    };
    let configs = WorkerConfig::uniform(5, 1000.0, StepsizePolicy::fixed(gamma).unwrap(), false);
    let sim = run_simulation(
        &problem,
        &x0,
        &configs,
        &DelayModel::none(),
        &Horizon::iterations(1000),
        &options,
    )
    .unwrap();
    let oracle = synchronous_rcd_oracle(&problem, &x0, gamma, 1000, 1000.0, &options).unwrap();
    let mut worst = 0f64;
    for ((ka, xa), (kb, xb)) in sim.snapshots.iter().zip(&oracle.snapshots) {
        assert_eq!(ka, kb);
        for (pa, pb) in xa
            .iter()
            .flat_map(|v| v.poses.iter())
            .zip(xb.iter().flat_map(|v| v.poses.iter()))
        {
            worst = worst.max((pa.y - pb.y).amax()).max((pa.p - pb.p).amax());
        }
    }
    let complete = sim.snapshots.len() == 1001 && oracle.snapshots.len() == 1001;
    Verdict::new(
        "3",
        complete && worst <= 1e-12,
        format!(
            "zero-delay simulation vs synchronous oracle, 1000 iterations: max state difference {worst:.1e} (<= 1e-12)"
        ),
    )
}

fn c4_monotone() -> Verdict {
    let problem = grid(5, 20, 0);
    let x0 = spanning_tree_init(&problem).unwrap();
    let l_hat = estimate_lipschitz(&problem, 2.0).unwrap().l_hat;
    let gamma = 0.9 / l_hat;
    let configs = WorkerConfig::uniform(5, 1000.0, StepsizePolicy::fixed(gamma).unwrap(), false);
    let out = run_simulation(
        &problem,
        &x0,
        &configs,
        &DelayModel::none(),
        &Horizon::iterations(10_000),
        &SimulationOptions::seeded(4),
    )
    .unwrap();
    let trace = &out.trace;
    // the global cost is a sum over edges, so equal values can differ by rounding
    let slack = 1e-12 * trace.initial_cost;
    let mut prev = trace.initial_cost;
    let (mut increases, mut worst) = (0, 0f64);
    for r in &trace.records {
        if r.cost > prev + slack || r.cost_change > slack {
            increases += 1;
        }
        worst = worst.max(r.cost - prev);
        prev = r.cost;
    }
    Verdict::new(
        "4",
        trace.records.len() == 10_000 && increases == 0,
        format!(
            "gamma = 0.9/L ({gamma:.3e}), 10000 zero-delay updates: {increases} increases, largest step change {worst:.2e}, \
             f {:.2} -> {:.2}",
            trace.initial_cost, trace.final_cost
        ),
    )
}

fn c5_rate_bound() -> Vec<Verdict> {
    let out_dir = std::env::temp_dir().join("asapp-acceptance-c5");
    let cases: [(u64, &str, Option<f64>); 3] = [
        (0, "none", None),
        (10, "fixed:0.2", Some(0.2)),
        (50, "fixed:2", Some(2.0)),
    ];
    cases
        .iter()
        .map(|&(b, delay, period)| {
            let config = RunConfig {
                problem: ProblemSource::Synthetic(GridWorldSpec {
                    robots: 3,
                    poses_per_robot: 20,
                    ..GridWorldSpec::default()
                }),
                gamma_mode: StepsizeMode::Theorem,
                assumed_delay: b,
                clock_rate_hz: 1.0,
                delay: delay.into(),
                send_period_s: period,
                horizon: "10000it".into(),
                seeds: (0..20).collect(),
                out: out_dir.clone(),
                ..RunConfig::default()
            };
            match cmd_verify(&config) {
                Ok(report) => Verdict::new(
                    format!("5/B={b}"),
                    report.holds,
                    format!(
                        "mean min ||rgrad f||^2 {:.3e} <= 2n f0/(gamma K) {:.3e} over 20 seeds, measured B {} <= {b}",
                        report.mean_min_gradnorm_sq, report.mean_bound, report.max_measured_b
                    ),
                ),
                Err(e) => Verdict::new(format!("5/B={b}"), false, format!("{e}")),
            }
        })
        .collect()
}

fn c6_stepsize() -> Verdict {
    let mut worst = 0f64;
    let mut points = 0;
    for b in [1u64, 2, 3, 5, 8, 13, 50, 100, 500, 1000] {
        for k in 0..10 {
            let rho = 0.05 + 0.1 * k as f64;
            for m in 0..10 {
                let alpha = 0.5 + 0.25 * m as f64;
                let l = 10f64.powf(-2.0 + 0.6 * m as f64);
                let gamma = gamma_bar(b, rho, alpha, l).unwrap();
                worst = worst.max(stepsize_condition(gamma, b, rho, alpha, l).abs());
                points += 1;
            }
        }
    }
    let mut exact = true;
    for l in [1e-3, 0.7, 3.0, 16_000.0, 1e9] {
        exact &= gamma_bar(0, 0.4, 1.0, l).unwrap() == 1.0 / l;
    }
    Verdict::new(
        "6",
        worst <= 1e-12 && exact && points == 1000,
        format!("stepsize condition residual over {points} grid points {worst:.1e} (<= 1e-12), B = 0 gives exactly 1/L: {exact}"),
    )
}

/// Final gradient norm per (delay, seed) on the 5 x 20 grid at rate 1 kHz;
/// diverged runs count as infinite.
fn sweep(gamma: f64, delays: &[f64], seeds: u64) -> Vec<(f64, Vec<f64>, u64)> {
    let problems: Vec<(MultiRobotProblem, Vec<RobotVariable>)> = (0..seeds)
        .map(|seed| {
            let p = grid(5, 20, seed);
            let x0 = spanning_tree_init(&p).unwrap();
            (p, x0)
        })
        .collect();
    let configs = WorkerConfig::uniform(5, 1000.0, StepsizePolicy::fixed(gamma).unwrap(), false);
    delays
        .iter()
        .map(|&delay| {
            let mut max_b = 0;
            let finals = problems
                .iter()
                .enumerate()
                .map(|(seed, (problem, x0))| {
                    match run_simulation(
                        problem,
                        x0,
                        &configs,
                        &DelayModel::fixed(delay),
                        &Horizon::seconds(30.0),
                        &SimulationOptions {
                            seed: seed as u64,
                            trace_stride: 1000,
                            ..SimulationOptions::default()
                        },
                    ) {
                        Ok(out) => {
                            max_b = max_b.max(out.trace.max_staleness);
                            out.trace.final_gradnorm
                        }
                        Err(_) => f64::INFINITY,
                    }
                })
                .collect();
            (delay, finals, max_b)
        })
        .collect()
}

fn summarize_sweep(rows: &[(f64, Vec<f64>, u64)]) -> (bool, String) {
    let means: Vec<f64> = rows
        .iter()
        .map(|r| r.1.iter().sum::<f64>() / r.1.len() as f64)
        .collect();
    let monotone = means.iter().all(|m| m.is_finite()) && means.windows(2).all(|w| w[0] <= w[1]);
    let diverged: usize = rows.iter().map(|r| r.1.iter().filter(|g| !g.is_finite()).count()).sum();
    let parts: Vec<String> = rows
        .iter()
        .zip(&means)
        .map(|(r, m)| format!("{} s: {m:.3e} (B {})", r.0, r.2))
        .collect();
    (monotone, format!("{}; {diverged} diverged runs", parts.join(", ")))
}

fn c7_delay_sweep() -> Vec<Verdict> {
    let delays = [0.05, 0.2, 0.5, 1.0];
    let (pass, detail) = summarize_sweep(&sweep(5e-4, &delays, 10));
    let (pass_b, detail_b) = summarize_sweep(&sweep(2.5e-4, &delays, 10));
    vec![
        Verdict::new(
            "7",
            pass,
            format!("gamma 5e-4, mean final gradnorm after 30 s, 10 seeds: {detail}"),
        ),
        Verdict::new(
            "7b",
            pass_b,
            format!("supplementary, gamma 2.5e-4 (same step under a halved cost): {detail_b}"),
        ),
    ]
}

fn c8_clocks() -> Verdict {
    let (n, rate, events) = (5usize, 10.0, 100_000usize);
    let mut clock = MergedClock::new(PoissonClocks::new(8, n, rate).unwrap());
    let mut counts = vec![0u64; n];
    let mut last = 0.0;
    for _ in 0..events {
        let (i, t) = clock.next_tick().unwrap();
        counts[i] += 1;
        last = t;
    }
    let merged_rate = events as f64 / last;
    let rate_err = (merged_rate / (n as f64 * rate) - 1.0).abs();
    let expected = events as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((n - 1) as f64).unwrap().inverse_cdf(0.99);
    Verdict::new(
        "8",
        rate_err <= 0.03 && chi2 <= critical,
        format!(
            "merged rate {merged_rate:.3} vs n*lambda {} ({:.2}%, <= 3%), chi^2 {chi2:.2} <= {critical:.3} (df {}, 1%)",
            n as f64 * rate,
            100.0 * rate_err,
            n - 1
        ),
    )
}

fn intel_path() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("ASAPP_INTEL_G2O") {
        return Some(PathBuf::from(p));
    }
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    ["data/intel.g2o", "data/input_INTEL_g2o.g2o"]
        .iter()
        .map(|p| root.join(p))
        .find(|p| p.exists())
}

fn c9_intel() -> Verdict {
    let Some(path) = intel_path() else {
        return Verdict::skip("9", "Intel dataset absent (set ASAPP_INTEL_G2O to its path)".into());
    };
    let file = match std::fs::File::open(&path) {
        Ok(f) => f,
        Err(e) => return Verdict::new("9", false, format!("{}: {e}", path.display())),
    };
    let graph = match parse_g2o(std::io::BufReader::new(file), 2) {
        Ok(g) => g,
        Err(e) => return Verdict::new("9", false, format!("parse failed: {e}")),
    };
    let counts_ok = graph.num_poses() == 1228 && graph.num_edges() == 1483;
    let problem = partition(&graph, 5).unwrap().with_rank(5).unwrap();
    let gamma: f64 = std::env::var("ASAPP_INTEL_GAMMA")
        .ok()
        .and_then(|g| g.parse().ok())
        .unwrap_or(0.5);
    let configs = WorkerConfig::uniform(5, 1000.0, StepsizePolicy::fixed(gamma).unwrap(), true);
    let target = 393.7;
    let start = Instant::now();
    let mut x = spanning_tree_init(&problem).unwrap();
    let mut best = f64::INFINITY;
    let mut chunk = 0;
    while start.elapsed() < Duration::from_secs(600) && best > target * 1.01 {
        let out = match run_simulation(
            &problem,
            &x,
            &configs,
            &DelayModel::none(),
            &Horizon::iterations(20_000),
            &SimulationOptions {
                seed: chunk,
                trace_stride: 20_000,
                ..SimulationOptions::default()
            },
        ) {
            Ok(o) => o,
            Err(e) => return Verdict::new("9", false, format!("run failed at gamma {gamma}: {e}")),
        };
        x = out.x;
        best = best.min(rounded_cost(&problem, &round_to_sed(&x, 2).unwrap()).unwrap());
        chunk += 1;
    }
    Verdict::new(
        "9",
        counts_ok && best <= target * 1.01,
        format!(
            "{} poses / {} edges (1228 / 1483), rounded cost {best:.2} vs {target} (within 1%)",
            graph.num_poses(),
            graph.num_edges()
        ),
    )
}

fn c10_privacy() -> Verdict {
    let problem = grid(5, 20, 0);
    let x0 = spanning_tree_init(&problem).unwrap();
    let gamma = 1.0 / estimate_lipschitz(&problem, 2.0).unwrap().l_hat;
    let configs = WorkerConfig::uniform(5, 1000.0, StepsizePolicy::fixed(gamma).unwrap(), false);
    let out = run_simulation(
        &problem,
        &x0,
        &configs,
        &DelayModel::uniform(0.01, 0.2),
        &Horizon::seconds(5.0),
        &SimulationOptions::seeded(10),
    )
    .unwrap();
    let leaked = private_pose_transmissions(&problem, &out.messages);
    let poses_sent: usize = out.messages.iter().map(|m| m.poses.len()).sum();
    Verdict::new(
        "10",
        !out.messages.is_empty() && leaked.is_empty(),
        format!(
            "{} messages carrying {poses_sent} poses, {} private-pose transmissions",
            out.messages.len(),
            leaked.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut verdicts: Vec<Verdict> = Vec::new();
    let mut timed = |run: &dyn Fn() -> Vec<Verdict>, budget: Option<Duration>| {
        let start = Instant::now();
        let mut vs = run();
        let elapsed = start.elapsed();
        for v in &mut vs {
            if let (Some(limit), Some(true)) = (budget, v.pass) {
                if elapsed > limit {
                    v.pass = Some(false);
                    v.detail += &format!("; runtime over {} s", limit.as_secs());
                }
            }
            emit(v, elapsed);
        }
        verdicts.extend(vs);
    };
    timed(&|| vec![c1_manifold()], Some(Duration::from_secs(10)));
    timed(&|| vec![c2_gradients()], Some(Duration::from_secs(30)));
    timed(&|| vec![c3_oracle_equivalence()], None);
    timed(&|| vec![c4_monotone()], None);
    timed(&c5_rate_bound, Some(Duration::from_secs(300)));
    timed(&|| vec![c6_stepsize()], None);
    timed(&c7_delay_sweep, Some(Duration::from_secs(300)));
    timed(&|| vec![c8_clocks()], None);
    timed(&|| vec![c9_intel()], None);
    timed(&|| vec![c10_privacy()], None);

    let criterion = |v: &Verdict| -> u32 {
        v.id.split(|c: char| !c.is_ascii_digit())
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    let unexpected: Vec<&str> = verdicts
        .iter()
        .filter(|v| v.pass == Some(false) && !KNOWN_RED.contains(&criterion(v)) && !v.id.ends_with('b'))
        .map(|v| v.id.as_str())
        .collect();
    let fixed: Vec<&str> = verdicts
        .iter()
        .filter(|v| v.pass == Some(true) && KNOWN_RED.contains(&criterion(v)) && !v.id.ends_with('b'))
        .map(|v| v.id.as_str())
        .collect();
    assert!(unexpected.is_empty(), "unexpected failures: {unexpected:?}");
    assert!(
        fixed.is_empty(),
        "known-red criteria now pass, update KNOWN_RED: {fixed:?}"
    );
}
