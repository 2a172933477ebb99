//! Synthetic multi-robot grid world with lawn-mower trajectories.
//!
//! Robots sweep side-by-side lanes one meter apart. In 3D each robot covers
//! two lanes per layer and climbs one meter per layer; in 2D all of a robot's
//! lanes lie in the plane. Rotation noise is a tangent Gaussian pushed
//! through the exponential map, translation noise is isotropic Gaussian.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{planar_rotation, MultiRobotProblem, PoseId, RelativeMeasurement, SePose};
use crate::error::{Error, Result};

const ROW_LENGTH: usize = 5;
const MAX_ATTEMPTS: usize = 100;
const DEFAULT_ROT_NOISE_DEG: f64 = 2.0;
const DEFAULT_TRANS_NOISE_M: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridWorldSpec {
    pub robots: usize,
    pub poses_per_robot: usize,
    pub loop_closure_prob: f64,
    pub loop_radius_m: f64,
    pub rot_noise_deg: f64,
    pub trans_noise_m: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for GridWorldSpec {
    fn default() -> Self {
        GridWorldSpec {
            robots: 5,
            poses_per_robot: 100,
            loop_closure_prob: 0.3,
            loop_radius_m: 1.0,
            rot_noise_deg: DEFAULT_ROT_NOISE_DEG,
            trans_noise_m: DEFAULT_TRANS_NOISE_M,
            dim: 3,
            seed: 0,
        }
    }
}

/// A generated problem with its ground truth in robot-major order.
#[derive(Clone, Debug)]
pub struct GridWorld {
    pub problem: MultiRobotProblem,
    pub ground_truth: Vec<SePose>,
}

impl GridWorld {
    pub fn ground_truth_of(&self, id: PoseId) -> &SePose {
        &self.ground_truth[self.problem.global_index(id)]
    }
}

/// Concentration matching a per-axis tangent standard deviation `sigma`:
/// `‖I − exp(ω)‖²_F ≈ 2‖ω‖²`, so `exp(−κ‖I − R‖²/2)` has variance `1/(2κ)`.
fn rotation_weight(sigma_rad: f64) -> f64 {
    1.0 / (2.0 * sigma_rad * sigma_rad)
}

fn exp_so(omega: &Vector3<f64>, dim: usize) -> Matrix3<f64> {
    if dim == 2 {
        planar_rotation(omega[2])
    } else {
        *Rotation3::new(*omega).matrix()
    }
}

fn yaw_rotation(yaw: f64, dim: usize) -> Matrix3<f64> {
    if dim == 2 {
        planar_rotation(yaw)
    } else {
        *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix()
    }
}

fn trajectory(spec: &GridWorldSpec, robot: usize) -> Vec<SePose> {
    let n = spec.poses_per_robot;
    let rows = n.div_ceil(ROW_LENGTH);
    let lanes = if spec.dim == 3 { 2 } else { rows };
    let positions: Vec<Vector3<f64>> = (0..n)
        .map(|k| {
            let lane_index = k / ROW_LENGTH;
            let layer = lane_index / lanes;
            let within = lane_index % lanes;
            let lane = if layer.is_multiple_of(2) {
                within
            } else {
                lanes - 1 - within
            };
            let along = k % ROW_LENGTH;
            let x = if lane_index.is_multiple_of(2) {
                along
            } else {
                ROW_LENGTH - 1 - along
            };
            Vector3::new(x as f64, (robot * lanes + lane) as f64, layer as f64)
        })
        .collect();
    let mut yaw = 0.0;
    (0..n)
        .map(|k| {
            if k + 1 < n {
                let step = positions[k + 1] - positions[k];
                if step[0].abs() + step[1].abs() > 0.5 {
                    yaw = step[1].atan2(step[0]);
                }
            }
            SePose {
                rotation: yaw_rotation(yaw, spec.dim),
                translation: positions[k],
            }
        })
        .collect()
}

fn noisy_measurement<R: Rng>(
    rng: &mut R,
    spec: &GridWorldSpec,
    truth: &[SePose],
    sizes: &[usize],
    from: PoseId,
    to: PoseId,
    weights: (f64, f64),
) -> RelativeMeasurement {
    let global = |id: PoseId| sizes[..id.robot].iter().sum::<usize>() + id.step;
    let rel = truth[global(from)].between(&truth[global(to)]);
    let sigma_r = spec.rot_noise_deg.to_radians();
    let mut omega = Vector3::zeros();
    let mut dt = Vector3::zeros();
    if spec.dim == 2 {
        omega[2] = sigma_r * rng.sample::<f64, _>(StandardNormal);
        for k in 0..2 {
            dt[k] = spec.trans_noise_m * rng.sample::<f64, _>(StandardNormal);
        }
    } else {
        for k in 0..3 {
            omega[k] = sigma_r * rng.sample::<f64, _>(StandardNormal);
        }
        for k in 0..3 {
            dt[k] = spec.trans_noise_m * rng.sample::<f64, _>(StandardNormal);
        }
    }
    RelativeMeasurement {
        from,
        to,
        rotation: rel.rotation * exp_so(&omega, spec.dim),
        translation: rel.translation + dt,
        weight_rotation: weights.0,
        weight_translation: weights.1,
    }
}

/// Generates a connected grid-world problem; loop closures are resampled up
/// to a bounded number of times until the pose graph is connected.
pub fn generate_grid_world(spec: &GridWorldSpec) -> Result<GridWorld> {
    if spec.robots == 0 || spec.poses_per_robot == 0 {
        return Err(Error::Domain("robots and poses_per_robot must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.loop_closure_prob) {
        return Err(Error::Domain("loop_closure_prob must lie in [0, 1]".into()));
    }
    if !(spec.rot_noise_deg >= 0.0 && spec.trans_noise_m >= 0.0 && spec.loop_radius_m >= 0.0) {
        return Err(Error::Domain("noise parameters and radius must be non-negative".into()));
    }
    if !(2..=3).contains(&spec.dim) {
        return Err(Error::Domain(format!("dimension must be 2 or 3, got {}", spec.dim)));
    }

    let sizes = vec![spec.poses_per_robot; spec.robots];
    let truth: Vec<SePose> = (0..spec.robots).flat_map(|i| trajectory(spec, i)).collect();
    // noiseless problems keep the conditioning of the default noise level
    let sigma_r = if spec.rot_noise_deg > 0.0 {
        spec.rot_noise_deg
    } else {
        DEFAULT_ROT_NOISE_DEG
    };
    let sigma_t = if spec.trans_noise_m > 0.0 {
        spec.trans_noise_m
    } else {
        DEFAULT_TRANS_NOISE_M
    };
    let weights = (rotation_weight(sigma_r.to_radians()), 1.0 / (sigma_t * sigma_t));

    let ids: Vec<PoseId> = (0..spec.robots)
        .flat_map(|i| (0..spec.poses_per_robot).map(move |s| PoseId::new(i, s)))
        .collect();
    let mut candidates = Vec::new();
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            let odometry = ids[a].robot == ids[b].robot && ids[b].step == ids[a].step + 1;
            let dist = (truth[a].translation - truth[b].translation).norm();
            if !odometry && dist <= spec.loop_radius_m + 1e-9 {
                candidates.push((ids[a], ids[b]));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last_error = None;
    for _ in 0..MAX_ATTEMPTS {
        let mut edges = Vec::new();
        for i in 0..spec.robots {
            for s in 0..spec.poses_per_robot.saturating_sub(1) {
                let (from, to) = (PoseId::new(i, s), PoseId::new(i, s + 1));
                edges.push(noisy_measurement(&mut rng, spec, &truth, &sizes, from, to, weights));
            }
        }
        for &(from, to) in &candidates {
            if rng.random_bool(spec.loop_closure_prob) {
                edges.push(noisy_measurement(&mut rng, spec, &truth, &sizes, from, to, weights));
            }
        }
        match MultiRobotProblem::new(spec.dim, sizes.clone(), edges) {
            Ok(problem) => {
                return Ok(GridWorld {
                    problem,
                    ground_truth: truth,
                })
            }
            Err(e @ Error::Disconnected { .. }) => last_error = Some(e),
            Err(e) => return Err(e),
        }
    }
    let detail = last_error.map(|e| e.to_string()).unwrap_or_default();
    Err(Error::Degenerate(format!(
        "no connected grid world after {MAX_ATTEMPTS} attempts: {detail}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GridWorldSpec {
        GridWorldSpec {
            robots: 3,
            poses_per_robot: 20,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_grid_world(&small(4)).unwrap();
        let b = generate_grid_world(&small(4)).unwrap();
        assert_eq!(a.problem.edges(), b.problem.edges());
        let c = generate_grid_world(&small(5)).unwrap();
        assert_ne!(a.problem.edges(), c.problem.edges());
    }

    #[test]
    fn noiseless_measurements_match_ground_truth() {
        let spec = GridWorldSpec {
            rot_noise_deg: 0.0,
            trans_noise_m: 0.0,
            ..small(1)
        };
        let w = generate_grid_world(&spec).unwrap();
        for e in w.problem.edges() {
            let rel = w.ground_truth_of(e.from).between(w.ground_truth_of(e.to));
            assert!((rel.rotation - e.rotation).norm() < 1e-12);
            assert!((rel.translation - e.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn consecutive_poses_are_one_meter_apart() {
        for dim in [2, 3] {
            let spec = GridWorldSpec { dim, ..small(0) };
            let t = trajectory(&spec, 1);
            for k in 1..t.len() {
                assert!(((t[k].translation - t[k - 1].translation).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_scale_problem_is_connected_with_inter_robot_closures() {
        let w = generate_grid_world(&GridWorldSpec::default()).unwrap();
        assert_eq!(w.problem.num_poses(), 500);
        assert_eq!(w.problem.robot_graph(), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        let odometry = 5 * 99;
        assert!(w.problem.edges().len() > odometry + 100);
        assert_eq!(w.ground_truth[0], SePose::identity(3));
    }

    #[test]
    fn impossible_connectivity_fails_after_retries() {
        let spec = GridWorldSpec {
            loop_closure_prob: 0.0,
            ..small(0)
        };
        assert!(matches!(generate_grid_world(&spec), Err(Error::Degenerate(_))));
    }

    #[test]
    fn invalid_probability_rejected() {
        let spec = GridWorldSpec {
            loop_closure_prob: 1.5,
            ..small(0)
        };
        assert!(matches!(generate_grid_world(&spec), Err(Error::Domain(_))));
    }
}
