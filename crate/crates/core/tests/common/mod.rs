#![allow(dead_code)]

use asapp_core::evaluation::spanning_tree_init;
use asapp_core::graph::{generate_grid_world, GridWorld, GridWorldSpec, MultiRobotProblem};
use asapp_core::objective::{LiftedPose, RobotVariable};
use rand::Rng;

pub fn small_spec(robots: usize, poses: usize, dim: usize, seed: u64) -> GridWorldSpec {
    GridWorldSpec {
        robots,
        poses_per_robot: poses,
        loop_closure_prob: 0.4,
        loop_radius_m: 1.5,
        dim,
        seed,
        ..GridWorldSpec::default()
    }
}

pub fn world(robots: usize, poses: usize, dim: usize, seed: u64) -> GridWorld {
    generate_grid_world(&small_spec(robots, poses, dim, seed)).unwrap()
}

/// A lifted problem together with its spanning-tree initialization.
pub fn lifted(
    robots: usize,
    poses: usize,
    dim: usize,
    rank: usize,
    seed: u64,
) -> (MultiRobotProblem, Vec<RobotVariable>) {
    let problem = world(robots, poses, dim, seed).problem.with_rank(rank).unwrap();
    let x0 = spanning_tree_init(&problem).unwrap();
    (problem, x0)
}

pub fn random_point<R: Rng>(rng: &mut R, problem: &MultiRobotProblem, scale: f64) -> Vec<RobotVariable> {
    (0..problem.num_robots())
        .map(|i| {
            RobotVariable::new(
                (0..problem.robot_size(i))
                    .map(|_| LiftedPose::random(rng, problem.dim(), problem.rank(), scale))
                    .collect(),
            )
        })
        .collect()
}
