//! Pose-graph data model and the multi-robot partition of it.
//!
//! Rotations are carried in `Matrix3` storage; for planar problems only the
//! leading 2×2 block is populated and the rest is zero, matching the padding
//! convention of [`crate::manifold`].

mod g2o;
mod synthetic;

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::MAX_RANK;

pub use g2o::{parse_g2o, parse_g2o_str, write_g2o};
pub use synthetic::{generate_grid_world, GridWorld, GridWorldSpec};

/// Pose `τ` of robot `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PoseId {
    pub robot: usize,
    pub step: usize,
}

impl PoseId {
    pub fn new(robot: usize, step: usize) -> Self {
        PoseId { robot, step }
    }
}

impl fmt::Display for PoseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.robot, self.step)
    }
}

/// A rigid transform in SE(d) with padded storage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SePose {
    pub fn identity(d: usize) -> Self {
        SePose {
            rotation: padded_identity(d),
            translation: Vector3::zeros(),
        }
    }

    pub fn planar(x: f64, y: f64, theta: f64) -> Self {
        SePose {
            rotation: planar_rotation(theta),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SePose) -> SePose {
        SePose {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> SePose {
        let rt = self.rotation.transpose();
        SePose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// The transform taking `self` to `other`, i.e. `self⁻¹ ∘ other`.
    pub fn between(&self, other: &SePose) -> SePose {
        self.inverse().compose(other)
    }
}

/// Identity in the leading `d × d` block and zero elsewhere.
pub fn padded_identity(d: usize) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for i in 0..d {
        m[(i, i)] = 1.0;
    }
    m
}

/// Planar rotation by `theta` in the leading 2×2 block.
pub fn planar_rotation(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 0.0)
}

/// Checks that the leading `d × d` block of `rot` lies in SO(d) and that the
/// padding is zero.
pub fn is_rotation(rot: &Matrix3<f64>, d: usize, tol: f64) -> bool {
    let pad_ok = (0..3).all(|i| (0..3).all(|j| i < d && j < d || rot[(i, j)] == 0.0));
    let gram = rot.transpose() * rot;
    let orth = (gram - padded_identity(d)).norm() <= tol;
    let det = match d {
        2 => rot[(0, 0)] * rot[(1, 1)] - rot[(0, 1)] * rot[(1, 0)],
        _ => rot.determinant(),
    };
    pad_ok && orth && det > 0.0
}

/// A weighted relative-pose edge `(R̃, t̃, w_R, w_t)` from `from` to `to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeMeasurement {
    pub from: PoseId,
    pub to: PoseId,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub weight_rotation: f64,
    pub weight_translation: f64,
}

impl RelativeMeasurement {
    pub fn transform(&self) -> SePose {
        SePose {
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    pub fn is_inter_robot(&self) -> bool {
        self.from.robot != self.to.robot
    }
}

/// A single-robot pose graph as read from a dataset. All poses belong to
/// robot 0; `vertices` holds the initial values stored in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraph {
    pub dim: usize,
    pub vertices: Vec<SePose>,
    pub edges: Vec<RelativeMeasurement>,
}

impl PoseGraph {
    pub fn num_poses(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

/// A pose graph partitioned among robots, together with the robot-level graph
/// and the public/private classification of poses.
#[derive(Clone, Debug)]
pub struct MultiRobotProblem {
    dim: usize,
    rank: usize,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    edges: Vec<RelativeMeasurement>,
    robot_neighbors: Vec<Vec<usize>>,
    public_poses: Vec<Vec<usize>>,
    private_edges: Vec<Vec<usize>>,
    shared_edges: Vec<Vec<usize>>,
    neighbor_poses: Vec<Vec<PoseId>>,
    pose_edges: Vec<Vec<Vec<usize>>>,
}

impl MultiRobotProblem {
    /// Builds a problem with relaxation rank `r = d`. Validates ids, weights
    /// and rotations, and requires the pose graph to be weakly connected.
    pub fn new(dim: usize, sizes: Vec<usize>, edges: Vec<RelativeMeasurement>) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::Domain(format!("dimension must be 2 or 3, got {dim}")));
        }
        if sizes.is_empty() {
            return Err(Error::Domain("at least one robot is required".into()));
        }
        let n = sizes.len();
        for (k, e) in edges.iter().enumerate() {
            for id in [e.from, e.to] {
                if id.robot >= n || id.step >= sizes[id.robot] {
                    return Err(Error::Structural(format!("edge {k}: unknown pose {id}")));
                }
            }
            if e.from == e.to {
                return Err(Error::Structural(format!("edge {k}: self loop at {}", e.from)));
            }
            if !(e.weight_rotation > 0.0 && e.weight_translation > 0.0)
                || !e.weight_rotation.is_finite()
                || !e.weight_translation.is_finite()
            {
                return Err(Error::Domain(format!("edge {k}: weights must be positive")));
            }
            if !is_rotation(&e.rotation, dim, 1e-8) {
                return Err(Error::Domain(format!("edge {k}: rotation not in SO({dim})")));
            }
            if dim == 2 && e.translation[2] != 0.0 {
                return Err(Error::Structural(format!("edge {k}: planar translation has z")));
            }
        }

        let mut offsets = Vec::with_capacity(n);
        let mut total = 0;
        for &s in &sizes {
            offsets.push(total);
            total += s;
        }

        let mut robot_neighbors = vec![BTreeSet::new(); n];
        let mut public_poses = vec![BTreeSet::new(); n];
        let mut neighbor_poses = vec![BTreeSet::new(); n];
        let mut private_edges = vec![Vec::new(); n];
        let mut shared_edges = vec![Vec::new(); n];
        let mut pose_edges: Vec<Vec<Vec<usize>>> = sizes.iter().map(|&s| vec![Vec::new(); s]).collect();
        for (k, e) in edges.iter().enumerate() {
            let (a, b) = (e.from, e.to);
            pose_edges[a.robot][a.step].push(k);
            pose_edges[b.robot][b.step].push(k);
            if a.robot == b.robot {
                private_edges[a.robot].push(k);
            } else {
                robot_neighbors[a.robot].insert(b.robot);
                robot_neighbors[b.robot].insert(a.robot);
                public_poses[a.robot].insert(a.step);
                public_poses[b.robot].insert(b.step);
                neighbor_poses[a.robot].insert(b);
                neighbor_poses[b.robot].insert(a);
                shared_edges[a.robot].push(k);
                shared_edges[b.robot].push(k);
            }
        }

        let problem = MultiRobotProblem {
            dim,
            rank: dim,
            sizes,
            offsets,
            edges,
            robot_neighbors: robot_neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
            public_poses: public_poses.into_iter().map(|s| s.into_iter().collect()).collect(),
            private_edges,
            shared_edges,
            neighbor_poses: neighbor_poses.into_iter().map(|s| s.into_iter().collect()).collect(),
            pose_edges,
        };
        let components = problem.connected_components();
        if components.len() > 1 {
            return Err(Error::Disconnected {
                count: components.len(),
                representatives: components.iter().map(|c| c[0]).collect(),
            });
        }
        Ok(problem)
    }

    /// Sets the relaxation rank `r` (`d <= r <= MAX_RANK`).
    pub fn with_rank(mut self, rank: usize) -> Result<Self> {
        if rank < self.dim || rank > MAX_RANK {
            return Err(Error::Domain(format!("rank {rank} outside [{}, {MAX_RANK}]", self.dim)));
        }
        self.rank = rank;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_robots(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_poses(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn robot_size(&self, robot: usize) -> usize {
        self.sizes[robot]
    }

    pub fn robot_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn edges(&self) -> &[RelativeMeasurement] {
        &self.edges
    }

    /// Position of `id` in the robot-major global ordering.
    pub fn global_index(&self, id: PoseId) -> usize {
        self.offsets[id.robot] + id.step
    }

    pub fn pose_at(&self, global: usize) -> PoseId {
        let robot = match self.offsets.binary_search(&global) {
            Ok(mut i) => {
                // skip robots without poses that share the offset
                while i + 1 < self.offsets.len() && self.offsets[i + 1] == global {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        };
        PoseId::new(robot, global - self.offsets[robot])
    }

    /// Robots adjacent to `robot` in the robot-level graph, ascending.
    pub fn neighbors(&self, robot: usize) -> &[usize] {
        &self.robot_neighbors[robot]
    }

    /// Robot-level edges `(i, j)` with `i < j`.
    pub fn robot_graph(&self) -> Vec<(usize, usize)> {
        self.robot_neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    /// Maximum degree `Δ` of the robot-level graph.
    pub fn max_degree(&self) -> usize {
        self.robot_neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Sparsity ratio `ρ = Δ / n`.
    pub fn sparsity(&self) -> f64 {
        self.max_degree() as f64 / self.num_robots() as f64
    }

    /// Steps of `robot` that appear in inter-robot edges, ascending.
    pub fn public_poses(&self, robot: usize) -> &[usize] {
        &self.public_poses[robot]
    }

    pub fn is_public(&self, id: PoseId) -> bool {
        self.public_poses[id.robot].binary_search(&id.step).is_ok()
    }

    /// Indices of edges internal to `robot` (the private cost `h_i`).
    pub fn private_edges(&self, robot: usize) -> &[usize] {
        &self.private_edges[robot]
    }

    /// Indices of inter-robot edges with one endpoint at `robot`.
    pub fn shared_edges(&self, robot: usize) -> &[usize] {
        &self.shared_edges[robot]
    }

    /// Every pose of another robot that `robot` needs to evaluate its local
    /// cost, ascending.
    pub fn all_neighbor_poses(&self, robot: usize) -> &[PoseId] {
        &self.neighbor_poses[robot]
    }

    /// Edge indices incident to one pose.
    pub fn pose_edges(&self, id: PoseId) -> &[usize] {
        &self.pose_edges[id.robot][id.step]
    }

    /// Weakly connected components of the pose graph, each sorted, ordered by
    /// their smallest pose.
    pub fn connected_components(&self) -> Vec<Vec<PoseId>> {
        let total = self.num_poses();
        let mut seen = vec![false; total];
        let mut components = Vec::new();
        for start in 0..total {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            let mut members = Vec::new();
            while let Some(g) = queue.pop_front() {
                let id = self.pose_at(g);
                members.push(id);
                for &k in self.pose_edges(id) {
                    let e = &self.edges[k];
                    let other = if e.from == id { e.to } else { e.from };
                    let og = self.global_index(other);
                    if !seen[og] {
                        seen[og] = true;
                        queue.push_back(og);
                    }
                }
            }
            members.sort();
            components.push(members);
        }
        components
    }

    /// Flattens the problem back into a single-robot graph using the global
    /// ordering, with `vertices` as initial values.
    pub fn to_pose_graph(&self, vertices: Vec<SePose>) -> Result<PoseGraph> {
        if vertices.len() != self.num_poses() {
            return Err(Error::Structural(format!(
                "{} vertex values for {} poses",
                vertices.len(),
                self.num_poses()
            )));
        }
        let edges = self
            .edges
            .iter()
            .map(|e| RelativeMeasurement {
                from: PoseId::new(0, self.global_index(e.from)),
                to: PoseId::new(0, self.global_index(e.to)),
                ..*e
            })
            .collect();
        Ok(PoseGraph {
            dim: self.dim,
            vertices,
            edges,
        })
    }
}

/// Poses of robot `j` that robot `i` needs, i.e. those joined to `i` by a
/// shared measurement. Empty if the robots are not adjacent.
pub fn neighbor_poses(problem: &MultiRobotProblem, i: usize, j: usize) -> BTreeSet<PoseId> {
    problem
        .all_neighbor_poses(i)
        .iter()
        .copied()
        .filter(|p| p.robot == j)
        .collect()
}

/// Splits a single-robot graph into `n` contiguous, nearly equal pose blocks.
pub fn partition(graph: &PoseGraph, n: usize) -> Result<MultiRobotProblem> {
    let total = graph.num_poses();
    if n == 0 {
        return Err(Error::Domain("robot count must be positive".into()));
    }
    if n > total {
        return Err(Error::Domain(format!("{n} robots for only {total} poses")));
    }
    let base = total / n;
    let extra = total % n;
    let sizes: Vec<usize> = (0..n).map(|i| base + usize::from(i < extra)).collect();
    let mut owner = Vec::with_capacity(total);
    for (robot, &s) in sizes.iter().enumerate() {
        owner.extend((0..s).map(|step| PoseId::new(robot, step)));
    }
    let mut edges = Vec::with_capacity(graph.edges.len());
    for (k, e) in graph.edges.iter().enumerate() {
        let (a, b) = (e.from.step, e.to.step);
        if a >= total || b >= total || e.from.robot != 0 || e.to.robot != 0 {
            return Err(Error::Structural(format!("edge {k} references unknown vertex")));
        }
        edges.push(RelativeMeasurement {
            from: owner[a],
            to: owner[b],
            ..*e
        });
    }
    MultiRobotProblem::new(graph.dim, sizes, edges)
}
