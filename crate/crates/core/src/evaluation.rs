//! Initialization, a centralized reference solver, rounding of lifted
//! solutions back to SE(d), and error metrics.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MultiRobotProblem, PoseId, SePose};
use crate::manifold::MAX_RANK;
use crate::objective::{
    global_cost, global_riemannian_gradient, norm_squared, precondition, retract_variable, LiftedPose, PoseTangent,
    RobotVariable,
};

/// Lifts SE(d) poses in robot-major order into the rank-`r` domain by zero
/// padding.
pub fn lift_trajectories(problem: &MultiRobotProblem, poses: &[SePose]) -> Result<Vec<RobotVariable>> {
    if poses.len() != problem.num_poses() {
        return Err(Error::Structural(format!(
            "{} poses for a problem with {}",
            poses.len(),
            problem.num_poses()
        )));
    }
    let mut offset = 0;
    Ok(problem
        .robot_sizes()
        .iter()
        .map(|&size| {
            let x = RobotVariable::new(poses[offset..offset + size].iter().map(LiftedPose::lift).collect());
            offset += size;
            x
        })
        .collect())
}

/// Composes measurements along a breadth-first spanning tree rooted at the
/// anchor pose (robot 0, step 0), then lifts by zero padding.
pub fn spanning_tree_init(problem: &MultiRobotProblem) -> Result<Vec<RobotVariable>> {
    let total = problem.num_poses();
    let components = problem.connected_components();
    if components.len() > 1 {
        return Err(Error::Disconnected {
            count: components.len(),
            representatives: components.iter().map(|c| c[0]).collect(),
        });
    }
    let mut poses: Vec<Option<SePose>> = vec![None; total];
    if total == 0 {
        return Ok(Vec::new());
    }
    let anchor = problem.global_index(PoseId::new(0, 0));
    poses[anchor] = Some(SePose::identity(problem.dim()));
    let mut queue = VecDeque::from([PoseId::new(0, 0)]);
    while let Some(id) = queue.pop_front() {
        let current = poses[problem.global_index(id)].expect("queued poses are placed");
        for &k in problem.pose_edges(id) {
            let e = &problem.edges()[k];
            let (other, pose) = if e.from == id {
                (e.to, current.compose(&e.transform()))
            } else {
                (e.from, current.compose(&e.transform().inverse()))
            };
            let g = problem.global_index(other);
            if poses[g].is_none() {
                poses[g] = Some(pose);
                queue.push_back(other);
            }
        }
    }
    let poses: Vec<SePose> = poses.into_iter().map(|p| p.expect("graph is connected")).collect();
    lift_trajectories(problem, &poses)
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub x: Vec<RobotVariable>,
    pub cost: f64,
    pub gradnorm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_FACTOR: f64 = 0.5;
const ARMIJO_DECREASE: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Riemannian gradient descent with Armijo backtracking. The search
/// direction is the gradient passed through the block-Jacobi preconditioner,
/// which keeps it a descent direction. Returns the best iterate found.
pub fn centralized_oracle(
    problem: &MultiRobotProblem,
    x0: &[RobotVariable],
    tol_gradnorm: f64,
    max_iters: usize,
) -> Result<OracleSolution> {
    let mut x = x0.to_vec();
    let mut cost = global_cost(problem, &x)?;
    let mut step = 1.0;
    for it in 0..max_iters {
        let grad = global_riemannian_gradient(problem, &x)?;
        let gradnorm = grad.iter().map(|g| norm_squared(g)).sum::<f64>().sqrt();
        if gradnorm <= tol_gradnorm {
            return Ok(OracleSolution {
                x,
                cost,
                gradnorm,
                iterations: it,
                converged: true,
            });
        }
        let direction: Vec<Vec<PoseTangent>> = grad
            .iter()
            .enumerate()
            .map(|(i, g)| precondition(problem, i, &x[i], g))
            .collect::<Result<_>>()?;
        let slope: f64 = grad
            .iter()
            .zip(&direction)
            .flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| a.dot(b)))
            .sum();
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate: Vec<RobotVariable> = x
                .iter()
                .zip(&direction)
                .map(|(xi, di)| {
                    let s: Vec<PoseTangent> = di.iter().map(|v| v.scale(-step)).collect();
                    retract_variable(xi, &s)
                })
                .collect();
            let c = global_cost(problem, &candidate)?;
            if c <= cost - ARMIJO_DECREASE * step * slope {
                accepted = Some((candidate, c));
                break;
            }
            step *= ARMIJO_FACTOR;
        }
        match accepted {
            Some((candidate, c)) => {
                x = candidate;
                cost = c;
                step = (step / ARMIJO_FACTOR).min(1e3);
            }
            None => {
                log::warn!("line search stalled at iteration {it}");
                return Ok(OracleSolution {
                    x,
                    cost,
                    gradnorm,
                    iterations: it,
                    converged: false,
                });
            }
        }
    }
    let gradnorm = global_riemannian_gradient(problem, &x)?
        .iter()
        .map(|g| norm_squared(g))
        .sum::<f64>()
        .sqrt();
    Ok(OracleSolution {
        converged: gradnorm <= tol_gradnorm,
        x,
        cost,
        gradnorm,
        iterations: max_iters,
    })
}

fn nearest_orthogonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

fn nearest_rotation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = DMatrix::identity(m.nrows(), m.ncols());
    let last = m.nrows() - 1;
    s[(last, last)] = (&u * &v_t).determinant().signum();
    u * s * v_t
}

fn to_se(rotation: &DMatrix<f64>, translation: &DVector<f64>, d: usize) -> SePose {
    let mut r = Matrix3::zeros();
    let mut t = Vector3::zeros();
    for a in 0..d {
        for b in 0..d {
            r[(a, b)] = rotation[(a, b)];
        }
        t[a] = translation[a];
    }
    SePose {
        rotation: r,
        translation: t,
    }
}

/// Rounds a lifted solution to SE(d) poses in robot-major order.
///
/// Projects every block onto the dominant `d`-dimensional left singular
/// subspace of `[Y_1 p_1 … Y_N p_N]`, picks the basis of that subspace
/// closest to the first `d` coordinate axes, fixes a global reflection by
/// majority vote and then projects each rotation onto SO(d).
pub fn round_to_sed(x: &[RobotVariable], d: usize) -> Result<Vec<SePose>> {
    if !(2..=3).contains(&d) {
        return Err(Error::Domain(format!("dimension must be 2 or 3, got {d}")));
    }
    let poses: Vec<&LiftedPose> = x.iter().flat_map(|xi| xi.poses.iter()).collect();
    if poses.is_empty() {
        return Ok(Vec::new());
    }
    let mut gram = DMatrix::<f64>::zeros(MAX_RANK, MAX_RANK);
    for pose in &poses {
        let y = pose.y.columns(0, d);
        gram += y * y.transpose();
        gram += pose.p * pose.p.transpose();
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..MAX_RANK).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    if !(eig.eigenvalues[order[d - 1]] > 1e-10 * top.max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate(
            "degenerate lift: fewer than d significant directions".into(),
        ));
    }
    let mut basis = DMatrix::<f64>::zeros(MAX_RANK, d);
    for (c, &k) in order[..d].iter().enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(k));
    }
    // rotate the basis within its span toward the leading coordinate axes
    let leading = basis.rows(0, d).into_owned();
    let basis = &basis * nearest_orthogonal(&leading.transpose());

    let project = |pose: &LiftedPose| -> (DMatrix<f64>, DVector<f64>) {
        let y: DMatrix<f64> = basis.transpose() * pose.y.columns(0, d);
        let p: DVector<f64> = basis.transpose() * pose.p;
        (nearest_orthogonal(&y), p)
    };
    let mut blocks: Vec<(DMatrix<f64>, DVector<f64>)> = poses.iter().map(|p| project(p)).collect();
    let negative = blocks.iter().filter(|(r, _)| r.determinant() < 0.0).count();
    if 2 * negative > blocks.len() {
        for (r, t) in &mut blocks {
            r.row_mut(d - 1).neg_mut();
            t[d - 1] = -t[d - 1];
        }
    }
    Ok(blocks
        .iter()
        .map(|(r, t)| {
            let r = if r.determinant() < 0.0 {
                nearest_rotation(r)
            } else {
                r.clone()
            };
            to_se(&r, t, d)
        })
        .collect())
}

/// Rotation and translation RMSE after aligning `estimate` to `reference`
/// with one global rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub rot_rmse_chordal: f64,
    pub trans_rmse_m: f64,
}

pub fn rmse(estimate: &[SePose], reference: &[SePose], d: usize) -> Result<TrajectoryError> {
    if estimate.len() != reference.len() {
        return Err(Error::Structural(format!(
            "{} estimated poses against {} reference poses",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.is_empty() {
        return Ok(TrajectoryError {
            rot_rmse_chordal: 0.0,
            trans_rmse_m: 0.0,
        });
    }
    let block = |m: &Matrix3<f64>| DMatrix::from_fn(d, d, |a, b| m[(a, b)]);
    let vec = |v: &Vector3<f64>| DVector::from_fn(d, |a, _| v[a]);
    let mut corr = DMatrix::<f64>::zeros(d, d);
    for (e, r) in estimate.iter().zip(reference) {
        corr += block(&r.rotation) * block(&e.rotation).transpose();
    }
    let align = nearest_rotation(&corr);
    let n = estimate.len() as f64;
    let centroid = |poses: &[SePose]| poses.iter().map(|p| vec(&p.translation)).sum::<DVector<f64>>() / n;
    let offset = centroid(reference) - &align * centroid(estimate);
    let mut rot_sq = 0.0;
    let mut trans_sq = 0.0;
    for (e, r) in estimate.iter().zip(reference) {
        rot_sq += (&align * block(&e.rotation) - block(&r.rotation)).norm_squared();
        trans_sq += (&align * vec(&e.translation) + &offset - vec(&r.translation)).norm_squared();
    }
    Ok(TrajectoryError {
        rot_rmse_chordal: (rot_sq / n).sqrt(),
        trans_rmse_m: (trans_sq / n).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub final_cost: f64,
    pub final_gradnorm: f64,
    pub optimality_gap: f64,
    /// Cost of the solution after rounding to SE(d).
    pub rounded_cost: f64,
    pub rot_rmse_chordal: f64,
    pub trans_rmse_m: f64,
}

/// Cost of SE(d) poses, lifted by zero padding.
pub fn rounded_cost(problem: &MultiRobotProblem, poses: &[SePose]) -> Result<f64> {
    global_cost(problem, &lift_trajectories(problem, poses)?)
}

/// Metrics of a lifted solution against a reference SE(d) solution with cost
/// `reference_cost`.
pub fn evaluate(
    problem: &MultiRobotProblem,
    x: &[RobotVariable],
    reference: &[SePose],
    reference_cost: f64,
) -> Result<MetricsReport> {
    let final_cost = global_cost(problem, x)?;
    let final_gradnorm = crate::objective::global_gradient_norm(problem, x)?;
    let rounded = round_to_sed(x, problem.dim())?;
    let err = rmse(&rounded, reference, problem.dim())?;
    Ok(MetricsReport {
        final_cost,
        final_gradnorm,
        optimality_gap: final_cost - reference_cost,
        rounded_cost: rounded_cost(problem, &rounded)?,
        rot_rmse_chordal: err.rot_rmse_chordal,
        trans_rmse_m: err.trans_rmse_m,
    })
}
