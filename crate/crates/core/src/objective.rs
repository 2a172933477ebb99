//! Cost and gradient evaluation for the rank-restricted pose-graph problem.
//!
//! Every edge `(i_τ, j_s)` contributes
//! `w_R ‖Y_j − Y_i R̃‖²_F + w_t ‖p_j − p_i − Y_i t̃‖²`. Gradients are
//! assembled edge by edge, so a robot evaluating its local cost only touches
//! its own poses and the cached copies of its neighboring poses.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MultiRobotProblem, PoseId, RelativeMeasurement, SePose};
use crate::manifold::{
    self, polar_factor, stiefel_project, stiefel_retract, BlockKind, BlockValue, Frame, LiftVec, ManifoldPoint,
};

/// One pose variable `(Y, p) ∈ St(d, r) × R^r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiftedPose {
    pub y: Frame,
    pub p: LiftVec,
}

/// An ambient or tangent vector at a single pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTangent {
    pub y: Frame,
    pub p: LiftVec,
}

impl PoseTangent {
    pub fn zeros() -> Self {
        PoseTangent {
            y: Frame::zeros(),
            p: LiftVec::zeros(),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.y.norm_squared() + self.p.norm_squared()
    }

    pub fn dot(&self, other: &PoseTangent) -> f64 {
        self.y.dot(&other.y) + self.p.dot(&other.p)
    }

    pub fn scale(&self, s: f64) -> PoseTangent {
        PoseTangent {
            y: self.y * s,
            p: self.p * s,
        }
    }
}

impl LiftedPose {
    /// Zero-padding lift `Y = [R; 0]`, `p = [t; 0]`.
    pub fn lift(pose: &SePose) -> Self {
        let mut y = Frame::zeros();
        y.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
        let mut p = LiftVec::zeros();
        p.fixed_rows_mut::<3>(0).copy_from(&pose.translation);
        LiftedPose { y, p }
    }

    pub fn identity(d: usize) -> Self {
        Self::lift(&SePose::identity(d))
    }

    /// A random pose with Gaussian translation of the given scale.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize, r: usize, translation_scale: f64) -> Self {
        LiftedPose {
            y: manifold::random_stiefel(rng, d, r),
            p: manifold::random_liftvec(rng, r) * translation_scale,
        }
    }

    /// Index-wise difference, used for Euclidean distances between iterates.
    pub fn difference(&self, other: &LiftedPose) -> PoseTangent {
        PoseTangent {
            y: self.y - other.y,
            p: self.p - other.p,
        }
    }
}

/// All variables `x_i` owned by one robot.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotVariable {
    pub poses: Vec<LiftedPose>,
}

impl RobotVariable {
    pub fn new(poses: Vec<LiftedPose>) -> Self {
        RobotVariable { poses }
    }

    /// The variable as a point of `(St(d, r) × R^r)^{n_i}`.
    pub fn to_manifold_point(&self, d: usize, r: usize) -> Result<ManifoldPoint> {
        let blocks = self
            .poses
            .iter()
            .flat_map(|pose| {
                [
                    (BlockKind::Stiefel { d, r }, BlockValue::Matrix(pose.y)),
                    (BlockKind::Euclidean { r }, BlockValue::Vector(pose.p)),
                ]
            })
            .collect();
        ManifoldPoint::new(blocks)
    }
}

/// Lookup of poses owned by other robots.
pub trait NeighborPoses {
    fn neighbor_pose(&self, id: PoseId) -> Option<&LiftedPose>;
}

/// Up-to-date view of the global iterate.
#[derive(Clone, Copy)]
pub struct GlobalView<'a>(pub &'a [RobotVariable]);

impl NeighborPoses for GlobalView<'_> {
    fn neighbor_pose(&self, id: PoseId) -> Option<&LiftedPose> {
        self.0.get(id.robot).and_then(|x| x.poses.get(id.step))
    }
}

/// Checks that `x` has one variable per robot with the right pose counts.
pub fn check_conforms(problem: &MultiRobotProblem, x: &[RobotVariable]) -> Result<()> {
    if x.len() != problem.num_robots() {
        return Err(Error::Structural(format!(
            "{} robot variables for {} robots",
            x.len(),
            problem.num_robots()
        )));
    }
    for (i, xi) in x.iter().enumerate() {
        check_robot_conforms(problem, i, xi)?;
    }
    Ok(())
}

fn check_robot_conforms(problem: &MultiRobotProblem, robot: usize, xi: &RobotVariable) -> Result<()> {
    if robot >= problem.num_robots() {
        return Err(Error::Structural(format!("no robot {robot}")));
    }
    if xi.poses.len() != problem.robot_size(robot) {
        return Err(Error::Structural(format!(
            "robot {robot}: {} poses, expected {}",
            xi.poses.len(),
            problem.robot_size(robot)
        )));
    }
    Ok(())
}

#[inline]
fn residuals(e: &RelativeMeasurement, from: &LiftedPose, to: &LiftedPose) -> (Frame, LiftVec) {
    let rot = to.y - from.y * e.rotation;
    let trans = to.p - from.p - from.y * e.translation;
    (rot, trans)
}

/// Cost of a single edge.
#[inline]
pub fn edge_cost(e: &RelativeMeasurement, from: &LiftedPose, to: &LiftedPose) -> f64 {
    let (rot, trans) = residuals(e, from, to);
    e.weight_rotation * rot.norm_squared() + e.weight_translation * trans.norm_squared()
}

/// Euclidean partial derivatives of one edge cost with respect to its
/// `from` and `to` poses.
#[inline]
pub fn edge_gradients(e: &RelativeMeasurement, from: &LiftedPose, to: &LiftedPose) -> (PoseTangent, PoseTangent) {
    let (rot, trans) = residuals(e, from, to);
    let wr2 = 2.0 * e.weight_rotation;
    let wt2 = 2.0 * e.weight_translation;
    let grad_to = PoseTangent {
        y: rot * wr2,
        p: trans * wt2,
    };
    let grad_from = PoseTangent {
        y: -(rot * e.rotation.transpose()) * wr2 - (trans * e.translation.transpose()) * wt2,
        p: -trans * wt2,
    };
    (grad_from, grad_to)
}

struct LocalLookup<'a, C: ?Sized> {
    robot: usize,
    own: &'a RobotVariable,
    cache: &'a C,
}

impl<C: NeighborPoses + ?Sized> LocalLookup<'_, C> {
    #[inline]
    fn get(&self, id: PoseId) -> Result<&LiftedPose> {
        if id.robot == self.robot {
            Ok(&self.own.poses[id.step])
        } else {
            self.cache.neighbor_pose(id).ok_or(Error::Staleness {
                robot: self.robot,
                pose: id,
            })
        }
    }
}

/// Global cost `f(x)`.
pub fn global_cost(problem: &MultiRobotProblem, x: &[RobotVariable]) -> Result<f64> {
    check_conforms(problem, x)?;
    let view = GlobalView(x);
    Ok(problem
        .edges()
        .iter()
        .map(|e| {
            let from = view.neighbor_pose(e.from).unwrap();
            let to = view.neighbor_pose(e.to).unwrap();
            edge_cost(e, from, to)
        })
        .sum())
}

/// Private cost `h_i(x_i)` over measurements internal to robot `i`.
pub fn private_cost(problem: &MultiRobotProblem, robot: usize, xi: &RobotVariable) -> Result<f64> {
    check_robot_conforms(problem, robot, xi)?;
    Ok(problem
        .private_edges(robot)
        .iter()
        .map(|&k| {
            let e = &problem.edges()[k];
            edge_cost(e, &xi.poses[e.from.step], &xi.poses[e.to.step])
        })
        .sum())
}

/// Shared cost `f_ij(x_i, x_j)` over measurements between robots `i` and `j`.
pub fn shared_cost(
    problem: &MultiRobotProblem,
    i: usize,
    j: usize,
    xi: &RobotVariable,
    xj: &RobotVariable,
) -> Result<f64> {
    check_robot_conforms(problem, i, xi)?;
    check_robot_conforms(problem, j, xj)?;
    let pose = |id: PoseId| {
        if id.robot == i {
            &xi.poses[id.step]
        } else {
            &xj.poses[id.step]
        }
    };
    Ok(problem
        .shared_edges(i)
        .iter()
        .map(|&k| &problem.edges()[k])
        .filter(|e| e.from.robot == j || e.to.robot == j)
        .map(|e| edge_cost(e, pose(e.from), pose(e.to)))
        .sum())
}

/// Local cost `g_i(x_i) = h_i(x_i) + Σ_j f_ij(x_i, x̂_j)` with neighbor
/// values read from `cache`.
pub fn local_cost<C: NeighborPoses + ?Sized>(
    problem: &MultiRobotProblem,
    robot: usize,
    xi: &RobotVariable,
    cache: &C,
) -> Result<f64> {
    check_robot_conforms(problem, robot, xi)?;
    let lookup = LocalLookup { robot, own: xi, cache };
    let mut total = 0.0;
    for &k in problem.private_edges(robot).iter().chain(problem.shared_edges(robot)) {
        let e = &problem.edges()[k];
        total += edge_cost(e, lookup.get(e.from)?, lookup.get(e.to)?);
    }
    Ok(total)
}

/// Euclidean gradient of `f` at `x`, shaped like `x`.
pub fn global_euclidean_gradient(problem: &MultiRobotProblem, x: &[RobotVariable]) -> Result<Vec<Vec<PoseTangent>>> {
    check_conforms(problem, x)?;
    let mut grad: Vec<Vec<PoseTangent>> = x.iter().map(|xi| vec![PoseTangent::zeros(); xi.poses.len()]).collect();
    for e in problem.edges() {
        let from = &x[e.from.robot].poses[e.from.step];
        let to = &x[e.to.robot].poses[e.to.step];
        let (gf, gt) = edge_gradients(e, from, to);
        let slot = &mut grad[e.from.robot][e.from.step];
        slot.y += gf.y;
        slot.p += gf.p;
        let slot = &mut grad[e.to.robot][e.to.step];
        slot.y += gt.y;
        slot.p += gt.p;
    }
    Ok(grad)
}

/// Euclidean gradient of `g_i` with respect to `x_i`.
pub fn local_euclidean_gradient<C: NeighborPoses + ?Sized>(
    problem: &MultiRobotProblem,
    robot: usize,
    xi: &RobotVariable,
    cache: &C,
) -> Result<Vec<PoseTangent>> {
    check_robot_conforms(problem, robot, xi)?;
    let lookup = LocalLookup { robot, own: xi, cache };
    let mut grad = vec![PoseTangent::zeros(); xi.poses.len()];
    for &k in problem.private_edges(robot).iter().chain(problem.shared_edges(robot)) {
        let e = &problem.edges()[k];
        let (gf, gt) = edge_gradients(e, lookup.get(e.from)?, lookup.get(e.to)?);
        if e.from.robot == robot {
            let slot = &mut grad[e.from.step];
            slot.y += gf.y;
            slot.p += gf.p;
        }
        if e.to.robot == robot {
            let slot = &mut grad[e.to.step];
            slot.y += gt.y;
            slot.p += gt.p;
        }
    }
    Ok(grad)
}

/// Projects an ambient vector at one pose onto its tangent space.
#[inline]
pub fn project_pose(pose: &LiftedPose, v: &PoseTangent) -> PoseTangent {
    PoseTangent {
        y: stiefel_project(&pose.y, &v.y),
        p: v.p,
    }
}

/// Retraction at one pose: polar on `Y`, addition on `p`.
#[inline]
pub fn retract_pose(pose: &LiftedPose, step: &PoseTangent) -> LiftedPose {
    LiftedPose {
        y: stiefel_retract(&pose.y, &step.y),
        p: pose.p + step.p,
    }
}

/// Retracts every pose of a robot variable along `step`.
pub fn retract_variable(xi: &RobotVariable, step: &[PoseTangent]) -> RobotVariable {
    RobotVariable {
        poses: xi
            .poses
            .iter()
            .zip(step)
            .map(|(pose, s)| retract_pose(pose, s))
            .collect(),
    }
}

/// Riemannian gradient of `f` at `x`.
pub fn global_riemannian_gradient(problem: &MultiRobotProblem, x: &[RobotVariable]) -> Result<Vec<Vec<PoseTangent>>> {
    let mut grad = global_euclidean_gradient(problem, x)?;
    for (xi, gi) in x.iter().zip(grad.iter_mut()) {
        for (pose, g) in xi.poses.iter().zip(gi.iter_mut()) {
            *g = project_pose(pose, g);
        }
    }
    Ok(grad)
}

/// Riemannian gradient of `g_i` at `x_i`.
pub fn local_riemannian_gradient<C: NeighborPoses + ?Sized>(
    problem: &MultiRobotProblem,
    robot: usize,
    xi: &RobotVariable,
    cache: &C,
) -> Result<Vec<PoseTangent>> {
    let mut grad = local_euclidean_gradient(problem, robot, xi, cache)?;
    for (pose, g) in xi.poses.iter().zip(grad.iter_mut()) {
        *g = project_pose(pose, g);
    }
    Ok(grad)
}

/// Squared norm of a collection of per-pose vectors.
pub fn norm_squared(v: &[PoseTangent]) -> f64 {
    v.iter().map(PoseTangent::norm_squared).sum()
}

/// `‖rgrad f(x)‖`.
pub fn global_gradient_norm(problem: &MultiRobotProblem, x: &[RobotVariable]) -> Result<f64> {
    Ok(global_riemannian_gradient(problem, x)?
        .iter()
        .map(|g| norm_squared(g))
        .sum::<f64>()
        .sqrt())
}

/// Relative regularization of the block-Jacobi preconditioner.
pub const PRECONDITIONER_EPSILON: f64 = 1e-3;

/// Diagonal block of the cost's quadratic form at one pose, in the column
/// layout `[Y columns (3, padded) | p]`. The Euclidean Hessian of the cost
/// with respect to the pose is twice this block, acting on columns.
fn pose_hessian_block(problem: &MultiRobotProblem, id: PoseId) -> Matrix4<f64> {
    let mut h = Matrix4::zeros();
    for &k in problem.pose_edges(id) {
        let e = &problem.edges()[k];
        let (wr, wt) = (e.weight_rotation, e.weight_translation);
        if e.to == id {
            for c in 0..problem.dim() {
                h[(c, c)] += wr;
            }
            h[(3, 3)] += wt;
        } else {
            let rrt: Matrix3<f64> = e.rotation * e.rotation.transpose();
            let t = e.translation;
            let mut top = h.fixed_view_mut::<3, 3>(0, 0);
            top += rrt * wr + t * t.transpose() * wt;
            for c in 0..3 {
                h[(c, 3)] += wt * t[c];
                h[(3, c)] += wt * t[c];
            }
            h[(3, 3)] += wt;
        }
    }
    h * 2.0
}

/// Applies the block-Jacobi preconditioner of `g_i` to a tangent vector at
/// `x_i` and re-projects the result. Poses whose regularized block is
/// singular keep the identity map.
pub fn precondition(
    problem: &MultiRobotProblem,
    robot: usize,
    xi: &RobotVariable,
    eta: &[PoseTangent],
) -> Result<Vec<PoseTangent>> {
    check_robot_conforms(problem, robot, xi)?;
    if eta.len() != xi.poses.len() {
        return Err(Error::Structural("tangent does not match robot variable".into()));
    }
    let d = problem.dim();
    let mut out = Vec::with_capacity(eta.len());
    for (step, (pose, v)) in xi.poses.iter().zip(eta).enumerate() {
        let mut h = pose_hessian_block(problem, PoseId::new(robot, step));
        let mean_diag = (0..d).map(|c| h[(c, c)]).sum::<f64>() / (d + 1) as f64 + h[(3, 3)] / (d + 1) as f64;
        for c in d..3 {
            h[(c, c)] = 1.0;
        }
        let reg = PRECONDITIONER_EPSILON * mean_diag;
        for c in 0..d {
            h[(c, c)] += reg;
        }
        h[(3, 3)] += reg;
        let inverse = if mean_diag > 0.0 {
            h.cholesky().map(|c| c.inverse())
        } else {
            None
        };
        let Some(inverse) = inverse else {
            log::warn!("singular preconditioner block at robot {robot} pose {step}; using identity");
            out.push(*v);
            continue;
        };
        // columns of [ξ_Y | ξ_p] times H⁻¹
        let a = inverse.fixed_view::<3, 3>(0, 0).into_owned();
        let b = inverse.fixed_view::<3, 1>(0, 3).into_owned();
        let c = inverse.fixed_view::<1, 3>(3, 0).into_owned();
        let s = inverse[(3, 3)];
        let y = v.y * a + v.p * c;
        let p = v.y * b + v.p * s;
        out.push(project_pose(pose, &PoseTangent { y, p }));
    }
    Ok(out)
}

/// The symmetric positive-semidefinite matrix `Q` with `f(X) = tr(X Q Xᵀ)`
/// for `X = [Y_1 p_1 … Y_N p_N]`, stored in compressed rows. Column
/// `g(d+1) + c` addresses column `c` of the global pose `g`.
#[derive(Clone, Debug)]
pub struct ConnectionLaplacian {
    dim: usize,
    row_starts: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl ConnectionLaplacian {
    pub fn assemble(problem: &MultiRobotProblem) -> Self {
        let d = problem.dim();
        let b = d + 1;
        let size = problem.num_poses() * b;
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let block = |ga: usize, gb: usize, m: &DMatrix<f64>, triplets: &mut Vec<(usize, usize, f64)>| {
            for r in 0..b {
                for c in 0..b {
                    if m[(r, c)] != 0.0 {
                        triplets.push((ga * b + r, gb * b + c, m[(r, c)]));
                    }
                }
            }
        };
        for e in problem.edges() {
            let gi = problem.global_index(e.from);
            let gj = problem.global_index(e.to);
            let mut m = DMatrix::zeros(b, b);
            m.view_mut((0, 0), (d, d)).copy_from(&e.rotation.view((0, 0), (d, d)));
            m.view_mut((0, d), (d, 1)).copy_from(&e.translation.rows(0, d));
            m[(d, d)] = 1.0;
            let mut w = DMatrix::zeros(b, b);
            for c in 0..d {
                w[(c, c)] = e.weight_rotation;
            }
            w[(d, d)] = e.weight_translation;
            let mw = &m * &w;
            block(gj, gj, &w, &mut triplets);
            block(gi, gi, &(&mw * m.transpose()), &mut triplets);
            block(gi, gj, &(-&mw), &mut triplets);
            block(gj, gi, &(-mw.transpose()), &mut triplets);
        }
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_starts = vec![0; size + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                values.push(v);
                row_starts[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..size {
            row_starts[r + 1] += row_starts[r];
        }
        ConnectionLaplacian {
            dim: size,
            row_starts,
            cols,
            values,
        }
    }

    pub fn size(&self) -> usize {
        self.dim
    }

    pub fn multiply(&self, v: &DVector<f64>, out: &mut DVector<f64>) {
        for r in 0..self.dim {
            let mut acc = 0.0;
            for k in self.row_starts[r]..self.row_starts[r + 1] {
                acc += self.values[k] * v[self.cols[k]];
            }
            out[r] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for k in self.row_starts[r]..self.row_starts[r + 1] {
                m[(r, self.cols[k])] += self.values[k];
            }
        }
        m
    }

    /// Largest eigenvalue by power iteration, stopping once the eigen-residual
    /// `‖Qv − μv‖` falls below `rel_tol · μ`.
    pub fn max_eigenvalue(&self, rel_tol: f64, max_iters: usize) -> Result<f64> {
        if self.dim == 0 {
            return Err(Error::Degenerate("empty quadratic form".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut v = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        v /= v.norm();
        let mut qv = DVector::zeros(self.dim);
        for _ in 0..max_iters {
            self.multiply(&v, &mut qv);
            let mu = v.dot(&qv);
            if mu <= 0.0 {
                return Err(Error::Degenerate("quadratic form has no positive curvature".into()));
            }
            let residual = (&qv - &v * mu).norm();
            if residual <= rel_tol * mu {
                return Ok(mu);
            }
            let norm = qv.norm();
            v.copy_from(&qv);
            v /= norm;
        }
        Err(Error::Numerical(format!(
            "power iteration did not converge in {max_iters} iterations"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzMethod {
    PowerIteration,
    UserSupplied,
}

/// Euclidean gradient Lipschitz estimate `C` and the pullback constant `L`
/// used for stepsizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub c_hat: f64,
    pub l_hat: f64,
    pub method: LipschitzMethod,
    pub safety: f64,
}

impl LipschitzEstimate {
    pub fn user_supplied(l: f64) -> Result<Self> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Domain(format!("Lipschitz constant must be positive, got {l}")));
        }
        Ok(LipschitzEstimate {
            c_hat: l,
            l_hat: l,
            method: LipschitzMethod::UserSupplied,
            safety: 1.0,
        })
    }
}

pub const DEFAULT_LIPSCHITZ_SAFETY: f64 = 2.0;
const POWER_ITERATION_TOL: f64 = 1e-6;
const POWER_ITERATION_MAX: usize = 10_000;

/// `C = 2 λ_max(Q)` by power iteration and `L = safety · C`.
pub fn estimate_lipschitz(problem: &MultiRobotProblem, safety: f64) -> Result<LipschitzEstimate> {
    if !(safety >= 1.0) {
        return Err(Error::Domain(format!("safety multiplier must be >= 1, got {safety}")));
    }
    if problem.edges().is_empty() {
        return Err(Error::Degenerate("problem has no measurements".into()));
    }
    let q = ConnectionLaplacian::assemble(problem);
    let lambda = q.max_eigenvalue(POWER_ITERATION_TOL, POWER_ITERATION_MAX)?;
    let c_hat = 2.0 * lambda;
    Ok(LipschitzEstimate {
        c_hat,
        l_hat: safety * c_hat,
        method: LipschitzMethod::PowerIteration,
        safety,
    })
}

/// Re-orthonormalizes every Stiefel block of `xi` that drifted.
pub fn repair_drift(xi: &mut RobotVariable, d: usize) -> usize {
    xi.poses
        .iter_mut()
        .filter_map(|pose| manifold::reorthonormalize_if_drifted(&mut pose.y, d).then_some(()))
        .count()
}

/// Polar factor of a pose's `Y`, for callers assembling poses by hand.
pub fn orthonormalized(mut pose: LiftedPose) -> LiftedPose {
    pose.y = polar_factor(&pose.y);
    pose
}
