//! Matrix-manifold primitives for products of `SO(d)`, `St(d, r)` and `R^r`.
//!
//! Blocks use fixed-size storage padded up to [`MAX_RANK`] rows and three
//! columns. Entries outside the logical `r × d` (or `r`) extent are always
//! zero; every routine here preserves that padding, so the hot optimization
//! loop never touches the heap.
//!
//! The tangent projection onto a Stiefel block `Y` is the usual
//! `P_Y(V) = V - Y sym(YᵀV)`, and steps are mapped back with the polar
//! retraction `(Y + ξ)((Y + ξ)ᵀ(Y + ξ))^{-1/2}`.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Largest supported relaxation rank.
pub const MAX_RANK: usize = 10;

/// An `r × d` matrix stored in a zero-padded `MAX_RANK × 3` buffer.
pub type Frame = SMatrix<f64, MAX_RANK, 3>;

/// An `r`-vector stored in a zero-padded `MAX_RANK` buffer.
pub type LiftVec = SVector<f64, MAX_RANK>;

/// Residual above which a drifted Stiefel block is re-orthonormalized.
pub const REORTHONORMALIZE_THRESHOLD: f64 = 1e-9;

/// Component manifolds of a product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Rotation { d: usize },
    Stiefel { d: usize, r: usize },
    Euclidean { r: usize },
}

impl BlockKind {
    fn check_dims(self) -> Result<()> {
        let ok = match self {
            BlockKind::Rotation { d } => (2..=3).contains(&d),
            BlockKind::Stiefel { d, r } => (2..=3).contains(&d) && (d..=MAX_RANK).contains(&r),
            BlockKind::Euclidean { r } => (1..=MAX_RANK).contains(&r),
        };
        if !ok {
            return Err(Error::Domain(format!(
                "unsupported block dimensions {self:?} (need d in 2..=3, d <= r <= {MAX_RANK})"
            )));
        }
        Ok(())
    }
}

/// Storage for one block of a point or of a (tangent or ambient) vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockValue {
    Matrix(Frame),
    Vector(LiftVec),
}

impl BlockValue {
    fn frob_dot(&self, other: &BlockValue) -> Option<f64> {
        match (self, other) {
            (BlockValue::Matrix(a), BlockValue::Matrix(b)) => Some(a.dot(b)),
            (BlockValue::Vector(a), BlockValue::Vector(b)) => Some(a.dot(b)),
            _ => None,
        }
    }
}

/// A point on a product of matrix manifolds.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldPoint {
    kinds: Vec<BlockKind>,
    values: Vec<BlockValue>,
}

/// A vector congruent in shape to some [`ManifoldPoint`]. Whether it is
/// tangent or merely ambient depends on how it was produced; vectors
/// returned by [`project_tangent`] are tangent at the point they were
/// projected at.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub blocks: Vec<BlockValue>,
}

/// Ambient vectors share the tangent vector layout.
pub type AmbientVector = TangentVector;

impl ManifoldPoint {
    /// Builds a point after checking the manifold invariants of every block.
    pub fn new(blocks: Vec<(BlockKind, BlockValue)>) -> Result<Self> {
        let (kinds, values): (Vec<_>, Vec<_>) = blocks.into_iter().unzip();
        let point = ManifoldPoint { kinds, values };
        point.validate()?;
        Ok(point)
    }

    pub fn kinds(&self) -> &[BlockKind] {
        &self.kinds
    }

    pub fn values(&self) -> &[BlockValue] {
        &self.values
    }

    /// Checks orthonormality (and the determinant sign of rotation blocks).
    pub fn validate(&self) -> Result<()> {
        for (k, (kind, value)) in self.kinds.iter().zip(&self.values).enumerate() {
            kind.check_dims()?;
            match (kind, value) {
                (BlockKind::Rotation { d }, BlockValue::Matrix(y)) => {
                    check_padding(y, *d, *d)?;
                    let res = orthonormality_residual(y, *d);
                    if res > 1e-10 {
                        return Err(Error::Domain(format!("block {k}: residual {res:e}")));
                    }
                    if leading_det(y, *d) <= 0.0 {
                        return Err(Error::Domain(format!("block {k}: det <= 0")));
                    }
                }
                (BlockKind::Stiefel { d, r }, BlockValue::Matrix(y)) => {
                    check_padding(y, *r, *d)?;
                    let res = orthonormality_residual(y, *d);
                    if res > 1e-10 {
                        return Err(Error::Domain(format!("block {k}: residual {res:e}")));
                    }
                }
                (BlockKind::Euclidean { r }, BlockValue::Vector(v)) => {
                    if v.iter().skip(*r).any(|&e| e != 0.0) {
                        return Err(Error::Structural(format!("block {k}: nonzero padding")));
                    }
                }
                _ => {
                    return Err(Error::Structural(format!(
                        "block {k}: storage does not match kind {kind:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn zero_vector(&self) -> TangentVector {
        TangentVector {
            blocks: self
                .values
                .iter()
                .map(|v| match v {
                    BlockValue::Matrix(_) => BlockValue::Matrix(Frame::zeros()),
                    BlockValue::Vector(_) => BlockValue::Vector(LiftVec::zeros()),
                })
                .collect(),
        }
    }

    /// Euclidean distance between two points of the same product.
    pub fn distance(&self, other: &ManifoldPoint) -> Result<f64> {
        check_congruent(&self.values, &other.values)?;
        let sq: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| match (a, b) {
                (BlockValue::Matrix(a), BlockValue::Matrix(b)) => (a - b).norm_squared(),
                (BlockValue::Vector(a), BlockValue::Vector(b)) => (a - b).norm_squared(),
                _ => unreachable!(),
            })
            .sum();
        Ok(sq.sqrt())
    }
}

impl TangentVector {
    pub fn scaled(&self, s: f64) -> TangentVector {
        TangentVector {
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    BlockValue::Matrix(m) => BlockValue::Matrix(m * s),
                    BlockValue::Vector(v) => BlockValue::Vector(v * s),
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.frob_dot(b).unwrap_or(0.0))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_congruent(a: &[BlockValue], b: &[BlockValue]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Structural(format!(
            "block count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if std::mem::discriminant(x) != std::mem::discriminant(y) {
            return Err(Error::Structural(format!("block {k}: shape mismatch")));
        }
    }
    Ok(())
}

fn check_padding(y: &Frame, rows: usize, cols: usize) -> Result<()> {
    for c in 0..3 {
        for r in 0..MAX_RANK {
            if (r >= rows || c >= cols) && y[(r, c)] != 0.0 {
                return Err(Error::Structural(format!(
                    "nonzero padding outside the {rows}x{cols} extent"
                )));
            }
        }
    }
    Ok(())
}

/// Frobenius inner product `Σ tr(aᵀ b)` over congruent blocks.
pub fn inner(a: &TangentVector, b: &TangentVector) -> Result<f64> {
    check_congruent(&a.blocks, &b.blocks)?;
    Ok(a.blocks
        .iter()
        .zip(&b.blocks)
        .map(|(x, y)| x.frob_dot(y).unwrap())
        .sum())
}

/// Orthogonal projection of an ambient vector onto `T_x M`.
pub fn project_tangent(x: &ManifoldPoint, v: &AmbientVector) -> Result<TangentVector> {
    check_congruent(&x.values, &v.blocks)?;
    x.validate()?;
    let blocks = x
        .values
        .iter()
        .zip(&v.blocks)
        .map(|(base, vb)| match (base, vb) {
            (BlockValue::Matrix(y), BlockValue::Matrix(m)) => BlockValue::Matrix(stiefel_project(y, m)),
            (_, other) => *other,
        })
        .collect();
    Ok(TangentVector { blocks })
}

/// Blockwise retraction: polar for Stiefel/rotation blocks, addition for
/// Euclidean blocks.
pub fn retract(x: &ManifoldPoint, eta: &TangentVector) -> Result<ManifoldPoint> {
    check_congruent(&x.values, &eta.blocks)?;
    let values = x
        .values
        .iter()
        .zip(&eta.blocks)
        .map(|(base, step)| match (base, step) {
            (BlockValue::Matrix(y), BlockValue::Matrix(xi)) => BlockValue::Matrix(stiefel_retract(y, xi)),
            (BlockValue::Vector(p), BlockValue::Vector(dp)) => BlockValue::Vector(p + dp),
            _ => unreachable!(),
        })
        .collect();
    Ok(ManifoldPoint {
        kinds: x.kinds.clone(),
        values,
    })
}

/// Measured ratio `‖Retr_x(η) − x‖ / ‖η‖`; zero for `η = 0`.
pub fn retraction_displacement_bound(x: &ManifoldPoint, eta: &TangentVector) -> Result<f64> {
    let n = eta.norm();
    if n == 0.0 {
        return Ok(0.0);
    }
    let moved = retract(x, eta)?;
    Ok(moved.distance(x)? / n)
}

/// Monte-Carlo check of a retraction constant on `St(d, r)`: returns the
/// largest observed displacement ratio, or a domain error when it exceeds
/// `alpha`.
pub fn validate_retraction_constant<R: Rng + ?Sized>(
    alpha: f64,
    d: usize,
    r: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let kind = BlockKind::Stiefel { d, r };
    kind.check_dims()?;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let y = random_stiefel(rng, d, r);
        let x = ManifoldPoint::new(vec![(kind, BlockValue::Matrix(y))])?;
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let xi = random_tangent_frame(rng, &y, d, r) * scale;
        let eta = TangentVector {
            blocks: vec![BlockValue::Matrix(xi)],
        };
        worst = worst.max(retraction_displacement_bound(&x, &eta)?);
    }
    if worst > alpha {
        return Err(Error::Domain(format!(
            "retraction constant {alpha} violated: observed ratio {worst}"
        )));
    }
    Ok(worst)
}

/// `(A + Aᵀ) / 2`.
#[inline]
pub fn sym(a: &Matrix3<f64>) -> Matrix3<f64> {
    (a + a.transpose()) * 0.5
}

/// Tangent projection at a Stiefel block: `V − Y sym(YᵀV)`.
#[inline]
pub fn stiefel_project(y: &Frame, v: &Frame) -> Frame {
    let s = sym(&(y.transpose() * v));
    v - y * s
}

/// Polar retraction `Retr_Y(ξ) = polar(Y + ξ)`.
#[inline]
pub fn stiefel_retract(y: &Frame, xi: &Frame) -> Frame {
    polar_factor(&(y + xi))
}

/// Orthonormal polar factor `A (AᵀA)^{-1/2}`. Padding columns produce zero
/// eigenvalues of `AᵀA` and are left at zero.
pub fn polar_factor(a: &Frame) -> Frame {
    let gram = a.transpose() * a;
    let eig = SymmetricEigen::new(gram);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut inv_sqrt = Matrix3::zeros();
    for k in 0..3 {
        let lambda = eig.eigenvalues[k];
        if lambda > 1e-12 * scale {
            let v = eig.eigenvectors.column(k);
            inv_sqrt += v * v.transpose() / lambda.sqrt();
        }
    }
    let mut q = a * inv_sqrt;
    // The eigen route squares the condition number of `a`; Newton-Schulz
    // steps restore orthonormality without changing the polar factor.
    for _ in 0..3 {
        let gram = q.transpose() * q;
        let mut target = Matrix3::zeros();
        for k in 0..3 {
            if gram[(k, k)] > 0.5 {
                target[(k, k)] = 1.0;
            }
        }
        if (gram - target).norm() < 1e-15 {
            break;
        }
        q *= Matrix3::identity() * 1.5 - gram * 0.5;
    }
    q
}

/// `‖YᵀY − I_d‖_F` over the logical `d × d` block.
pub fn orthonormality_residual(y: &Frame, d: usize) -> f64 {
    let gram = y.transpose() * y;
    let mut sq = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j && i < d { 1.0 } else { 0.0 };
            sq += (gram[(i, j)] - target).powi(2);
        }
    }
    sq.sqrt()
}

/// Replaces `y` by its polar factor when floating-point drift exceeds
/// [`REORTHONORMALIZE_THRESHOLD`]. Returns whether it did.
pub fn reorthonormalize_if_drifted(y: &mut Frame, d: usize) -> bool {
    if orthonormality_residual(y, d) > REORTHONORMALIZE_THRESHOLD {
        *y = polar_factor(y);
        true
    } else {
        false
    }
}

/// Determinant of the leading `d × d` block.
pub fn leading_det(y: &Frame, d: usize) -> f64 {
    match d {
        2 => y[(0, 0)] * y[(1, 1)] - y[(0, 1)] * y[(1, 0)],
        _ => y.fixed_view::<3, 3>(0, 0).determinant(),
    }
}

/// Gaussian `r × d` matrix in padded storage.
pub fn random_frame<R: Rng + ?Sized>(rng: &mut R, d: usize, r: usize) -> Frame {
    let mut m = Frame::zeros();
    for c in 0..d {
        for row in 0..r {
            m[(row, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Gaussian `r`-vector in padded storage.
pub fn random_liftvec<R: Rng + ?Sized>(rng: &mut R, r: usize) -> LiftVec {
    let mut v = LiftVec::zeros();
    for row in 0..r {
        v[row] = rng.sample(StandardNormal);
    }
    v
}

/// Uniformly distributed point of `St(d, r)`.
pub fn random_stiefel<R: Rng + ?Sized>(rng: &mut R, d: usize, r: usize) -> Frame {
    polar_factor(&random_frame(rng, d, r))
}

/// Random unit-scale tangent vector at `y`.
pub fn random_tangent_frame<R: Rng + ?Sized>(rng: &mut R, y: &Frame, d: usize, r: usize) -> Frame {
    stiefel_project(y, &random_frame(rng, d, r))
}
