//! The per-robot worker: Read, Compute and Update, plus the stepsize policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::MultiRobotProblem;
use crate::objective::{
    self, local_cost, local_riemannian_gradient, norm_squared, precondition, retract_variable, LipschitzEstimate,
    NeighborPoses, PoseTangent, RobotVariable,
};

/// Largest stepsize for which the asynchronous method provably converges
/// under a delay bound of `assumed_delay` global iterations.
///
/// `rho` is the robot-graph sparsity `Δ / n`, `alpha` the retraction
/// constant and `lipschitz` the pullback Lipschitz constant.
pub fn gamma_bar(assumed_delay: u64, rho: f64, alpha: f64, lipschitz: f64) -> Result<f64> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::Domain(format!(
            "Lipschitz constant must be positive, got {lipschitz}"
        )));
    }
    if assumed_delay == 0 {
        return Ok(1.0 / lipschitz);
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Domain(format!("sparsity must lie in (0, 1], got {rho}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!(
            "retraction constant must be positive, got {alpha}"
        )));
    }
    let b = assumed_delay as f64;
    let c = rho * alpha * alpha * b * b;
    // rationalized root of 2cL²γ² + Lγ − 1 = 0; avoids cancellation for small c
    Ok(2.0 / (lipschitz * (1.0 + (1.0 + 8.0 * c).sqrt())))
}

/// `2ρα²B²L²γ² + Lγ − 1`, non-positive for every admissible stepsize.
pub fn stepsize_condition(gamma: f64, assumed_delay: u64, rho: f64, alpha: f64, lipschitz: f64) -> f64 {
    let b = assumed_delay as f64;
    2.0 * rho * alpha * alpha * b * b * lipschitz * lipschitz * gamma * gamma + lipschitz * gamma - 1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepsizeMode {
    Theorem,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsizePolicy {
    pub mode: StepsizeMode,
    pub gamma: f64,
    /// Delay bound `B` the stepsize was derived for, in global iterations.
    pub assumed_delay: u64,
    pub rho: f64,
    pub alpha: f64,
    pub lipschitz: f64,
}

impl StepsizePolicy {
    pub fn theorem(assumed_delay: u64, rho: f64, alpha: f64, lipschitz: f64) -> Result<Self> {
        Ok(StepsizePolicy {
            mode: StepsizeMode::Theorem,
            gamma: gamma_bar(assumed_delay, rho, alpha, lipschitz)?,
            assumed_delay,
            rho,
            alpha,
            lipschitz,
        })
    }

    /// Theorem-mode policy with `ρ` taken from the problem.
    pub fn theorem_for(
        problem: &MultiRobotProblem,
        assumed_delay: u64,
        alpha: f64,
        lipschitz: &LipschitzEstimate,
    ) -> Result<Self> {
        let rho = problem.sparsity();
        if rho == 0.0 {
            // a single robot never sees stale values
            return Self::theorem(0, 1.0, alpha, lipschitz.l_hat);
        }
        Self::theorem(assumed_delay, rho, alpha, lipschitz.l_hat)
    }

    /// A user-chosen stepsize; the theorem parameters are left unset.
    pub fn fixed(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Domain(format!("stepsize must be positive, got {gamma}")));
        }
        Ok(StepsizePolicy {
            mode: StepsizeMode::Fixed,
            gamma,
            assumed_delay: 0,
            rho: f64::NAN,
            alpha: 1.0,
            lipschitz: f64::NAN,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub robot: usize,
    pub clock_rate_hz: f64,
    pub stepsize: StepsizePolicy,
    pub preconditioned: bool,
}

impl WorkerConfig {
    /// One config per robot sharing rate, stepsize and preconditioning.
    pub fn uniform(
        robots: usize,
        clock_rate_hz: f64,
        stepsize: StepsizePolicy,
        preconditioned: bool,
    ) -> Vec<WorkerConfig> {
        (0..robots)
            .map(|robot| WorkerConfig {
                robot,
                clock_rate_hz,
                stepsize,
                preconditioned,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub eta_norm: f64,
    pub local_cost_before: f64,
    pub local_cost_after: f64,
    /// Preconditioning combined with a theorem-mode stepsize, which the
    /// convergence guarantee does not cover.
    pub heuristic: bool,
    /// Stiefel blocks re-orthonormalized after the update.
    pub repaired_blocks: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub x_i: RobotVariable,
    /// Direction applied before scaling by `−γ`.
    pub eta: Vec<PoseTangent>,
    pub diagnostics: StepDiagnostics,
}

/// One Read / Compute / Update cycle of robot `config.robot`: evaluates the
/// Riemannian gradient of its local cost at its own (current) variable and
/// the cached neighbor values, then retracts along `−γ η`.
pub fn worker_step<C: NeighborPoses + ?Sized>(
    config: &WorkerConfig,
    problem: &MultiRobotProblem,
    x_i: &RobotVariable,
    cache: &C,
) -> Result<StepOutcome> {
    let robot = config.robot;
    let before = local_cost(problem, robot, x_i, cache)?;
    let grad = local_riemannian_gradient(problem, robot, x_i, cache)?;
    let eta = if config.preconditioned {
        precondition(problem, robot, x_i, &grad)?
    } else {
        grad
    };
    let eta_sq = norm_squared(&eta);
    if !eta_sq.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient at robot {robot}")));
    }
    let gamma = config.stepsize.gamma;
    let step: Vec<PoseTangent> = eta.iter().map(|v| v.scale(-gamma)).collect();
    let mut next = if eta_sq == 0.0 {
        x_i.clone()
    } else {
        retract_variable(x_i, &step)
    };
    let repaired = objective::repair_drift(&mut next, problem.dim());
    let after = local_cost(problem, robot, &next, cache)?;
    Ok(StepOutcome {
        x_i: next,
        eta,
        diagnostics: StepDiagnostics {
            eta_norm: eta_sq.sqrt(),
            local_cost_before: before,
            local_cost_after: after,
            heuristic: config.preconditioned && config.stepsize.mode == StepsizeMode::Theorem,
            repaired_blocks: repaired,
        },
    })
}

pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Aborts runs whose cost grows past `DIVERGENCE_FACTOR · f(x⁰)`.
#[derive(Clone, Copy, Debug)]
pub struct DivergenceGuard {
    threshold: f64,
}

impl DivergenceGuard {
    pub fn new(initial_cost: f64) -> Self {
        DivergenceGuard {
            threshold: DIVERGENCE_FACTOR * initial_cost.max(f64::MIN_POSITIVE),
        }
    }

    pub fn check(&self, cost: f64, iteration: u64) -> Result<()> {
        if cost.is_nan() || cost > self.threshold {
            return Err(Error::Diverged(format!(
                "cost {cost:.6e} at iteration {iteration} exceeds {:.6e}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delay_branch_is_inverse_lipschitz() {
        assert_eq!(gamma_bar(0, 0.4, 1.0, 4.0).unwrap(), 0.25);
    }

    #[test]
    fn unit_delay_hand_value() {
        let g = gamma_bar(1, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(g, 0.5);
        assert_eq!(stepsize_condition(g, 1, 1.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn decreasing_in_delay() {
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let g = gamma_bar(1 << k, 0.4, 1.0, 10.0).unwrap();
            assert!(g < last);
            last = g;
        }
    }

    #[test]
    fn invalid_lipschitz() {
        assert!(matches!(gamma_bar(3, 0.5, 1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(gamma_bar(0, 0.5, 1.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn guard_trips() {
        let g = DivergenceGuard::new(2.0);
        assert!(g.check(1999.0, 0).is_ok());
        assert!(matches!(g.check(2001.0, 1), Err(Error::Diverged(_))));
        assert!(g.check(f64::NAN, 2).is_err());
    }
}
