//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use asapp_core::graph::GridWorldSpec;
use asapp_core::sim::{DelayModel, Horizon};
use asapp_core::worker::StepsizeMode;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemSource {
    /// Grid world; its seed is replaced by the run seed.
    Synthetic(GridWorldSpec),
    G2o {
        path: PathBuf,
        robots: usize,
        /// Inferred from the record tags when absent.
        #[serde(default)]
        dim: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSource,
    pub rank: usize,
    pub gamma_mode: StepsizeMode,
    /// Required in fixed mode.
    pub gamma: Option<f64>,
    /// Delay bound `B` assumed by the theorem-mode stepsize.
    pub assumed_delay: u64,
    pub alpha: f64,
    pub lipschitz_safety: f64,
    pub preconditioned: bool,
    pub clock_rate_hz: f64,
    /// `none`, `fixed:<s>` or `uniform:<lo>:<hi>`.
    pub delay: String,
    pub send_period_s: Option<f64>,
    /// `<seconds>s` of simulated time or `<count>it` global iterations.
    pub horizon: String,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub trace_stride: u64,
    /// Iteration budget of the centralized reference solver.
    pub oracle_iters: usize,
    pub oracle_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: ProblemSource::Synthetic(GridWorldSpec::default()),
            rank: 5,
            gamma_mode: StepsizeMode::Fixed,
            gamma: None,
            assumed_delay: 0,
            alpha: 1.0,
            lipschitz_safety: asapp_core::objective::DEFAULT_LIPSCHITZ_SAFETY,
            preconditioned: false,
            clock_rate_hz: 1000.0,
            delay: "none".into(),
            send_period_s: None,
            horizon: "10000it".into(),
            seeds: vec![0],
            out: PathBuf::from("out"),
            trace_stride: 1,
            oracle_iters: 5000,
            oracle_tol: 1e-6,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn delay_model(&self) -> Result<DelayModel, CliError> {
        let mut model = parse_delay(&self.delay)?;
        if let Some(p) = self.send_period_s {
            model = model.with_send_period(p);
        }
        model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(model)
    }

    pub fn horizon_value(&self) -> Result<Horizon, CliError> {
        parse_horizon(&self.horizon)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.delay_model()?;
        self.horizon_value()?;
        if self.seeds.is_empty() {
            return Err(CliError::Usage("at least one seed is required".into()));
        }
        if self.gamma_mode == StepsizeMode::Fixed && self.gamma.is_none() {
            return Err(CliError::Usage("fixed stepsize mode needs --gamma".into()));
        }
        if !(self.clock_rate_hz > 0.0) {
            return Err(CliError::Usage("clock rate must be positive".into()));
        }
        if self.trace_stride == 0 {
            return Err(CliError::Usage("trace stride must be positive".into()));
        }
        Ok(())
    }
}

pub fn parse_delay(text: &str) -> Result<DelayModel, CliError> {
    let bad = || {
        CliError::Usage(format!(
            "invalid delay '{text}', expected none, fixed:<s> or uniform:<lo>:<hi>"
        ))
    };
    let parts: Vec<&str> = text.trim().split(':').collect();
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    match parts.as_slice() {
        ["none"] => Ok(DelayModel::none()),
        ["fixed", s] => Ok(DelayModel::fixed(num(s)?)),
        ["uniform", lo, hi] => Ok(DelayModel::uniform(num(lo)?, num(hi)?)),
        _ => Err(bad()),
    }
}

pub fn parse_horizon(text: &str) -> Result<Horizon, CliError> {
    let t = text.trim();
    let bad = || CliError::Usage(format!("invalid horizon '{text}', expected e.g. 60s or 10000it"));
    if let Some(k) = t.strip_suffix("it") {
        let k: f64 = k.trim().parse().map_err(|_| bad())?;
        if !(k >= 0.0 && k.fract() == 0.0) {
            return Err(bad());
        }
        Ok(Horizon::iterations(k as u64))
    } else if let Some(s) = t.strip_suffix('s') {
        let s: f64 = s.trim().parse().map_err(|_| bad())?;
        if !(s >= 0.0 && s.is_finite()) {
            return Err(bad());
        }
        Ok(Horizon::seconds(s))
    } else {
        Err(bad())
    }
}

/// `1,2,3` or the half-open range `0..20`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("invalid seed list '{text}'"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

/// Applies `key=value` pairs to a grid-world spec.
pub fn parse_synthetic(tokens: &[String], base: GridWorldSpec) -> Result<GridWorldSpec, CliError> {
    let mut spec = base;
    for token in tokens
        .iter()
        .flat_map(|t| t.split([',', ' ']))
        .filter(|t| !t.is_empty())
    {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got '{token}'")))?;
        let bad = || CliError::Usage(format!("invalid value for {key}: '{value}'"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let real = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "robots" => spec.robots = int()?,
            "poses" | "poses_per_robot" => spec.poses_per_robot = int()?,
            "p" | "loop_closure_prob" => spec.loop_closure_prob = real()?,
            "radius" | "loop_radius_m" => spec.loop_radius_m = real()?,
            "rot" | "rot_noise_deg" => spec.rot_noise_deg = real()?,
            "trans" | "trans_noise_m" => spec.trans_noise_m = real()?,
            "dim" => spec.dim = int()?,
            _ => return Err(CliError::Usage(format!("unknown synthetic key '{key}'"))),
        }
    }
    Ok(spec)
}
