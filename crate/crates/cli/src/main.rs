use std::path::PathBuf;
use std::process::ExitCode;

use asapp_cli::commands::{cmd_run, cmd_sweep_delay, cmd_verify};
use asapp_cli::config::{parse_seeds, parse_synthetic, ProblemSource, RunConfig};
use asapp_cli::CliError;
use asapp_core::graph::GridWorldSpec;
use asapp_core::worker::StepsizeMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "asapp", version, about = "Asynchronous distributed pose-graph optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one or more seeds and write traces and metrics.
    Run(Common),
    /// Repeat a run for several fixed delays.
    SweepDelay {
        #[command(flatten)]
        common: Common,
        /// Comma-separated delays in seconds.
        #[arg(long, value_delimiter = ',', required = true)]
        delays: Vec<f64>,
    },
    /// Check the sublinear-rate bound over many seeds.
    Verify(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum GammaMode {
    Theorem,
    Fixed,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic grid world, optionally with key=value settings
    /// (robots, poses, p, radius, rot, trans, dim).
    #[arg(long, num_args = 0.., conflicts_with = "g2o")]
    synthetic: Option<Vec<String>>,
    /// g2o dataset, partitioned into --robots contiguous blocks.
    #[arg(long)]
    g2o: Option<PathBuf>,
    #[arg(long)]
    robots: Option<usize>,
    /// Dimension of the g2o dataset; inferred when absent.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    /// none, fixed:<s> or uniform:<lo>:<hi>
    #[arg(long)]
    delay: Option<String>,
    /// Broadcast period in seconds.
    #[arg(long)]
    send_period: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    gamma_mode: Option<GammaMode>,
    /// Delay bound in global iterations assumed by the theorem stepsize.
    #[arg(long = "assumed-B")]
    assumed_b: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Multiplier applied to the Lipschitz estimate.
    #[arg(long)]
    safety: Option<f64>,
    /// Block-Jacobi preconditioning.
    #[arg(long)]
    precondition: bool,
    /// Poisson clock rate per robot, Hz.
    #[arg(long)]
    rate: Option<f64>,
    /// e.g. 60s or 10000it
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// e.g. 0..20 or 1,4,9
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace_stride: Option<u64>,
}

impl Common {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = self.g2o {
            let robots = match (&cfg.problem, self.robots) {
                (_, Some(n)) => n,
                (ProblemSource::G2o { robots, .. }, None) => *robots,
                _ => return Err(CliError::Usage("--g2o needs --robots".into())),
            };
            cfg.problem = ProblemSource::G2o {
                path,
                robots,
                dim: self.dim,
            };
        } else if let Some(tokens) = self.synthetic {
            let base = match &cfg.problem {
                ProblemSource::Synthetic(spec) => spec.clone(),
                _ => GridWorldSpec::default(),
            };
            let mut spec = parse_synthetic(&tokens, base)?;
            if let Some(n) = self.robots {
                spec.robots = n;
            }
            cfg.problem = ProblemSource::Synthetic(spec);
        } else if let Some(n) = self.robots {
            match &mut cfg.problem {
                ProblemSource::Synthetic(spec) => spec.robots = n,
                ProblemSource::G2o { robots, .. } => *robots = n,
            }
        }
        if let Some(r) = self.rank {
            cfg.rank = r;
        }
        if let Some(d) = self.delay {
            cfg.delay = d;
        }
        if self.send_period.is_some() {
            cfg.send_period_s = self.send_period;
        }
        if self.gamma.is_some() {
            cfg.gamma = self.gamma;
        }
        match self.gamma_mode {
            Some(GammaMode::Theorem) => cfg.gamma_mode = StepsizeMode::Theorem,
            Some(GammaMode::Fixed) => cfg.gamma_mode = StepsizeMode::Fixed,
            None if self.gamma.is_none() && cfg.gamma.is_none() => cfg.gamma_mode = StepsizeMode::Theorem,
            None => {}
        }
        if let Some(b) = self.assumed_b {
            cfg.assumed_delay = b;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = self.safety {
            cfg.lipschitz_safety = s;
        }
        if self.precondition {
            cfg.preconditioned = true;
        }
        if let Some(r) = self.rate {
            cfg.clock_rate_hz = r;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = self.seeds {
            cfg.seeds = parse_seeds(&s)?;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        if let Some(t) = self.trace_stride {
            cfg.trace_stride = t;
        }
        Ok(cfg)
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(common) => cmd_run(&common.resolve()?).map(drop),
        Command::SweepDelay { common, delays } => cmd_sweep_delay(&common.resolve()?, &delays).map(drop),
        Command::Verify(common) => cmd_verify(&common.resolve()?).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
