//! `repmut` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use repmut::experiments::ReferenceMode;

use config::{parse_grid, RunConfig, Usage};

#[derive(Parser, Debug)]
#[command(name = "repmut", version, about = "Replicator-mutator filtering experiments")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
struct Flags {
    /// Model preset (system1, system2, figure1).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// TOML or JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, env = "REPMUT_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Monte Carlo sample count (observation realizations or runs).
    #[arg(long, global = true)]
    ns: Option<usize>,
    #[arg(long = "delta-d", global = true)]
    delta_d: Option<f64>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    r: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    s: Option<f64>,
    /// `log:a:b:n`, `lin:a:b:n` or a comma list.
    #[arg(long = "r-grid", global = true, allow_hyphen_values = true)]
    r_grid: Option<String>,
    #[arg(long = "s-grid", global = true, allow_hyphen_values = true)]
    s_grid: Option<String>,
    #[arg(long = "t-end", global = true)]
    t_end: Option<f64>,
    /// Spatial grid size for density solvers and trait lattices.
    #[arg(long, global = true)]
    nx: Option<usize>,
    /// Ensemble size.
    #[arg(long = "particles", global = true)]
    n_particles: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Crow-Kimura vs Zakai (Ito, Stratonovich) density snapshot.
    Figure1,
    /// Crow-Kimura vs Stratonovich gap as the observation spacing shrinks.
    Convergence,
    /// Empirical and analytic MSE over an (r, s) grid.
    Sweep {
        /// Skip the Monte Carlo part.
        #[arg(long)]
        analytic_only: bool,
        /// Simulate an independent signal path per realization.
        #[arg(long)]
        per_realization: bool,
    },
    /// Closed-form optimal parameters and bounds as JSON.
    Asymptotics,
    /// Ensemble Kalman-Bucy filter run, or the unbiasedness test.
    Enkbf {
        /// stoch, det, stoch_smooth, det_smooth, inflate_mult, inflate_add.
        #[arg(long)]
        variant: Option<String>,
        /// Inflation size for the inflate_* variants (default 0.1).
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        unbiasedness: bool,
    },
    /// Replicator flow against the tempered-density oracle.
    Temper {
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        y: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        h: f64,
        #[arg(long, default_value_t = 1.0)]
        xi: f64,
        #[arg(long, default_value_t = 1.0)]
        p0: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        m0: f64,
        #[arg(long, default_value_t = 6.0)]
        half_width: f64,
    },
    /// Empirical MSE curve at one (r, s).
    Mse {
        #[arg(long)]
        per_realization: bool,
    },
    /// Filter covariance against empirical MSE at candidate pairs.
    Calibrate {
        #[arg(long)]
        per_realization: bool,
    },
    /// Density, moment and ensemble moments side by side.
    Triangle,
}

impl Flags {
    fn to_config(&self) -> anyhow::Result<RunConfig> {
        Ok(RunConfig {
            preset: self.preset.clone(),
            seed: self.seed,
            dt: self.dt,
            delta_d: self.delta_d,
            t_end: self.t_end,
            ns: self.ns,
            r: self.r,
            s: self.s,
            r_grid: self.r_grid.as_deref().map(parse_grid).transpose()?,
            s_grid: self.s_grid.as_deref().map(parse_grid).transpose()?,
            nx: self.nx,
            n_particles: self.n_particles,
            ..Default::default()
        })
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.flags.threads {
        if n == 0 {
            return config::usage("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = match &cli.flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.overlay(&cli.flags.to_config()?);
    let ctx = commands::Ctx { out: cli.flags.out.clone() };
    match cli.cmd {
        Cmd::Figure1 => commands::figure1(&ctx, cfg),
        Cmd::Convergence => commands::convergence(&ctx, cfg),
        Cmd::Sweep { analytic_only, per_realization } => {
            if per_realization {
                cfg.reference = Some(ReferenceMode::PerRealization);
            }
            commands::sweep(&ctx, cfg, analytic_only)
        }
        Cmd::Asymptotics => commands::asymptotics(&ctx, cfg),
        Cmd::Enkbf { variant, eps, unbiasedness } => {
            cfg.variant = variant.or(cfg.variant);
            cfg.eps = eps.or(cfg.eps);
            commands::enkbf(&ctx, cfg, unbiasedness)
        }
        Cmd::Temper { y, h, xi, p0, m0, half_width } => commands::temper(&ctx, cfg, commands::TemperArgs { y, h, xi, p0, m0, half_width }),
        Cmd::Mse { per_realization } => {
            if per_realization {
                cfg.reference = Some(ReferenceMode::PerRealization);
            }
            commands::mse(&ctx, cfg)
        }
        Cmd::Calibrate { per_realization } => {
            if per_realization {
                cfg.reference = Some(ReferenceMode::PerRealization);
            }
            commands::calibrate(&ctx, cfg)
        }
        Cmd::Triangle => commands::triangle(&ctx, cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: a result check failed; see the written report");
            ExitCode::from(1)
        }
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
