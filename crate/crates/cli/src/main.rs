mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use she_core::Error;

use config::Config;

#[derive(Parser)]
#[command(
    name = "she",
    version,
    about = "Stochastic heat equation experiments with non-Lipschitz noise coefficients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo ensemble of the stochastic equation with per-path diagnostics.
    Simulate(Common),
    /// Deterministic absorption equation and the integral tests.
    Deterministic(Common),
    /// Evaluate the positivity and compact-support inequalities over a beta list.
    Conditions(Common),
    /// Truncation convergence against a reference level.
    Converge(Common),
    /// Coupled runs from ordered initial data.
    Compare(Common),
    /// Heat-kernel propagation lower bound for a list of m.
    Propagation(Common),
    /// Positivity and support statistics across beta.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    paths: Option<String>,
    /// Worker threads; does not affect any output.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    m: Option<String>,
    /// Below 1/4 sets the positivity exponent, above 5/2 the compact-support one.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "grid-nx")]
    grid_nx: Option<String>,
    #[arg(long = "grid-L")]
    grid_l: Option<String>,
    #[arg(long)]
    dt: Option<String>,
    #[arg(long = "T")]
    horizon: Option<String>,
    #[arg(long)]
    snapshots: Option<String>,
}

fn flag_pairs(name: &str, c: &Common) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut put = |k: &str, v: &Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v.clone()));
        }
    };
    put("seed", &c.seed);
    put("paths", &c.paths);
    put("gamma", &c.gamma);
    put("grid_nx", &c.grid_nx);
    put("grid_L", &c.grid_l);
    put("dt", &c.dt);
    put("T", &c.horizon);
    put("snapshots", &c.snapshots);
    put(
        if matches!(name, "conditions" | "sweep") {
            "betas"
        } else {
            "beta"
        },
        &c.beta,
    );
    put(
        if matches!(name, "converge" | "propagation") {
            "m_list"
        } else {
            "m"
        },
        &c.m,
    );
    if let Some(a) = c.alpha {
        if a > 0.0 && a < 0.25 {
            out.push(("alpha_pos".into(), format!("{a:?}")));
        } else if a > 2.5 {
            out.push(("alpha_csp".into(), format!("{a:?}")));
        } else {
            return Err(Error::Config(format!(
                "--alpha {a} is neither in (0, 1/4) nor above 5/2"
            )));
        }
    }
    Ok(out)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Domain(_) => 2,
        Error::BlowUp { .. } => 3,
        Error::Precondition(_) | Error::Overshoot { .. } | Error::MissingNoise(_) => 4,
        Error::Io(_) => 1,
    }
}

fn run(name: &str, c: &Common) -> Result<commands::Outcome, Error> {
    let text = match &c.config {
        Some(p) => Some(
            std::fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let cfg = Config::resolve(name, text.as_deref(), &flag_pairs(name, c)?)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = c.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| commands::run(&cfg, &c.out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Deterministic(c) => ("deterministic", c),
        Command::Conditions(c) => ("conditions", c),
        Command::Converge(c) => ("converge", c),
        Command::Compare(c) => ("compare", c),
        Command::Propagation(c) => ("propagation", c),
        Command::Sweep(c) => ("sweep", c),
    };
    match run(name, common) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.gate_failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for g in &outcome.gate_failures {
                    eprintln!("gate failed: {g}");
                }
                ExitCode::from(4)
            }
        }
        Err(e) => {
            eprintln!("she: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
