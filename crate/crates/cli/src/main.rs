use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coils_cli::{cmd_portrait, cmd_sample, cmd_simulate, cmd_train_with, cmd_verify, CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "coils",
    version,
    about = "Learn a plant model, controller and Lyapunov function that are stable by construction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Root under which `<name>/` is written.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the configured system: vdp, pendulum or bicycle.
    #[arg(long)]
    system: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labelled dataset uniformly over the boxes.
    Sample(Common),
    /// Train on the run's dataset, sampling it first if needed.
    Train(Common),
    /// Roll the trained controller out on the true and the learned plant.
    Simulate(Common),
    /// Export vector fields and Lyapunov grids.
    Portrait(Common),
    /// Audit the stability guarantees and the data certificate.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Disable the stability projection (negative control).
        #[arg(long)]
        ablate_projection: bool,
    },
}

fn config(c: &Common, ablate: bool) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &c.system {
        if cfg.name == cfg.system {
            cfg.name.clear();
        }
        cfg.system = s.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.verify.ablate_projection |= ablate;
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sample(c) => {
            let data = cmd_sample(&config(&c, false)?, &c.out)?;
            println!("sampled {} rows", data.len());
        }
        Command::Train(c) => {
            let s = cmd_train_with(&config(&c, false)?, &c.out, |r| {
                let holdout = r.holdout.map(|h| format!(" holdout {h:.6e}")).unwrap_or_default();
                eprintln!("epoch {} train {:.6e}{holdout}", r.epoch, r.train);
            })?;
            println!("trained {} epochs ({} total)", s.epochs_run, s.total_epochs);
        }
        Command::Simulate(c) => {
            for r in cmd_simulate(&config(&c, false)?, &c.out)?.rollouts {
                println!("{} {}: ‖x(T)‖ = {:.4e} {:?}", r.plant, r.index, r.final_norm, r.status);
            }
        }
        Command::Portrait(c) => {
            for p in cmd_portrait(&config(&c, false)?, &c.out)? {
                println!("{}", p.display());
            }
        }
        Command::Verify { common, ablate_projection } => {
            cmd_verify(&config(&common, ablate_projection)?, &common.out)?;
            println!("all enabled checks passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
