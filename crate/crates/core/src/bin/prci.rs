use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conformal_contraction::harness::Pipeline;

#[derive(Parser)]
#[command(
    name = "prci",
    version,
    about = "Conformal contraction tubes: data, training, calibration, planning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; finished stages there are reused.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Metric, reference trajectories and open-loop training data.
    GenData(Common),
    /// Fit the uncertainty predictor.
    Train(Common),
    /// Closed-loop calibration rollouts and the conformal quantile.
    Calibrate(Common),
    /// Tube radius and its planar cross-section.
    Tube(Common),
    /// Tightened planning with two-step calibration.
    Plan(Common),
    /// Test rollouts, coverage table, per-rollout and ellipse CSVs.
    Evaluate(Common),
    /// Every stage.
    Pipeline(Common),
}

fn run(cli: Cli) -> conformal_contraction::Result<()> {
    let common = match &cli.command {
        Command::GenData(c)
        | Command::Train(c)
        | Command::Calibrate(c)
        | Command::Tube(c)
        | Command::Plan(c)
        | Command::Evaluate(c)
        | Command::Pipeline(c) => c,
    };
    let mut p = Pipeline::from_config_file(&common.config, &common.out, common.seed)?;
    if let Some(n) = p.config().workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| conformal_contraction::Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(_) => {
            p.metric()?;
            let train = p.train_data()?;
            println!(
                "{} training records in {}",
                train.len(),
                p.out_dir().display()
            );
        }
        Command::Train(_) => {
            let pred = p.predictor()?;
            if let Some(t) = &pred.training {
                println!(
                    "{} predictor, train sup error {:.6}",
                    pred.family(),
                    t.sup_error
                );
            }
        }
        Command::Calibrate(_) => println!("{}", p.calibration()?.summary()),
        Command::Tube(_) => println!("{}", serde_json::to_string_pretty(&p.tube()?)?),
        Command::Plan(_) => match p.planning()? {
            Some(s) => println!(
                "{}/{} plans solved; tracking radius {:.6}",
                s.plans_solved, s.plans_requested, s.tracking_calibration.radius
            ),
            None => println!("no [planning] section in the configuration"),
        },
        Command::Evaluate(_) => print!("{}", p.evaluate()?.table()),
        Command::Pipeline(_) => print!("{}", p.run()?.table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
