//! Command-line runner for photonic tensor-core experiments.

use clap::{Args, Parser, Subcommand};
use ptcore::config::ExperimentConfig;
use ptcore::error::Result;
use ptcore::pipeline;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ptcore",
    about = "Simulate and train MZI-mesh photonic tensor cores",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides applied on top of the config file. Names mirror the
/// sampling and noise symbols used throughout the reports.
#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    /// Experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for block-parallel stages.
    #[arg(long)]
    workers: Option<usize>,
    /// Feedback-block keep density α_W in (0, 1].
    #[arg(long = "alpha-w")]
    alpha_w: Option<f64>,
    /// Column keep density α_C in (0, 1].
    #[arg(long = "alpha-c")]
    alpha_c: Option<f64>,
    /// Iteration keep probability α_D in (0, 1].
    #[arg(long = "alpha-d")]
    alpha_d: Option<f64>,
    /// Control bitwidth of the unitary phases.
    #[arg(long)]
    bitwidth: Option<u32>,
    /// Gain error std per phase shifter.
    #[arg(long = "gamma-std")]
    gamma_std: Option<f64>,
    /// Mutual coupling factor of adjacent MZIs.
    #[arg(long)]
    crosstalk: Option<f64>,
    /// Enable the hidden fabrication phase bias.
    #[arg(long)]
    phase_bias: Option<bool>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(v) = self.alpha_w {
            cfg.sampling.feedback_density = v;
        }
        if let Some(v) = self.alpha_c {
            cfg.sampling.column_density = v;
        }
        if let Some(v) = self.alpha_d {
            cfg.sampling.batch_keep_prob = v;
        }
        if let Some(v) = self.bitwidth {
            cfg.noise.bitwidth_unitary = v;
        }
        if let Some(v) = self.gamma_std {
            cfg.noise.gamma_std = v;
        }
        if let Some(v) = self.crosstalk {
            cfg.noise.crosstalk_factor = v;
        }
        if let Some(v) = self.phase_bias {
            cfg.noise.phase_bias_enabled = v;
        }
        cfg.sampling.seed = cfg.seed;
        cfg.noise.seed = cfg.seed;
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run only the identity-calibration stage.
    Calibrate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run pre-training plus the parallel-mapping stage.
    Map {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run only subspace learning (from scratch unless a mapped checkpoint
    /// is produced first in the same config).
    Train {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every enabled stage in order.
    Pipeline {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Formula-level cost profile of the configured model and plan.
    Profile {
        config: PathBuf,
        /// Batch size assumed per iteration.
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print an example configuration file.
    ExampleConfig,
}

fn load(config: &std::path::Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Calibrate { config, overrides } => {
            let mut cfg = load(&config, &overrides)?;
            cfg.map.enabled = false;
            cfg.train.enabled = false;
            cfg.pretrain.enabled = false;
            cfg.ic.enabled = true;
            let art = pipeline::run_pipeline(&cfg)?;
            let n = art.summary.ic_reports.len().max(1);
            let mean: f64 = art
                .summary
                .ic_reports
                .iter()
                .map(|r| 0.5 * (r.mse_u + r.mse_v))
                .sum::<f64>()
                / n as f64;
            println!(
                "calibrated {} blocks, mean MSE {mean:.6}",
                art.summary.ic_reports.len()
            );
        }
        Command::Map { config, overrides } => {
            let mut cfg = load(&config, &overrides)?;
            cfg.ic.enabled = false;
            cfg.train.enabled = false;
            let art = pipeline::run_pipeline(&cfg)?;
            for (li, rep) in art.summary.mapping.iter().enumerate() {
                println!(
                    "layer {li}: mean normalized distance after OSP = {:.6}",
                    rep.mean_dist_after()
                );
            }
        }
        Command::Train { config, overrides } => {
            let mut cfg = load(&config, &overrides)?;
            cfg.ic.enabled = false;
            cfg.map.enabled = false;
            cfg.pretrain.enabled = false;
            let art = pipeline::run_pipeline(&cfg)?;
            if let Some(m) = art.summary.epochs.last() {
                println!("final train loss {:.4}, accuracy {:.4}", m.loss, m.accuracy);
            }
            if let Some(acc) = art.summary.test_accuracy {
                println!("test accuracy {acc:.4}");
            }
        }
        Command::Pipeline { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let art = pipeline::run_pipeline(&cfg)?;
            if let Some(acc) = art.summary.pretrain_test_accuracy {
                println!("electronic twin test accuracy {acc:.4}");
            }
            if let Some(acc) = art.summary.test_accuracy {
                println!("photonic test accuracy {acc:.4}");
            }
            println!("artifacts under {}", cfg.output_dir.display());
        }
        Command::Profile {
            config,
            batch,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let (report, path) = pipeline::run_profile(&cfg, batch)?;
            println!(
                "per-iteration: energy {:.3e} (norm), steps {:.3e} (norm); report at {}",
                report.energy_total(),
                report.step_total(),
                path.display()
            );
            if let (Some(er), Some(sr)) = (report.energy_ratio, report.step_ratio) {
                println!("vs dense baseline: energy ×{er:.2}, steps ×{sr:.2}");
            }
        }
        Command::Eval {
            config,
            checkpoint,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let acc = pipeline::run_eval(&cfg, &checkpoint)?;
            println!("test accuracy {acc:.4}");
        }
        Command::ExampleConfig => {
            print!("{}", ExperimentConfig::example().to_toml()?);
        }
    }
    Ok(())
}

// Exit codes: 0 success, 2 configuration error, 3 numerical abort.
fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
