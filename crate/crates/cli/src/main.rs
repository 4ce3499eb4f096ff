use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use verfedsv_cli::config::{ExperimentConfig, Mode, Overrides};
use verfedsv_cli::pipeline;
use verfedsv_cli::presets::{self, Preset};

/// Vertical federated training and per-client Shapley valuation.
#[derive(Debug, Parser)]
#[command(name = "verfedsv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Monte-Carlo valuation with this many permutations.
    #[arg(long = "K", value_name = "K")]
    permutations: Option<usize>,
    /// Exact valuation by enumerating every coalition.
    #[arg(long, conflicts_with = "permutations")]
    exact: bool,
    /// Rows kept from the dataset before splitting.
    #[arg(long)]
    subsample: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            output: self.output.clone(),
            mode: self.mode,
            permutations: self.permutations,
            exact: self.exact,
            subsample: self.subsample,
        }
    }

    fn base(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.base()?;
        cfg.apply(&self.overrides());
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and write the embedding trace, labels, losses and manifest.
    Train(Common),
    /// Value the clients of a finished training run.
    Value {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`; the output directory when absent.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Run a built-in experiment end to end.
    Experiment {
        /// heterogeneity, random_feature_sync, frequency,
        /// random_feature_async or rank_report.
        preset: Preset,
        #[command(flatten)]
        common: Common,
    },
    /// Approximate ranks of the per-client embedding matrices of a
    /// synchronous run.
    RankReport(Common),
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(c) => pipeline::cmd_train(&c.config()?),
        Command::Value { common, trace_dir } => {
            let cfg = common.config()?;
            match trace_dir {
                Some(dir) => pipeline::cmd_value(&cfg, &dir, common.output.as_deref()),
                None => pipeline::cmd_value(&cfg, &cfg.output, None),
            }
        }
        Command::Experiment { preset, common } => {
            let mut cfg = presets::preset_config(preset, &common.base()?);
            cfg.apply(&common.overrides());
            Ok(presets::run_preset(preset, &cfg)?.summary().to_string())
        }
        Command::RankReport(c) => Ok(pipeline::cmd_rank_report(&c.config()?)?.1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
