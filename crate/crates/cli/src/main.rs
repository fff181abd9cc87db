use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use patchad::commands;
use patchad::config::{Aggregation, PolicyName, RunConfig, Variant};
use patchad::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "patchad", version, about = "Patch-token anomaly detection for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the contrastive feature encoder.
    TrainEncoder(Overrides),
    /// Pretrain the stub backbone (or load one) and fine-tune its trainable part.
    Finetune(Overrides),
    /// Train, score the test split and write metrics.
    Eval(Overrides),
    /// Compare the full model with the no-skip and no-feature variants.
    Ablate(Overrides),
    /// Rerun the evaluation for each number of contrastive negatives.
    SweepN(Overrides),
}

/// Flags override values from the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest path, or `synthetic`.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the files the manifest names.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Leading fraction of the training split to use.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    n_negatives: Option<usize>,
    /// quantile or best-f1.
    #[arg(long)]
    threshold_policy: Option<PolicyName>,
    /// Quantile level for the quantile policy.
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    point_adjust: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
    #[arg(long)]
    encoder_checkpoint: Option<PathBuf>,
    #[arg(long)]
    backbone_checkpoint: Option<PathBuf>,
    /// full, no-skip or no-feature.
    #[arg(long)]
    variant: Option<Variant>,
    /// concat or mean.
    #[arg(long)]
    aggregation: Option<Aggregation>,
    /// Comma-separated negative counts for sweep-n.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long)]
    encoder_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> patchad::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::read(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = Some(v.clone());
        }
        if let Some(v) = self.fraction {
            cfg.train_fraction = v;
        }
        if let Some(v) = self.n_negatives {
            cfg.n_negatives = v;
        }
        if let Some(v) = self.threshold_policy {
            cfg.threshold.policy = v;
        }
        if let Some(v) = self.quantile {
            cfg.threshold.q = Some(v);
        }
        if self.point_adjust {
            cfg.point_adjust = true;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
            cfg.synthetic.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &self.encoder_checkpoint {
            cfg.encoder_checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.backbone_checkpoint {
            cfg.backbone_checkpoint = Some(v.clone());
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(v) = self.aggregation {
            cfg.aggregation = v;
        }
        if let Some(v) = &self.n_list {
            cfg.n_list = v.clone();
        }
        if let Some(v) = self.encoder_epochs {
            cfg.encoder_training.epochs = v;
        }
        if let Some(v) = self.finetune_epochs {
            cfg.finetune.epochs = v;
        }
        Ok(cfg)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> patchad::Result<()> {
    match cli.command {
        Command::TrainEncoder(o) => {
            let cfg = o.resolve()?;
            for t in commands::cmd_train_encoder(&cfg, o.overwrite)? {
                let last = t.epoch_losses.last().copied();
                println!("encoder trained: {} epochs, final loss {}", t.epoch_losses.len(), fmt_opt(last));
            }
        }
        Command::Finetune(o) => {
            let cfg = o.resolve()?;
            for s in commands::cmd_finetune(&cfg, o.overwrite)? {
                println!(
                    "{}: {} epochs, {} trainable / {} frozen tensors, {:.2}s",
                    s.subset, s.epochs, s.trainable_tensors, s.frozen_tensors, s.runtime_seconds
                );
            }
        }
        Command::Eval(o) => {
            let cfg = o.resolve()?;
            let eval = commands::cmd_eval(&cfg, o.overwrite)?;
            let r = &eval.report;
            println!(
                "f1={} auc={} precision={} recall={} threshold={:.6} runtime={:.2}s",
                fmt_opt(r.f1),
                fmt_opt(r.auc),
                fmt_opt(r.precision),
                fmt_opt(r.recall),
                r.threshold,
                r.runtime_seconds
            );
        }
        Command::Ablate(o) => {
            let cfg = o.resolve()?;
            println!("{:<12} {:>8} {:>8}", "variant", "f1", "auc");
            for r in commands::cmd_ablate(&cfg, o.overwrite)? {
                println!("{:<12} {:>8} {:>8}", r.variant, fmt_opt(r.f1), fmt_opt(r.auc));
            }
        }
        Command::SweepN(o) => {
            let cfg = o.resolve()?;
            println!("{:>3} {:>8} {:>8}", "n", "f1", "auc");
            for row in commands::cmd_sweep_n(&cfg, o.overwrite)? {
                let note = if row.with_replacement { "  (with replacement)" } else { "" };
                println!("{:>3} {:>8} {:>8}{note}", row.n, fmt_opt(row.f1), fmt_opt(row.auc));
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Internal => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
