//! Driver for the M-mode pretraining experiments: `synth`, `extract`,
//! `pretrain`, `probe`, `finetune`, `evaluate`, `saliency` and `sweep`.

pub mod settings;
pub mod stages;

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mmode_ssl::metrics::summary_text;
use mmode_ssl::train::TrainMode;
use mmode_ssl::{Error, Result};

pub use settings::RunConfig;
pub use stages::Layout;

#[derive(Debug, Parser)]
#[command(name = "mmssl", about = "Self-supervised pretraining on M-mode lung ultrasound")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate labelled, unlabelled and external synthetic videos.
    Synth,
    /// Extract M-modes from every manifest.
    Extract,
    /// Self-supervised pretraining.
    Pretrain,
    /// Train a linear head on a frozen encoder.
    Probe,
    /// Fine-tune everything except the first block.
    Finetune,
    /// Report test and external metrics for a downstream run.
    Evaluate,
    /// Grad-CAM maps for test images of a downstream run.
    Saliency,
    /// Label-efficiency sweep over fractions and init schemes.
    Sweep,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Options {
    /// key=value config file applied over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// simclr | barlow_twins | vicreg | none
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// random | pseudo_pretrained
    #[arg(long, global = true)]
    pub init: Option<String>,
    /// Pretraining augmentation pipeline: mmode | byol | downstream
    #[arg(long, global = true)]
    pub augs: Option<String>,
    /// linear | finetune (for evaluate, saliency and sweep)
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Comma-separated fractions for the sweep.
    #[arg(long, global = true)]
    pub label_fractions: Option<String>,
    /// train | train+unlabeled
    #[arg(long, global = true)]
    pub data: Option<String>,
    /// Any config key, as KEY=VALUE; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Number of saliency maps (0 for every test image).
    #[arg(long, global = true)]
    pub count: Option<usize>,
}

impl Options {
    /// Defaults, then the config file, then `--set`, then named flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::from_text(&text)?
            }
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let seed = self.seed.map(|s| s.to_string());
        let flags = [
            ("seed", &seed),
            ("run.method", &self.method),
            ("run.init", &self.init),
            ("aug.pipeline", &self.augs),
            ("run.mode", &self.mode),
            ("sweep.label_fractions", &self.label_fractions),
            ("run.data", &self.data),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(c) = self.count {
            cfg.saliency_count = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one subcommand; progress goes to stderr, results to stdout.
pub fn execute(command: Command, cfg: &RunConfig, layout: &Layout) -> Result<()> {
    match command {
        Command::Synth => {
            for (split, n) in stages::synth(cfg, layout)?.counts {
                println!("{split}: {n} videos");
            }
        }
        Command::Extract => {
            for (split, n) in stages::extract(cfg, layout)? {
                println!("{split}: {n} segments");
            }
        }
        Command::Pretrain => {
            let dir = stages::pretrain(cfg, layout, cfg.init)?;
            println!("{}", dir.display());
        }
        Command::Probe | Command::Finetune => {
            let mode = if command == Command::Probe { TrainMode::Linear } else { TrainMode::Finetune };
            let dir = stages::downstream(cfg, layout, mode, cfg.downstream.label_fraction)?;
            println!("{}", dir.display());
        }
        Command::Evaluate => {
            let reports = stages::evaluate(cfg, layout, &stages::selected_run(cfg, layout))?;
            let externals = if reports.len() > 2 {
                Some(mmode_ssl::metrics::aggregate_external(&reports[1..])?)
            } else {
                None
            };
            print!("{}", summary_text(&reports, externals.as_ref()));
        }
        Command::Saliency => {
            let dir = stages::selected_run(cfg, layout);
            let records = stages::saliency(cfg, layout, &dir, cfg.saliency_count)?;
            println!("{} saliency maps in {}", records.len(), dir.join("saliency").display());
        }
        Command::Sweep => {
            let rows = stages::sweep(cfg, layout)?;
            print!("{}", stages::sweep_csv(&rows));
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = cli.opts.resolve()?;
    execute(cli.command, &cfg, &Layout::new(&cli.opts.out))
}
