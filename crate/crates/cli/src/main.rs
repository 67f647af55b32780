//! `liftprune` command-line tool.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use liftprune::pruner::Objective;
use liftprune::wsq::ClusterCriteria;

use config::{PruneMode, RunConfig};
use output::Outputs;

#[derive(Debug, Parser)]
#[command(name = "liftprune", version, about = "Attribution-guided pruning and quantization")]
struct Cli {
    /// JSON run configuration; omitted blocks take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Input model file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Set any configuration value, e.g. `--set wsq.bits=4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CriteriaArg {
    Macs,
    Nps,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Global,
    Unstructured,
    Local,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClusterArg {
    Mse,
    Dwmse,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the reference CNN on the configured dataset.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-channel DeepLIFT importances.
    Attribute,
    /// Per-layer sensitivity profile.
    Sensitivity,
    /// Structured, unstructured or single-layer pruning.
    Prune {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        criteria: Option<CriteriaArg>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Fraction of the current cost removed per round.
        #[arg(long)]
        per_round: Option<f64>,
        #[arg(long)]
        no_fine_tune: bool,
    },
    /// Weight sharing with MSE or DWMSE clustering.
    QuantizeWs {
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long, value_enum)]
        criteria: Option<ClusterArg>,
        #[arg(long)]
        recalibrate: bool,
    },
    /// Mixed-precision integer quantization search.
    QuantizeInt {
        #[arg(long)]
        min_bits: Option<u32>,
        #[arg(long)]
        coarse_iterations: Option<usize>,
        #[arg(long)]
        acc_floor: Option<f64>,
        #[arg(long)]
        max_drop: Option<f64>,
        #[arg(long)]
        no_fine_search: bool,
    },
    /// Per-layer MACs and parameters.
    Profile {
        /// Prune mask JSON.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Merge report JSON files into curve CSVs.
    Report {
        /// `label=path` report inputs, added to `report.inputs`.
        #[arg(value_name = "LABEL=PATH")]
        inputs: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Attribute => "attribute",
            Command::Sensitivity => "sensitivity",
            Command::Prune { .. } => "prune",
            Command::QuantizeWs { .. } => "quantize-ws",
            Command::QuantizeInt { .. } => "quantize-int",
            Command::Profile { .. } => "profile",
            Command::Report { .. } => "report",
        }
    }

    /// Writes the flag mirrors into the configuration.
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        match self {
            Command::Train { epochs } => {
                if let Some(e) = epochs {
                    cfg.train.epochs = *e;
                }
            }
            Command::Prune {
                mode,
                criteria,
                rounds,
                per_round,
                no_fine_tune,
            } => {
                if let Some(m) = mode {
                    cfg.prune.mode = match m {
                        ModeArg::Global => PruneMode::Global,
                        ModeArg::Unstructured => PruneMode::Unstructured,
                        ModeArg::Local => PruneMode::Local,
                    };
                }
                let o = &mut cfg.prune.config.objective;
                if let Some(c) = criteria {
                    o.criteria = match c {
                        CriteriaArg::Macs => Objective::Macs,
                        CriteriaArg::Nps => Objective::Nps,
                        CriteriaArg::Both => Objective::Both,
                    };
                }
                if let Some(r) = rounds {
                    o.max_iterations = *r;
                }
                if let Some(p) = per_round {
                    o.per_round_reduction = *p;
                }
                if *no_fine_tune {
                    cfg.prune.config.fine_tune = false;
                }
            }
            Command::QuantizeWs {
                bits,
                criteria,
                recalibrate,
            } => {
                if let Some(b) = bits {
                    cfg.wsq.bits = *b;
                }
                if let Some(c) = criteria {
                    cfg.wsq.criteria = match c {
                        ClusterArg::Mse => ClusterCriteria::Mse,
                        ClusterArg::Dwmse => ClusterCriteria::Dwmse,
                    };
                }
                if *recalibrate {
                    cfg.wsq.recalibrate_bn = true;
                }
            }
            Command::QuantizeInt {
                min_bits,
                coarse_iterations,
                acc_floor,
                max_drop,
                no_fine_search,
            } => {
                let o = &mut cfg.mpq.options;
                if let Some(b) = min_bits {
                    o.min_bits = *b;
                }
                if let Some(n) = coarse_iterations {
                    o.max_coarse_iterations = *n;
                }
                if let Some(f) = acc_floor {
                    o.acc_floor = *f;
                }
                if let Some(d) = max_drop {
                    o.max_drop = *d;
                }
                if *no_fine_search {
                    cfg.mpq.fine_search = false;
                }
            }
            Command::Profile { mask } => {
                if mask.is_some() {
                    cfg.profile.mask = mask.clone();
                }
            }
            Command::Report { inputs } => {
                for s in inputs {
                    let (label, path) = s.split_once('=').ok_or_else(|| {
                        liftprune::Error::InvalidConfig(format!("report input `{s}` is not label=path"))
                    })?;
                    cfg.report.inputs.push(config::LabeledPath {
                        label: label.into(),
                        path: path.into(),
                    });
                }
            }
            Command::Attribute | Command::Sensitivity => {}
        }
        Ok(())
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.apply_seed(s);
    }
    if cli.model.is_some() {
        cfg.model = cli.model.clone();
    }
    cli.command.apply(&mut cfg)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if cli.print_config {
        println!("{}", cfg.to_pretty_json());
        return Ok(());
    }
    let mut out = Outputs::new(&cli.out_dir)?;
    let metrics = match &cli.command {
        Command::Train { .. } => commands::train(&cfg, &mut out)?,
        Command::Attribute => commands::attribute(&cfg, &mut out)?,
        Command::Sensitivity => commands::sensitivity(&cfg, &mut out)?,
        Command::Prune { .. } => commands::prune(&cfg, &mut out)?,
        Command::QuantizeWs { .. } => commands::quantize_ws(&cfg, &mut out)?,
        Command::QuantizeInt { .. } => commands::quantize_int(&cfg, &mut out)?,
        Command::Profile { .. } => commands::profile_cmd(&cfg, &mut out)?,
        Command::Report { .. } => commands::report(&cfg, &mut out)?,
    };
    println!("{}", serde_json::to_string(&metrics)?);
    out.finish(cli.command.name(), &serde_json::to_value(&cfg)?, metrics)
}

/// `{module, code, message}` for the first library error in the chain.
fn error_json(e: &anyhow::Error) -> serde_json::Value {
    let lib = e.chain().find_map(|c| c.downcast_ref::<liftprune::Error>());
    let (module, code) = match lib {
        Some(l) => (l.module(), l.code()),
        None if e.chain().any(|c| c.is::<std::io::Error>()) => ("io", "Io"),
        None => ("cli", "Failed"),
    };
    serde_json::json!({ "module": module, "code": code, "message": format!("{e:#}") })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
