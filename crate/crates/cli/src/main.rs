//! `sedan`: synthetic data, training, generation, gravity baselines,
//! evaluation, structure classification, explanation and flow statistics.
//!
//! Exit status is 0 on success, 2 when a numerical failure stopped the run
//! and 1 for every other error.

mod cmd;
mod config;
mod data;
mod manifest;
mod model;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{CommonArgs, Config, EvalArgs, Heterogeneity, ModelArgs, SampleArgs, ScenarioArgs, SynthArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "sedan", version, about = "Conditional graph diffusion for commuting OD matrices")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Train the denoiser; writes model.ckpt, model.json and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint until the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum)]
        heterogeneity: Option<Heterogeneity>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate OD matrices for a split with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-layer, per-head attention matrices as CSV.
        #[arg(long)]
        export_attention: bool,
        #[command(flatten)]
        sample: SampleArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Fit a gravity model on the train split and predict a split.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// gm-p (power decay) or gm-e (exponential decay).
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Compare predicted cities with ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        heterogeneity: Option<Heterogeneity>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Label every city monocentric, uniform or polycentric.
    Classify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        restarts: Option<usize>,
        /// Feed the z-scored raw indicators to k-means as well.
        #[arg(long)]
        raw_indicators: bool,
    },
    /// KernelSHAP attribution of one region's generated outflow.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        city: String,
        #[arg(long)]
        region: Option<usize>,
        /// Coalition budget.
        #[arg(long)]
        samples: Option<usize>,
        /// Background rows drawn from the training split.
        #[arg(long)]
        background: Option<usize>,
        /// Generated samples averaged per query.
        #[arg(long)]
        generations: Option<usize>,
        /// Strided sampler steps per query.
        #[arg(long)]
        shap_ddim_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance-decay and contiguity statistics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| e.downcast_ref::<sedan_core::Error>().is_some_and(|e| e.is_numerical()));
    if numerical {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.common.config.as_deref())?;
    cli.common.apply(&mut cfg);
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::Synth { out, synth } => {
            synth.apply(&mut cfg);
            cmd::synth(&cfg, &out)
        }
        Command::Train { data, out, resume, heterogeneity, model, train } => {
            model.apply(&mut cfg);
            train.apply(&mut cfg);
            if heterogeneity.is_some() {
                cfg.heterogeneity = heterogeneity;
            }
            if resume.is_some() && model.touched() {
                anyhow::bail!("the architecture of a resumed run comes from its checkpoint; drop the model flags");
            }
            cmd::train(&cfg, &data, &out, resume.as_deref())
        }
        Command::Generate { checkpoint, data, out, export_attention, sample, scenario } => {
            sample.apply(&mut cfg);
            scenario.apply(&mut cfg);
            cfg.export_attention |= export_attention;
            cmd::generate(&cfg, &checkpoint, &data, &out)
        }
        Command::Baseline { data, out, model, scenario } => {
            if let Some(m) = model {
                cfg.model = m;
            }
            scenario.apply(&mut cfg);
            cmd::baseline(&cfg, &data, &out)
        }
        Command::Evaluate { pred, truth, out, heterogeneity, eval } => {
            eval.apply(&mut cfg);
            if heterogeneity.is_some() {
                cfg.heterogeneity = heterogeneity;
            }
            cmd::evaluate(&cfg, &pred, &truth, &out)
        }
        Command::Classify { data, out, restarts, raw_indicators } => {
            if let Some(r) = restarts {
                cfg.restarts = r;
            }
            cfg.raw_indicators |= raw_indicators;
            cmd::classify(&cfg, &data, &out)
        }
        Command::Explain { checkpoint, data, city, region, samples, background, generations, shap_ddim_steps, out } => {
            let set = |dst: &mut usize, v: Option<usize>| {
                if let Some(v) = v {
                    *dst = v;
                }
            };
            set(&mut cfg.region, region);
            set(&mut cfg.shap_samples, samples);
            set(&mut cfg.background, background);
            set(&mut cfg.shap_generations, generations);
            set(&mut cfg.shap_ddim_steps, shap_ddim_steps);
            cmd::explain(&cfg, &checkpoint, &data, &city, &out)
        }
        Command::Stats { data, out, bins } => {
            if let Some(b) = bins {
                cfg.bins = b;
            }
            cmd::stats(&cfg, &data, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage errors are validation errors; help and version are not errors
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
