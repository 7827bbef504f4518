use std::path::Path;

use anyhow::{bail, Result};

use sedan_core::denoiser::Denoiser;
use sedan_core::diffusion::{
    cosine_schedule, log_flow_range, prepare_split, train as train_loop, TrainConfig, TrainState, COSINE_OFFSET,
};
use sedan_core::rng::Stream;
use sedan_core::{Dataset, NormStats, Split};
use sedan_tensor::AdamWConfig;

use crate::config::Config;
use crate::data::{self, Table};
use crate::manifest::Run;
use crate::model::{self, ModelMeta, CHECKPOINT_FILE};
use crate::svg;

pub fn train(cfg: &Config, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut run = Run::start("train", cfg, out)?;
    run.dataset(data_dir)?;
    let raw = data::load(data_dir)?;
    let cities: Vec<_> = raw.cities.into_iter().filter(|c| data::in_scenario(c, cfg.heterogeneity)).collect();
    if cities.is_empty() {
        bail!("heterogeneity {} leaves no cities", data::scenario_name(cfg.heterogeneity));
    }
    let resumed = resume.map(model::load).transpose()?;
    let stats = match &resumed {
        Some(b) => b.meta.norm_stats.clone(),
        None => NormStats::fit(cities.iter().filter(|c| c.split() == Split::Train).map(|c| &c.graph))?,
    };
    let ds = Dataset::new(cities).normalize_with(stats.clone())?;
    let train_set = prepare_split(&ds, Split::Train)?;
    let val_set = prepare_split(&ds, Split::Val)?;
    let Some(first) = train_set.first() else {
        bail!("the training split is empty");
    };
    let feature_names = ds.split(Split::Train).next().expect("non-empty").graph.feature_names().to_vec();

    let tcfg = match &resumed {
        // the optimisation trajectory is fixed by the checkpoint; only the
        // stopping point moves
        Some(b) => TrainConfig { epochs: cfg.epochs, max_steps: cfg.max_steps, ..b.meta.train.clone() },
        None => TrainConfig {
            diffusion_steps: cfg.steps,
            epochs: cfg.epochs,
            max_steps: cfg.max_steps,
            optimizer: AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
            seed: cfg.seed,
            val_levels: cfg.val_levels,
        },
    };
    if let Some(b) = &resumed {
        if b.meta.feature_names != feature_names {
            bail!("dataset features {:?} differ from the checkpoint's {:?}", feature_names, b.meta.feature_names);
        }
        run.note("resumed_from", resume.map(|p| p.display().to_string()))?;
        run.note("resumed_at_step", b.state.steps_done)?;
    }
    let dcfg = match &resumed {
        Some(b) => b.meta.denoiser.clone(),
        None => cfg.denoiser(first.ctx.input_dim()),
    };
    let sched = cosine_schedule(tcfg.diffusion_steps, COSINE_OFFSET)?;
    let mut net = Denoiser::new(dcfg.clone(), tcfg.seed)?;
    let mut state = match resumed {
        Some(b) => b.state,
        None => TrainState::fresh(net.params().clone(), tcfg.optimizer),
    };
    let x0_range = log_flow_range(&train_set)?;
    log::info!(
        "training {} parameters on {} cities ({} validation), T = {}",
        dcfg.parameter_count(),
        train_set.len(),
        val_set.len(),
        tcfg.diffusion_steps
    );
    run.seed(Stream::Init, 0);
    run.seed(Stream::EpochOrder, 0);
    run.seed(Stream::TrainStep, 0);
    run.seed(Stream::Validation, 0);
    run.phase("train", || {
        Ok(train_loop(&mut net, &mut state, &train_set, &val_set, &sched, &tcfg, |rec, _| {
            log::info!(
                "epoch {:>4}  steps {:>6}  train {:.5}  val {}",
                rec.epoch,
                rec.steps,
                rec.train_loss,
                rec.val_loss.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into())
            );
            Ok(())
        })?)
    })?;

    let meta = ModelMeta {
        denoiser: dcfg,
        feature_names,
        norm_stats: stats,
        x0_range,
        train: tcfg,
        steps_done: state.steps_done,
        best_val: state.best_val,
        history: state.history.clone(),
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    run.phase("save", || model::save(&ckpt, &meta, &state))?;
    run.checkpoint(&ckpt);
    run.artifact(&ckpt)?;
    run.artifact(&model::sidecar_path(&ckpt))?;

    let loss = out.join("loss.csv");
    let mut t = Table::create(&loss, &["epoch", "steps", "train_loss", "val_loss"])?;
    for r in &state.history {
        t.row([r.epoch.into(), r.steps.into(), r.train_loss.into(), r.val_loss.into()])?;
    }
    t.finish()?;
    run.artifact(&loss)?;
    if cfg.svg {
        let path = out.join("loss.svg");
        let train_pts = state.history.iter().map(|r| (r.epoch as f64, r.train_loss)).collect();
        let val_pts = state.history.iter().filter_map(|r| r.val_loss.map(|v| (r.epoch as f64, v))).collect();
        svg::line_chart(&path, "Training loss", "epoch", "loss", &[("train", train_pts), ("validation", val_pts)])?;
        run.artifact(&path)?;
    }
    run.note("steps_done", state.steps_done)?;
    run.note("best_val", state.best_val)?;
    log::info!("saved {}", ckpt.display());
    run.finish()?;
    Ok(())
}
