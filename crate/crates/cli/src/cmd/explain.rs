use std::path::Path;

use anyhow::{bail, Context, Result};

use sedan_core::diffusion::{cosine_schedule, COSINE_OFFSET};
use sedan_core::explainer::{background_rows, kernel_shap, OutflowTarget, ShapConfig};
use sedan_core::rng::Stream;
use sedan_core::sampler::{sampler_registry, SamplerArgs};
use sedan_core::{City, Dataset, Split};

use crate::config::Config;
use crate::data::{self, write_json, Table};
use crate::manifest::Run;
use crate::model;
use crate::svg;

/// Attributes one region's generated outflow to its (z-scored) attributes;
/// writes `shap.csv` in rank order and `shap.json`.
pub fn explain(cfg: &Config, ckpt: &Path, data_dir: &Path, city_id: &str, out: &Path) -> Result<()> {
    let mut run = Run::start("explain", cfg, out)?;
    run.dataset(data_dir)?;
    run.checkpoint(ckpt);
    let bundle = model::load(ckpt)?;
    let net = bundle.denoiser()?;
    let ds = Dataset::new(data::load(data_dir)?.cities).normalize_with(bundle.meta.norm_stats.clone())?;
    let city = ds.get(city_id).with_context(|| format!("city {city_id} is not in {}", data_dir.display()))?;
    let n = city.graph.n_regions();
    if cfg.region >= n {
        bail!("region {} out of range; city {city_id} has {n} regions", cfg.region);
    }
    let train: Vec<&City> = ds.split(Split::Train).collect();
    let background = background_rows(&train, cfg.background, cfg.seed)?;
    let sched = cosine_schedule(bundle.meta.train.diffusion_steps, COSINE_OFFSET)?;
    let sampler = sampler_registry().create(
        &cfg.sampler,
        SamplerArgs { steps: cfg.shap_ddim_steps, x0_range: cfg.clamp.then_some(bundle.meta.x0_range) },
    )?;
    let target = OutflowTarget {
        model: &net,
        sampler: sampler.as_ref(),
        sched: &sched,
        graph: &city.graph,
        region: cfg.region,
        samples: cfg.shap_generations,
        seed: cfg.seed,
    };
    let scfg = ShapConfig {
        n_mask_samples: cfg.shap_samples,
        background_size: cfg.background,
        target_region: cfg.region,
        seed: cfg.seed,
        ..ShapConfig::default()
    };
    run.seed(Stream::Background, 0);
    run.seed(Stream::Shap, 0);
    let x = city.graph.features().row(cfg.region).to_vec();
    let description = format!("generated outflow of region {} in city {city_id}", cfg.region);
    let eval = |row: &[f64]| target.evaluate(row);
    let result = run.phase("kernel_shap", || {
        Ok(kernel_shap(&eval, &x, &background, city.graph.feature_names(), &description, &scfg)?)
    })?;

    let csv = out.join("shap.csv");
    let mut t = Table::create(&csv, &["feature", "phi", "abs_phi", "rank"])?;
    let ranking = result.ranking();
    for (rank, &j) in ranking.iter().enumerate() {
        t.row([
            result.feature_names[j].as_str().into(),
            result.phi[j].into(),
            result.phi[j].abs().into(),
            (rank + 1).into(),
        ])?;
    }
    t.finish()?;
    run.artifact(&csv)?;
    // one cheap generation per query unless more samples or steps are asked for
    let surrogate = cfg.shap_generations < cfg.samples || cfg.shap_ddim_steps < cfg.ddim_steps;
    let json = out.join("shap.json");
    write_json(
        &json,
        &serde_json::json!({
            "result": result,
            "surrogate": surrogate,
            "feature_space": "z-scored with the checkpoint's training statistics",
            "generations_per_query": cfg.shap_generations,
            "sampler_steps": cfg.shap_ddim_steps,
            "sampler": sampler.name(),
        }),
    )?;
    run.artifact(&json)?;
    if cfg.svg {
        let path = out.join("shap.svg");
        let labels: Vec<String> = ranking.iter().map(|&j| result.feature_names[j].clone()).collect();
        let values: Vec<f64> = ranking.iter().map(|&j| result.phi[j]).collect();
        svg::bar_chart(&path, &format!("SHAP: {description}"), &labels, &values)?;
        run.artifact(&path)?;
    }
    for &j in &ranking {
        log::info!("{:>16}  {:+.5}", result.feature_names[j], result.phi[j]);
    }
    run.note("surrogate", surrogate)?;
    run.note("coalitions", result.coalitions)?;
    run.finish()?;
    Ok(())
}
