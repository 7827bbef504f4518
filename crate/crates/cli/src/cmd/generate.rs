use std::path::Path;

use anyhow::Result;

use sedan_core::denoiser::CityContext;
use sedan_core::diffusion::{cosine_schedule, COSINE_OFFSET};
use sedan_core::io::{write_city, write_matrix};
use sedan_core::rng::Stream;
use sedan_core::sampler::{generate_averaged, sampler_registry, SamplerArgs};
use sedan_core::{log_transform, City};

use crate::config::Config;
use crate::data;
use crate::manifest::Run;
use crate::model;
use crate::svg;

/// Writes one city directory per selected city: the original attributes
/// with the generated OD matrix in `od.csv`.
pub fn generate(cfg: &Config, ckpt: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    super::ensure_no_cities(out)?;
    let mut run = Run::start("generate", cfg, out)?;
    run.dataset(data_dir)?;
    run.checkpoint(ckpt);
    let bundle = model::load(ckpt)?;
    let net = bundle.denoiser()?;
    let raw = data::load(data_dir)?;
    let targets = data::select(&raw, cfg)?;
    let sched = cosine_schedule(bundle.meta.train.diffusion_steps, COSINE_OFFSET)?;
    let sampler = sampler_registry().create(
        &cfg.sampler,
        SamplerArgs { steps: cfg.ddim_steps, x0_range: cfg.clamp.then_some(bundle.meta.x0_range) },
    )?;
    for k in 0..cfg.samples as u64 {
        run.seed(Stream::Sample, k);
    }
    let mut seconds = serde_json::Map::new();
    for city in &targets {
        let index = super::dataset_index(&raw.cities, city);
        let graph = super::masked_graph(cfg, &city.graph, index)?;
        let ctx = CityContext::new(&bundle.meta.norm_stats.apply(&graph)?);
        let start = std::time::Instant::now();
        let od = run.phase(&format!("generate {}", city.id()), || {
            Ok(generate_averaged(&net, sampler.as_ref(), &ctx, &sched, cfg.samples, cfg.seed)?)
        })?;
        seconds.insert(city.id().to_string(), start.elapsed().as_secs_f64().into());
        let dir = out.join(city.id());
        write_city(&dir, &City { od: od.clone(), ..(*city).clone() })?;
        run.artifact(&dir.join("od.csv"))?;
        if cfg.export_attention {
            // attention of the denoiser at t = 1 on the generated matrix
            let (_, maps) = net.predict_with_attention(&ctx, log_transform(&od)?.flows(), 1)?;
            let adir = out.join("attention").join(city.id());
            std::fs::create_dir_all(&adir)?;
            for (l, heads) in maps.iter().enumerate() {
                for (h, m) in heads.iter().enumerate() {
                    let path = adir.join(format!("layer{l}_head{h}.csv"));
                    write_matrix(&path, m)?;
                    run.artifact(&path)?;
                    if cfg.svg {
                        let p = path.with_extension("svg");
                        svg::heatmap(&p, &format!("{} layer {l} head {h}", city.id()), m)?;
                        run.artifact(&p)?;
                    }
                }
            }
        }
        log::info!("generated {} ({} regions)", city.id(), city.graph.n_regions());
    }
    run.note("sampler", sampler.name())?;
    run.note("cities", targets.len())?;
    run.note(
        "scenario",
        serde_json::json!({
            "split": cfg.split,
            "heterogeneity": data::scenario_name(cfg.heterogeneity),
            "mask_ratio": cfg.mask_ratio,
        }),
    )?;
    run.note("seconds_per_city", seconds)?;
    run.finish()?;
    Ok(())
}
