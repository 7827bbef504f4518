use std::path::Path;

use anyhow::Result;

use sedan_core::io::write_dataset;
use sedan_core::rng::Stream;
use sedan_core::synth::{archetype_cities, synth_dataset, DatasetSpec};
use sedan_core::{Dataset, Split};

use crate::config::Config;
use crate::data::Table;
use crate::manifest::Run;

pub fn synth(cfg: &Config, out: &Path) -> Result<()> {
    super::ensure_no_cities(out)?;
    let mut run = Run::start("synth", cfg, out)?;
    let mut labels = None;
    let ds = run.phase("synthesize", || {
        if cfg.archetypes > 0 {
            let planted = archetype_cities(cfg.archetypes, cfg.archetype_noise, cfg.seed)?;
            labels = Some(planted.iter().map(|(k, c)| (c.id().to_string(), *k)).collect::<Vec<_>>());
            Ok(Dataset::new(planted.into_iter().map(|(_, c)| c).collect()))
        } else {
            let spec = DatasetSpec {
                n_cities: cfg.cities,
                min_regions: cfg.min_regions,
                max_regions: cfg.max_regions,
                ..DatasetSpec::default()
            };
            Ok(synth_dataset(&spec, cfg.seed)?)
        }
    })?;
    run.seed(Stream::Split, 0);
    for k in 0..ds.cities.len() as u64 {
        run.seed(Stream::Synth, 1 + k);
    }
    run.phase("write", || Ok(write_dataset(out, &ds)?))?;
    if let Some(labels) = labels {
        let path = out.join("archetypes.csv");
        let mut t = Table::create(&path, &["city_id", "archetype"])?;
        for (id, kind) in &labels {
            let name = serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string();
            t.row([id.as_str().into(), name.into()])?;
        }
        t.finish()?;
        run.artifact(&path)?;
    }
    run.dataset(out)?;
    let count = |s: Split| ds.split(s).count();
    run.note("cities", ds.cities.len())?;
    run.note(
        "splits",
        serde_json::json!({"train": count(Split::Train), "val": count(Split::Val), "test": count(Split::Test)}),
    )?;
    for c in &ds.cities {
        for f in ["features.csv", "adjacency.csv", "distance.csv", "od.csv", "meta.json"] {
            run.artifact(&out.join(c.id()).join(f))?;
        }
    }
    log::info!("wrote {} cities to {}", ds.cities.len(), out.display());
    run.finish()?;
    Ok(())
}
