use std::path::Path;

use anyhow::{bail, Result};

use sedan_core::baselines::gravity_registry;
use sedan_core::io::write_city;
use sedan_core::{City, Split};

use crate::config::Config;
use crate::data::{self, write_json};
use crate::manifest::Run;

/// Fits on the train split (within the heterogeneity scenario) and writes a
/// predicted city directory for every selected city plus `params.json`.
pub fn baseline(cfg: &Config, data_dir: &Path, out: &Path) -> Result<()> {
    super::ensure_no_cities(out)?;
    let mut run = Run::start("baseline", cfg, out)?;
    run.dataset(data_dir)?;
    let model = gravity_registry().create(&cfg.model, ())?;
    let raw = data::load(data_dir)?;
    let fit_on: Vec<&City> = raw.split(Split::Train).filter(|c| data::in_scenario(c, cfg.heterogeneity)).collect();
    if fit_on.is_empty() {
        bail!("no training cities to fit {} on", model.name());
    }
    let params = run.phase("fit", || Ok(model.fit(&fit_on)?))?;
    log::info!(
        "{}: k = {:.4e}, a = {:.4}, b = {:.4}, beta = {:.4}",
        model.name(),
        params.k,
        params.a,
        params.b,
        params.beta
    );
    let targets = data::select(&raw, cfg)?;
    run.phase("predict", || {
        for city in &targets {
            let index = super::dataset_index(&raw.cities, city);
            let graph = super::masked_graph(cfg, &city.graph, index)?;
            let masked = City { graph, ..(*city).clone() };
            let od = model.predict(&masked, &params)?;
            let dir = out.join(city.id());
            write_city(&dir, &City { od, ..(*city).clone() })?;
        }
        Ok(())
    })?;
    for city in &targets {
        run.artifact(&out.join(city.id()).join("od.csv"))?;
    }
    let path = out.join("params.json");
    write_json(
        &path,
        &serde_json::json!({
            "model": model.name(),
            "params": params,
            "fitted_on": fit_on.len(),
        }),
    )?;
    run.artifact(&path)?;
    run.note("params", params)?;
    run.note(
        "scenario",
        serde_json::json!({
            "split": cfg.split,
            "heterogeneity": data::scenario_name(cfg.heterogeneity),
            "mask_ratio": cfg.mask_ratio,
        }),
    )?;
    run.finish()?;
    Ok(())
}
