use std::path::Path;

use anyhow::{bail, Result};

use sedan_core::metrics::{divergence_registry, evaluate as evaluate_pairs, CityMetrics, EvalOptions};
use sedan_core::ODMatrix;

use crate::config::Config;
use crate::data::{self, write_json, Table};
use crate::manifest::Run;

/// Scores every predicted city against the same id in `truth`; writes
/// `metrics.csv` (one row per city, then AVERAGE) and `metrics.json`.
pub fn evaluate(cfg: &Config, pred_dir: &Path, truth_dir: &Path, out: &Path) -> Result<()> {
    let mut run = Run::start("evaluate", cfg, out)?;
    run.dataset(pred_dir)?;
    run.dataset(truth_dir)?;
    let pred = data::load(pred_dir)?;
    let truth = data::load(truth_dir)?;
    let mut missing = Vec::new();
    let mut pairs: Vec<(&str, &ODMatrix, &ODMatrix)> = Vec::new();
    for p in pred.cities.iter().filter(|c| data::in_scenario(c, cfg.heterogeneity)) {
        match truth.get(p.id()) {
            Some(t) if t.graph.n_regions() != p.graph.n_regions() => bail!(
                "city {}: {} predicted regions but {} in the truth",
                p.id(),
                p.graph.n_regions(),
                t.graph.n_regions()
            ),
            Some(t) => pairs.push((p.id(), &t.od, &p.od)),
            None => missing.push(p.id().to_string()),
        }
    }
    if !missing.is_empty() {
        bail!("cities missing from {}: {}", truth_dir.display(), missing.join(", "));
    }
    if pairs.is_empty() {
        bail!("heterogeneity {} leaves no predicted cities", data::scenario_name(cfg.heterogeneity));
    }
    let div = divergence_registry().create(&cfg.divergence, ())?;
    let opts = EvalOptions { exclude_diagonal: cfg.exclude_diagonal };
    let report = run.phase("metrics", || Ok(evaluate_pairs(&pairs, div.as_ref(), opts)?))?;

    let csv = out.join("metrics.csv");
    let mut header = vec!["city_id"];
    header.extend(CityMetrics::COLUMNS);
    let mut t = Table::create(&csv, &header)?;
    for m in report.per_city.iter().chain([&report.average]) {
        t.row(std::iter::once(m.city_id.as_str().into()).chain(m.values().map(Into::into)))?;
    }
    t.finish()?;
    run.artifact(&csv)?;
    let json = out.join("metrics.json");
    write_json(&json, &report)?;
    run.artifact(&json)?;
    log::info!(
        "{} cities: CPC {:.4}  RMSE {:.4}  NRMSE {:.4}",
        report.per_city.len(),
        report.average.cpc,
        report.average.rmse,
        report.average.nrmse
    );
    run.note("heterogeneity", data::scenario_name(cfg.heterogeneity))?;
    run.note("average", &report.average)?;
    run.finish()?;
    Ok(())
}
