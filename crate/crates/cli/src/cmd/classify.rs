use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;

use sedan_core::rng::Stream;
use sedan_core::structure::{classify as classify_cities, ClassifyConfig, StructureLabel};
use sedan_core::City;

use crate::config::Config;
use crate::data::{self, write_json, Table};
use crate::manifest::Run;

const HEADER: [&str; 22] = [
    "city_id",
    "n_regions",
    "size_category",
    "pop_gini",
    "pop_hhi",
    "pop_pareto",
    "pop_primacy",
    "flow_gini",
    "flow_hhi",
    "flow_mfs",
    "flow_mbc",
    "dist_gini",
    "dist_hhi",
    "dist_mfs",
    "dist_mbc",
    "score_population",
    "score_flow",
    "score_distance",
    "composite",
    "cluster",
    "label",
    "primacy_padded",
];

/// Writes `structure_report.csv` and its JSON twin, which adds label
/// shares overall and per size category.
pub fn classify(cfg: &Config, data_dir: &Path, out: &Path) -> Result<()> {
    let mut run = Run::start("classify", cfg, out)?;
    run.dataset(data_dir)?;
    let ds = data::load(data_dir)?;
    let cities: Vec<&City> = ds.cities.iter().collect();
    let ccfg = ClassifyConfig {
        seed: cfg.seed,
        restarts: cfg.restarts,
        include_raw_indicators: cfg.raw_indicators,
        ..ClassifyConfig::default()
    };
    for r in 0..cfg.restarts as u64 {
        run.seed(Stream::KMeans, r);
    }
    let reports = run.phase("classify", || Ok(classify_cities(&cities, &ccfg)?))?;

    let csv = out.join("structure_report.csv");
    let mut t = Table::create(&csv, &HEADER)?;
    for r in &reports {
        let i = &r.indicators;
        t.row([
            i.city_id.as_str().into(),
            i.n_regions.into(),
            r.size_category.to_string().into(),
            i.population.gini.into(),
            i.population.hhi.into(),
            i.population.pareto.into(),
            i.population.primacy.into(),
            i.flow.gini.into(),
            i.flow.hhi.into(),
            i.flow.mfs.into(),
            i.flow.mbc.into(),
            i.distance.gini.into(),
            i.distance.hhi.into(),
            i.distance.mfs.into(),
            i.distance.mbc.into(),
            r.scores[0].into(),
            r.scores[1].into(),
            r.scores[2].into(),
            r.composite.into(),
            r.cluster.into(),
            r.label.to_string().into(),
            i.population.primacy_padded.into(),
        ])?;
    }
    t.finish()?;
    run.artifact(&csv)?;

    let labels = [StructureLabel::Monocentric, StructureLabel::Uniform, StructureLabel::Polycentric];
    let share = |rs: &[&sedan_core::structure::StructureReport]| -> BTreeMap<String, f64> {
        labels
            .iter()
            .map(|l| {
                let n = rs.iter().filter(|r| r.label == *l).count();
                (l.to_string(), n as f64 / rs.len().max(1) as f64)
            })
            .collect()
    };
    let all: Vec<_> = reports.iter().collect();
    let mut by_size = BTreeMap::new();
    for size in ["small", "medium", "large"] {
        let rs: Vec<_> = reports.iter().filter(|r| r.size_category.to_string() == size).collect();
        if !rs.is_empty() {
            by_size.insert(size, serde_json::json!({"cities": rs.len(), "shares": share(&rs)}));
        }
    }
    let json = out.join("structure_report.json");
    write_json(
        &json,
        &serde_json::json!({
            "config": ccfg,
            "shares": share(&all),
            "by_size": by_size,
            "reports": reports,
        }),
    )?;
    run.artifact(&json)?;
    for l in labels {
        log::info!("{l}: {} cities", reports.iter().filter(|r| r.label == l).count());
    }
    run.finish()?;
    Ok(())
}
