use std::path::Path;

use anyhow::Result;

use sedan_core::metrics::{decay_profile, spatial_stats};

use crate::config::Config;
use crate::data::{self, write_json, Table};
use crate::manifest::Run;
use crate::svg;

/// `spatial_stats.json` plus the binned distance-decay profile in
/// `decay_profile.csv`.
pub fn stats(cfg: &Config, data_dir: &Path, out: &Path) -> Result<()> {
    let mut run = Run::start("stats", cfg, out)?;
    run.dataset(data_dir)?;
    let ds = data::load(data_dir)?;
    let pairs: Vec<_> = ds.cities.iter().map(|c| (&c.graph, &c.od)).collect();
    let (summary, profile) = run.phase("stats", || Ok((spatial_stats(&pairs)?, decay_profile(&pairs, cfg.bins)?)))?;

    let json = out.join("spatial_stats.json");
    write_json(&json, &summary)?;
    run.artifact(&json)?;
    let csv = out.join("decay_profile.csv");
    let mut t = Table::create(&csv, &["distance_lo", "distance_hi", "pairs", "mean_flow", "mean_log_flow"])?;
    for b in &profile {
        t.row([b.lo.into(), b.hi.into(), b.pairs.into(), b.mean_flow.into(), b.mean_log_flow.into()])?;
    }
    t.finish()?;
    run.artifact(&csv)?;
    if cfg.svg {
        let path = out.join("decay_profile.svg");
        let pts = profile.iter().filter(|b| b.pairs > 0).map(|b| (0.5 * (b.lo + b.hi), b.mean_log_flow)).collect();
        svg::line_chart(&path, "Distance decay", "distance (km)", "mean log(1 + flow)", &[("all pairs", pts)])?;
        run.artifact(&path)?;
    }
    log::info!(
        "corr(d, log flow) = {:.4}; mean flow adjacent {:.3} vs non-adjacent {:.3}",
        summary.dist_logflow_corr,
        summary.mean_flow_adjacent,
        summary.mean_flow_nonadjacent
    );
    run.note("summary", &summary)?;
    run.finish()?;
    Ok(())
}
