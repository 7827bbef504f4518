//! One function per subcommand. Each writes its artifacts under `out` and
//! appends exactly one run manifest there.

mod baseline;
mod classify;
mod evaluate;
mod explain;
mod generate;
mod stats;
mod synth;
mod train;

pub use baseline::baseline;
pub use classify::classify;
pub use evaluate::evaluate;
pub use explain::explain;
pub use generate::generate;
pub use stats::stats;
pub use synth::synth;
pub use train::train;

use std::path::Path;

use anyhow::{bail, Result};

use sedan_core::io::city_dirs;
use sedan_core::rng::derive_seed;
use sedan_core::rng::Stream;
use sedan_core::{mask_features, City, UrbanGraph};

use crate::config::Config;

/// Refuses to mix new cities into a directory that already holds some.
fn ensure_no_cities(out: &Path) -> Result<()> {
    if out.is_dir() && !city_dirs(out)?.is_empty() {
        bail!("{} already holds city directories; choose a fresh output directory", out.display());
    }
    Ok(())
}

/// The city's graph after the configured feature masking. City `k` of the
/// dataset is masked with seed `derive_seed(seed, Mask, k)`, so a city's
/// mask does not depend on which other cities were selected.
fn masked_graph(cfg: &Config, graph: &UrbanGraph, dataset_index: usize) -> Result<UrbanGraph> {
    Ok(mask_features(graph, cfg.mask_ratio, derive_seed(cfg.seed, Stream::Mask, dataset_index as u64))?)
}

fn dataset_index(all: &[City], city: &City) -> usize {
    all.iter().position(|c| c.id() == city.id()).expect("selected from this dataset")
}
