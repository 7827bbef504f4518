//! Dataset selection and CSV writing shared by the commands.

use std::path::Path;

use anyhow::{bail, Context, Result};

use sedan_core::io::{fmt_f64, read_dataset};
use sedan_core::structure::SizeCategory;
use sedan_core::{City, Dataset, Split};

use crate::config::{Config, Heterogeneity};

pub fn load(root: &Path) -> Result<Dataset> {
    read_dataset(root).with_context(|| format!("loading dataset {}", root.display()))
}

/// Cities of the configured split (`all` keeps every split) that fall in the
/// configured heterogeneity scenario, in dataset order.
pub fn select<'a>(ds: &'a Dataset, cfg: &Config) -> Result<Vec<&'a City>> {
    let split: Option<Split> = match cfg.split.as_str() {
        "all" => None,
        s => Some(s.parse()?),
    };
    let picked: Vec<&City> = ds
        .cities
        .iter()
        .filter(|c| split.is_none_or(|s| c.split() == s))
        .filter(|c| in_scenario(c, cfg.heterogeneity))
        .collect();
    if picked.is_empty() {
        bail!("no cities left for split `{}` and heterogeneity {}", cfg.split, scenario_name(cfg.heterogeneity));
    }
    Ok(picked)
}

pub fn in_scenario(city: &City, het: Option<Heterogeneity>) -> bool {
    het.is_none_or(|h| h.admits(SizeCategory::of(city.graph.n_regions())))
}

pub fn scenario_name(het: Option<Heterogeneity>) -> &'static str {
    match het {
        None => "unset",
        Some(Heterogeneity::Low) => "low",
        Some(Heterogeneity::Medium) => "medium",
        Some(Heterogeneity::High) => "high",
    }
}

/// A CSV writer whose float cells round-trip exactly.
pub struct Table {
    w: csv::Writer<std::fs::File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(header)?;
        Ok(Self { w })
    }

    pub fn row(&mut self, cells: impl IntoIterator<Item = Cell>) -> Result<()> {
        let cells: Vec<String> = cells.into_iter().map(|c| c.0).collect();
        self.w.write_record(&cells)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub struct Cell(String);

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell(fmt_f64(v))
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        Cell(v.map(fmt_f64).unwrap_or_default())
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell(v.to_string())
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell(v.to_string())
    }
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}
