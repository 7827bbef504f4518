//! Effective run configuration: command-line flag, then config file, then
//! built-in default.

use std::path::Path;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use sedan_core::denoiser::{AttentionSupport, DenoiserConfig};
use sedan_core::structure::SizeCategory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Heterogeneity {
    /// Small cities only.
    Low,
    /// Small and medium cities.
    Medium,
    /// Every city.
    High,
}

impl Heterogeneity {
    pub fn admits(self, size: SizeCategory) -> bool {
        match self {
            Heterogeneity::Low => size == SizeCategory::Small,
            Heterogeneity::Medium => size != SizeCategory::Large,
            Heterogeneity::High => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    Dense,
    Adjacent,
}

/// Every tunable knob of every command. Commands read the keys they need;
/// the whole struct is snapshotted into each run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    pub cities: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Replicas per planted structure archetype; 0 writes the regular
    /// synthetic dataset instead.
    pub archetypes: usize,
    pub archetype_noise: f64,

    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub attention: Attention,
    pub use_adjacency: bool,
    pub use_distance: bool,

    /// Diffusion length T.
    pub steps: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub val_levels: usize,

    pub sampler: String,
    pub ddim_steps: usize,
    pub samples: usize,
    /// Clamp the sampler's clean estimate to the training log-flow range.
    pub clamp: bool,
    pub split: String,

    pub heterogeneity: Option<Heterogeneity>,
    pub mask_ratio: f64,

    pub model: String,

    pub exclude_diagonal: bool,
    pub divergence: String,

    pub bins: usize,

    pub restarts: usize,
    pub raw_indicators: bool,

    pub region: usize,
    pub shap_samples: usize,
    pub background: usize,
    /// Generated samples averaged per explainer query.
    pub shap_generations: usize,
    pub shap_ddim_steps: usize,

    pub jobs: Option<usize>,
    pub svg: bool,
    pub export_attention: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            cities: 40,
            min_regions: 8,
            max_regions: 30,
            archetypes: 0,
            archetype_noise: 0.1,
            layers: 4,
            hidden: 32,
            heads: 4,
            attention: Attention::Dense,
            use_adjacency: true,
            use_distance: true,
            steps: 1000,
            epochs: 50,
            max_steps: None,
            lr: 1e-4,
            weight_decay: 0.01,
            val_levels: 8,
            sampler: "ddim".into(),
            ddim_steps: 50,
            samples: 10,
            clamp: true,
            split: "test".into(),
            heterogeneity: None,
            mask_ratio: 0.0,
            model: "gm-p".into(),
            exclude_diagonal: false,
            divergence: "symmetrized-kl".into(),
            bins: 10,
            restarts: 50,
            raw_indicators: false,
            region: 0,
            shap_samples: 2048,
            background: 64,
            shap_generations: 1,
            shap_ddim_steps: 20,
            jobs: None,
            svg: false,
            export_attention: false,
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Defaults overlaid with the optional config file.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    pub fn denoiser(&self, input_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            input_dim,
            use_adjacency: self.use_adjacency,
            use_distance: self.use_distance,
            attention: match self.attention {
                Attention::Dense => AttentionSupport::Dense,
                Attention::Adjacent => AttentionSupport::Adjacent,
            },
        }
    }
}

macro_rules! overlay {
    ($cfg:ident, $args:ident; $($field:ident),* $(,)?) => {
        $(if let Some(v) = &$args.$field {
            $cfg.$field = v.clone();
        })*
    };
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// TOML file of config keys; flags override it.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-city and per-sample work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Also render static SVG charts next to the plot CSVs.
    #[arg(long, global = true)]
    pub svg: bool,
}

impl CommonArgs {
    pub fn apply(&self, cfg: &mut Config) {
        overlay!(cfg, self; seed);
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }
        cfg.svg |= self.svg;
    }
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub cities: Option<usize>,
    #[arg(long)]
    pub min_regions: Option<usize>,
    #[arg(long)]
    pub max_regions: Option<usize>,
    /// Write planted structure archetypes with this many replicas each.
    #[arg(long)]
    pub archetypes: Option<usize>,
    #[arg(long)]
    pub archetype_noise: Option<f64>,
}

impl SynthArgs {
    pub fn apply(&self, cfg: &mut Config) {
        overlay!(cfg, self; cities, min_regions, max_regions, archetypes, archetype_noise);
    }
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, value_enum)]
    pub attention: Option<Attention>,
    /// Drop the adjacency prior.
    #[arg(long)]
    pub no_adjacency: bool,
    /// Drop the distance prior.
    #[arg(long)]
    pub no_distance: bool,
    /// Both of the above.
    #[arg(long)]
    pub no_priors: bool,
}

impl ModelArgs {
    pub fn apply(&self, cfg: &mut Config) {
        overlay!(cfg, self; layers, hidden, heads, attention);
        if self.no_adjacency || self.no_priors {
            cfg.use_adjacency = false;
        }
        if self.no_distance || self.no_priors {
            cfg.use_distance = false;
        }
    }

    pub fn touched(&self) -> bool {
        self.layers.is_some()
            || self.hidden.is_some()
            || self.heads.is_some()
            || self.attention.is_some()
            || self.no_adjacency
            || self.no_distance
            || self.no_priors
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimisation steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub val_levels: Option<usize>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut Config) {
        overlay!(cfg, self; steps, epochs, lr, weight_decay, val_levels);
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct SampleArgs {
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    /// Generated samples averaged per city.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Leave the clean-signal estimate unclamped.
    #[arg(long)]
    pub no_clamp: bool,
}

impl SampleArgs {
    pub fn apply(&self, cfg: &mut Config) {
        overlay!(cfg, self; sampler, ddim_steps, samples);
        if self.no_clamp {
            cfg.clamp = false;
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct ScenarioArgs {
    /// Which split to predict: train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, value_enum)]
    pub heterogeneity: Option<Heterogeneity>,
    /// Share of feature cells replaced by the city mean before prediction.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
}

impl ScenarioArgs {
    pub fn apply(&self, cfg: &mut Config) {
        overlay!(cfg, self; split, mask_ratio);
        if self.heterogeneity.is_some() {
            cfg.heterogeneity = self.heterogeneity;
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// Leave intra-region flows out of every metric.
    #[arg(long)]
    pub exclude_diagonal: bool,
    #[arg(long)]
    pub divergence: Option<String>,
}

impl EvalArgs {
    pub fn apply(&self, cfg: &mut Config) {
        overlay!(cfg, self; divergence);
        cfg.exclude_diagonal |= self.exclude_diagonal;
    }
}
