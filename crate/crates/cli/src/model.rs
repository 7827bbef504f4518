//! Trained-model bundle: `model.ckpt` (binary parameters) plus `model.json`
//! (sidecar with architecture, normalization and training state).
//!
//! The binary file holds the best-validation parameters under their own
//! names, the latest parameters under `last.<name>` and the optimizer
//! moments under `adam.m.<name>` / `adam.v.<name>`, so a run can resume
//! exactly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sedan_core::denoiser::{Denoiser, DenoiserConfig};
use sedan_core::diffusion::{EpochRecord, TrainConfig, TrainState};
use sedan_core::NormStats;
use sedan_tensor::{
    load_checkpoint, read_manifest, save_checkpoint, write_manifest, AdamW, CheckpointManifest, OptimizerSnapshot,
    ParamShape, ParamStore, Tensor, CHECKPOINT_VERSION,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

const LAST_PREFIX: &str = "last.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub denoiser: DenoiserConfig,
    pub feature_names: Vec<String>,
    pub norm_stats: NormStats,
    /// Clamp range for the sampler's clean-signal estimate, from the
    /// training split's log flows.
    pub x0_range: (f64, f64),
    pub train: TrainConfig,
    pub steps_done: u64,
    pub best_val: Option<f64>,
    pub history: Vec<EpochRecord>,
}

pub struct Bundle {
    pub meta: ModelMeta,
    pub state: TrainState,
}

impl Bundle {
    /// The best-validation model.
    pub fn denoiser(&self) -> Result<Denoiser> {
        Ok(Denoiser::from_params(self.meta.denoiser.clone(), self.state.best_params.clone())?)
    }
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save(path: &Path, meta: &ModelMeta, state: &TrainState) -> Result<()> {
    let last: Vec<(String, Tensor)> =
        state.params.iter().map(|(n, t)| (format!("{LAST_PREFIX}{n}"), t.clone())).collect();
    let moments = state.optimizer.state_tensors(&state.params);
    let records = state
        .best_params
        .iter()
        .chain(last.iter().map(|(n, t)| (n.as_str(), t)))
        .chain(moments.iter().map(|(n, t)| (n.as_str(), t)));
    save_checkpoint(path, records).with_context(|| format!("writing {}", path.display()))?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        parameters: state
            .best_params
            .iter()
            .map(|(n, t)| ParamShape { name: n.to_string(), shape: t.shape().to_vec() })
            .collect(),
        optimizer: OptimizerSnapshot {
            kind: "adamw".into(),
            config: state.optimizer.config,
            steps_taken: state.optimizer.steps_taken(),
        },
        seed: meta.train.seed,
        extra: serde_json::to_value(meta)?,
    };
    write_manifest(&sidecar_path(path), &manifest)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Bundle> {
    let sidecar = sidecar_path(path);
    let manifest = read_manifest(&sidecar).with_context(|| format!("reading {}", sidecar.display()))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        bail!("{}: unsupported format version {}", sidecar.display(), manifest.format_version);
    }
    let meta: ModelMeta = serde_json::from_value(manifest.extra.clone())
        .with_context(|| format!("{}: model metadata", sidecar.display()))?;
    let tensors = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    let mut best = ParamStore::new();
    let mut last = ParamStore::new();
    for p in &manifest.parameters {
        let take = |name: &str| {
            tensors.get(name).cloned().with_context(|| format!("{}: missing tensor {name}", path.display()))
        };
        let t = take(&p.name)?;
        if t.shape() != p.shape.as_slice() {
            bail!("{}: {} has shape {:?}, sidecar says {:?}", path.display(), p.name, t.shape(), p.shape);
        }
        best.insert(p.name.clone(), t);
        last.insert(p.name.clone(), take(&format!("{LAST_PREFIX}{}", p.name))?);
    }
    let optimizer = AdamW::restore(manifest.optimizer.config, manifest.optimizer.steps_taken, &last, &tensors)?;
    let state = TrainState {
        params: last,
        optimizer,
        steps_done: meta.steps_done,
        history: meta.history.clone(),
        best_val: meta.best_val,
        best_params: best,
    };
    // fails early on a config/parameter mismatch
    Denoiser::from_params(meta.denoiser.clone(), state.best_params.clone())?;
    Ok(Bundle { meta, state })
}
