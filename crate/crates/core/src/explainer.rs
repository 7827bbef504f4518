//! KernelSHAP attributions for a scalar model of one feature row.
//!
//! Masked features are replaced by background rows and the model output is
//! averaged over the background. The efficiency constraint is imposed
//! exactly by eliminating the last coefficient before the weighted least
//! squares solve, so `φ₀ + Σφ_j` equals the full-feature output to rounding.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::CityContext;
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph_model::{City, UrbanGraph};
use crate::rng::{stream_rng, Stream};
use crate::sampler::{generate_averaged, Sampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    pub n_mask_samples: usize,
    pub background_size: usize,
    pub target_region: usize,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self { n_mask_samples: 2048, background_size: 64, target_region: 0, ridge: 1e-6, seed: 0 }
    }
}

impl ShapConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.n_mask_samples < n_features + 2 {
            return Err(Error::Invalid(format!(
                "{} mask samples is fewer than features + 2 = {}",
                self.n_mask_samples,
                n_features + 2
            )));
        }
        if self.background_size == 0 {
            return Err(Error::Invalid("background size must be at least 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Invalid(format!("ridge {} must be finite and nonnegative", self.ridge)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapResult {
    pub feature_names: Vec<String>,
    pub phi: Vec<f64>,
    /// Output with every feature replaced by the background.
    pub phi0: f64,
    /// Output on the unmasked row; equals `phi0 + Σ phi`.
    pub full_value: f64,
    pub target: String,
    /// Number of distinct coalitions evaluated, endpoints included.
    pub coalitions: usize,
    /// True when all coalitions were enumerated.
    pub exact: bool,
}

impl ShapResult {
    /// Feature indices by decreasing `|φ|`; equal magnitudes keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.phi.len()).collect();
        idx.sort_by(|&a, &b| self.phi[b].abs().total_cmp(&self.phi[a].abs()).then(a.cmp(&b)));
        idx
    }
}

/// `mean_z model(x⊙z' + z⊙(1−z'))` over background rows `z`.
pub fn masked_evaluate<F>(model: &F, x: &[f64], mask: &[bool], background: &Array2<f64>) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64> + ?Sized,
{
    if mask.len() != x.len() || background.ncols() != x.len() {
        return Err(Error::Shape(format!(
            "mask {} / row {} / background {} lengths differ",
            mask.len(),
            x.len(),
            background.ncols()
        )));
    }
    if background.nrows() == 0 {
        return Err(Error::Invalid("background set is empty".into()));
    }
    if mask.iter().all(|m| *m) {
        return model(x);
    }
    let mut total = 0.0;
    let mut row = x.to_vec();
    for z in background.rows() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if mask[j] { x[j] } else { z[j] };
        }
        total += model(&row)?;
    }
    Ok(total / background.nrows() as f64)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `(M−1) / (C(M,s)·s·(M−s))` for `0 < s < M`.
pub fn kernel_weight(m: usize, s: usize) -> Result<f64> {
    if s == 0 || s >= m {
        return Err(Error::Invalid(format!(
            "coalition size {s} of {m} has unbounded weight and enters as a constraint"
        )));
    }
    Ok((m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64))
}

/// Weighted coalitions to evaluate, excluding the empty and full masks.
fn coalitions(m: usize, budget: usize, seed: u64) -> (Vec<(Vec<bool>, f64)>, bool) {
    let interior = 2f64.powi(m as i32) - 2.0;
    if interior <= budget as f64 {
        let all = (1..(1u64 << m) - 1)
            .map(|bits| {
                let mask: Vec<bool> = (0..m).map(|j| bits >> j & 1 == 1).collect();
                let s = mask.iter().filter(|b| **b).count();
                (mask, kernel_weight(m, s).expect("interior size"))
            })
            .collect();
        return (all, true);
    }
    // size strata paired as (s, M−s) from the outside in, where kernel mass is largest
    let mut out = Vec::new();
    let mut left = budget;
    let mut pending: Vec<usize> = Vec::new();
    let mut s = 1;
    while s <= m / 2 {
        let sizes: Vec<usize> = if 2 * s == m { vec![s] } else { vec![s, m - s] };
        let count: f64 = sizes.iter().map(|&k| binomial(m, k)).sum();
        if pending.is_empty() && count <= left as f64 {
            for &k in &sizes {
                let w = kernel_weight(m, k).expect("interior size");
                for combo in combinations(m, k) {
                    out.push((combo, w));
                }
            }
            left -= count as usize;
        } else {
            pending.extend(sizes);
        }
        s += 1;
    }
    if !pending.is_empty() && left >= 2 {
        // each size carries kernel mass (M−1)/(s(M−s)) in total; masks are
        // drawn with their complements, which cancels even-order
        // interaction noise in the regression
        let mass: Vec<f64> = pending.iter().map(|&k| (m - 1) as f64 / (k * (m - k)) as f64).collect();
        let total: f64 = mass.iter().sum();
        let pairs = left / 2;
        let weight = total / (2 * pairs) as f64;
        let mut rng = stream_rng(seed, Stream::Shap, 0);
        for _ in 0..pairs {
            let mut u = rng.random::<f64>() * total;
            let mut pick = pending.len() - 1;
            for (i, w) in mass.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            let k = pending[pick];
            let mut mask = vec![false; m];
            for j in sample_indices(&mut rng, m, k) {
                mask[j] = true;
            }
            let complement = mask.iter().map(|b| !b).collect();
            out.push((mask, weight));
            out.push((complement, weight));
        }
    }
    (out, false)
}

/// All masks with exactly `k` of `m` features present, in lexicographic
/// order of the present indices.
fn combinations(m: usize, k: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let mut mask = vec![false; m];
        for &i in &idx {
            mask[i] = true;
        }
        out.push(mask);
        let Some(p) = (0..k).rev().find(|&p| idx[p] < m - k + p) else {
            return out;
        };
        idx[p] += 1;
        for q in p + 1..k {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// KernelSHAP with `φ₀ = f_x(∅)` and `Σφ = f_x(all) − φ₀` imposed exactly.
/// When all `2^M − 2` interior coalitions fit in the sample budget they are
/// enumerated with exact kernel weights; otherwise sizes are stratified.
/// The ridge term is only added if the normal equations are not positive
/// definite on their own.
pub fn kernel_shap<F>(
    model: &F,
    x: &[f64],
    background: &Array2<f64>,
    feature_names: &[String],
    target: &str,
    cfg: &ShapConfig,
) -> Result<ShapResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + ?Sized,
{
    let m = x.len();
    if m == 0 {
        return Err(Error::Invalid("no features to explain".into()));
    }
    if feature_names.len() != m {
        return Err(Error::Shape(format!("{} names for {m} features", feature_names.len())));
    }
    cfg.validate(m)?;
    let f0 = masked_evaluate(model, x, &vec![false; m], background)?;
    let f1 = masked_evaluate(model, x, &vec![true; m], background)?;
    let finish = |phi: Vec<f64>, coalitions: usize, exact: bool| -> Result<ShapResult> {
        if !phi.iter().chain([&f0, &f1]).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite attribution".into()));
        }
        Ok(ShapResult {
            feature_names: feature_names.to_vec(),
            phi,
            phi0: f0,
            full_value: f1,
            target: target.to_string(),
            coalitions,
            exact,
        })
    };
    if m == 1 {
        return finish(vec![f1 - f0], 2, true);
    }
    let (masks, exact) = coalitions(m, cfg.n_mask_samples, cfg.seed);
    let values: Vec<f64> =
        masks.par_iter().map(|(mask, _)| masked_evaluate(model, x, mask, background)).collect::<Result<_>>()?;
    // φ_M = (f1 − f0) − Σ_{j<M} φ_j turns the constrained fit into an
    // unconstrained one in the first M−1 coefficients
    let total = f1 - f0;
    let p = m - 1;
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for ((mask, w), y) in masks.iter().zip(&values) {
        let zm = if mask[p] { 1.0 } else { 0.0 };
        for j in 0..p {
            row[j] = if mask[j] { 1.0 } else { 0.0 } - zm;
        }
        let target = y - f0 - zm * total;
        for a in 0..p {
            xtwy[a] += w * row[a] * target;
            for b in 0..p {
                xtwx[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    let coef = match xtwx.clone().cholesky() {
        Some(ch) => ch.solve(&xtwy),
        None => {
            log::debug!("normal equations singular; adding ridge {}", cfg.ridge);
            let ridged = xtwx + DMatrix::identity(p, p) * cfg.ridge;
            ridged
                .cholesky()
                .ok_or_else(|| Error::Numerical("KernelSHAP normal equations are singular even with ridge".into()))?
                .solve(&xtwy)
        }
    };
    let mut phi: Vec<f64> = coef.iter().copied().collect();
    phi.push(total - phi.iter().sum::<f64>());
    finish(phi, masks.len() + 2, exact)
}

/// `size` feature rows drawn uniformly, with replacement, from all regions
/// of the given cities using the `Background` stream.
pub fn background_rows(cities: &[&City], size: usize, seed: u64) -> Result<Array2<f64>> {
    let pool: Vec<ArrayView1<f64>> = cities.iter().flat_map(|c| c.graph.features().rows()).collect();
    let Some(first) = pool.first() else {
        return Err(Error::Invalid("no regions to draw background rows from".into()));
    };
    let d = first.len();
    if pool.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("background cities have different feature counts".into()));
    }
    let mut rng = stream_rng(seed, Stream::Background, 0);
    let mut out = Array2::zeros((size, d));
    for mut row in out.rows_mut() {
        row.assign(&pool[rng.random_range(0..pool.len())]);
    }
    Ok(out)
}

/// The generator's predicted total outflow of one region as a function of
/// that region's feature row, with all other regions held fixed.
pub struct OutflowTarget<'a> {
    pub model: &'a dyn NoisePredictor,
    pub sampler: &'a dyn Sampler,
    pub sched: &'a NoiseSchedule,
    pub graph: &'a UrbanGraph,
    pub region: usize,
    /// Generated samples averaged per evaluation.
    pub samples: usize,
    pub seed: u64,
}

impl OutflowTarget<'_> {
    pub fn evaluate(&self, row: &[f64]) -> Result<f64> {
        if self.region >= self.graph.n_regions() {
            return Err(Error::Invalid(format!(
                "region {} out of range for {} regions",
                self.region,
                self.graph.n_regions()
            )));
        }
        let mut feats = self.graph.features().clone();
        if row.len() != feats.ncols() {
            return Err(Error::Shape(format!("row of {} for {} features", row.len(), feats.ncols())));
        }
        feats.row_mut(self.region).assign(&ArrayView1::from(row));
        let ctx = CityContext::new(&self.graph.with_features(feats)?);
        let od = generate_averaged(self.model, self.sampler, &ctx, self.sched, self.samples, self.seed)?;
        Ok(od.outflow()[self.region])
    }
}
