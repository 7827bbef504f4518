//! Urban-structure classification from concentration indicators.
//!
//! Each city gets four indicators in each of three dimensions:
//! population (Gini, HHI, Pareto exponent, primacy), flow and distance
//! (Gini, HHI, MFS, MBC). Indicators are z-scored across cities, reduced to
//! one principal-component score per dimension, combined into a composite,
//! and clustered with k-means into three labelled groups.
//!
//! The flow vector is each region's total outflow; the distance vector is
//! each origin's flow-weighted trip distance `Σ_j F_ij·d_ij`. MBC is taken
//! on the unweighted adjacency graph and is shared by both dimensions.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_model::City;
use crate::rng::{stream_rng, Stream};

fn check_nonnegative(x: &[f64], what: &str) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Invalid(format!("{what}: empty vector")));
    }
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Invalid(format!("{what}: entries must be finite and nonnegative, got {v}")));
    }
    let total: f64 = x.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(format!("{what}: all entries are zero")));
    }
    Ok(total)
}

/// `Σ_i Σ_j |x_i − x_j| / (2N²·x̄)`.
pub fn gini(x: &[f64]) -> Result<f64> {
    let total = check_nonnegative(x, "gini")?;
    let n = x.len() as f64;
    // sorted form of the double sum: Σ_i (2i − N + 1)·x_(i) over ascending order
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let diff: f64 = s.iter().enumerate().map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v).sum();
    Ok(2.0 * diff / (2.0 * n * total))
}

pub fn hhi(x: &[f64]) -> Result<f64> {
    let total = check_nonnegative(x, "hhi")?;
    Ok(x.iter().map(|v| (v / total).powi(2)).sum())
}

/// Share of the largest entry.
pub fn mfs(x: &[f64]) -> Result<f64> {
    let total = check_nonnegative(x, "mfs")?;
    Ok(x.iter().copied().fold(0.0, f64::max) / total)
}

/// Largest normalised betweenness centrality on an unweighted undirected
/// graph given as a 0/1 matrix. Uses Brandes' accumulation; each unordered
/// pair is counted once and the result divided by `(N−1)(N−2)/2`.
pub fn max_betweenness(adjacency: &ndarray::Array2<f64>) -> f64 {
    let n = adjacency.nrows();
    if n < 3 {
        log::warn!("betweenness needs at least 3 regions, got {n}; using 0");
        return 0.0;
    }
    let nbrs: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| j != i && adjacency[[i, j]] > 0.0).collect()).collect();
    let mut cb = vec![0.0; n];
    let mut disconnected = false;
    for s in 0..n {
        let mut order = Vec::with_capacity(n);
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0f64; n];
        let mut dist = vec![usize::MAX; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &w in &nbrs[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        disconnected |= order.len() < n;
        let mut delta = vec![0.0; n];
        for &w in order.iter().rev() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                cb[w] += delta[w];
            }
        }
    }
    if disconnected {
        log::warn!("adjacency graph is disconnected; betweenness covers reachable pairs only");
    }
    let norm = ((n - 1) * (n - 2)) as f64 / 2.0;
    // every unordered pair was visited from both ends
    cb.iter().map(|c| c / 2.0 / norm).fold(0.0, f64::max)
}

/// `α = 1 / (1 − Σ ln p_i / (N·ln p_max))`, or `None` when the populations
/// are all equal, any is below 1, or `p_max = 1`.
pub fn pareto_exponent(p: &[f64]) -> Option<f64> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 1.0 && v.is_finite())) {
        return None;
    }
    let max = p.iter().copied().fold(f64::MIN, f64::max);
    let min = p.iter().copied().fold(f64::MAX, f64::min);
    if !(max > min) {
        return None;
    }
    let ratio = p.iter().map(|v| v.ln()).sum::<f64>() / (p.len() as f64 * max.ln());
    Some(1.0 / (1.0 - ratio))
}

/// `P₁/(P₂+P₃+P₄)` over the largest values. With fewer than four regions the
/// denominator uses whatever second-tier regions exist and `padded` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primacy {
    pub value: f64,
    pub padded: bool,
}

pub fn primacy(p: &[f64]) -> Result<Primacy> {
    check_nonnegative(p, "primacy")?;
    if p.len() < 2 {
        return Err(Error::Degenerate("primacy needs at least two regions".into()));
    }
    let mut s = p.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let denom: f64 = s[1..s.len().min(4)].iter().sum();
    if denom <= 0.0 {
        return Err(Error::Degenerate("primacy: only one region has positive population".into()));
    }
    Ok(Primacy { value: s[0] / denom, padded: p.len() < 4 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeCategory {
    Small,
    Medium,
    Large,
}

impl SizeCategory {
    /// Up to 10 regions is small, up to 50 medium, anything above large.
    pub fn of(n_regions: usize) -> Self {
        match n_regions {
            0..=10 => SizeCategory::Small,
            11..=50 => SizeCategory::Medium,
            _ => SizeCategory::Large,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureLabel {
    Monocentric,
    Uniform,
    Polycentric,
}

impl fmt::Display for SizeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeCategory::Small => "small",
            SizeCategory::Medium => "medium",
            SizeCategory::Large => "large",
        })
    }
}

impl fmt::Display for StructureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureLabel::Monocentric => "monocentric",
            StructureLabel::Uniform => "uniform",
            StructureLabel::Polycentric => "polycentric",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationIndicators {
    pub gini: f64,
    pub hhi: f64,
    /// `None` when the exponent is undefined for this city.
    pub pareto: Option<f64>,
    pub primacy: f64,
    pub primacy_padded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkIndicators {
    pub gini: f64,
    pub hhi: f64,
    pub mfs: f64,
    pub mbc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityIndicators {
    pub city_id: String,
    pub n_regions: usize,
    pub population: PopulationIndicators,
    pub flow: NetworkIndicators,
    pub distance: NetworkIndicators,
}

pub fn city_indicators(city: &City) -> Result<CityIndicators> {
    let pop = city.population()?;
    let g = &city.graph;
    let od = city.od.flows();
    let n = g.n_regions();
    let outflow = city.od.outflow();
    let trip: Vec<f64> = (0..n).map(|i| (0..n).map(|j| od[[i, j]] * g.distance()[[i, j]]).sum()).collect();
    let mbc = max_betweenness(g.adjacency());
    let prim = primacy(&pop)?;
    let network = |x: &[f64]| -> Result<NetworkIndicators> {
        Ok(NetworkIndicators { gini: gini(x)?, hhi: hhi(x)?, mfs: mfs(x)?, mbc })
    };
    let wrap = |e: Error| Error::Invalid(format!("city {}: {e}", city.id()));
    Ok(CityIndicators {
        city_id: city.id().to_string(),
        n_regions: n,
        population: PopulationIndicators {
            gini: gini(&pop).map_err(wrap)?,
            hhi: hhi(&pop).map_err(wrap)?,
            pareto: pareto_exponent(&pop),
            primacy: prim.value,
            primacy_padded: prim.padded,
        },
        flow: network(&outflow).map_err(wrap)?,
        distance: network(&trip).map_err(wrap)?,
    })
}

impl CityIndicators {
    /// Indicator rows per dimension, Gini first; an undefined Pareto
    /// exponent is `NaN` here and imputed before scoring.
    fn dimension_rows(&self) -> [[f64; 4]; 3] {
        let p = &self.population;
        let net = |x: &NetworkIndicators| [x.gini, x.hhi, x.mfs, x.mbc];
        [[p.gini, p.hhi, p.pareto.unwrap_or(f64::NAN), p.primacy], net(&self.flow), net(&self.distance)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub seed: u64,
    pub restarts: usize,
    pub max_iterations: usize,
    /// Weights of the population, flow and distance scores in the composite.
    pub weights: [f64; 3],
    /// Also feed the z-scored raw indicators to k-means.
    pub include_raw_indicators: bool,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { seed: 0, restarts: 50, max_iterations: 300, weights: [1.0 / 3.0; 3], include_raw_indicators: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub indicators: CityIndicators,
    /// Population, flow and distance scores.
    pub scores: [f64; 3],
    pub composite: f64,
    pub cluster: usize,
    pub label: StructureLabel,
    pub size_category: SizeCategory,
}

pub const CLUSTERS: usize = 3;

/// Column-wise z-scores with population standard deviation; constant
/// columns map to zero.
pub fn zscore_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v = if sd > 1e-12 * mean.abs().max(1.0) { (*v - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Projection of centred rows on the leading principal axis, signed so the
/// loading on column 0 is positive (or, if that loading vanishes, so the
/// loadings sum to a positive value).
pub fn first_component_scores(z: &DMatrix<f64>) -> Vec<f64> {
    let n = z.nrows() as f64;
    let cov = z.transpose() * z / n;
    let eig = SymmetricEigen::new(cov);
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let mut axis = eig.eigenvectors.column(best).into_owned();
    let pivot = if axis[0].abs() > 1e-12 { axis[0] } else { axis.sum() };
    if pivot < 0.0 {
        axis = -axis;
    }
    (z * axis).iter().copied().collect()
}

/// Fitted k-means partition.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest centroid; the lowest index wins ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| chosen.iter().map(|&c| sq_dist(p, &points[c])).fold(f64::INFINITY, f64::min))
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(w) => w.sample(rng),
            // every point coincides with a seed; take the first unused index
            Err(_) => (0..points.len()).find(|i| !chosen.contains(i)).unwrap_or(0),
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iterations: usize) -> KMeansFit {
    let dim = points[0].len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..max_iterations {
        for (c, m) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&assignment).filter(|(_, a)| **a == c).map(|(p, _)| p).collect();
            // an empty cluster keeps its previous centre
            if !members.is_empty() {
                *m = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let inertia = points.iter().zip(&assignment).map(|(p, a)| sq_dist(p, &centroids[*a])).sum();
    KMeansFit { assignment, centroids, inertia }
}

/// k-means++ with `restarts` independent seedings; restart `r` draws from
/// the `KMeans` stream at index `r`. The lowest inertia wins, earlier
/// restarts winning ties.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize, max_iterations: usize) -> Result<KMeansFit> {
    if points.len() < k {
        return Err(Error::Invalid(format!("{} points cannot form {k} clusters", points.len())));
    }
    if k == 0 || restarts == 0 {
        return Err(Error::Invalid("k-means needs at least one cluster and one restart".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts {
        let mut rng = stream_rng(seed, Stream::KMeans, r as u64);
        let fit = lloyd(points, plus_plus_seeds(points, k, &mut rng), max_iterations);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Full pipeline over a set of cities.
pub fn classify(cities: &[&City], cfg: &ClassifyConfig) -> Result<Vec<StructureReport>> {
    if cities.len() < CLUSTERS {
        return Err(Error::Invalid(format!("classification needs at least {CLUSTERS} cities, got {}", cities.len())));
    }
    let indicators: Vec<CityIndicators> = cities.par_iter().map(|c| city_indicators(c)).collect::<Result<_>>()?;
    classify_indicators(indicators, cfg)
}

pub fn classify_indicators(indicators: Vec<CityIndicators>, cfg: &ClassifyConfig) -> Result<Vec<StructureReport>> {
    let n = indicators.len();
    if n < CLUSTERS {
        return Err(Error::Invalid(format!("classification needs at least {CLUSTERS} cities, got {n}")));
    }
    let rows: Vec<[[f64; 4]; 3]> = indicators.iter().map(|c| c.dimension_rows()).collect();
    let mut zs = Vec::with_capacity(3);
    let mut scores = vec![[0.0; 3]; n];
    for dim in 0..3 {
        let mut x = DMatrix::from_fn(n, 4, |r, c| rows[r][dim][c]);
        impute_missing(&mut x);
        let z = zscore_columns(&x);
        for (r, s) in first_component_scores(&z).into_iter().enumerate() {
            scores[r][dim] = s;
        }
        zs.push(z);
    }
    let wsum: f64 = cfg.weights.iter().sum();
    if !(wsum > 0.0) || cfg.weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Invalid("composite weights must be nonnegative with a positive sum".into()));
    }
    let composite: Vec<f64> =
        scores.iter().map(|s| s.iter().zip(&cfg.weights).map(|(a, w)| a * w).sum::<f64>() / wsum).collect();
    let points: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let mut p = vec![composite[r]];
            p.extend_from_slice(&scores[r]);
            if cfg.include_raw_indicators {
                for z in &zs {
                    p.extend(z.row(r).iter());
                }
            }
            p
        })
        .collect();
    let fit = kmeans(&points, CLUSTERS, cfg.seed, cfg.restarts, cfg.max_iterations)?;
    let labels = cluster_labels(&fit.assignment, &composite);
    Ok(indicators
        .into_iter()
        .enumerate()
        .map(|(r, ind)| StructureReport {
            size_category: SizeCategory::of(ind.n_regions),
            indicators: ind,
            scores: scores[r],
            composite: composite[r],
            cluster: fit.assignment[r],
            label: labels[fit.assignment[r]],
        })
        .collect())
}

/// Undefined entries take the mean of the defined ones in their column
/// (zero when none is defined).
fn impute_missing(x: &mut DMatrix<f64>) {
    for mut col in x.column_iter_mut() {
        let defined: Vec<f64> = col.iter().copied().filter(|v| v.is_finite()).collect();
        let fill = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
        for v in col.iter_mut() {
            if !v.is_finite() {
                *v = fill;
            }
        }
    }
}

/// Clusters ordered by mean composite: highest monocentric, then uniform,
/// then polycentric. Empty clusters sort last; ties keep cluster order.
fn cluster_labels(assignment: &[usize], composite: &[f64]) -> [StructureLabel; CLUSTERS] {
    let mut means: Vec<(usize, f64)> = (0..CLUSTERS)
        .map(|c| {
            let m: Vec<f64> = assignment.iter().zip(composite).filter(|(a, _)| **a == c).map(|(_, v)| *v).collect();
            (c, if m.is_empty() { f64::NEG_INFINITY } else { m.iter().sum::<f64>() / m.len() as f64 })
        })
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let order = [StructureLabel::Monocentric, StructureLabel::Uniform, StructureLabel::Polycentric];
    let mut labels = [StructureLabel::Uniform; CLUSTERS];
    for (rank, (c, _)) in means.into_iter().enumerate() {
        labels[c] = order[rank];
    }
    labels
}
