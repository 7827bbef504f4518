//! City representation: regions with attributes, the two spatial priors
//! (adjacency, distance), and the commuting OD matrix.

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Log-space entries above this overflow-guard are rejected by
/// [`inverse_transform`]; `exp(700)` is close to the largest finite `f64`.
pub const MAX_LOG_FLOW: f64 = 700.0;

/// One city: `N` regions with a `N×d` attribute matrix and `N×N` priors.
#[derive(Clone, Debug, PartialEq)]
pub struct UrbanGraph {
    region_ids: Vec<String>,
    feature_names: Vec<String>,
    features: Array2<f64>,
    adjacency: Array2<f64>,
    distance: Array2<f64>,
}

impl UrbanGraph {
    /// Validates shapes, adjacency symmetry/binarity/zero diagonal and
    /// distance symmetry/positivity.
    pub fn new(
        region_ids: Vec<String>,
        feature_names: Vec<String>,
        features: Array2<f64>,
        adjacency: Array2<f64>,
        distance: Array2<f64>,
    ) -> Result<Self> {
        let n = region_ids.len();
        if n == 0 {
            return Err(Error::Invalid("a city needs at least one region".into()));
        }
        if features.nrows() != n || features.ncols() == 0 || features.ncols() != feature_names.len() {
            return Err(Error::Shape(format!(
                "features are {:?} for {n} regions and {} names",
                features.dim(),
                feature_names.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        for (name, m) in [("adjacency", &adjacency), ("distance", &distance)] {
            if m.dim() != (n, n) {
                return Err(Error::Shape(format!("{name} is {:?}, expected ({n}, {n})", m.dim())));
            }
        }
        for i in 0..n {
            if adjacency[[i, i]] != 0.0 {
                return Err(Error::Invalid(format!("adjacency diagonal at {i} is nonzero")));
            }
            if distance[[i, i]] != 0.0 {
                return Err(Error::Invalid(format!("distance diagonal at {i} is nonzero")));
            }
            for j in 0..n {
                let a = adjacency[[i, j]];
                if a != 0.0 && a != 1.0 {
                    return Err(Error::Invalid(format!("adjacency[{i},{j}] = {a} is not binary")));
                }
                if a != adjacency[[j, i]] {
                    return Err(Error::Invalid(format!("adjacency is not symmetric at ({i},{j})")));
                }
                let d = distance[[i, j]];
                if d != distance[[j, i]] {
                    return Err(Error::Invalid(format!("distance is not symmetric at ({i},{j})")));
                }
                if i != j && !(d > 0.0 && d.is_finite()) {
                    return Err(Error::Invalid(format!("distance[{i},{j}] = {d} must be positive")));
                }
            }
        }
        Ok(Self { region_ids, feature_names, features, adjacency, distance })
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn distance(&self) -> &Array2<f64> {
        &self.distance
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(
            self.region_ids.clone(),
            self.feature_names.clone(),
            features,
            self.adjacency.clone(),
            self.distance.clone(),
        )
    }

    /// Relabels regions so that new region `k` is old region `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_regions();
        check_permutation(perm, n)?;
        Self::new(
            perm.iter().map(|&p| self.region_ids[p].clone()).collect(),
            self.feature_names.clone(),
            self.features.select(Axis(0), perm),
            permute_square(&self.adjacency, perm),
            permute_square(&self.distance, perm),
        )
    }

    /// Distances min-max scaled to `[0, 1]` over off-diagonal entries; the
    /// diagonal stays 0.
    pub fn normalized_distance(&self) -> Array2<f64> {
        let n = self.n_regions();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    lo = lo.min(self.distance[[i, j]]);
                    hi = hi.max(self.distance[[i, j]]);
                }
            }
        }
        let span = hi - lo;
        Array2::from_shape_fn(
            (n, n),
            |(i, j)| {
                if i == j || !(span > 0.0) {
                    0.0
                } else {
                    (self.distance[[i, j]] - lo) / span
                }
            },
        )
    }
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(format!("not a permutation of 0..{n}")));
    }
    Ok(())
}

pub(crate) fn permute_square(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(m.dim(), |(i, j)| m[[perm[i], perm[j]]])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowSpace {
    Raw,
    Log,
}

/// `N×N` commuting flows, tagged with the space they are expressed in.
#[derive(Clone, Debug, PartialEq)]
pub struct ODMatrix {
    flows: Array2<f64>,
    space: FlowSpace,
}

impl ODMatrix {
    /// Raw commuter counts: square, finite, nonnegative.
    pub fn raw(flows: Array2<f64>) -> Result<Self> {
        check_square(&flows)?;
        if let Some(((i, j), v)) = flows.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!("raw flow [{i},{j}] = {v} must be finite and >= 0")));
        }
        Ok(Self { flows, space: FlowSpace::Raw })
    }

    /// Log-space values `log(F + 1)`. Generated matrices may carry small
    /// negative entries; they invert to zero flow.
    pub fn log(values: Array2<f64>) -> Result<Self> {
        check_square(&values)?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("non-finite log flow".into()));
        }
        Ok(Self { flows: values, space: FlowSpace::Log })
    }

    pub fn flows(&self) -> &Array2<f64> {
        &self.flows
    }

    pub fn into_flows(self) -> Array2<f64> {
        self.flows
    }

    pub fn space(&self) -> FlowSpace {
        self.space
    }

    pub fn n_regions(&self) -> usize {
        self.flows.nrows()
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_regions())?;
        Ok(Self { flows: permute_square(&self.flows, perm), space: self.space })
    }

    /// Total outflow per origin region.
    pub fn outflow(&self) -> Vec<f64> {
        self.flows.sum_axis(Axis(1)).to_vec()
    }

    /// Total inflow per destination region.
    pub fn inflow(&self) -> Vec<f64> {
        self.flows.sum_axis(Axis(0)).to_vec()
    }
}

fn check_square(m: &Array2<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Shape(format!("OD matrix must be square and non-empty, got {:?}", m.dim())));
    }
    Ok(())
}

/// `F ↦ ln(F + 1)` entrywise.
pub fn log_transform(od: &ODMatrix) -> Result<ODMatrix> {
    if od.space != FlowSpace::Raw {
        return Err(Error::Invalid("log_transform expects a raw-space matrix".into()));
    }
    ODMatrix::log(od.flows.mapv(f64::ln_1p))
}

/// `L ↦ max(exp(L) − 1, 0)` entrywise; rejects entries above [`MAX_LOG_FLOW`].
pub fn inverse_transform(od: &ODMatrix) -> Result<ODMatrix> {
    if od.space != FlowSpace::Log {
        return Err(Error::Invalid("inverse_transform expects a log-space matrix".into()));
    }
    if let Some(v) = od.flows.iter().find(|v| **v > MAX_LOG_FLOW) {
        return Err(Error::Numerical(format!("log flow {v} exceeds the overflow threshold {MAX_LOG_FLOW}")));
    }
    ODMatrix::raw(od.flows.mapv(|v| v.exp_m1().max(0.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Contents of a city's `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityMeta {
    pub city_id: String,
    pub n_regions: usize,
    /// Number of demographic columns (they come first).
    pub d1: usize,
    /// Number of POI columns.
    pub d2: usize,
    pub split: Split,
    /// Feature column used as the gravity-model mass and population indicator.
    pub population_column: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct City {
    pub meta: CityMeta,
    pub graph: UrbanGraph,
    pub od: ODMatrix,
}

impl City {
    pub fn id(&self) -> &str {
        &self.meta.city_id
    }

    pub fn split(&self) -> Split {
        self.meta.split
    }

    /// The population column of the (raw) feature matrix.
    pub fn population(&self) -> Result<Vec<f64>> {
        let idx = self.graph.feature_index(&self.meta.population_column).ok_or_else(|| {
            Error::Invalid(format!("city {}: population column `{}` not found", self.id(), self.meta.population_column))
        })?;
        Ok(self.graph.features().column(idx).to_vec())
    }
}

/// Per-feature z-score statistics fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; degenerate columns store 1.
    pub std: Vec<f64>,
    /// Constant columns map to 0 everywhere.
    pub degenerate: Vec<bool>,
}

impl NormStats {
    pub fn fit<'a>(graphs: impl IntoIterator<Item = &'a UrbanGraph>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut rows = 0usize;
        let mut graphs = graphs.into_iter().peekable();
        let d = graphs
            .peek()
            .map(|g| g.n_features())
            .ok_or_else(|| Error::Invalid("normalization needs a non-empty training split".into()))?;
        sum.resize(d, 0.0);
        let all: Vec<&UrbanGraph> = graphs.collect();
        for g in &all {
            if g.n_features() != d {
                return Err(Error::Shape(format!("feature width {} != {d}", g.n_features())));
            }
            for row in g.features().rows() {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                rows += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
        sq.resize(d, 0.0);
        for g in &all {
            for row in g.features().rows() {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let raw_std: Vec<f64> = sq.iter().map(|s| (s / rows as f64).sqrt()).collect();
        let degenerate: Vec<bool> = raw_std.iter().zip(&mean).map(|(s, m)| *s <= 1e-12 * m.abs().max(1.0)).collect();
        let std = raw_std.iter().zip(&degenerate).map(|(s, deg)| if *deg { 1.0 } else { *s }).collect();
        Ok(Self { mean, std, degenerate })
    }

    pub fn apply(&self, graph: &UrbanGraph) -> Result<UrbanGraph> {
        if graph.n_features() != self.mean.len() {
            return Err(Error::Shape(format!(
                "graph has {} features, stats have {}",
                graph.n_features(),
                self.mean.len()
            )));
        }
        let mut x = graph.features().clone();
        for (j, mut col) in x.columns_mut().into_iter().enumerate() {
            if self.degenerate[j] {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
            }
        }
        graph.with_features(x)
    }
}

/// A collection of cities with split tags and optional normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cities: Vec<City>,
    stats: Option<NormStats>,
    normalized: bool,
}

impl Dataset {
    pub fn new(cities: Vec<City>) -> Self {
        Self { cities, stats: None, normalized: false }
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalization_stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &City> {
        self.cities.iter().filter(move |c| c.split() == split)
    }

    pub fn get(&self, id: &str) -> Option<&City> {
        self.cities.iter().find(|c| c.id() == id)
    }

    /// Z-scores every city's features with statistics from the train split.
    /// A dataset that is already normalized is returned unchanged.
    pub fn normalize_features(self) -> Result<Self> {
        if self.normalized {
            return Ok(self);
        }
        let stats = NormStats::fit(self.split(Split::Train).map(|c| &c.graph))?;
        self.normalize_with(stats)
    }

    /// Applies externally fitted statistics (e.g. those stored alongside a
    /// checkpoint) to every city.
    pub fn normalize_with(self, stats: NormStats) -> Result<Self> {
        if self.normalized {
            return Ok(self);
        }
        let cities =
            self.cities.into_iter().map(|c| Ok(City { graph: stats.apply(&c.graph)?, ..c })).collect::<Result<_>>()?;
        Ok(Self { cities, stats: Some(stats), normalized: true })
    }
}

/// Replaces exactly `⌊ratio·N·d⌋` uniformly chosen feature cells with the
/// mean of the unmasked cells of the same column in this city. A column with
/// every cell masked falls back to its full original mean.
pub fn mask_features(graph: &UrbanGraph, ratio: f64, seed: u64) -> Result<UrbanGraph> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let (n, d) = graph.features().dim();
    let total = n * d;
    let count = (ratio * total as f64).floor() as usize;
    if count == 0 {
        return Ok(graph.clone());
    }
    let mut rng = stream_rng(seed, Stream::Mask, 0);
    let mut masked = vec![false; total];
    for cell in sample(&mut rng, total, count.min(total)).into_iter() {
        masked[cell] = true;
    }
    let x = graph.features();
    let mut out = x.clone();
    for j in 0..d {
        let kept: Vec<f64> = (0..n).filter(|i| !masked[i * d + j]).map(|i| x[[i, j]]).collect();
        let fill = if kept.is_empty() {
            x.column(j).mean().unwrap_or(0.0)
        } else {
            kept.iter().sum::<f64>() / kept.len() as f64
        };
        for i in 0..n {
            if masked[i * d + j] {
                out[[i, j]] = fill;
            }
        }
    }
    graph.with_features(out)
}
