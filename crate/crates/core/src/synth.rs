//! Synthetic cities for desk-scale experiments.
//!
//! Region centroids are scattered in a square of side `2√N` km. Residents
//! cluster around one to four centers; jobs cluster more tightly. Flows follow
//! a production-constrained law with exponential distance decay, a boost for
//! contiguous pairs and for staying in the home region, then Poisson noise on
//! a log-normally perturbed mean.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_model::{City, CityMeta, Dataset, ODMatrix, Split, UrbanGraph};
use crate::rng::{stream_rng, Stream};

pub const FEATURE_NAMES: [&str; 6] = ["population", "households", "median_income", "jobs", "poi_retail", "poi_office"];
pub const POPULATION_COLUMN: &str = "population";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_regions: usize,
    pub centers: usize,
    /// Exponential decay rate per km.
    pub decay: f64,
    /// Relative flow increase between contiguous regions.
    pub adjacency_boost: f64,
    /// Relative attractiveness of the home region.
    pub self_boost: f64,
    /// Share of residents that commute (including within their region).
    pub commute_rate: f64,
    /// Log-normal sigma applied to each expected flow.
    pub noise: f64,
    /// Mean residents per region before spatial weighting.
    pub base_population: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_regions: 20,
            centers: 1,
            decay: 0.35,
            adjacency_boost: 1.5,
            self_boost: 2.0,
            commute_rate: 0.4,
            noise: 0.25,
            base_population: 3000.0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_regions < 3 {
            return Err(Error::Invalid(format!("synthetic cities need N >= 3, got {}", self.n_regions)));
        }
        if self.n_regions > 100 {
            return Err(Error::Invalid(format!("synthetic cities support N <= 100, got {}", self.n_regions)));
        }
        if !(1..=4).contains(&self.centers) {
            return Err(Error::Invalid(format!("centers must be in 1..=4, got {}", self.centers)));
        }
        if !(self.decay > 0.0) {
            return Err(Error::Invalid("decay rate must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.adjacency_boost >= 0.0 && self.self_boost >= 0.0) {
            return Err(Error::Invalid("noise and boosts must be nonnegative".into()));
        }
        if !(self.commute_rate > 0.0 && self.base_population > 0.0) {
            return Err(Error::Invalid("commute rate and base population must be positive".into()));
        }
        Ok(())
    }
}

fn scatter(n: usize, side: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let min_sep = 0.3 * side / (n as f64).sqrt();
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut attempts = 0;
    while pts.len() < n {
        let p = [rng.random_range(0.0..side), rng.random_range(0.0..side)];
        attempts += 1;
        let ok = pts.iter().all(|q| dist(&p, q) >= min_sep);
        // the separation rule is best effort; coincident points are still refused
        if ok || (attempts > 200 * n && pts.iter().all(|q| dist(&p, q) > 1e-6)) {
            pts.push(p);
        }
    }
    pts
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Gabriel graph: `i ~ j` when no third point lies strictly inside the circle
/// with diameter `ij`. It is a connected subgraph of the Delaunay triangulation.
pub fn gabriel_adjacency(pts: &[[f64; 2]]) -> Array2<f64> {
    let n = pts.len();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let dij = dist(&pts[i], &pts[j]).powi(2);
            let blocked = (0..n)
                .filter(|&k| k != i && k != j)
                .any(|k| dist(&pts[i], &pts[k]).powi(2) + dist(&pts[j], &pts[k]).powi(2) < dij);
            if !blocked {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    a
}

/// Symmetrized k-nearest-neighbour graph.
pub fn knn_adjacency(d: &Array2<f64>, k: usize) -> Array2<f64> {
    let n = d.nrows();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&x, &y| d[[i, x]].total_cmp(&d[[i, y]]).then(x.cmp(&y)));
        for &j in order.iter().take(k) {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
    }
    a
}

/// Generates one city. Identical `(spec, seed)` give bit-identical output.
pub fn synth_city(spec: &SynthSpec, seed: u64) -> Result<(UrbanGraph, ODMatrix)> {
    spec.validate()?;
    let n = spec.n_regions;
    let mut rng = stream_rng(seed, Stream::Synth, 0);
    let side = 2.0 * (n as f64).sqrt();
    let pts = scatter(n, side, &mut rng);
    let distance = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { dist(&pts[i], &pts[j]) });
    let adjacency = if n >= 5 { gabriel_adjacency(&pts) } else { knn_adjacency(&distance, 3.min(n - 1)) };

    let centers: Vec<[f64; 2]> = (0..spec.centers)
        .map(|_| [rng.random_range(0.2 * side..0.8 * side), rng.random_range(0.2 * side..0.8 * side)])
        .collect();
    let weights: Vec<f64> = (0..spec.centers).map(|c| if c == 0 { 1.0 } else { rng.random_range(0.4..0.9) }).collect();
    let field = |p: &[f64; 2], scale: f64| -> f64 {
        centers.iter().zip(&weights).map(|(c, w)| w * (-dist(p, c) / scale).exp()).sum()
    };
    let lognormal = |sigma: f64| LogNormal::new(0.0, sigma).expect("valid sigma");
    let pop_noise = lognormal(0.3);
    let job_noise = lognormal(0.5);
    let hh_noise = lognormal(0.1);
    let inc_noise = lognormal(0.2);

    let mut x = Array2::zeros((n, FEATURE_NAMES.len()));
    for i in 0..n {
        let pop =
            (spec.base_population * (0.15 + field(&pts[i], side / 4.0)) * pop_noise.sample(&mut rng)).round() + 1.0;
        let jobs =
            (spec.base_population * 0.8 * (0.05 + 1.5 * field(&pts[i], side / 8.0)) * job_noise.sample(&mut rng))
                .round()
                + 1.0;
        let households = (pop / 2.5 * hh_noise.sample(&mut rng)).round().max(1.0);
        let income = 45_000.0 * (0.7 + 0.6 * field(&pts[i], side / 3.0)) * inc_noise.sample(&mut rng);
        let retail = poisson(&mut rng, 0.002 * (pop * jobs).sqrt() + 0.5);
        let office = poisson(&mut rng, 0.004 * jobs + 0.2);
        for (j, v) in [pop, households, income.round(), jobs, retail, office].into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }

    let flow_noise = lognormal(spec.noise.max(1e-12));
    let mut flows = Array2::zeros((n, n));
    for i in 0..n {
        let attract: Vec<f64> = (0..n)
            .map(|j| {
                let mut w = x[[j, 3]].powf(0.8) * (-spec.decay * distance[[i, j]]).exp();
                w *= 1.0 + spec.adjacency_boost * adjacency[[i, j]];
                if i == j {
                    w *= 1.0 + spec.self_boost;
                }
                w
            })
            .collect();
        let total: f64 = attract.iter().sum();
        let producers = spec.commute_rate * x[[i, 0]];
        for j in 0..n {
            let mu = producers * attract[j] / total;
            let perturbed = if spec.noise > 0.0 { mu * flow_noise.sample(&mut rng) } else { mu };
            flows[[i, j]] = poisson(&mut rng, perturbed);
        }
    }

    let graph = UrbanGraph::new(
        (0..n).map(|i| format!("r{i}")).collect(),
        FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        x,
        adjacency,
        distance,
    )?;
    Ok((graph, ODMatrix::raw(flows)?))
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_cities: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Template for per-city parameters; `n_regions` and `centers` are
    /// redrawn per city.
    pub city: SynthSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_cities: 40, min_regions: 8, max_regions: 30, city: SynthSpec::default() }
    }
}

/// Split sizes for `n` cities in 8:1:1 proportion, keeping at least one
/// training city.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (n as f64 * 0.1).round() as usize;
    let test = (n as f64 * 0.1).round() as usize;
    let (val, test) = if val + test >= n {
        (val.min(n.saturating_sub(1) / 2), test.min(n.saturating_sub(1) / 2))
    } else {
        (val, test)
    };
    (n - val - test, val, test)
}

pub fn synth_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.n_cities == 0 {
        return Err(Error::Invalid("n_cities must be positive".into()));
    }
    if spec.min_regions < 3 || spec.min_regions > spec.max_regions {
        return Err(Error::Invalid(format!("region range {}..={} is invalid", spec.min_regions, spec.max_regions)));
    }
    let mut order: Vec<usize> = (0..spec.n_cities).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let (train, val, _) = split_sizes(spec.n_cities);
    let mut split = vec![Split::Test; spec.n_cities];
    for (rank, &c) in order.iter().enumerate() {
        split[c] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let width = spec.n_cities.to_string().len().max(3);
    let mut cities = Vec::with_capacity(spec.n_cities);
    for (c, &tag) in split.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Synth, 1 + c as u64);
        let city_spec = SynthSpec {
            n_regions: rng.random_range(spec.min_regions..=spec.max_regions),
            centers: rng.random_range(1..=4),
            ..spec.city.clone()
        };
        let city_seed: u64 = rng.random();
        let (graph, od) = synth_city(&city_spec, city_seed)?;
        cities.push(City {
            meta: CityMeta {
                city_id: format!("city_{c:0width$}"),
                n_regions: city_spec.n_regions,
                d1: 3,
                d2: 3,
                split: tag,
                population_column: POPULATION_COLUMN.into(),
            },
            graph,
            od,
        });
    }
    Ok(Dataset::new(cities))
}

/// Concentration patterns with a known answer for structure classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    /// Nearly all residents and trips in one central region.
    OneHot,
    /// Residents and trips spread evenly.
    Uniform,
    /// Two opposite peaks, each drawing trips from its half of the city.
    TwoPeak,
}

/// A 4×4 grid city (rook contiguity, 1 km spacing with jitter) following
/// `kind`, with log-normal noise of sigma `noise` on every population and
/// flow. All splits are `Train`.
pub fn archetype_city(kind: Archetype, id: &str, noise: f64, seed: u64) -> Result<City> {
    const SIDE: usize = 4;
    let n = SIDE * SIDE;
    let mut rng = stream_rng(seed, Stream::Synth, 0);
    let jitter = noise.clamp(0.0, 0.3);
    let pts: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let (r, c) = ((i / SIDE) as f64, (i % SIDE) as f64);
            [c + rng.random_range(-jitter..=jitter), r + rng.random_range(-jitter..=jitter)]
        })
        .collect();
    let distance = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { dist(&pts[i], &pts[j]) });
    let adjacency = Array2::from_shape_fn((n, n), |(i, j)| {
        let (ri, ci, rj, cj) = (i / SIDE, i % SIDE, j / SIDE, j % SIDE);
        if ri.abs_diff(rj) + ci.abs_diff(cj) == 1 {
            1.0
        } else {
            0.0
        }
    });
    let peaks: &[usize] = match kind {
        Archetype::OneHot => &[5],
        Archetype::Uniform => &[],
        Archetype::TwoPeak => &[0, 15],
    };
    let wobble = LogNormal::new(0.0, noise.max(1e-12)).expect("valid sigma");
    let mut draw = |v: f64| if noise > 0.0 { v * wobble.sample(&mut rng) } else { v };
    let base = if peaks.is_empty() { 1000.0 } else { 20.0 };
    let peak_pop = 20_000.0 / peaks.len().max(1) as f64;
    let pop: Vec<f64> =
        (0..n).map(|i| draw(if peaks.contains(&i) { peak_pop } else { base }).round().max(1.0)).collect();
    let mut x = Array2::zeros((n, FEATURE_NAMES.len()));
    for i in 0..n {
        for (j, v) in [pop[i], pop[i] / 2.5, 50_000.0, pop[i], pop[i] / 100.0, pop[i] / 50.0].into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let mut flows = Array2::zeros((n, n));
    for i in 0..n {
        let target =
            peaks.iter().copied().min_by(|a, b| distance[[i, *a]].total_cmp(&distance[[i, *b]]).then(a.cmp(b)));
        for j in 0..n {
            let share = match target {
                Some(p) => 0.1 / n as f64 + if j == p { 0.9 } else { 0.0 },
                None => 1.0 / n as f64,
            };
            flows[[i, j]] = draw(0.5 * pop[i] * share);
        }
    }
    let graph = UrbanGraph::new(
        (0..n).map(|i| format!("r{i}")).collect(),
        FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        x,
        adjacency,
        distance,
    )?;
    Ok(City {
        meta: CityMeta {
            city_id: id.to_string(),
            n_regions: n,
            d1: 3,
            d2: 3,
            split: Split::Train,
            population_column: POPULATION_COLUMN.into(),
        },
        graph,
        od: ODMatrix::raw(flows)?,
    })
}

/// `replicas` noisy copies of each archetype, grouped by archetype in the
/// order one-hot, uniform, two-peak.
pub fn archetype_cities(replicas: usize, noise: f64, seed: u64) -> Result<Vec<(Archetype, City)>> {
    let mut out = Vec::new();
    for (k, kind) in [Archetype::OneHot, Archetype::Uniform, Archetype::TwoPeak].into_iter().enumerate() {
        for r in 0..replicas {
            let idx = (k * replicas + r) as u64;
            let id = format!("{}_{r}", serde_json::to_value(kind)?.as_str().unwrap_or("city"));
            let city_seed = crate::rng::derive_seed(seed, Stream::Synth, 1 + idx);
            out.push((kind, archetype_city(kind, &id, noise, city_seed)?));
        }
    }
    Ok(out)
}
