//! Flow-accuracy and distributional metrics, plus spatial regularities of
//! observed flows.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_model::{ODMatrix, UrbanGraph};
use crate::registry::Registry;

/// Additive floor applied to every probability before renormalising.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_pair(truth: &Array2<f64>, pred: &Array2<f64>) -> Result<()> {
    if truth.dim() != pred.dim() {
        return Err(Error::Shape(format!("truth {:?} vs prediction {:?}", truth.dim(), pred.dim())));
    }
    Ok(())
}

/// Entries taking part in a comparison.
fn cells(truth: &Array2<f64>, pred: &Array2<f64>, exclude_diagonal: bool) -> Vec<(f64, f64)> {
    truth
        .indexed_iter()
        .filter(|((i, j), _)| !(exclude_diagonal && i == j))
        .map(|((i, j), t)| (*t, pred[[i, j]]))
        .collect()
}

fn rmse_cells(c: &[(f64, f64)]) -> f64 {
    (c.iter().map(|(t, p)| (t - p).powi(2)).sum::<f64>() / c.len() as f64).sqrt()
}

pub fn rmse(truth: &ODMatrix, pred: &ODMatrix) -> Result<f64> {
    check_pair(truth.flows(), pred.flows())?;
    Ok(rmse_cells(&cells(truth.flows(), pred.flows(), false)))
}

fn nrmse_cells(c: &[(f64, f64)]) -> Result<f64> {
    let mean = c.iter().map(|(t, _)| t).sum::<f64>() / c.len() as f64;
    let sd = (c.iter().map(|(t, _)| (t - mean).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
    if sd == 0.0 {
        return Err(Error::Degenerate("NRMSE is undefined for a constant ground truth".into()));
    }
    Ok(rmse_cells(c) / sd)
}

/// RMSE divided by the population standard deviation of the truth.
pub fn nrmse(truth: &ODMatrix, pred: &ODMatrix) -> Result<f64> {
    check_pair(truth.flows(), pred.flows())?;
    nrmse_cells(&cells(truth.flows(), pred.flows(), false))
}

fn cpc_cells(c: &[(f64, f64)]) -> Result<f64> {
    let total: f64 = c.iter().map(|(t, p)| t + p).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("CPC is undefined when both matrices are zero".into()));
    }
    Ok(2.0 * c.iter().map(|(t, p)| t.min(*p)).sum::<f64>() / total)
}

/// Common part of commuters, `2·Σmin / Σ(F + F̂)`.
pub fn cpc(truth: &ODMatrix, pred: &ODMatrix) -> Result<f64> {
    check_pair(truth.flows(), pred.flows())?;
    cpc_cells(&cells(truth.flows(), pred.flows(), false))
}

/// Normalises `x` to a distribution, adds [`PROB_FLOOR`] to every entry and
/// renormalises.
pub fn smoothed_distribution(x: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = x.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("distribution has zero total mass".into()));
    }
    let z = 1.0 + PROB_FLOOR * x.len() as f64;
    Ok(x.iter().map(|v| (v / total + PROB_FLOOR) / z).collect())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Divergence between two smoothed distributions.
pub trait Divergence: Send + Sync {
    fn name(&self) -> &'static str;
    fn between(&self, p: &[f64], q: &[f64]) -> f64;
}

/// `(KL(P‖Q) + KL(Q‖P)) / 2`, the form reported as JSD.
pub struct SymmetrizedKl;

/// `(KL(P‖M) + KL(Q‖M)) / 2` with `M = (P + Q)/2`.
pub struct MixtureJs;

impl Divergence for SymmetrizedKl {
    fn name(&self) -> &'static str {
        "symmetrized-kl"
    }
    fn between(&self, p: &[f64], q: &[f64]) -> f64 {
        0.5 * (kl(p, q) + kl(q, p))
    }
}

impl Divergence for MixtureJs {
    fn name(&self) -> &'static str {
        "mixture-js"
    }
    fn between(&self, p: &[f64], q: &[f64]) -> f64 {
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
        0.5 * (kl(p, &m) + kl(q, &m))
    }
}

pub fn divergence_registry() -> Registry<dyn Divergence> {
    let mut r: Registry<dyn Divergence> = Registry::new("divergence");
    r.register("symmetrized-kl", |_| Box::new(SymmetrizedKl));
    r.register("mixture-js", |_| Box::new(MixtureJs));
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsdSuite {
    pub inflow: f64,
    pub outflow: f64,
    pub odflow: f64,
}

fn masked(m: &Array2<f64>, exclude_diagonal: bool) -> Array2<f64> {
    let mut m = m.clone();
    if exclude_diagonal {
        m.diag_mut().fill(0.0);
    }
    m
}

fn jsd_arrays(truth: &Array2<f64>, pred: &Array2<f64>, div: &dyn Divergence) -> Result<JsdSuite> {
    let pair = |a: Vec<f64>, b: Vec<f64>| -> Result<f64> {
        Ok(div.between(&smoothed_distribution(&a)?, &smoothed_distribution(&b)?))
    };
    let col = |m: &Array2<f64>| m.sum_axis(ndarray::Axis(0)).to_vec();
    let row = |m: &Array2<f64>| m.sum_axis(ndarray::Axis(1)).to_vec();
    let flat = |m: &Array2<f64>| m.iter().copied().collect::<Vec<_>>();
    Ok(JsdSuite {
        inflow: pair(col(truth), col(pred))?,
        outflow: pair(row(truth), row(pred))?,
        odflow: pair(flat(truth), flat(pred))?,
    })
}

/// Divergences between inflow, outflow and flattened-OD distributions.
pub fn jsd_suite(truth: &ODMatrix, pred: &ODMatrix, div: &dyn Divergence) -> Result<JsdSuite> {
    check_pair(truth.flows(), pred.flows())?;
    jsd_arrays(truth.flows(), pred.flows(), div)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityMetrics {
    pub city_id: String,
    pub cpc: f64,
    pub rmse: f64,
    pub nrmse: f64,
    pub jsd_inflow: f64,
    pub jsd_outflow: f64,
    pub jsd_odflow: f64,
}

impl CityMetrics {
    pub const COLUMNS: [&'static str; 6] = ["cpc", "rmse", "nrmse", "jsd_inflow", "jsd_outflow", "jsd_odflow"];

    pub fn values(&self) -> [f64; 6] {
        [self.cpc, self.rmse, self.nrmse, self.jsd_inflow, self.jsd_outflow, self.jsd_odflow]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Leave intra-region flows out of every metric.
    pub exclude_diagonal: bool,
}

pub fn city_metrics(
    id: &str,
    truth: &ODMatrix,
    pred: &ODMatrix,
    div: &dyn Divergence,
    opts: EvalOptions,
) -> Result<CityMetrics> {
    check_pair(truth.flows(), pred.flows())?;
    let c = cells(truth.flows(), pred.flows(), opts.exclude_diagonal);
    if c.is_empty() {
        return Err(Error::Invalid(format!("city {id}: nothing to compare")));
    }
    let label = |e: Error| match e {
        Error::Degenerate(m) => Error::Degenerate(format!("city {id}: {m}")),
        other => other,
    };
    let jsd =
        jsd_arrays(&masked(truth.flows(), opts.exclude_diagonal), &masked(pred.flows(), opts.exclude_diagonal), div)
            .map_err(label)?;
    Ok(CityMetrics {
        city_id: id.to_string(),
        cpc: cpc_cells(&c).map_err(label)?,
        rmse: rmse_cells(&c),
        nrmse: nrmse_cells(&c).map_err(label)?,
        jsd_inflow: jsd.inflow,
        jsd_outflow: jsd.outflow,
        jsd_odflow: jsd.odflow,
    })
}

/// Per-city metrics and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub divergence: String,
    pub exclude_diagonal: bool,
    pub per_city: Vec<CityMetrics>,
    pub average: CityMetrics,
}

/// Evaluates `(id, truth, prediction)` triples in parallel; the report keeps
/// the input order and averages in that order.
pub fn evaluate(
    pairs: &[(&str, &ODMatrix, &ODMatrix)],
    div: &dyn Divergence,
    opts: EvalOptions,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no cities to evaluate".into()));
    }
    let per_city: Vec<CityMetrics> =
        pairs.par_iter().map(|(id, t, p)| city_metrics(id, t, p, div, opts)).collect::<Result<_>>()?;
    let mut sums = [0.0; 6];
    for c in &per_city {
        for (s, v) in sums.iter_mut().zip(c.values()) {
            *s += v;
        }
    }
    let n = per_city.len() as f64;
    let m = sums.map(|s| s / n);
    Ok(MetricReport {
        divergence: div.name().to_string(),
        exclude_diagonal: opts.exclude_diagonal,
        average: CityMetrics {
            city_id: "AVERAGE".into(),
            cpc: m[0],
            rmse: m[1],
            nrmse: m[2],
            jsd_inflow: m[3],
            jsd_outflow: m[4],
            jsd_odflow: m[5],
        },
        per_city,
    })
}

/// Pearson correlation; zero variance in either input yields 0.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("correlation of a constant series reported as 0");
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialStats {
    pub pairs: usize,
    pub dist_logflow_corr: f64,
    pub mean_flow_adjacent: f64,
    pub mean_flow_nonadjacent: f64,
    pub nonzero_rate_adjacent: f64,
    pub nonzero_rate_nonadjacent: f64,
}

fn mean_and_rate(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    (v.iter().sum::<f64>() / n, v.iter().filter(|f| **f > 0.0).count() as f64 / n)
}

/// Regularities over off-diagonal pairs pooled across cities. Strata with no
/// pairs report zero mean and rate.
pub fn spatial_stats(cities: &[(&UrbanGraph, &ODMatrix)]) -> Result<SpatialStats> {
    let mut d = Vec::new();
    let mut lf = Vec::new();
    let mut adj = Vec::new();
    let mut non = Vec::new();
    for (g, od) in cities {
        let n = g.n_regions();
        if od.n_regions() != n {
            return Err(Error::Shape("OD size differs from the city".into()));
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let f = od.flows()[[i, j]];
                d.push(g.distance()[[i, j]]);
                lf.push(f.ln_1p());
                if g.adjacency()[[i, j]] != 0.0 {
                    adj.push(f);
                } else {
                    non.push(f);
                }
            }
        }
    }
    if d.len() < 2 {
        return Err(Error::Invalid("spatial statistics need at least two region pairs".into()));
    }
    let (ma, ra) = mean_and_rate(&adj);
    let (mn, rn) = mean_and_rate(&non);
    Ok(SpatialStats {
        pairs: d.len(),
        dist_logflow_corr: pearson(&d, &lf),
        mean_flow_adjacent: ma,
        mean_flow_nonadjacent: mn,
        nonzero_rate_adjacent: ra,
        nonzero_rate_nonadjacent: rn,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayBin {
    pub lo: f64,
    pub hi: f64,
    pub pairs: usize,
    pub mean_flow: f64,
    pub mean_log_flow: f64,
}

/// Mean flow in `bins` equal-width distance bins spanning `(0, max d]`.
pub fn decay_profile(cities: &[(&UrbanGraph, &ODMatrix)], bins: usize) -> Result<Vec<DecayBin>> {
    if bins == 0 {
        return Err(Error::Invalid("need at least one bin".into()));
    }
    let mut pts = Vec::new();
    for (g, od) in cities {
        for ((i, j), d) in g.distance().indexed_iter() {
            if i != j {
                pts.push((*d, od.flows()[[i, j]]));
            }
        }
    }
    let max = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    if pts.is_empty() || max <= 0.0 {
        return Err(Error::Invalid("no region pairs to profile".into()));
    }
    let width = max / bins as f64;
    let mut acc = vec![(0usize, 0.0, 0.0); bins];
    for (d, f) in pts {
        let b = ((d / width).ceil() as usize).clamp(1, bins) - 1;
        acc[b].0 += 1;
        acc[b].1 += f;
        acc[b].2 += f.ln_1p();
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(b, (n, s, l))| DecayBin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            pairs: n,
            mean_flow: if n > 0 { s / n as f64 } else { 0.0 },
            mean_log_flow: if n > 0 { l / n as f64 } else { 0.0 },
        })
        .collect())
}
