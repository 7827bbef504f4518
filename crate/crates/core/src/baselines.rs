//! Gravity-model baselines fitted by log-linear least squares.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_model::{City, ODMatrix, UrbanGraph};
use crate::registry::Registry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    /// `d^{−β}`
    Power,
    /// `exp(−β·d)`
    Exponential,
}

impl DecayKind {
    fn factor(self, d: f64, beta: f64) -> f64 {
        match self {
            DecayKind::Power => d.powf(-beta),
            DecayKind::Exponential => (-beta * d).exp(),
        }
    }

    /// Regressor multiplying `−β` in the log-linear form.
    fn regressor(self, d: f64) -> f64 {
        match self {
            DecayKind::Power => d.ln(),
            DecayKind::Exponential => d,
        }
    }
}

/// `F̂_ij = k · m_i^a · m_j^b · decay(d_ij; β)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityParams {
    pub k: f64,
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub decay: DecayKind,
}

/// Predicted flows; the diagonal is zero.
pub fn gravity_predict(g: &UrbanGraph, masses: &[f64], p: &GravityParams) -> Result<ODMatrix> {
    gravity_predict_raw(g.distance(), masses, p)
}

pub fn gravity_predict_raw(distance: &Array2<f64>, masses: &[f64], p: &GravityParams) -> Result<ODMatrix> {
    let n = distance.nrows();
    if masses.len() != n {
        return Err(Error::Shape(format!("{} masses for {n} regions", masses.len())));
    }
    if let Some(m) = masses.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return Err(Error::Invalid(format!("gravity masses must be positive, got {m}")));
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = distance[[i, j]];
            if !(d > 0.0) {
                return Err(Error::Invalid(format!("distance [{i},{j}] = {d} must be positive")));
            }
            out[[i, j]] = p.k * masses[i].powf(p.a) * masses[j].powf(p.b) * p.decay.factor(d, p.beta);
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("gravity prediction overflowed".into()));
    }
    ODMatrix::raw(out)
}

/// One city's worth of fitting data.
pub struct FitSample<'a> {
    pub distance: &'a Array2<f64>,
    pub masses: &'a [f64],
    pub flows: &'a Array2<f64>,
}

/// Ordinary least squares on `ln F = ln k + a ln m_i + b ln m_j − β·r(d)`
/// over strictly positive off-diagonal flows, where `r` is `ln d` or `d`.
pub fn gravity_fit(samples: &[FitSample], decay: DecayKind) -> Result<GravityParams> {
    let mut rows: Vec<[f64; 4]> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    for s in samples {
        let n = s.distance.nrows();
        if s.masses.len() != n || s.flows.dim() != (n, n) {
            return Err(Error::Shape("fit sample shapes disagree".into()));
        }
        for i in 0..n {
            for j in 0..n {
                let (f, d) = (s.flows[[i, j]], s.distance[[i, j]]);
                if i == j || !(f > 0.0) || !(d > 0.0) {
                    continue;
                }
                let (mi, mj) = (s.masses[i], s.masses[j]);
                if !(mi > 0.0 && mj > 0.0) {
                    return Err(Error::Invalid("gravity masses must be positive".into()));
                }
                rows.push([1.0, mi.ln(), mj.ln(), -decay.regressor(d)]);
                y.push(f.ln());
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Invalid("no positive flow with positive distance to fit".into()));
    }
    let x = DMatrix::from_fn(rows.len(), 4, |r, c| rows[r][c]);
    let y = DVector::from_vec(y);
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 4.0 * f64::EPSILON * rows.len().max(4) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < 4 {
        return Err(Error::RankDeficient(format!(
            "gravity design has rank {rank} < 4 ({} positive pairs)",
            rows.len()
        )));
    }
    let coef = svd.solve(&y, tol).map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    let p = GravityParams { k: coef[0].exp(), a: coef[1], b: coef[2], beta: coef[3], decay };
    if ![p.k, p.a, p.b, p.beta].iter().all(|v| v.is_finite()) || p.k <= 0.0 {
        return Err(Error::Numerical(format!("gravity fit produced invalid parameters {p:?}")));
    }
    if p.beta <= 0.0 {
        log::warn!("fitted distance decay {} is not positive", p.beta);
    }
    Ok(p)
}

/// A named gravity variant.
pub trait GravityModel: Send + Sync {
    fn name(&self) -> &'static str;
    fn decay(&self) -> DecayKind;

    fn fit(&self, cities: &[&City]) -> Result<GravityParams> {
        let masses = cities.iter().map(|c| c.population()).collect::<Result<Vec<_>>>()?;
        let samples: Vec<FitSample> = cities
            .iter()
            .zip(&masses)
            .map(|(c, m)| FitSample { distance: c.graph.distance(), masses: m, flows: c.od.flows() })
            .collect();
        gravity_fit(&samples, self.decay())
    }

    fn predict(&self, city: &City, p: &GravityParams) -> Result<ODMatrix> {
        gravity_predict(&city.graph, &city.population()?, p)
    }
}

pub struct PowerGravity;
pub struct ExponentialGravity;

impl GravityModel for PowerGravity {
    fn name(&self) -> &'static str {
        "gm-p"
    }
    fn decay(&self) -> DecayKind {
        DecayKind::Power
    }
}

impl GravityModel for ExponentialGravity {
    fn name(&self) -> &'static str {
        "gm-e"
    }
    fn decay(&self) -> DecayKind {
        DecayKind::Exponential
    }
}

pub fn gravity_registry() -> Registry<dyn GravityModel> {
    let mut r: Registry<dyn GravityModel> = Registry::new("baseline");
    r.register("gm-p", |_| Box::new(PowerGravity));
    r.register("gm-e", |_| Box::new(ExponentialGravity));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_regions(d: f64) -> Array2<f64> {
        array![[0.0, d], [d, 0.0]]
    }

    #[test]
    fn hand_evaluated_power_flow() {
        let p = GravityParams { k: 1.0, a: 1.0, b: 1.0, beta: 1.0, decay: DecayKind::Power };
        let f = gravity_predict_raw(&two_regions(2.0), &[2.0, 3.0], &p).unwrap();
        assert_eq!(f.flows()[[0, 1]], 3.0);
        assert_eq!(f.flows()[[0, 0]], 0.0);
    }

    #[test]
    fn doubling_masses_quadruples_flows() {
        let d = array![[0.0, 1.5, 2.0], [1.5, 0.0, 0.7], [2.0, 0.7, 0.0]];
        for decay in [DecayKind::Power, DecayKind::Exponential] {
            let p = GravityParams { k: 0.3, a: 1.0, b: 1.0, beta: 0.8, decay };
            let f1 = gravity_predict_raw(&d, &[1.0, 2.0, 5.0], &p).unwrap();
            let f2 = gravity_predict_raw(&d, &[2.0, 4.0, 10.0], &p).unwrap();
            for (a, b) in f1.flows().iter().zip(f2.flows()) {
                assert!((b - 4.0 * a).abs() <= 1e-12 * b.abs());
            }
        }
    }

    #[test]
    fn zero_decay_ignores_distance() {
        let p = GravityParams { k: 2.0, a: 0.5, b: 2.0, beta: 0.0, decay: DecayKind::Exponential };
        let f = gravity_predict_raw(&two_regions(9.0), &[4.0, 3.0], &p).unwrap();
        assert!((f.flows()[[0, 1]] - 2.0 * 2.0 * 9.0).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_in_k_and_decreasing_in_distance() {
        for decay in [DecayKind::Power, DecayKind::Exponential] {
            let p = GravityParams { k: 1.0, a: 0.7, b: 1.2, beta: 1.1, decay };
            let q = GravityParams { k: 3.5, ..p };
            let near = gravity_predict_raw(&two_regions(1.0), &[3.0, 4.0], &p).unwrap();
            let far = gravity_predict_raw(&two_regions(2.0), &[3.0, 4.0], &p).unwrap();
            let scaled = gravity_predict_raw(&two_regions(1.0), &[3.0, 4.0], &q).unwrap();
            assert!(far.flows()[[0, 1]] < near.flows()[[0, 1]]);
            assert!((scaled.flows()[[0, 1]] - 3.5 * near.flows()[[0, 1]]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_inputs() {
        let p = GravityParams { k: 1.0, a: 1.0, b: 1.0, beta: 1.0, decay: DecayKind::Power };
        assert!(gravity_predict_raw(&two_regions(1.0), &[0.0, 1.0], &p).is_err());
        assert!(gravity_predict_raw(&two_regions(1.0), &[1.0], &p).is_err());
    }

    #[test]
    fn single_pair_is_rank_deficient() {
        let d = two_regions(1.0);
        let f = array![[0.0, 5.0], [0.0, 0.0]];
        let m = [2.0, 3.0];
        let err = gravity_fit(&[FitSample { distance: &d, masses: &m, flows: &f }], DecayKind::Power).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
        let none = Array2::zeros((2, 2));
        assert!(gravity_fit(&[FitSample { distance: &d, masses: &m, flows: &none }], DecayKind::Power).is_err());
    }

    #[test]
    fn equal_masses_are_rank_deficient() {
        let d = array![[0.0, 1.0, 2.0], [1.0, 0.0, 1.5], [2.0, 1.5, 0.0]];
        let f = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 0.0 } else { 1.0 + (i + j) as f64 });
        let m = [5.0, 5.0, 5.0];
        let err =
            gravity_fit(&[FitSample { distance: &d, masses: &m, flows: &f }], DecayKind::Exponential).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn registry_names() {
        let r = gravity_registry();
        assert_eq!(r.names(), vec!["gm-p", "gm-e"]);
        assert_eq!(r.create("gm-e", ()).unwrap().decay(), DecayKind::Exponential);
        assert!(r.create("gm-x", ()).is_err());
    }
}
