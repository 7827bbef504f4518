//! Noise schedule, forward corruption and the training loop.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use sedan_tensor::{AdamW, AdamWConfig, BoundParams, ParamStore, Tape, Tensor, TensorError, Var};

use crate::denoiser::{CityContext, Denoiser};
use crate::error::{Error, Result};
use crate::graph_model::{log_transform, City, Dataset, Split};
use crate::rng::{stream_rng, Stream};

/// Per-step tables for `t = 1..=T`; `ᾱ_0 = 1` by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const COSINE_OFFSET: f64 = 0.008;

/// Cosine schedule with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
///
/// `β_t = 1 − f(t)/f(t−1)` is clipped to `[1e-8, 0.999]` and `ᾱ` is then
/// rebuilt as the running product of `1 − β_t`, so the stored tables satisfy
/// `ᾱ_t = ᾱ_{t−1}·α_t` exactly.
pub fn cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Invalid(format!("a schedule needs T >= 2, got {steps}")));
    }
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let mut beta = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for t in 1..=steps {
        let b = (1.0 - f(t) / f(t - 1)).clamp(1e-8, 0.999);
        beta.push(b);
        alpha.push(1.0 - b);
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Defined for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `F^t = √ᾱ_t·F⁰ + √(1−ᾱ_t)·ε`, entrywise.
pub fn q_sample(clean: &Array2<f64>, t: usize, eps: &Array2<f64>, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    if clean.dim() != eps.dim() {
        return Err(Error::Shape(format!("signal {:?} vs noise {:?}", clean.dim(), eps.dim())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(clean * a + eps * b)
}

pub fn standard_normal(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, n), || rng.sample(StandardNormal))
}

/// Anything that estimates the noise in a diffused OD matrix.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, ctx: &CityContext, noisy: &Array2<f64>, t: usize) -> Result<Array2<f64>>;
}

/// A predictor whose parameters can be fitted by gradient descent.
pub trait Trainable: Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records the noise estimate on `tape`, returning an `[N, N]` node.
    fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        ctx: &CityContext,
        noisy: &Array2<f64>,
        t: usize,
    ) -> Result<Var>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, ctx: &CityContext, noisy: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        Denoiser::predict_noise(self, ctx, noisy, t)
    }
}

impl Trainable for Denoiser {
    fn params(&self) -> &ParamStore {
        Denoiser::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        Denoiser::params_mut(self)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        ctx: &CityContext,
        noisy: &Array2<f64>,
        t: usize,
    ) -> Result<Var> {
        Denoiser::forward(self, tape, params, ctx, noisy, t)
    }
}

/// Loss value and per-parameter gradients.
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: IndexMap<String, Tensor>,
}

impl LossAndGrads {
    pub fn grad_norm(&self) -> f64 {
        self.grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// `mean_ij (ε − ε̂)²` for one noised matrix, with gradients. A model whose
/// output does not depend on its parameters yields empty gradients.
pub fn training_loss<M: Trainable + ?Sized>(
    model: &M,
    ctx: &CityContext,
    clean: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<LossAndGrads> {
    let noisy = q_sample(clean, t, eps, sched)?;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let pred = model.forward(&mut tape, &bound, ctx, &noisy, t)?;
    let target = tape.constant(Tensor::new(vec![eps.nrows(), eps.ncols()], eps.iter().copied().collect())?);
    let diff = tape.sub(target, pred)?;
    let sq = tape.mul(diff, diff)?;
    let loss_var = tape.mean_all(sq);
    let loss = tape.value(loss_var).item().expect("scalar");
    if !tape.requires_grad(loss_var) {
        return Ok(LossAndGrads { loss, grads: IndexMap::new() });
    }
    let grads = match tape.backward(loss_var) {
        Ok(g) => g,
        Err(TensorError::Detached) => return Ok(LossAndGrads { loss, grads: IndexMap::new() }),
        Err(e) => return Err(e.into()),
    };
    let mut out = IndexMap::new();
    for (name, var) in bound.iter() {
        out.insert(name.to_string(), grads.get(var)?);
    }
    Ok(LossAndGrads { loss, grads: out })
}

/// One optimisation step on one city: draws `t ~ U{1..T}` and `ε ~ N(0, I)`
/// from `rng`, then applies AdamW.
pub fn train_step<M: Trainable + ?Sized>(
    model: &mut M,
    opt: &mut AdamW,
    ctx: &CityContext,
    clean: &Array2<f64>,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = rng.random_range(1..=sched.steps());
    let eps = standard_normal(clean.nrows(), rng);
    let lg = training_loss(&*model, ctx, clean, t, &eps, sched)?;
    let gnorm = lg.grad_norm();
    if !lg.loss.is_finite() || !gnorm.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite training loss {} at t = {t} (gradient norm {gnorm})",
            lg.loss
        )));
    }
    opt.step(model.params_mut(), &lg.grads)?;
    Ok(lg.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub diffusion_steps: usize,
    pub epochs: usize,
    /// Stops after this many optimisation steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Noise levels per validation city.
    pub val_levels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 1000,
            epochs: 50,
            max_steps: None,
            optimizer: AdamWConfig::default(),
            seed: 0,
            val_levels: 8,
        }
    }
}

/// A city prepared for the network: normalized context and log flows.
pub struct PreparedCity {
    pub id: String,
    pub ctx: CityContext,
    pub clean: Array2<f64>,
}

impl PreparedCity {
    pub fn new(city: &City) -> Result<Self> {
        Ok(Self {
            id: city.id().to_string(),
            ctx: CityContext::new(&city.graph),
            clean: log_transform(&city.od)?.into_flows(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub steps_done: u64,
    pub history: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    pub best_params: ParamStore,
}

impl TrainState {
    pub fn fresh(params: ParamStore, optimizer: AdamWConfig) -> Self {
        Self {
            best_params: params.clone(),
            params,
            optimizer: AdamW::new(optimizer),
            steps_done: 0,
            history: Vec::new(),
            best_val: None,
        }
    }
}

/// Mean loss over fixed noise levels and fixed noise per validation city.
pub fn validation_loss<M: Trainable + ?Sized>(
    model: &M,
    cities: &[PreparedCity],
    sched: &NoiseSchedule,
    levels: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if cities.is_empty() || levels == 0 {
        return Ok(None);
    }
    let mut total = 0.0;
    for (c, city) in cities.iter().enumerate() {
        for k in 0..levels {
            let t = (((2 * k + 1) * sched.steps()) / (2 * levels)).max(1);
            let mut rng = stream_rng(seed, Stream::Validation, (c * levels + k) as u64);
            let eps = standard_normal(city.clean.nrows(), &mut rng);
            total += training_loss(model, &city.ctx, &city.clean, t, &eps, sched)?.loss;
        }
    }
    Ok(Some(total / (cities.len() * levels) as f64))
}

/// Training order for `epoch`: a seeded shuffle of `0..n`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::EpochOrder, epoch as u64));
    order
}

/// Runs (or resumes) training. Step `s` always draws from the `TrainStep`
/// stream at index `s`, so a resumed run continues bit-for-bit.
///
/// `on_epoch` sees each finished epoch and the state after it.
pub fn train<M: Trainable>(
    model: &mut M,
    state: &mut TrainState,
    train_set: &[PreparedCity],
    val_set: &[PreparedCity],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    if train_set.is_empty() {
        return Err(Error::Invalid("the training split is empty".into()));
    }
    if sched.steps() != cfg.diffusion_steps {
        return Err(Error::Invalid("schedule length differs from the configured step count".into()));
    }
    *model.params_mut() = state.params.clone();
    let n = train_set.len() as u64;
    let budget = cfg.max_steps.unwrap_or(u64::MAX).min(cfg.epochs as u64 * n);
    while state.steps_done < budget {
        let epoch = (state.steps_done / n) as usize;
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut pos = (state.steps_done % n) as usize;
        let mut sum = 0.0;
        let mut count = 0usize;
        while pos < train_set.len() && state.steps_done < budget {
            let city = &train_set[order[pos]];
            let mut rng = stream_rng(cfg.seed, Stream::TrainStep, state.steps_done);
            let loss = train_step(model, &mut state.optimizer, &city.ctx, &city.clean, sched, &mut rng).map_err(
                |e| match e {
                    Error::Numerical(m) => {
                        Error::Numerical(format!("{m} (city {}, step {})", city.id, state.steps_done))
                    }
                    other => other,
                },
            )?;
            sum += loss;
            count += 1;
            pos += 1;
            state.steps_done += 1;
        }
        state.params = model.params().clone();
        let val = validation_loss(&*model, val_set, sched, cfg.val_levels, cfg.seed)?;
        match (val, state.best_val) {
            (Some(v), Some(b)) if v >= b => {}
            (Some(v), _) => {
                state.best_val = Some(v);
                state.best_params = state.params.clone();
            }
            (None, _) => state.best_params = state.params.clone(),
        }
        let record =
            EpochRecord { epoch, steps: state.steps_done, train_loss: sum / count.max(1) as f64, val_loss: val };
        state.history.push(record.clone());
        on_epoch(&record, state)?;
    }
    Ok(())
}

/// Train/val cities prepared from an already normalized dataset.
pub fn prepare_split(ds: &Dataset, split: Split) -> Result<Vec<PreparedCity>> {
    if !ds.is_normalized() {
        return Err(Error::Invalid("normalize the dataset before preparing it for the network".into()));
    }
    ds.split(split).map(PreparedCity::new).collect()
}

/// `[0, largest log flow]` over the given cities, used to clamp the
/// sampler's clean-signal estimate to values seen in training.
pub fn log_flow_range(cities: &[PreparedCity]) -> Result<(f64, f64)> {
    let hi = cities.iter().flat_map(|c| c.clean.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    if !hi.is_finite() {
        return Err(Error::Invalid("no flows to take a range from".into()));
    }
    Ok((0.0, hi.max(0.0)))
}
