//! Reverse-process samplers and multi-sample averaging.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::denoiser::CityContext;
use crate::diffusion::{standard_normal, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph_model::{inverse_transform, ODMatrix};
use crate::registry::Registry;
use crate::rng::{stream_rng, Stream};

/// Maps `F^T` to a log-space estimate of `F⁰`.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// `rng` feeds any noise injected after the initial state.
    fn denoise(
        &self,
        model: &dyn NoisePredictor,
        ctx: &CityContext,
        sched: &NoiseSchedule,
        start: Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>>;
}

fn ensure_finite(x: &Array2<f64>, t: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite sampler state at t = {t}")))
    }
}

/// One deterministic jump from `t` to `to < t` given a noise estimate:
/// `x̂₀ = (F^t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, then `√ᾱ_to·x̂₀ + √(1−ᾱ_to)·ε̂`.
pub fn ddim_jump(xt: &Array2<f64>, eps: &Array2<f64>, t: usize, to: usize, sched: &NoiseSchedule) -> Array2<f64> {
    ddim_jump_clipped(xt, eps, t, to, sched, None)
}

/// [`ddim_jump`] with `x̂₀` clamped to `range`. When clamping changes `x̂₀`
/// the noise estimate is recomputed from the clamped value so the state
/// stays consistent.
pub fn ddim_jump_clipped(
    xt: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
    to: usize,
    sched: &NoiseSchedule,
    range: Option<(f64, f64)>,
) -> Array2<f64> {
    let ab = sched.alpha_bar(t);
    let mut x0 = (xt - &(eps * (1.0 - ab).sqrt())) / ab.sqrt();
    let ab_to = sched.alpha_bar(to);
    let Some((lo, hi)) = range else {
        return x0 * ab_to.sqrt() + eps * (1.0 - ab_to).sqrt();
    };
    x0.mapv_inplace(|v| v.clamp(lo, hi));
    let eps = (xt - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
    x0 * ab_to.sqrt() + eps * (1.0 - ab_to).sqrt()
}

/// Noise estimate consistent with `x̂₀` clamped to `[lo, hi]`.
fn clamp_noise(xt: &Array2<f64>, eps: &Array2<f64>, t: usize, sched: &NoiseSchedule, lo: f64, hi: f64) -> Array2<f64> {
    let ab = sched.alpha_bar(t);
    let x0 = ((xt - &(eps * (1.0 - ab).sqrt())) / ab.sqrt()).mapv(|v| v.clamp(lo, hi));
    (xt - &(x0 * ab.sqrt())) / (1.0 - ab).sqrt()
}

/// Deterministic strided sampler (η = 0) over `steps` evenly spaced levels.
#[derive(Clone, Debug)]
pub struct Ddim {
    pub steps: usize,
    /// Optional clamp on the intermediate clean-signal estimate.
    pub x0_range: Option<(f64, f64)>,
}

impl Ddim {
    pub fn new(steps: usize) -> Self {
        Self { steps, x0_range: None }
    }

    pub fn stride(&self, sched: &NoiseSchedule) -> Result<usize> {
        if self.steps == 0 || !sched.steps().is_multiple_of(self.steps) {
            return Err(Error::Invalid(format!(
                "sampling steps {} must divide the diffusion steps {}",
                self.steps,
                sched.steps()
            )));
        }
        Ok(sched.steps() / self.steps)
    }
}

impl Sampler for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn denoise(
        &self,
        model: &dyn NoisePredictor,
        ctx: &CityContext,
        sched: &NoiseSchedule,
        start: Array2<f64>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>> {
        let stride = self.stride(sched)?;
        let mut x = start;
        let mut t = sched.steps();
        while t > 0 {
            let eps = model.predict_noise(ctx, &x, t)?;
            x = ddim_jump_clipped(&x, &eps, t, t - stride, sched, self.x0_range);
            ensure_finite(&x, t)?;
            t -= stride;
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReverseVariance {
    /// `(1 − ᾱ_t)`, the variance written in the reverse-process density.
    Printed,
    /// The forward-posterior variance `β_t·(1 − ᾱ_{t−1})/(1 − ᾱ_t)`.
    Posterior,
}

/// Ancestral sampler visiting every step `T, …, 1` with mean
/// `(F^t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`; no noise is added on the final step.
#[derive(Clone, Debug)]
pub struct Ddpm {
    pub variance: ReverseVariance,
    /// Same clamp as [`Ddim::x0_range`]; `ε̂` is re-derived from the
    /// clamped estimate before the mean is formed.
    pub x0_range: Option<(f64, f64)>,
}

impl Sampler for Ddpm {
    fn name(&self) -> &'static str {
        "ddpm"
    }

    fn denoise(
        &self,
        model: &dyn NoisePredictor,
        ctx: &CityContext,
        sched: &NoiseSchedule,
        start: Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>> {
        let n = start.nrows();
        let mut x = start;
        for t in (1..=sched.steps()).rev() {
            let mut eps = model.predict_noise(ctx, &x, t)?;
            if let Some((lo, hi)) = self.x0_range {
                eps = clamp_noise(&x, &eps, t, sched, lo, hi);
            }
            let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
            x = (&x - &(eps * coef)) / sched.alpha(t).sqrt();
            if t > 1 {
                let var = match self.variance {
                    ReverseVariance::Printed => 1.0 - sched.alpha_bar(t),
                    ReverseVariance::Posterior => {
                        sched.beta(t) * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))
                    }
                };
                x = x + standard_normal(n, rng) * var.sqrt();
            }
            ensure_finite(&x, t)?;
        }
        Ok(x)
    }
}

/// Construction arguments shared by the registered samplers.
#[derive(Clone, Copy, Debug)]
pub struct SamplerArgs {
    /// Strided step count; ignored by `ddpm`.
    pub steps: usize,
    pub x0_range: Option<(f64, f64)>,
}

pub fn sampler_registry() -> Registry<dyn Sampler, SamplerArgs> {
    let mut r: Registry<dyn Sampler, SamplerArgs> = Registry::new("sampler");
    r.register("ddim", |a| Box::new(Ddim { steps: a.steps, x0_range: a.x0_range }));
    r.register("ddpm", |a| Box::new(Ddpm { variance: ReverseVariance::Printed, x0_range: a.x0_range }));
    r
}

/// One generated matrix in raw flow space: `F^T` from the `Sample` stream
/// at `index`, denoised, clamped at zero and exponentiated back.
pub fn generate(
    model: &dyn NoisePredictor,
    sampler: &dyn Sampler,
    ctx: &CityContext,
    sched: &NoiseSchedule,
    seed: u64,
    index: u64,
) -> Result<ODMatrix> {
    let mut rng = stream_rng(seed, Stream::Sample, index);
    let start = standard_normal(ctx.n_regions(), &mut rng);
    let x0 = sampler.denoise(model, ctx, sched, start, &mut rng)?;
    inverse_transform(&ODMatrix::log(x0.mapv(|v| v.max(0.0)))?)
}

/// Mean of `samples` generated matrices (sample indices `0..samples`),
/// averaged in raw space. Samples run in parallel; the sum is accumulated in
/// index order.
pub fn generate_averaged(
    model: &dyn NoisePredictor,
    sampler: &dyn Sampler,
    ctx: &CityContext,
    sched: &NoiseSchedule,
    samples: usize,
    seed: u64,
) -> Result<ODMatrix> {
    if samples == 0 {
        return Err(Error::Invalid("at least one sample is required".into()));
    }
    let runs: Vec<ODMatrix> = (0..samples as u64)
        .into_par_iter()
        .map(|k| generate(model, sampler, ctx, sched, seed, k))
        .collect::<Result<_>>()?;
    average(&runs)
}

/// Elementwise mean of raw matrices, summed in slice order.
pub fn average(runs: &[ODMatrix]) -> Result<ODMatrix> {
    let first = runs.first().ok_or_else(|| Error::Invalid("nothing to average".into()))?;
    let mut acc = Array2::<f64>::zeros(first.flows().dim());
    for r in runs {
        if r.flows().dim() != acc.dim() {
            return Err(Error::Shape("averaged matrices differ in size".into()));
        }
        acc += r.flows();
    }
    ODMatrix::raw(acc / runs.len() as f64)
}
