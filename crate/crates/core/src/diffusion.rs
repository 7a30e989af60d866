//! Conditional DDPM: linear schedule, ε-prediction loss and ancestral sampling.
//!
//! Images enter and leave in `[0, 1]`; the diffusion itself runs on `[-1, 1]`.

use crate::blocks::PromptBundle;
use crate::error::{Error, Result};
use crate::tensor::optim::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::wnenet::{PromptVars, WneNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-step variances; index `t - 1` holds step `t` for `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linearly spaced `beta` from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Contract("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Contract(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
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

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `ᾱ_{t-1}` with `ᾱ_0 = 1`.
    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 { 1.0 } else { self.alpha_bar[t - 2] }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
pub fn q_sample<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

pub fn to_signed<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| v + v - T::one())
}

pub fn from_signed<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| ((v + T::one()) * T::lit(0.5)).max(T::zero()).min(T::one()))
}

/// A noise predictor that can be placed on a graph.
pub trait EpsModel<T: Real> {
    fn predict(&self, g: &mut Graph<'_, T>, x_t: Var, x_d: Var, t: usize, prompts: Option<&PromptBundle<T>>) -> Result<Var>;
}

impl<T: Real> EpsModel<T> for WneNet {
    fn predict(&self, g: &mut Graph<'_, T>, x_t: Var, x_d: Var, t: usize, prompts: Option<&PromptBundle<T>>) -> Result<Var> {
        let p = prompts.map(|b| PromptVars::constant(g, b));
        self.forward(g, x_t, x_d, t, p)
    }
}

/// One training pair with cached prompts; images in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TrainItem<T> {
    pub clean: Tensor<T>,
    pub degraded: Tensor<T>,
    pub prompts: Option<PromptBundle<T>>,
}

/// `mean((eps - ε_θ(q_sample(x0, t, eps); x_d, t, prompts))²)` for a fixed draw.
pub fn diffusion_loss<T: Real, M: EpsModel<T>>(
    g: &mut Graph<'_, T>,
    model: &M,
    item: &TrainItem<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let x_t = q_sample(&to_signed(&item.clean), t, eps, schedule)?;
    let x_t = g.constant(x_t);
    let x_d = g.constant(to_signed(&item.degraded));
    let pred = model.predict(g, x_t, x_d, t, item.prompts.as_ref())?;
    let target = g.constant(eps.clone());
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub train_steps: usize,
    pub batch: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// Clip the predicted clean image to `[-1, 1]` before the posterior step.
    pub clip_x0: bool,
    /// Draw `x_T` from `q(x_T | x_d)` instead of `N(0, I)`.
    pub start_from_condition: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps_t: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-3,
            min_lr: 1e-6,
            train_steps: 20_000,
            batch: 2,
            grad_clip: 1.0,
            weight_decay: 1e-4,
            clip_x0: true,
            start_from_condition: true,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_t == 0 {
            return Err(Error::config("diffusion.steps_t", "must be positive"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end) {
            return Err(Error::config("diffusion.beta_start", "need 0 < beta_start <= beta_end"));
        }
        if !(self.beta_end < 1.0) {
            return Err(Error::config("diffusion.beta_end", "must be below 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("diffusion.batch", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("diffusion.lr", "need 0 <= min_lr <= lr"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("diffusion.grad_clip", "must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps_t, self.beta_start, self.beta_end)
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions { clip_x0: self.clip_x0, start_from_condition: self.start_from_condition }
    }
}

/// Optimizer state for the restorer.
#[derive(Clone, Debug)]
pub struct DiffusionTrainer {
    pub schedule: NoiseSchedule,
    pub lr: CosineSchedule,
    pub grad_clip: f64,
    opt: AdamW,
    step: usize,
}

impl DiffusionTrainer {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DiffusionTrainer {
            schedule: cfg.schedule()?,
            lr: CosineSchedule { base: cfg.lr, min: cfg.min_lr, total: cfg.train_steps },
            grad_clip: cfg.grad_clip,
            opt: AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() }),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.lr.lr(self.step)
    }

    /// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per item, averages the loss
    /// over the batch and takes one AdamW step. Returns the batch loss.
    pub fn training_step<T: Real, M: EpsModel<T>>(
        &mut self,
        store: &mut ParamStore<T>,
        model: &M,
        batch: &[&TrainItem<T>],
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("training step needs a non-empty batch".into()));
        }
        store.zero_grad();
        let mut total = 0.0;
        for item in batch {
            let t = rng.random_range(1..=self.schedule.steps());
            let eps = Tensor::<T>::randn(item.clean.shape().to_vec(), rng);
            let grads = {
                let mut g = Graph::with_params(store);
                let loss = diffusion_loss(&mut g, model, item, t, &eps, &self.schedule)?;
                let loss = g.scale(loss, T::lit(1.0 / batch.len() as f64))?;
                total += g.value(loss).data()[0].as_f64();
                g.backward(loss)?
            };
            store.accumulate(&grads);
        }
        clip_grad_norm(store, self.grad_clip);
        let lr = self.lr.lr(self.step);
        self.opt.step(store, lr);
        self.step += 1;
        Ok(total)
    }
}

/// Seeded standard normal draw; the first draw of every sampling run.
pub fn initial_noise<T: Real>(shape: &[usize], seed: u64) -> (Tensor<T>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::randn(shape.to_vec(), &mut rng), rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub clip_x0: bool,
    pub start_from_condition: bool,
}

/// `x_T` for [`p_sample_loop`]: the seeded noise `z` itself, or
/// `q_sample(x_d, T, z)` when starting from the condition. With a short
/// schedule `ᾱ_T` is far from zero and the trained model expects some of the
/// image in `x_T`; the degraded input is the closest stand-in for it.
pub fn initial_state<T: Real>(
    degraded: &Tensor<T>,
    schedule: &NoiseSchedule,
    start_from_condition: bool,
    seed: u64,
) -> Result<(Tensor<T>, ChaCha8Rng)> {
    let (z, rng) = initial_noise::<T>(degraded.shape(), seed);
    if !start_from_condition {
        return Ok((z, rng));
    }
    Ok((q_sample(&to_signed(degraded), schedule.steps(), &z, schedule)?, rng))
}

/// Ancestral sampling with `σ_t² = β_t`. Each step forms
/// `x̂0 = (x_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`, optionally clipped, and moves to the
/// posterior mean of `q(x_{t-1} | x_t, x̂0)`. Returns the image in `[0, 1]`.
pub fn p_sample_loop<T: Real, M: EpsModel<T>>(
    model: &M,
    store: &ParamStore<T>,
    degraded: &Tensor<T>,
    prompts: Option<&PromptBundle<T>>,
    schedule: &NoiseSchedule,
    opts: SampleOptions,
    seed: u64,
) -> Result<Tensor<T>> {
    let (mut x, mut rng) = initial_state(degraded, schedule, opts.start_from_condition, seed)?;
    let x_d = to_signed(degraded);
    let mut x0 = x.clone();
    for t in (1..=schedule.steps()).rev() {
        let eps = {
            let mut g = Graph::with_params(store);
            let xt = g.constant(x.clone());
            let xd = g.constant(x_d.clone());
            let out = model.predict(&mut g, xt, xd, t, prompts)?;
            g.value(out).clone()
        };
        if eps.shape() != x.shape() {
            return Err(Error::Dimension(format!("noise estimate {:?} for state {:?}", eps.shape(), x.shape())));
        }
        let ab = schedule.alpha_bar(t);
        let (ab_prev, beta, alpha) = (schedule.alpha_bar_prev(t), schedule.beta(t), schedule.alpha(t));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0 = x.zip_map(&eps, |xv, e| {
            let v = (xv.as_f64() - sb * e.as_f64()) / sa;
            T::lit(if opts.clip_x0 { v.clamp(-1.0, 1.0) } else { v })
        })?;
        if t == 1 {
            break;
        }
        let c0 = beta * ab_prev.sqrt() / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = beta.sqrt();
        let noise = Tensor::<T>::randn(x.shape().to_vec(), &mut rng);
        let mean = x0.zip_map(&x, |a, b| T::lit(c0 * a.as_f64() + ct * b.as_f64()))?;
        x = mean.zip_map(&noise, |m, z| m + T::lit(sigma) * z)?;
    }
    Ok(from_signed(&x0))
}
