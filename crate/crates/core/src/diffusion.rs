//! DDPM machinery: noise schedules, closed-form forward noising, x0-prediction
//! training with condition dropout, guided ancestral sampling.

use promo_nn::rng::{normal_vec, rng_from};
use promo_nn::{derive_seed, AdamW, AdamWConfig, Gradients, NnError, ParamStore, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("step count must be at least 1")]
    NoSteps,
    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("condition dropout must lie in [0, 1], got {0}")]
    Dropout(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

pub const LINEAR_BETA_START: f64 = 0.00085;
pub const LINEAR_BETA_END: f64 = 0.012;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// Noise levels for steps `t = 1..=T`; `alpha_bar(0)` is 1 by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => linear_schedule(steps),
            ScheduleKind::Cosine => cosine_schedule(steps),
        }
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        DiffusionSchedule { kind, betas, alpha_bars }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Timestep { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Coefficients of x0 and x_t in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }
}

pub fn linear_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(DiffusionError::NoSteps);
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                LINEAR_BETA_START
            } else {
                LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    Ok(DiffusionSchedule::from_betas(ScheduleKind::Linear, betas))
}

/// Unnormalized cosine-schedule signal level `cos^2(((t/T + s)/(1 + s)) pi/2)`.
pub fn cosine_level(t: f64, steps: usize) -> f64 {
    let s = COSINE_OFFSET;
    (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

pub fn cosine_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(DiffusionError::NoSteps);
    }
    let f0 = cosine_level(0.0, steps);
    let ab = |t: usize| cosine_level(t as f64, steps) / f0;
    let betas = (1..=steps).map(|t| (1.0 - ab(t) / ab(t - 1)).min(MAX_BETA)).collect();
    Ok(DiffusionSchedule::from_betas(ScheduleKind::Cosine, betas))
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn q_sample<E: Real>(x0: &[E], t: usize, schedule: &DiffusionSchedule, noise: &[E]) -> Result<Vec<E>> {
    schedule.check(t)?;
    if x0.len() != noise.len() {
        return Err(DiffusionError::Shape(format!("x0 has {} values, noise {}", x0.len(), noise.len())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (E::c(ab.sqrt()), E::c((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(noise).map(|(&x, &n)| a * x + b * n).collect())
}

/// Guided prediction `u + w (c - u)`, evaluated as `(1 - w) u + w c` so that
/// `w = 0` and `w = 1` reproduce the inputs bit for bit.
pub fn cfg_combine<E: Real>(uncond: &[E], cond: &[E], w: f64) -> Result<Vec<E>> {
    if uncond.len() != cond.len() {
        return Err(DiffusionError::Shape(format!("{} vs {} values", uncond.len(), cond.len())));
    }
    let (a, b) = (E::c(1.0 - w), E::c(w));
    Ok(uncond.iter().zip(cond).map(|(&u, &c)| a * u + b * c).collect())
}

/// One reverse step drawn from `q(x_{t-1} | x_t, x0_hat)`; no noise at `t = 1`.
pub fn posterior_step<E: Real>(
    x_t: &[E],
    x0_hat: &[E],
    t: usize,
    schedule: &DiffusionSchedule,
    noise: &[E],
) -> Result<Vec<E>> {
    schedule.check(t)?;
    if x_t.len() != x0_hat.len() || (t > 1 && noise.len() != x_t.len()) {
        return Err(DiffusionError::Shape("posterior_step operands differ in length".into()));
    }
    let (c0, ct) = schedule.posterior_coefficients(t);
    let (c0, ct) = (E::c(c0), E::c(ct));
    if t == 1 {
        return Ok(x_t.iter().zip(x0_hat).map(|(&x, &p)| c0 * p + ct * x).collect());
    }
    let sd = E::c(schedule.posterior_variance(t).sqrt());
    Ok(x_t.iter().zip(x0_hat).zip(noise).map(|((&x, &p), &n)| c0 * p + ct * x + sd * n).collect())
}

/// A network that predicts x0 from a batch of noised samples.
///
/// `cond[i] == None` is the null condition. The returned node must have the
/// same shape as `x_t`.
pub trait Denoiser<E: Real = f32> {
    type Condition;

    fn params(&self) -> &ParamStore<E>;

    fn params_mut(&mut self) -> &mut ParamStore<E>;

    fn forward(
        &self,
        tape: &mut Tape<'_, E>,
        x_t: Var,
        t: &[usize],
        cond: &[Option<&Self::Condition>],
    ) -> std::result::Result<Var, NnError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub w: f64,
    pub condition_dropout: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { w: 2.0, condition_dropout: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(DiffusionError::Dropout(self.condition_dropout));
        }
        if !self.w.is_finite() {
            return Err(DiffusionError::NonFinite("guidance weight".into()));
        }
        Ok(())
    }
}

/// Range applied to every x0 prediction during sampling.
pub const X0_CLAMP: f64 = 3.0;

fn predict<E: Real, D: Denoiser<E>>(
    den: &D,
    x: &[E],
    shape: &[usize],
    t: usize,
    cond: &[Option<&D::Condition>],
) -> Result<Vec<E>> {
    let mut tape = Tape::new(den.params(), false, 0);
    let xv = tape.leaf(Tensor::new(shape.to_vec(), x.to_vec())?);
    let ts = vec![t; shape[0]];
    let out = den.forward(&mut tape, xv, &ts, cond)?;
    if tape.shape(out) != shape {
        return Err(DiffusionError::Shape(format!("denoiser returned {:?} for input {:?}", tape.shape(out), shape)));
    }
    Ok(tape.value(out).data().to_vec())
}

/// Ancestral sampling for a batch; item `i` draws all its noise from `seeds[i]`
/// so results do not depend on how items are grouped into batches.
pub fn sample_batch<E: Real, D: Denoiser<E>>(
    den: &D,
    schedule: &DiffusionSchedule,
    conds: &[Option<&D::Condition>],
    w: f64,
    item_shape: &[usize],
    seeds: &[u64],
) -> Result<Tensor<E>> {
    if conds.len() != seeds.len() {
        return Err(DiffusionError::Shape("one seed per condition required".into()));
    }
    if seeds.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let n: usize = item_shape.iter().product();
    let mut shape = vec![seeds.len()];
    shape.extend_from_slice(item_shape);
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| rng_from(s)).collect();
    let mut x: Vec<E> = rngs.iter_mut().flat_map(|r| normal_vec::<E>(r, n)).collect();
    let nulls: Vec<Option<&D::Condition>> = vec![None; seeds.len()];
    let clamp = E::c(X0_CLAMP);
    for t in (1..=schedule.steps()).rev() {
        let mut x0 = if w == 0.0 {
            predict(den, &x, &shape, t, &nulls)?
        } else if w == 1.0 {
            predict(den, &x, &shape, t, conds)?
        } else {
            let u = predict(den, &x, &shape, t, &nulls)?;
            let c = predict(den, &x, &shape, t, conds)?;
            cfg_combine(&u, &c, w)?
        };
        for v in &mut x0 {
            *v = v.max(-clamp).min(clamp);
        }
        let noise: Vec<E> =
            if t > 1 { rngs.iter_mut().flat_map(|r| normal_vec::<E>(r, n)).collect() } else { Vec::new() };
        x = posterior_step(&x, &x0, t, schedule, &noise)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite(format!("sample at step {t}")));
        }
    }
    Ok(Tensor::new(shape, x)?)
}

pub fn sample<E: Real, D: Denoiser<E>>(
    den: &D,
    schedule: &DiffusionSchedule,
    cond: Option<&D::Condition>,
    w: f64,
    item_shape: &[usize],
    seed: u64,
) -> Result<Vec<E>> {
    Ok(sample_batch(den, schedule, &[cond], w, item_shape, &[seed])?.into_data())
}

const TAG_TAPE: u64 = 0x7A9E;

/// Draws for one training sample: timestep, whether its condition is dropped, and noise.
fn training_draws<E: Real>(seed: u64, i: usize, steps: usize, dropout: f64, n: usize) -> (usize, bool, Vec<E>) {
    let mut rng = rng_from(derive_seed(seed, &[i as u64]));
    let t = rng.gen_range(1..=steps);
    let drop = rng.gen::<f64>() < dropout;
    (t, drop, normal_vec(&mut rng, n))
}

/// Mean squared x0 error over a batch and its parameter gradients.
pub fn train_step<E: Real, D: Denoiser<E>>(
    den: &D,
    x0: &Tensor<E>,
    conds: &[&D::Condition],
    schedule: &DiffusionSchedule,
    condition_dropout: f64,
    seed: u64,
) -> Result<(f64, Gradients<E>)> {
    let b = x0.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    if conds.len() != b {
        return Err(DiffusionError::Shape(format!("{b} samples but {} conditions", conds.len())));
    }
    if !(0.0..=1.0).contains(&condition_dropout) {
        return Err(DiffusionError::Dropout(condition_dropout));
    }
    let n = x0.len() / b;
    let mut xt = Vec::with_capacity(x0.len());
    let mut ts = Vec::with_capacity(b);
    let mut cs = Vec::with_capacity(b);
    for i in 0..b {
        let (t, drop, noise) = training_draws::<E>(seed, i, schedule.steps(), condition_dropout, n);
        xt.extend(q_sample(&x0.data()[i * n..(i + 1) * n], t, schedule, &noise)?);
        ts.push(t);
        cs.push(if drop { None } else { Some(conds[i]) });
    }
    let mut tape = Tape::new(den.params(), true, derive_seed(seed, &[TAG_TAPE]));
    let xv = tape.leaf(Tensor::new(x0.shape().to_vec(), xt)?);
    let pred = den.forward(&mut tape, xv, &ts, &cs)?;
    if tape.shape(pred) != x0.shape() {
        return Err(DiffusionError::Shape(format!("denoiser returned {:?} for {:?}", tape.shape(pred), x0.shape())));
    }
    let target = tape.leaf(x0.clone());
    let loss = tape.mse(pred, target);
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(DiffusionError::NonFinite("training loss".into()));
    }
    let grads = tape.backward_scalar(loss)?;
    Ok((value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub condition_dropout: f64,
}

/// Shuffled minibatch AdamW loop; returns the mean training loss of each epoch.
pub fn train_loop<D: Denoiser<f32>>(
    den: &mut D,
    data: &Tensor<f32>,
    conds: &[D::Condition],
    schedule: &DiffusionSchedule,
    opts: &TrainOptions,
    seed: u64,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>>
where
    D::Condition: Clone,
{
    let n = data.shape().first().copied().unwrap_or(0);
    if conds.len() != n {
        return Err(DiffusionError::Shape(format!("{n} samples but {} conditions", conds.len())));
    }
    train_loop_with(den, data, |_, i| conds[i].clone(), schedule, opts, seed, on_epoch)
}

/// Like [`train_loop`], with the condition of sample `i` in epoch `e` built
/// by `cond(e, i)`.
pub fn train_loop_with<D: Denoiser<f32>>(
    den: &mut D,
    data: &Tensor<f32>,
    mut cond: impl FnMut(usize, usize) -> D::Condition,
    schedule: &DiffusionSchedule,
    opts: &TrainOptions,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let n = data.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let item = data.len() / n;
    let batch_size = opts.batch_size.max(1);
    let mut opt = AdamW::new(opts.optimizer, den.params());
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(derive_seed(seed, &[epoch as u64, 0])));
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let mut x = Vec::with_capacity(chunk.len() * item);
            for &i in chunk {
                x.extend_from_slice(&data.data()[i * item..(i + 1) * item]);
            }
            let mut shape = data.shape().to_vec();
            shape[0] = chunk.len();
            let batch = Tensor::new(shape, x)?;
            let owned: Vec<D::Condition> = chunk.iter().map(|&i| cond(epoch, i)).collect();
            let cs: Vec<&D::Condition> = owned.iter().collect();
            let step_seed = derive_seed(seed, &[epoch as u64, 1, bi as u64]);
            let (loss, grads) = train_step(den, &batch, &cs, schedule, opts.condition_dropout, step_seed)?;
            opt.step(den.params_mut(), &grads)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(history)
}
