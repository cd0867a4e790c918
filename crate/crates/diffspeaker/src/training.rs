//! Reconstruction + velocity losses, AdamW, and the training step with
//! per-item diffusion-step sampling and condition dropout.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::denoiser::{Denoiser, DenoiserParams};
use crate::diffusion::{forward_noise, standard_normal, DiffusionSchedule};
use crate::{Error, Motion, Result};

/// (1/T) sum_t ||x0_t - x0_hat_t||^2, squared entries summed over V*3.
pub fn rec_loss(x0: &Motion, x0_hat: &Motion) -> Result<f64> {
    if x0.raw_dim() != x0_hat.raw_dim() {
        return Err(Error::ShapeMismatch("rec_loss shapes differ".into()));
    }
    let t = x0.nrows() as f64;
    let sq = (x0 - x0_hat).mapv(|v| v * v).sum();
    Ok(sq / t)
}

/// (1/T) sum_{t>=2} ||(x0_{t-1} - x0_t) - (x0_hat_{t-1} - x0_hat_t)||^2.
/// The first frame has no predecessor; T < 2 yields 0.
pub fn vel_loss(x0: &Motion, x0_hat: &Motion) -> Result<f64> {
    if x0.raw_dim() != x0_hat.raw_dim() {
        return Err(Error::ShapeMismatch("vel_loss shapes differ".into()));
    }
    let t = x0.nrows();
    if t < 2 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 1..t {
        let d: f64 = x0
            .row(i - 1)
            .iter()
            .zip(x0.row(i).iter())
            .zip(x0_hat.row(i - 1).iter().zip(x0_hat.row(i).iter()))
            .map(|((a_prev, a), (b_prev, b))| {
                let v = (a_prev - a) - (b_prev - b);
                v * v
            })
            .sum();
        acc += d;
    }
    Ok(acc / t as f64)
}

pub fn total_loss(x0: &Motion, x0_hat: &Motion, lambda1: f64, lambda2: f64) -> Result<f64> {
    Ok(lambda1 * rec_loss(x0, x0_hat)? + lambda2 * vel_loss(x0, x0_hat)?)
}

/// d(total_loss)/d(x0_hat).
pub fn total_loss_grad(x0: &Motion, x0_hat: &Motion, lambda1: f64, lambda2: f64) -> Result<Motion> {
    if x0.raw_dim() != x0_hat.raw_dim() {
        return Err(Error::ShapeMismatch("loss grad shapes differ".into()));
    }
    let t = x0.nrows();
    let tf = t as f64;
    // rec: (2/T)(x0_hat - x0)
    let mut grad = (x0_hat - x0) * (2.0 * lambda1 / tf);
    if t >= 2 && lambda2 != 0.0 {
        // v_i = (x0_{i-1} - x0_i) - (x0_hat_{i-1} - x0_hat_i), i in 1..T
        // dL/dx0_hat_i = (2/T)(v_i - v_{i+1}) with out-of-range v = 0
        let cols = x0.ncols();
        let mut v = Array2::zeros((t, cols)); // v[0] unused, stays 0
        for i in 1..t {
            for j in 0..cols {
                v[[i, j]] =
                    (x0[[i - 1, j]] - x0[[i, j]]) - (x0_hat[[i - 1, j]] - x0_hat[[i, j]]);
            }
        }
        for i in 0..t {
            for j in 0..cols {
                let cur = if i >= 1 { v[[i, j]] } else { 0.0 };
                let next = if i + 1 < t { v[[i + 1, j]] } else { 0.0 };
                grad[[i, j]] += (2.0 * lambda2 / tf) * (cur - next);
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Probability of nulling the audio for an item (unconditional training).
    pub uncond_prob: f64,
    pub weight_decay: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 10,
            lambda1: 1.0,
            lambda2: 1.0,
            uncond_prob: 0.1,
            weight_decay: 1e-4,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate < 0.0 {
            return Err(Error::Config("batch_size must be positive, learning_rate >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Config("uncond_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Decoupled weight-decay Adam over the canonical flat parameter layout.
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(param_count: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut DenoiserParams, grads: &DenoiserParams, lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.t += 1;
        let g = grads.to_flat();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut off = 0usize;
        params.visit_mut(&mut |_, s| {
            for p in s.iter_mut() {
                let gi = g[off];
                self.m[off] = self.beta1 * self.m[off] + (1.0 - self.beta1) * gi;
                self.v[off] = self.beta2 * self.v[off] + (1.0 - self.beta2) * gi * gi;
                let m_hat = self.m[off] / bc1;
                let v_hat = self.v[off] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
                off += 1;
            }
        });
    }
}

/// One training item: per-frame audio features (T, D), clean motion
/// (T, V*3) and the subject index.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub audio: Array2<f64>,
    pub motion: Motion,
    pub style_k: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub rec: f64,
    pub vel: f64,
    /// Items trained with nulled audio this step.
    pub uncond_items: usize,
}

/// Per-item loss and gradient, at a fixed diffusion step and noise draw.
fn item_gradients(
    denoiser: &Denoiser,
    item: &TrainItem,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, f64, f64, bool, DenoiserParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=schedule.steps());
    let eps = standard_normal(item.motion.nrows(), item.motion.ncols(), &mut rng);
    let x_n = forward_noise(&item.motion, n, &eps, schedule)?;
    let uncond = rng.random_range(0.0..1.0) < cfg.uncond_prob;
    let audio = if uncond {
        Array2::zeros(item.audio.raw_dim())
    } else {
        item.audio.clone()
    };
    let (x0_hat, cache) = denoiser.denoise_full(&x_n, &audio, item.style_k, n)?;
    let rec = rec_loss(&item.motion, &x0_hat)?;
    let vel = vel_loss(&item.motion, &x0_hat)?;
    let loss = cfg.lambda1 * rec + cfg.lambda2 * vel;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at diffusion step {n} (rec={rec}, vel={vel})"
        )));
    }
    let d_x_hat = total_loss_grad(&item.motion, &x0_hat, cfg.lambda1, cfg.lambda2)?;
    let grads = denoiser.backward(&cache, &d_x_hat);
    Ok((loss, rec, vel, uncond, grads))
}

/// Batch gradients averaged over items. Items are processed in parallel
/// when the `parallel` feature is enabled; reduction order is fixed by
/// item index, so the result does not depend on thread scheduling.
pub fn batch_gradients(
    denoiser: &Denoiser,
    batch: &[TrainItem],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(StepStats, DenoiserParams)> {
    let seeds: Vec<u64> = (0..batch.len())
        .map(|i| step_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64))
        .collect();
    #[cfg(feature = "parallel")]
    let results: Vec<_> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(item, &seed)| item_gradients(denoiser, item, schedule, cfg, seed))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = batch
        .iter()
        .zip(seeds.iter())
        .map(|(item, &seed)| item_gradients(denoiser, item, schedule, cfg, seed))
        .collect();
    reduce_item_results(denoiser, batch.len(), results)
}

/// Sequential twin of [`batch_gradients`], kept unconditionally for the
/// latency bench suite.
pub fn batch_gradients_seq(
    denoiser: &Denoiser,
    batch: &[TrainItem],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(StepStats, DenoiserParams)> {
    let seeds: Vec<u64> = (0..batch.len())
        .map(|i| step_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64))
        .collect();
    let results: Vec<_> = batch
        .iter()
        .zip(seeds.iter())
        .map(|(item, &seed)| item_gradients(denoiser, item, schedule, cfg, seed))
        .collect();
    reduce_item_results(denoiser, batch.len(), results)
}

#[allow(clippy::type_complexity)]
fn reduce_item_results(
    denoiser: &Denoiser,
    count: usize,
    results: Vec<Result<(f64, f64, f64, bool, DenoiserParams)>>,
) -> Result<(StepStats, DenoiserParams)> {
    let mut acc = DenoiserParams::zeros(&denoiser.config);
    let mut stats = StepStats {
        loss: 0.0,
        rec: 0.0,
        vel: 0.0,
        uncond_items: 0,
    };
    for r in results {
        let (loss, rec, vel, uncond, grads) = r?;
        stats.loss += loss;
        stats.rec += rec;
        stats.vel += vel;
        stats.uncond_items += uncond as usize;
        acc.axpy(1.0, &grads);
    }
    let inv = 1.0 / count as f64;
    stats.loss *= inv;
    stats.rec *= inv;
    stats.vel *= inv;
    acc.scale(inv);
    Ok((stats, acc))
}

/// One optimizer step over a batch. `step_seed` fixes the per-item
/// diffusion steps, noise draws and dropout decisions.
pub fn train_step(
    denoiser: &mut Denoiser,
    batch: &[TrainItem],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    step_seed: u64,
) -> Result<StepStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (stats, grads) = batch_gradients(denoiser, batch, schedule, cfg, step_seed)?;
    opt.step(&mut denoiser.params, &grads, cfg.learning_rate);
    if !denoiser.params.is_finite() {
        return Err(Error::Numeric(format!(
            "parameters became non-finite after step (loss={})",
            stats.loss
        )));
    }
    Ok(stats)
}

/// Append-only CSV training log: step,loss,rec,vel.
pub struct TrainLogger {
    file: std::fs::File,
}

impl TrainLogger {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        use std::io::Write;
        writeln!(file, "step,loss,rec,vel")?;
        Ok(Self { file })
    }

    pub fn log(&mut self, step: usize, stats: &StepStats) -> Result<()> {
        use std::io::Write;
        writeln!(
            self.file,
            "{step},{:.9e},{:.9e},{:.9e}",
            stats.loss, stats.rec, stats.vel
        )?;
        Ok(())
    }
}
