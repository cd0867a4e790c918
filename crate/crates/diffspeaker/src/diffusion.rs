//! Noise schedule, forward noising, DDIM-style sampling around the
//! x0-prediction parameterization, and classifier-free guidance mixing.
//!
//! Sampling runs a fixed substep schedule regardless of sequence length:
//! the number of denoiser evaluations is S when the guidance scale is 0
//! and 2S otherwise, never a function of T.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Motion, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown schedule kind '{s}'"))),
        }
    }
}

/// Per-step noise coefficients. `alpha_bars[n]` is the cumulative product
/// of (1 - beta) up to step n, with alpha_bars[0] = 1.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.steps();
        if n == 0 || self.alpha_bars.len() != n + 1 {
            return Err(Error::Config("schedule length mismatch".into()));
        }
        if self.alpha_bars[0] != 1.0 {
            return Err(Error::Config("alpha_bar[0] must be 1".into()));
        }
        for w in self.alpha_bars.windows(2) {
            if !(w[1] < w[0]) || !w[1].is_finite() {
                return Err(Error::Config("alpha_bar must be strictly decreasing and finite".into()));
            }
        }
        let last = self.alpha_bars[n];
        if !(last > 0.0 && last < 0.02) {
            return Err(Error::Config(format!(
                "alpha_bar[N] = {last} outside (0, 0.02); terminal state must be near-pure noise"
            )));
        }
        Ok(())
    }
}

/// Linear interpolates beta from 1e-4 to 2e-2; cosine uses the standard
/// squared-cosine alpha_bar profile. The linear endpoints are tuned for
/// N around 1000; for short chains use cosine, which stays valid at any N.
pub fn make_schedule(n: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if n < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..n)
            .map(|i| {
                let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                1e-4 + frac * (2e-2 - 1e-4)
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |x: f64| ((x / n as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            (0..n)
                .map(|i| {
                    let a_prev = f(i as f64) / f0;
                    let a_cur = f((i + 1) as f64) / f0;
                    (1.0 - a_cur / a_prev).clamp(1e-8, 0.999)
                })
                .collect()
        }
    };
    let mut alpha_bars = Vec::with_capacity(n + 1);
    alpha_bars.push(1.0);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    let schedule = DiffusionSchedule { betas, alpha_bars };
    schedule.validate()?;
    Ok(schedule)
}

/// x_n = sqrt(alpha_bar_n) x_0 + sqrt(1 - alpha_bar_n) eps.
pub fn forward_noise(
    x0: &Motion,
    n: usize,
    eps: &Motion,
    schedule: &DiffusionSchedule,
) -> Result<Motion> {
    if n > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {n} out of range 0..={}",
            schedule.steps()
        )));
    }
    if x0.raw_dim() != eps.raw_dim() {
        return Err(Error::ShapeMismatch("x0 and eps shapes differ".into()));
    }
    let ab = schedule.alpha_bars[n];
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// One DDIM update from step n to n_prev given the model's x0 estimate.
/// eta = 0 is fully deterministic; otherwise sigma scales fresh noise.
pub fn ddim_step(
    x_n: &Motion,
    x0_hat: &Motion,
    n: usize,
    n_prev: usize,
    schedule: &DiffusionSchedule,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Motion> {
    if n <= n_prev {
        return Err(Error::InvalidArgument(format!(
            "ddim_step requires n > n_prev (got {n} <= {n_prev})"
        )));
    }
    if n > schedule.steps() {
        return Err(Error::InvalidArgument(format!("step {n} beyond schedule")));
    }
    let ab_n = schedule.alpha_bars[n];
    let ab_p = schedule.alpha_bars[n_prev];
    if ab_n >= 1.0 {
        return Err(Error::Numeric("alpha_bar[n] = 1 with n > 0".into()));
    }
    let eps_hat = (x_n - &(x0_hat * ab_n.sqrt())) / (1.0 - ab_n).sqrt();
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_n)).sqrt() * (1.0 - ab_n / ab_p).sqrt();
    let dir_coeff = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let mut out = x0_hat * ab_p.sqrt() + &(&eps_hat * dir_coeff);
    if eta > 0.0 {
        let z = standard_normal(x_n.nrows(), x_n.ncols(), rng);
        out += &(&z * sigma);
    }
    Ok(out)
}

/// Classifier-free guidance: (1 + w) cond - w uncond.
pub fn guided_x0(cond: &Motion, uncond: &Motion, w: f64) -> Result<Motion> {
    if cond.raw_dim() != uncond.raw_dim() {
        return Err(Error::ShapeMismatch("guidance operands differ in shape".into()));
    }
    Ok(cond * (1.0 + w) - &(uncond * w))
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Number of substeps S.
    pub step_count: usize,
    pub eta: f64,
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            step_count: 10,
            eta: 0.0,
            guidance_scale: 0.0,
        }
    }
}

impl SamplerConfig {
    /// Strictly decreasing substep schedule from N to 0, uniformly spaced.
    pub fn substeps(&self, n_total: usize) -> Result<Vec<usize>> {
        let s = self.step_count;
        if s == 0 || s > n_total {
            return Err(Error::Config(format!(
                "step_count {s} must be in 1..={n_total}"
            )));
        }
        let mut steps: Vec<usize> = (0..=s)
            .map(|i| ((s - i) as f64 / s as f64 * n_total as f64).round() as usize)
            .collect();
        steps.dedup();
        debug_assert_eq!(steps.first(), Some(&n_total));
        debug_assert_eq!(steps.last(), Some(&0));
        Ok(steps)
    }
}

/// Anything that can estimate x0 from a noisy motion given audio features,
/// a style index and the diffusion step.
pub trait ConditionalDenoiser {
    fn estimate_x0(
        &self,
        x_n: &Motion,
        audio: &Array2<f64>,
        style_k: usize,
        n: usize,
    ) -> Result<Motion>;
    /// Motion dimension V*3.
    fn motion_dim(&self) -> usize;
}

impl ConditionalDenoiser for crate::denoiser::Denoiser {
    fn estimate_x0(
        &self,
        x_n: &Motion,
        audio: &Array2<f64>,
        style_k: usize,
        n: usize,
    ) -> Result<Motion> {
        self.denoise(x_n, audio, style_k, n)
    }

    fn motion_dim(&self) -> usize {
        self.config.motion_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleStats {
    /// Exact number of denoiser evaluations.
    pub denoiser_passes: usize,
    pub unconditional_passes: usize,
}

/// Generate a motion sequence from noise. With guidance_scale > 0 the
/// denoiser runs twice per substep, once with the audio nulled (zeroed
/// features); style and step conditioning remain.
pub fn sample<G: ConditionalDenoiser>(
    model: &G,
    audio: &Array2<f64>,
    style_k: usize,
    cfg: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Motion, SampleStats)> {
    let t = audio.nrows();
    if t == 0 {
        return Err(Error::InvalidArgument("empty audio".into()));
    }
    let steps = cfg.substeps(schedule.steps())?;
    let w = cfg.guidance_scale;
    let null_audio = Array2::zeros(audio.raw_dim());

    let mut x = standard_normal(t, model.motion_dim(), rng);
    let mut stats = SampleStats {
        denoiser_passes: 0,
        unconditional_passes: 0,
    };
    for pair in steps.windows(2) {
        let (n, n_prev) = (pair[0], pair[1]);
        let mut x0_hat = model.estimate_x0(&x, audio, style_k, n)?;
        stats.denoiser_passes += 1;
        if w > 0.0 {
            let x0_uncond = model.estimate_x0(&x, &null_audio, style_k, n)?;
            stats.denoiser_passes += 1;
            stats.unconditional_passes += 1;
            x0_hat = guided_x0(&x0_hat, &x0_uncond, w)?;
        }
        x = ddim_step(&x, &x0_hat, n, n_prev, schedule, cfg.eta, rng)?;
    }
    Ok((x, stats))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Motion {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}
