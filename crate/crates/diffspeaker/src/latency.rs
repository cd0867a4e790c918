//! Decoding-latency comparison: fixed-pass parallel diffusion decoding vs
//! length-proportional autoregressive decoding.
//!
//! The autoregressive baseline reuses this crate's attention layers with
//! the FaceFormer-style causal/diagonal biases and the same hidden sizes
//! as the diffusion denoiser, so the comparison is architecture-matched.
//! Acceptance rests on pass counts and on the trend of wall-clock ratios,
//! never on absolute milliseconds.

use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{biased_conditional_attention, faceformer_bias, AttentionParams, BiasMatrix};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{sample, DiffusionSchedule, SamplerConfig};
use crate::nn::{gelu_map, Conv1d, Linear};
use crate::{Error, Motion, Result};

/// FaceFormer-style autoregressive decoder with the denoiser's layer
/// shapes: audio conv encoder, input/output projections and one
/// self+cross+feedforward block per denoiser block, without condition
/// tokens or step conditioning.
pub struct ArModel {
    pub config: DenoiserConfig,
    audio_conv1: Conv1d,
    audio_conv2: Conv1d,
    audio_lin: Linear,
    input_proj: Linear,
    output_proj: Linear,
    blocks: Vec<ArBlock>,
}

struct ArBlock {
    self_attn: AttentionParams,
    cross_attn: AttentionParams,
    ff1: Linear,
    ff2: Linear,
}

impl ArModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.hidden_dim;
        Ok(Self {
            audio_conv1: Conv1d::xavier(config.audio_dim, c, &mut rng),
            audio_conv2: Conv1d::xavier(c, c, &mut rng),
            audio_lin: Linear::xavier(c, c, &mut rng),
            input_proj: Linear::xavier(config.motion_dim(), c, &mut rng),
            output_proj: Linear::xavier(c, config.motion_dim(), &mut rng),
            blocks: (0..config.blocks)
                .map(|_| ArBlock {
                    self_attn: AttentionParams::xavier(c, &mut rng),
                    cross_attn: AttentionParams::xavier(c, &mut rng),
                    ff1: Linear::xavier(c, config.ff_dim, &mut rng),
                    ff2: Linear::xavier(config.ff_dim, c, &mut rng),
                })
                .collect(),
            config,
        })
    }

    fn encode_audio(&self, audio: &Array2<f64>) -> Array2<f64> {
        let g1 = gelu_map(&self.audio_conv1.forward(audio));
        let g2 = gelu_map(&self.audio_conv2.forward(&g1));
        self.audio_lin.forward(&g2)
    }

    /// One full forward over a prefix of `t` generated frames; returns the
    /// predicted next frame. `prefix` holds a leading zero start frame.
    fn predict_next(
        &self,
        prefix: &Motion,
        full_self_bias: &Array2<f64>,
        cross_values: &[Array2<f64>],
    ) -> Result<Array2<f64>> {
        let t = prefix.nrows();
        let self_bias = BiasMatrix {
            data: full_self_bias.slice(ndarray::s![..t, ..t]).to_owned(),
        };

        let mut h = self.input_proj.forward(prefix);
        for (block, values) in self.blocks.iter().zip(cross_values) {
            let (a_s, _) = biased_conditional_attention(
                &h,
                &h,
                None,
                &self_bias,
                self.config.heads,
                &block.self_attn,
            )?;
            let h1 = &h + &a_s;
            // frame i attends to audio frame i only: after softmax the
            // weights are exactly one-hot on the diagonal, so the cross
            // attention collapses to the projected audio value rows
            let a_c = values.slice(ndarray::s![..t, ..]);
            let h2 = &h1 + &a_c;
            let ff = block.ff2.forward(&gelu_map(&block.ff1.forward(&h2)));
            h = &h2 + &ff;
        }
        let out = self.output_proj.forward(&h);
        Ok(out.row(t - 1).to_owned().insert_axis(ndarray::Axis(0)))
    }

    /// Emit frames one at a time, each pass re-attending to all previous
    /// frames. Returns the motion and the pass count (= T).
    pub fn decode(&self, audio: &Array2<f64>) -> Result<(Motion, usize)> {
        let t_total = audio.nrows();
        if t_total == 0 {
            return Err(Error::InvalidArgument("empty audio".into()));
        }
        let e_a = self.encode_audio(audio);
        // shared across steps: the causal bias is position-only and the
        // one-hot cross attention output per block depends only on e_a
        let (full_self_bias, _) = faceformer_bias(t_total + 1, self.config.fps);
        let cross_values: Vec<Array2<f64>> = self
            .blocks
            .iter()
            .map(|b| b.cross_attn.wo.forward(&b.cross_attn.wv.forward(&e_a)))
            .collect();
        let dim = self.config.motion_dim();
        let mut out = Array2::zeros((t_total, dim));
        // prefix row 0 is the zero start token; generated frame t lands in
        // prefix row t+1
        let mut prefix = Array2::zeros((1, dim));
        let mut passes = 0usize;
        for t in 0..t_total {
            let next = self.predict_next(&prefix, &full_self_bias.data, &cross_values)?;
            passes += 1;
            out.row_mut(t).assign(&next.row(0));
            if t + 1 < t_total {
                let mut grown = Array2::zeros((prefix.nrows() + 1, dim));
                grown
                    .slice_mut(ndarray::s![..prefix.nrows(), ..])
                    .assign(&prefix);
                grown.row_mut(prefix.nrows()).assign(&next.row(0));
                prefix = grown;
            }
        }
        Ok((out, passes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Diffusion,
    Autoregressive,
}

impl DecoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::Diffusion => "diffusion",
            DecoderKind::Autoregressive => "autoregressive",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatencyRecord {
    pub decoder: DecoderKind,
    pub audio_seconds: f64,
    pub frames: usize,
    pub denoiser_passes: usize,
    /// Median wall time over the repeats, monotonic clock.
    pub wall_ms: f64,
    pub repeats: usize,
    pub warmups: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Time both decoders on synthetic audio of the given durations.
pub fn bench_latency(
    durations_s: &[f64],
    fps: usize,
    denoiser: &Denoiser,
    ar: &ArModel,
    sampler: &SamplerConfig,
    schedule: &DiffusionSchedule,
    repeats: usize,
    warmups: usize,
) -> Result<Vec<LatencyRecord>> {
    if repeats < 3 {
        return Err(Error::InvalidArgument("need at least 3 repeats".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut records = Vec::new();
    for &dur in durations_s {
        let t = (dur * fps as f64).round() as usize;
        if t == 0 {
            return Err(Error::InvalidArgument(format!("duration {dur}s too short")));
        }
        let audio = crate::diffusion::standard_normal(t, denoiser.config.audio_dim, &mut rng);

        let mut diff_times = Vec::new();
        let mut diff_passes = 0;
        for i in 0..warmups + repeats {
            let start = Instant::now();
            let (_, stats) = sample(denoiser, &audio, 0, sampler, schedule, &mut rng)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            if i >= warmups {
                diff_times.push(elapsed);
            }
            diff_passes = stats.denoiser_passes;
        }
        records.push(LatencyRecord {
            decoder: DecoderKind::Diffusion,
            audio_seconds: dur,
            frames: t,
            denoiser_passes: diff_passes,
            wall_ms: median(diff_times),
            repeats,
            warmups,
        });

        let mut ar_times = Vec::new();
        let mut ar_passes = 0;
        for i in 0..warmups + repeats {
            let start = Instant::now();
            let (_, passes) = ar.decode(&audio)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            if i >= warmups {
                ar_times.push(elapsed);
            }
            ar_passes = passes;
        }
        records.push(LatencyRecord {
            decoder: DecoderKind::Autoregressive,
            audio_seconds: dur,
            frames: t,
            denoiser_passes: ar_passes,
            wall_ms: median(ar_times),
            repeats,
            warmups,
        });
    }
    Ok(records)
}

pub fn write_latency_csv(path: &std::path::Path, records: &[LatencyRecord]) -> Result<()> {
    let mut s = String::from("decoder,audio_seconds,frames,denoiser_passes,wall_ms,repeats,warmups\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{:.3},{},{}\n",
            r.decoder.name(),
            r.audio_seconds,
            r.frames,
            r.denoiser_passes,
            r.wall_ms,
            r.repeats,
            r.warmups
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;
    use crate::diffusion::{make_schedule, ScheduleKind};

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            hidden_dim: 8,
            ff_dim: 16,
            heads: 2,
            blocks: 1,
            vertex_count: 3,
            audio_dim: 4,
            style_count: 2,
            fps: 25,
            diffusion_steps: 10,
            variant: AttentionVariant::Full,
        }
    }

    #[test]
    fn ar_decode_one_pass_per_frame() {
        let ar = ArModel::new(tiny_config(), 1).unwrap();
        for t in [1usize, 5, 12] {
            let audio = Array2::from_elem((t, 4), 0.2);
            let (motion, passes) = ar.decode(&audio).unwrap();
            assert_eq!(passes, t);
            assert_eq!(motion.shape(), &[t, 9]);
            assert!(motion.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn ar_decode_deterministic() {
        let ar = ArModel::new(tiny_config(), 2).unwrap();
        let audio = Array2::from_elem((6, 4), 0.4);
        let (a, _) = ar.decode(&audio).unwrap();
        let (b, _) = ar.decode(&audio).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bench_requires_three_repeats() {
        let cfg = tiny_config();
        let d = Denoiser::new(cfg.clone(), 1).unwrap();
        let ar = ArModel::new(cfg, 1).unwrap();
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let sampler = SamplerConfig {
            step_count: 2,
            ..Default::default()
        };
        assert!(bench_latency(&[0.2], 25, &d, &ar, &sampler, &s, 2, 0).is_err());
    }

    #[test]
    fn bench_records_pass_counts_and_frames() {
        let cfg = tiny_config();
        let d = Denoiser::new(cfg.clone(), 1).unwrap();
        let ar = ArModel::new(cfg, 1).unwrap();
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let sampler = SamplerConfig {
            step_count: 3,
            ..Default::default()
        };
        let recs = bench_latency(&[0.2, 0.4], 25, &d, &ar, &sampler, &s, 3, 1).unwrap();
        assert_eq!(recs.len(), 4);
        for pair in recs.chunks(2) {
            let diff = &pair[0];
            let arr = &pair[1];
            assert_eq!(diff.decoder, DecoderKind::Diffusion);
            assert_eq!(arr.decoder, DecoderKind::Autoregressive);
            assert_eq!(diff.frames, arr.frames);
            // diffusion pass count depends only on the sampler, AR on T
            assert_eq!(diff.denoiser_passes, 3);
            assert_eq!(arr.denoiser_passes, arr.frames);
            assert!(diff.wall_ms > 0.0 && arr.wall_ms > 0.0);
        }
        assert_eq!(recs[0].frames, 5);
        assert_eq!(recs[2].frames, 10);
    }
}
