//! LVE / FDD metrics, per-vertex motion standard deviation, and the
//! ablation harness over attention variants and guidance scales.
//!
//! LVE: mean over frames of the maximum over lip vertices of the Euclidean
//! distance between predicted and ground-truth offsets. FDD: for every
//! masked upper-face vertex, the standard deviation over time of the
//! per-frame offset norm, compared between prediction and ground truth by
//! absolute difference and averaged over the mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Region, SyntheticDataset};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{make_schedule, sample, DiffusionSchedule, SamplerConfig, ScheduleKind};
use crate::training::{train_step, AdamW, TrainConfig, TrainItem};
use crate::{attention::AttentionVariant, Error, Motion, Result};

fn vertex_dist(a: &Motion, b: &Motion, t: usize, v: usize) -> f64 {
    let mut acc = 0.0;
    for axis in 0..3 {
        let d = a[[t, 3 * v + axis]] - b[[t, 3 * v + axis]];
        acc += d * d;
    }
    acc.sqrt()
}

pub fn lip_vertex_error(pred: &Motion, gt: &Motion, lip_mask: &[usize]) -> Result<f64> {
    if pred.raw_dim() != gt.raw_dim() {
        return Err(Error::ShapeMismatch("LVE shapes differ".into()));
    }
    if lip_mask.is_empty() {
        return Err(Error::InvalidArgument("empty lip mask".into()));
    }
    let frames = pred.nrows();
    let mut acc = 0.0;
    for t in 0..frames {
        let mut worst = 0.0f64;
        for &v in lip_mask {
            worst = worst.max(vertex_dist(pred, gt, t, v));
        }
        acc += worst;
    }
    Ok(acc / frames as f64)
}

/// Per-vertex std over time of the offset norm (population variance).
fn displacement_std(m: &Motion, v: usize) -> f64 {
    let frames = m.nrows();
    let norms: Vec<f64> = (0..frames)
        .map(|t| {
            let mut acc = 0.0;
            for axis in 0..3 {
                let x = m[[t, 3 * v + axis]];
                acc += x * x;
            }
            acc.sqrt()
        })
        .collect();
    let mean = norms.iter().sum::<f64>() / frames as f64;
    let var = norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / frames as f64;
    var.sqrt()
}

pub fn facial_dynamics_deviation(pred: &Motion, gt: &Motion, upper_mask: &[usize]) -> Result<f64> {
    if pred.raw_dim() != gt.raw_dim() {
        return Err(Error::ShapeMismatch("FDD shapes differ".into()));
    }
    if upper_mask.is_empty() {
        return Err(Error::InvalidArgument("empty upper mask".into()));
    }
    if pred.nrows() < 2 {
        return Err(Error::InvalidArgument("FDD needs at least 2 frames".into()));
    }
    let mut acc = 0.0;
    for &v in upper_mask {
        acc += (displacement_std(pred, v) - displacement_std(gt, v)).abs();
    }
    Ok(acc / upper_mask.len() as f64)
}

/// Per-vertex std of offset norms pooled over all frames of all sequences.
pub fn motion_std_map(sequences: &[Motion]) -> Result<Vec<f64>> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::InvalidArgument("no sequences".into()))?;
    let vcount = first.ncols() / 3;
    let mut sums = vec![0.0f64; vcount];
    let mut sq_sums = vec![0.0f64; vcount];
    let mut count = 0usize;
    for m in sequences {
        if m.ncols() != first.ncols() {
            return Err(Error::ShapeMismatch("sequences differ in vertex count".into()));
        }
        for t in 0..m.nrows() {
            for v in 0..vcount {
                let mut acc = 0.0;
                for axis in 0..3 {
                    let x = m[[t, 3 * v + axis]];
                    acc += x * x;
                }
                let n = acc.sqrt();
                sums[v] += n;
                sq_sums[v] += n * n;
            }
        }
        count += m.nrows();
    }
    Ok((0..vcount)
        .map(|v| {
            let mean = sums[v] / count as f64;
            (sq_sums[v] / count as f64 - mean * mean).max(0.0).sqrt()
        })
        .collect())
}

pub fn write_std_map_csv(path: &std::path::Path, map: &[f64]) -> Result<()> {
    let mut s = String::from("vertex,std\n");
    for (v, val) in map.iter().enumerate() {
        s.push_str(&format!("{v},{val:.9e}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Mean and 95% confidence half-width; the half-width is absent with
/// fewer than two samples.
#[derive(Debug, Clone, Copy)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci_half_width: Option<f64>,
}

pub fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return MetricSummary {
            mean,
            ci_half_width: None,
        };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    MetricSummary {
        mean,
        ci_half_width: Some(1.96 * (var / n as f64).sqrt()),
    }
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub variant: AttentionVariant,
    pub guidance_scale: f64,
    pub lve: MetricSummary,
    pub fdd: MetricSummary,
    pub upper_std: MetricSummary,
    pub seeds_used: Vec<u64>,
}

/// Deterministic dataset split: sequential 80/10/10 by index, with at
/// least one item per split when possible.
pub fn split_indices(count: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let test = (count / 10).max(1.min(count));
    let val = (count / 10).max(1.min(count.saturating_sub(test)));
    let train_end = count.saturating_sub(test + val);
    (
        (0..train_end).collect(),
        (train_end..train_end + val).collect(),
        (train_end + val..count).collect(),
    )
}

pub fn items_to_train(ds: &SyntheticDataset, idx: &[usize]) -> Vec<TrainItem> {
    idx.iter()
        .map(|&i| {
            let item = &ds.items[i];
            TrainItem {
                audio: item.audio.to_matrix(),
                motion: item.motion.to_matrix(),
                style_k: item.style.subject_index,
            }
        })
        .collect()
}

/// Train one variant on the dataset's train split.
pub fn train_variant(
    ds: &SyntheticDataset,
    base_config: &DenoiserConfig,
    variant: AttentionVariant,
    train_cfg: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<Denoiser> {
    let mut config = *base_config;
    config.variant = variant;
    let mut denoiser = Denoiser::new(config, seed)?;
    let schedule = make_schedule(config.diffusion_steps, ScheduleKind::Cosine)?;
    let (train_idx, _, _) = split_indices(ds.items.len());
    let items = items_to_train(ds, &train_idx);
    let mut opt = AdamW::new(denoiser.params.num_params(), train_cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for step in 0..steps {
        use rand::Rng;
        let batch: Vec<TrainItem> = (0..train_cfg.batch_size)
            .map(|_| items[rng.random_range(0..items.len())].clone())
            .collect();
        train_step(
            &mut denoiser,
            &batch,
            &schedule,
            train_cfg,
            &mut opt,
            seed.wrapping_mul(1_000_003).wrapping_add(step as u64),
        )?;
    }
    Ok(denoiser)
}

/// Sample the test split with a trained model and compute metrics.
pub fn evaluate_on_split(
    denoiser: &Denoiser,
    ds: &SyntheticDataset,
    idx: &[usize],
    sampler: &SamplerConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let lip = ds.template.mask(Region::Lip);
    let upper = ds.template.mask(Region::Upper);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lves = Vec::new();
    let mut fdds = Vec::new();
    let mut preds = Vec::new();
    for &i in idx {
        let item = &ds.items[i];
        let audio = item.audio.to_matrix();
        let gt = item.motion.to_matrix();
        let (pred, _) = sample(
            denoiser,
            &audio,
            item.style.subject_index,
            sampler,
            schedule,
            &mut rng,
        )?;
        lves.push(lip_vertex_error(&pred, &gt, &lip)?);
        fdds.push(facial_dynamics_deviation(&pred, &gt, &upper)?);
        preds.push(pred);
    }
    let std_map = motion_std_map(&preds)?;
    let upper_std = upper.iter().map(|&v| std_map[v]).sum::<f64>() / upper.len() as f64;
    let n = lves.len() as f64;
    Ok((
        lves.iter().sum::<f64>() / n,
        fdds.iter().sum::<f64>() / n,
        upper_std,
    ))
}

/// Mean rec loss of sampled motion against ground truth on a split.
pub fn rec_of_samples(
    denoiser: &Denoiser,
    ds: &SyntheticDataset,
    idx: &[usize],
    sampler: &SamplerConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for &i in idx {
        let item = &ds.items[i];
        let (pred, _) = sample(
            denoiser,
            &item.audio.to_matrix(),
            item.style.subject_index,
            sampler,
            schedule,
            &mut rng,
        )?;
        acc += crate::training::rec_loss(&item.motion.to_matrix(), &pred)?;
    }
    Ok(acc / idx.len() as f64)
}

/// Table-2-style harness: train each variant once (checkpoints keyed by
/// variant name under `ckpt_dir` when given), then evaluate every
/// (variant, guidance) cell over the stated seeds.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    ds: &SyntheticDataset,
    base_config: &DenoiserConfig,
    variants: &[AttentionVariant],
    guidance_values: &[f64],
    seeds: &[u64],
    train_cfg: &TrainConfig,
    train_steps: usize,
    ckpt_dir: Option<&std::path::Path>,
) -> Result<Vec<MetricReport>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let schedule = make_schedule(base_config.diffusion_steps, ScheduleKind::Cosine)?;
    let (_, _, test_idx) = split_indices(ds.items.len());
    let mut reports = Vec::new();
    for &variant in variants {
        let denoiser = match ckpt_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.dsck", variant.name()));
                if path.exists() {
                    let loaded = crate::denoiser::load_checkpoint(&path)?;
                    if loaded.config.variant != variant {
                        return Err(Error::Config(format!(
                            "checkpoint {} holds variant {}, expected {}",
                            path.display(),
                            loaded.config.variant.name(),
                            variant.name()
                        )));
                    }
                    loaded
                } else {
                    let d = train_variant(ds, base_config, variant, train_cfg, train_steps, seeds[0])?;
                    std::fs::create_dir_all(dir)?;
                    crate::denoiser::save_checkpoint(&path, &d)?;
                    d
                }
            }
            None => train_variant(ds, base_config, variant, train_cfg, train_steps, seeds[0])?,
        };
        for &w in guidance_values {
            let sampler = SamplerConfig {
                guidance_scale: w,
                ..SamplerConfig::default()
            };
            let mut lves = Vec::new();
            let mut fdds = Vec::new();
            let mut stds = Vec::new();
            for &seed in seeds {
                let (lve, fdd, upper_std) =
                    evaluate_on_split(&denoiser, ds, &test_idx, &sampler, &schedule, seed)?;
                lves.push(lve);
                fdds.push(fdd);
                stds.push(upper_std);
            }
            reports.push(MetricReport {
                variant,
                guidance_scale: w,
                lve: summarize(&lves),
                fdd: summarize(&fdds),
                upper_std: summarize(&stds),
                seeds_used: seeds.to_vec(),
            });
        }
    }
    Ok(reports)
}

pub fn write_ablation_csv(path: &std::path::Path, reports: &[MetricReport]) -> Result<()> {
    let mut s =
        String::from("variant,guidance,lve_mean,lve_ci95,fdd_mean,fdd_ci95,upper_std_mean,upper_std_ci95,seeds\n");
    let ci = |m: &MetricSummary| {
        m.ci_half_width
            .map(|v| format!("{v:.9e}"))
            .unwrap_or_else(|| "absent".into())
    };
    for r in reports {
        s.push_str(&format!(
            "{},{},{:.9e},{},{:.9e},{},{:.9e},{},{}\n",
            r.variant.name(),
            r.guidance_scale,
            r.lve.mean,
            ci(&r.lve),
            r.fdd.mean,
            ci(&r.fdd),
            r.upper_std.mean,
            ci(&r.upper_std),
            r.seeds_used.len()
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}
