//! Flat `section.key = value` configuration files and the command
//! implementations behind the `diffspk` binary.
//!
//! Unknown keys are hard errors so misspellings never fall back to silent
//! defaults. Every command prints the effective config hash (FNV-1a over
//! the normalized key/value listing) so runs are attributable.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionVariant;
use crate::data::{self, SyntheticDatasetSpec};
use crate::denoiser::{load_checkpoint, save_checkpoint, Denoiser, DenoiserConfig};
use crate::diffusion::{make_schedule, sample, SamplerConfig, ScheduleKind};
use crate::eval::{
    evaluate_on_split, items_to_train, run_ablation, split_indices, write_ablation_csv,
};
use crate::latency::{bench_latency, write_latency_csv, ArModel};
use crate::training::{train_step, AdamW, TrainConfig, TrainItem, TrainLogger};
use crate::{Error, Result};

/// Union of all tunables, one section per subsystem.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: SyntheticDatasetSpec,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub train_steps: usize,
    pub sampler: SamplerConfig,
    pub schedule_kind: ScheduleKind,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    pub ablate_variants: Vec<AttentionVariant>,
    pub ablate_guidance: Vec<f64>,
    pub ablate_seeds: Vec<u64>,
    pub bench_durations: Vec<f64>,
    pub bench_repeats: usize,
    pub bench_warmups: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticDatasetSpec::default();
        Self {
            model: DenoiserConfig::toy(data.vertex_count, data.feature_dim, data.style_count),
            data,
            // desk-scale default; the published rate (1e-4) is tuned for
            // far longer schedules than the 300-step default here
            train: TrainConfig {
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
            train_steps: 300,
            sampler: SamplerConfig::default(),
            schedule_kind: ScheduleKind::Cosine,
            dataset_dir: PathBuf::from("dataset"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
            ablate_variants: vec![AttentionVariant::Full, AttentionVariant::NoCrossBias],
            ablate_guidance: vec![0.0],
            ablate_seeds: vec![1, 2, 3],
            bench_durations: vec![2.0, 10.0],
            bench_repeats: 3,
            bench_warmups: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect::<Result<Vec<T>>>()
}

impl RunConfig {
    /// Parse a flat `key = value` file. Lines starting with `#` and blank
    /// lines are ignored. Unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        // keep the model consistent with the dataset shape unless overridden
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.vertex_count" => {
                self.data.vertex_count = parse_num(key, v)?;
                self.model.vertex_count = self.data.vertex_count;
            }
            "data.style_count" => {
                self.data.style_count = parse_num(key, v)?;
                self.model.style_count = self.data.style_count;
            }
            "data.feature_dim" => {
                self.data.feature_dim = parse_num(key, v)?;
                self.model.audio_dim = self.data.feature_dim;
            }
            "data.fps" => {
                self.data.fps = parse_num(key, v)?;
                self.model.fps = self.data.fps as usize;
            }
            "data.sequence_count" => self.data.sequence_count = parse_num(key, v)?,
            "data.min_frames" => self.data.min_frames = parse_num(key, v)?,
            "data.max_frames" => self.data.max_frames = parse_num(key, v)?,
            "data.rng_seed" => self.data.rng_seed = parse_num(key, v)?,
            "data.lip_gain" => self.data.lip_gain = parse_num(key, v)?,
            "data.upper_drift_period" => self.data.upper_drift_period = parse_num(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse_num(key, v)?,
            "model.ff_dim" => self.model.ff_dim = parse_num(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.blocks" => self.model.blocks = parse_num(key, v)?,
            "model.diffusion_steps" => self.model.diffusion_steps = parse_num(key, v)?,
            "model.variant" => self.model.variant = AttentionVariant::parse(v)?,
            "model.schedule" => self.schedule_kind = ScheduleKind::parse(v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.steps" => self.train_steps = parse_num(key, v)?,
            "train.lambda1" => self.train.lambda1 = parse_num(key, v)?,
            "train.lambda2" => self.train.lambda2 = parse_num(key, v)?,
            "train.uncond_prob" => self.train.uncond_prob = parse_num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v)?,
            "train.rng_seed" => self.train.rng_seed = parse_num(key, v)?,
            "sample.step_count" => self.sampler.step_count = parse_num(key, v)?,
            "sample.eta" => self.sampler.eta = parse_num(key, v)?,
            "sample.guidance_scale" => self.sampler.guidance_scale = parse_num(key, v)?,
            "paths.dataset_dir" => self.dataset_dir = PathBuf::from(v),
            "paths.checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            "paths.report_dir" => self.report_dir = PathBuf::from(v),
            "ablate.variants" => {
                self.ablate_variants = v
                    .split(',')
                    .map(|s| AttentionVariant::parse(s.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "ablate.guidance" => self.ablate_guidance = parse_list(key, v)?,
            "ablate.seeds" => self.ablate_seeds = parse_list(key, v)?,
            "bench.durations" => self.bench_durations = parse_list(key, v)?,
            "bench.repeats" => self.bench_repeats = parse_num(key, v)?,
            "bench.warmups" => self.bench_warmups = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Normalized listing of every effective key/value pair.
    pub fn normalized(&self) -> String {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let s = &self.sampler;
        let list = |xs: &[f64]| {
            xs.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "data.vertex_count={}\ndata.style_count={}\ndata.feature_dim={}\ndata.fps={}\n\
             data.sequence_count={}\ndata.min_frames={}\ndata.max_frames={}\ndata.rng_seed={}\n\
             data.lip_gain={}\ndata.upper_drift_period={}\n\
             model.hidden_dim={}\nmodel.ff_dim={}\nmodel.heads={}\nmodel.blocks={}\n\
             model.diffusion_steps={}\nmodel.variant={}\nmodel.schedule={:?}\n\
             train.batch_size={}\ntrain.learning_rate={}\ntrain.epochs={}\ntrain.steps={}\n\
             train.lambda1={}\ntrain.lambda2={}\ntrain.uncond_prob={}\ntrain.weight_decay={}\n\
             train.rng_seed={}\n\
             sample.step_count={}\nsample.eta={}\nsample.guidance_scale={}\n\
             paths.dataset_dir={}\npaths.checkpoint_dir={}\npaths.report_dir={}\n\
             ablate.variants={}\nablate.guidance={}\nablate.seeds={}\n\
             bench.durations={}\nbench.repeats={}\nbench.warmups={}\n",
            d.vertex_count,
            d.style_count,
            d.feature_dim,
            d.fps,
            d.sequence_count,
            d.min_frames,
            d.max_frames,
            d.rng_seed,
            d.lip_gain,
            d.upper_drift_period,
            m.hidden_dim,
            m.ff_dim,
            m.heads,
            m.blocks,
            m.diffusion_steps,
            m.variant.name(),
            self.schedule_kind,
            t.batch_size,
            t.learning_rate,
            t.epochs,
            self.train_steps,
            t.lambda1,
            t.lambda2,
            t.uncond_prob,
            t.weight_decay,
            t.rng_seed,
            s.step_count,
            s.eta,
            s.guidance_scale,
            self.dataset_dir.display(),
            self.checkpoint_dir.display(),
            self.report_dir.display(),
            self.ablate_variants
                .iter()
                .map(|v| v.name())
                .collect::<Vec<_>>()
                .join(","),
            list(&self.ablate_guidance),
            self.ablate_seeds
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
            list(&self.bench_durations),
            self.bench_repeats,
            self.bench_warmups,
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.normalized().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn print_config_hash(cfg: &RunConfig) {
    println!("config_hash {:016x}", cfg.hash());
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    print_config_hash(cfg);
    let ds = data::generate_dataset(&cfg.data)?;
    data::save_dataset(&cfg.dataset_dir, &ds)?;
    println!(
        "wrote {} sequences to {}",
        ds.items.len(),
        cfg.dataset_dir.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, seed: u64) -> Result<()> {
    print_config_hash(cfg);
    let ds = data::load_dataset(&cfg.dataset_dir)?;
    let mut model_cfg = cfg.model;
    model_cfg.vertex_count = ds.template.vertex_count;
    let mut denoiser = Denoiser::new(model_cfg, seed)?;
    let schedule = make_schedule(model_cfg.diffusion_steps, cfg.schedule_kind)?;
    let (train_idx, val_idx, _) = split_indices(ds.items.len());
    let items = items_to_train(&ds, &train_idx);
    if items.is_empty() {
        return Err(Error::InvalidArgument("train split is empty".into()));
    }
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    std::fs::create_dir_all(&cfg.report_dir)?;
    let mut logger = TrainLogger::create(&cfg.report_dir.join("train_log.csv"))?;
    let mut opt = AdamW::new(denoiser.params.num_params(), cfg.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7121);
    use rand::Rng;
    for step in 0..cfg.train_steps {
        let batch: Vec<TrainItem> = (0..cfg.train.batch_size)
            .map(|_| items[rng.random_range(0..items.len())].clone())
            .collect();
        let stats = train_step(
            &mut denoiser,
            &batch,
            &schedule,
            &cfg.train,
            &mut opt,
            seed.wrapping_mul(1_000_003).wrapping_add(step as u64),
        )?;
        logger.log(step, &stats)?;
        if step % 50 == 0 {
            println!("step {step} loss {:.6}", stats.loss);
        }
    }
    let ckpt = cfg.checkpoint_dir.join("model.dsck");
    save_checkpoint(&ckpt, &denoiser)?;
    println!("checkpoint {}", ckpt.display());
    if !val_idx.is_empty() {
        let (lve, fdd, _) = evaluate_on_split(
            &denoiser,
            &ds,
            &val_idx,
            &cfg.sampler,
            &schedule,
            seed,
        )?;
        println!("validation lve {lve:.6} fdd {fdd:.6}");
    }
    Ok(())
}

pub fn cmd_sample(
    cfg: &RunConfig,
    audio_path: &Path,
    style_k: usize,
    seed: u64,
    guidance: f64,
    out: &Path,
) -> Result<()> {
    print_config_hash(cfg);
    let ckpt = cfg.checkpoint_dir.join("model.dsck");
    let denoiser = load_checkpoint(&ckpt)?;
    let audio = data::load_audio(audio_path)?;
    if style_k >= denoiser.config.style_count {
        return Err(Error::InvalidArgument(format!(
            "style {style_k} out of range for checkpoint with {} styles",
            denoiser.config.style_count
        )));
    }
    let schedule = make_schedule(denoiser.config.diffusion_steps, cfg.schedule_kind)?;
    let sampler = SamplerConfig {
        guidance_scale: guidance,
        ..cfg.sampler.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (motion, stats) = sample(
        &denoiser,
        &audio.to_matrix(),
        style_k,
        &sampler,
        &schedule,
        &mut rng,
    )?;
    let seq = data::MotionSequence::from_matrix(&motion, audio.fps);
    data::save_motion(out, &seq)?;
    println!(
        "sampled {} frames in {} denoiser passes -> {}",
        seq.frames,
        stats.denoiser_passes,
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: &str, seed: u64) -> Result<()> {
    print_config_hash(cfg);
    let denoiser = load_checkpoint(checkpoint)?;
    let ds = data::load_dataset(&cfg.dataset_dir)?;
    let (train_idx, val_idx, test_idx) = split_indices(ds.items.len());
    let idx = match split {
        "train" => train_idx,
        "val" => val_idx,
        "test" => test_idx,
        _ => return Err(Error::Config(format!("unknown split '{split}'"))),
    };
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!("split '{split}' is empty")));
    }
    let schedule = make_schedule(denoiser.config.diffusion_steps, cfg.schedule_kind)?;
    let (lve, fdd, upper_std) =
        evaluate_on_split(&denoiser, &ds, &idx, &cfg.sampler, &schedule, seed)?;
    std::fs::create_dir_all(&cfg.report_dir)?;
    let path = cfg.report_dir.join(format!("eval_{split}.csv"));
    std::fs::write(
        &path,
        format!("split,lve,fdd,upper_std\n{split},{lve:.9e},{fdd:.9e},{upper_std:.9e}\n"),
    )?;
    println!("lve {lve:.6} fdd {fdd:.6} upper_std {upper_std:.6} -> {}", path.display());
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    print_config_hash(cfg);
    let ds = data::load_dataset(&cfg.dataset_dir)?;
    let mut model_cfg = cfg.model;
    model_cfg.vertex_count = ds.template.vertex_count;
    let reports = run_ablation(
        &ds,
        &model_cfg,
        &cfg.ablate_variants,
        &cfg.ablate_guidance,
        &cfg.ablate_seeds,
        &cfg.train,
        cfg.train_steps,
        Some(&cfg.checkpoint_dir),
    )?;
    std::fs::create_dir_all(&cfg.report_dir)?;
    let path = cfg.report_dir.join("ablation.csv");
    write_ablation_csv(&path, &reports)?;
    println!("wrote {} rows to {}", reports.len(), path.display());
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, seed: u64) -> Result<()> {
    print_config_hash(cfg);
    let denoiser = Denoiser::new(cfg.model, seed)?;
    let ar = ArModel::new(cfg.model, seed ^ 1)?;
    let schedule = make_schedule(cfg.model.diffusion_steps, cfg.schedule_kind)?;
    let records = bench_latency(
        &cfg.bench_durations,
        cfg.model.fps,
        &denoiser,
        &ar,
        &cfg.sampler,
        &schedule,
        cfg.bench_repeats,
        cfg.bench_warmups,
    )?;
    std::fs::create_dir_all(&cfg.report_dir)?;
    let path = cfg.report_dir.join("latency.csv");
    write_latency_csv(&path, &records)?;
    for r in &records {
        println!(
            "{} {}s frames {} passes {} wall {:.2}ms",
            r.decoder.name(),
            r.audio_seconds,
            r.frames,
            r.denoiser_passes,
            r.wall_ms
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::CorruptHeader { .. }
        | Error::VersionMismatch { .. }
        | Error::TruncatedPayload { .. }
        | Error::ShapeMismatch(_)
        | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}
