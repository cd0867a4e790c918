//! Domain types, the synthetic audio-4D dataset generator, and bit-exact
//! binary file I/O.
//!
//! The generator stands in for captured audio-4D corpora: audio features
//! are a smoothed random process whose channel 0 is a mouth amplitude
//! m_t in [0, 1]; lip vertices move vertically as a deterministic function
//! of m_t and the speaking style, upper-face vertices follow a slow
//! audio-independent sinusoid with per-sequence random phase (one audio
//! clip maps to many plausible upper-face motions), everything else stays
//! static.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Motion, Result};

pub const UPPER_AMPLITUDE: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Lip,
    Upper,
    Other,
}

impl Region {
    fn code(self) -> u8 {
        match self {
            Region::Lip => 0,
            Region::Upper => 1,
            Region::Other => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Region::Lip),
            1 => Some(Region::Upper),
            2 => Some(Region::Other),
            _ => None,
        }
    }
}

/// Static face mesh the motion offsets apply to.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTemplate {
    pub vertex_count: usize,
    /// V*3 row-major rest positions.
    pub rest_positions: Vec<f32>,
    pub region_labels: Vec<Region>,
}

impl MeshTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.vertex_count < 3 {
            return Err(Error::InvalidArgument("template needs at least 3 vertices".into()));
        }
        if self.rest_positions.len() != self.vertex_count * 3
            || self.region_labels.len() != self.vertex_count
        {
            return Err(Error::ShapeMismatch("template array lengths inconsistent".into()));
        }
        if !self.rest_positions.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite rest positions".into()));
        }
        if !self.region_labels.contains(&Region::Lip)
            || !self.region_labels.contains(&Region::Upper)
        {
            return Err(Error::InvalidArgument(
                "template needs at least one lip and one upper vertex".into(),
            ));
        }
        Ok(())
    }

    pub fn mask(&self, region: Region) -> Vec<usize> {
        self.region_labels
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == region)
            .map(|(i, _)| i)
            .collect()
    }
}

/// T frames of per-vertex offsets over a template.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: usize,
    pub vertex_count: usize,
    pub fps: u32,
    /// T*V*3 row-major.
    pub offsets: Vec<f32>,
}

impl MotionSequence {
    pub fn zeros(frames: usize, vertex_count: usize, fps: u32) -> Self {
        Self {
            frames,
            vertex_count,
            fps,
            offsets: vec![0.0; frames * vertex_count * 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.vertex_count == 0 || self.fps == 0 {
            return Err(Error::InvalidArgument("motion dims must be positive".into()));
        }
        if self.offsets.len() != self.frames * self.vertex_count * 3 {
            return Err(Error::ShapeMismatch("offset buffer length mismatch".into()));
        }
        if !self.offsets.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite motion offsets".into()));
        }
        Ok(())
    }

    pub fn get(&self, t: usize, v: usize, axis: usize) -> f32 {
        self.offsets[(t * self.vertex_count + v) * 3 + axis]
    }

    pub fn set(&mut self, t: usize, v: usize, axis: usize, value: f32) {
        self.offsets[(t * self.vertex_count + v) * 3 + axis] = value;
    }

    /// (T, V*3) f64 view for the model.
    pub fn to_matrix(&self) -> Motion {
        Array2::from_shape_fn((self.frames, self.vertex_count * 3), |(t, j)| {
            self.offsets[t * self.vertex_count * 3 + j] as f64
        })
    }

    pub fn from_matrix(m: &Motion, fps: u32) -> Self {
        let vertex_count = m.ncols() / 3;
        Self {
            frames: m.nrows(),
            vertex_count,
            fps,
            offsets: m.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// T frames of D-dimensional audio features aligned to the motion frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub frames: usize,
    pub feature_dim: usize,
    pub fps: u32,
    /// T*D row-major.
    pub features: Vec<f32>,
}

impl AudioFeatureSequence {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("audio dims must be positive".into()));
        }
        if self.features.len() != self.frames * self.feature_dim {
            return Err(Error::ShapeMismatch("feature buffer length mismatch".into()));
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite audio features".into()));
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.frames, self.feature_dim), |(t, d)| {
            self.features[t * self.feature_dim + d] as f64
        })
    }
}

/// Subject identity among K training subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StyleOneHot {
    pub subject_index: usize,
    pub subject_count: usize,
}

impl StyleOneHot {
    pub fn new(subject_index: usize, subject_count: usize) -> Result<Self> {
        if subject_count == 0 || subject_index >= subject_count {
            return Err(Error::InvalidArgument(format!(
                "style index {subject_index} out of range 0..{subject_count}"
            )));
        }
        Ok(Self {
            subject_index,
            subject_count,
        })
    }
}

/// Styles scale the lip gain so conditioning is observable in the data.
pub fn style_scale(k: usize) -> f32 {
    1.0 + 0.25 * k as f32
}

#[derive(Debug, Clone)]
pub struct SyntheticDatasetSpec {
    pub vertex_count: usize,
    pub style_count: usize,
    pub feature_dim: usize,
    pub fps: u32,
    pub sequence_count: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub rng_seed: u64,
    pub lip_gain: f32,
    /// Period of the upper-face drift sinusoid, in seconds.
    pub upper_drift_period: f32,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            vertex_count: 40,
            style_count: 4,
            feature_dim: 16,
            fps: 25,
            sequence_count: 64,
            min_frames: 50,
            max_frames: 100,
            rng_seed: 7,
            lip_gain: 1.0,
            upper_drift_period: 2.0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vertex_count < 3
            || self.style_count == 0
            || self.feature_dim == 0
            || self.fps == 0
            || self.sequence_count == 0
            || self.min_frames == 0
        {
            return Err(Error::InvalidArgument("all dataset counts must be positive".into()));
        }
        if self.min_frames > self.max_frames {
            return Err(Error::InvalidArgument("min_frames > max_frames".into()));
        }
        if !(self.lip_gain >= 0.0) || !(self.upper_drift_period > 0.0) {
            return Err(Error::InvalidArgument(
                "lip_gain must be >= 0 and upper_drift_period > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub audio: AudioFeatureSequence,
    pub motion: MotionSequence,
    pub style: StyleOneHot,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub template: MeshTemplate,
    pub items: Vec<DatasetItem>,
}

fn make_template(spec: &SyntheticDatasetSpec, rng: &mut ChaCha8Rng) -> MeshTemplate {
    let v = spec.vertex_count;
    let quarter = v.div_ceil(4).max(1);
    let mut labels = vec![Region::Other; v];
    for l in labels.iter_mut().take(quarter) {
        *l = Region::Lip;
    }
    for l in labels.iter_mut().skip(quarter).take(quarter) {
        *l = Region::Upper;
    }
    let rest_positions: Vec<f32> = (0..v * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    MeshTemplate {
        vertex_count: v,
        rest_positions,
        region_labels: labels,
    }
}

/// Moving-average smoothing with window 5, then min-max normalization to
/// [0, 1]. Degenerate (constant) inputs map to 0.5.
fn smooth_unit(raw: &[f32]) -> Vec<f32> {
    let t = raw.len();
    let w = 5usize;
    let mut sm = vec![0.0f32; t];
    for i in 0..t {
        let lo = i.saturating_sub(w / 2);
        let hi = (i + w / 2 + 1).min(t);
        sm[i] = raw[lo..hi].iter().sum::<f32>() / (hi - lo) as f32;
    }
    let min = sm.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = sm.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max - min < 1e-12 {
        return vec![0.5; t];
    }
    sm.iter().map(|v| (v - min) / (max - min)).collect()
}

pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let template = make_template(spec, &mut rng);
    let lip = template.mask(Region::Lip);
    let upper = template.mask(Region::Upper);

    let mut items = Vec::with_capacity(spec.sequence_count);
    for seq in 0..spec.sequence_count {
        let t = rng.random_range(spec.min_frames..=spec.max_frames);
        let k = seq % spec.style_count;
        let style = StyleOneHot::new(k, spec.style_count)?;

        // channel 0: mouth amplitude, smoothed uniform noise in [0, 1]
        let raw: Vec<f32> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = smooth_unit(&raw);
        // remaining channels: smoothed gaussians
        let mut features = vec![0.0f32; t * spec.feature_dim];
        for (i, &mi) in m.iter().enumerate() {
            features[i * spec.feature_dim] = mi;
        }
        for d in 1..spec.feature_dim {
            let raw: Vec<f32> = (0..t)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z as f32
                })
                .collect();
            let sm = smooth_unit(&raw);
            for (i, &v) in sm.iter().enumerate() {
                features[i * spec.feature_dim + d] = v - 0.5;
            }
        }
        let audio = AudioFeatureSequence {
            frames: t,
            feature_dim: spec.feature_dim,
            fps: spec.fps,
            features,
        };

        let mut motion = MotionSequence::zeros(t, spec.vertex_count, spec.fps);
        let gain = spec.lip_gain * style_scale(k);
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let omega = std::f32::consts::TAU / (spec.upper_drift_period * spec.fps as f32);
        for frame in 0..t {
            for &vtx in &lip {
                motion.set(frame, vtx, 1, gain * m[frame]);
            }
            let drift = UPPER_AMPLITUDE * (omega * frame as f32 + phase).sin();
            for &vtx in &upper {
                motion.set(frame, vtx, 1, drift);
            }
        }

        audio.validate()?;
        motion.validate()?;
        items.push(DatasetItem {
            audio,
            motion,
            style,
        });
    }
    Ok(SyntheticDataset { template, items })
}

// --- binary formats ----------------------------------------------------
//
// Motion:   "DSMO" u16 version | u32 T | u32 V | u32 fps | T*V*3 f32 LE
// Audio:    "DSAU" u16 version | u32 T | u32 D | u32 fps | T*D   f32 LE
// Template: "DSTP" u16 version | u32 V | V*3 f32 LE | V u8 region codes

const FORMAT_VERSION: u16 = 1;

fn write_file(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(buf)?;
    Ok(())
}

struct Reader {
    bytes: Vec<u8>,
    off: usize,
    path: String,
}

impl Reader {
    fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Ok(Self {
            bytes,
            off: 0,
            path: path.display().to_string(),
        })
    }

    fn header(&mut self, n: usize) -> Result<&[u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::CorruptHeader {
                path: self.path.clone(),
                detail: "file shorter than header".into(),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn payload(&mut self, n: usize) -> Result<&[u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                path: self.path.clone(),
                expected: self.off + n,
                got: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn magic_and_version(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.header(4)? != magic {
            return Err(Error::CorruptHeader {
                path: self.path.clone(),
                detail: "bad magic".into(),
            });
        }
        let version = u16::from_le_bytes(self.header(2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: self.path.clone(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.header(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.payload(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_motion(path: &Path, m: &MotionSequence) -> Result<()> {
    m.validate()?;
    let mut buf = Vec::with_capacity(18 + m.offsets.len() * 4);
    buf.extend_from_slice(b"DSMO");
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(m.vertex_count as u32).to_le_bytes());
    buf.extend_from_slice(&m.fps.to_le_bytes());
    put_f32s(&mut buf, &m.offsets);
    write_file(path, &buf)
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let mut r = Reader::open(path)?;
    r.magic_and_version(b"DSMO")?;
    let frames = r.u32()? as usize;
    let vertex_count = r.u32()? as usize;
    let fps = r.u32()?;
    let offsets = r.f32s(frames * vertex_count * 3)?;
    let m = MotionSequence {
        frames,
        vertex_count,
        fps,
        offsets,
    };
    m.validate()?;
    Ok(m)
}

pub fn save_audio(path: &Path, a: &AudioFeatureSequence) -> Result<()> {
    a.validate()?;
    let mut buf = Vec::with_capacity(18 + a.features.len() * 4);
    buf.extend_from_slice(b"DSAU");
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(a.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(a.feature_dim as u32).to_le_bytes());
    buf.extend_from_slice(&a.fps.to_le_bytes());
    put_f32s(&mut buf, &a.features);
    write_file(path, &buf)
}

pub fn load_audio(path: &Path) -> Result<AudioFeatureSequence> {
    let mut r = Reader::open(path)?;
    r.magic_and_version(b"DSAU")?;
    let frames = r.u32()? as usize;
    let feature_dim = r.u32()? as usize;
    let fps = r.u32()?;
    let features = r.f32s(frames * feature_dim)?;
    let a = AudioFeatureSequence {
        frames,
        feature_dim,
        fps,
        features,
    };
    a.validate()?;
    Ok(a)
}

pub fn save_template(path: &Path, t: &MeshTemplate) -> Result<()> {
    t.validate()?;
    let mut buf = Vec::with_capacity(10 + t.vertex_count * 13);
    buf.extend_from_slice(b"DSTP");
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.vertex_count as u32).to_le_bytes());
    put_f32s(&mut buf, &t.rest_positions);
    buf.extend(t.region_labels.iter().map(|r| r.code()));
    write_file(path, &buf)
}

pub fn load_template(path: &Path) -> Result<MeshTemplate> {
    let mut r = Reader::open(path)?;
    r.magic_and_version(b"DSTP")?;
    let vertex_count = r.u32()? as usize;
    let rest_positions = r.f32s(vertex_count * 3)?;
    let codes = r.payload(vertex_count)?.to_vec();
    let path_str = r.path.clone();
    let region_labels = codes
        .iter()
        .map(|&c| {
            Region::from_code(c).ok_or_else(|| Error::CorruptHeader {
                path: path_str.clone(),
                detail: format!("invalid region code {c}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t = MeshTemplate {
        vertex_count,
        rest_positions,
        region_labels,
    };
    t.validate()?;
    Ok(t)
}

/// Plain-text dataset index. First line names the template file, then one
/// line per item: `item <audio-file> <motion-file> <style-index>`.
pub fn save_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_template(&dir.join("template.dstp"), &ds.template)?;
    let mut manifest = String::from("template template.dstp\n");
    for (i, item) in ds.items.iter().enumerate() {
        let audio_name = format!("seq{i:04}.dsau");
        let motion_name = format!("seq{i:04}.dsmo");
        save_audio(&dir.join(&audio_name), &item.audio)?;
        save_motion(&dir.join(&motion_name), &item.motion)?;
        manifest.push_str(&format!(
            "item {audio_name} {motion_name} {}\n",
            item.style.subject_index
        ));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut template = None;
    let mut items = Vec::new();
    let mut max_style = 0usize;
    let mut entries: Vec<(String, String, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["template", file] => {
                template = Some(load_template(&dir.join(file))?);
            }
            ["item", audio, motion, k] => {
                let k: usize = k.parse().map_err(|_| Error::CorruptHeader {
                    path: manifest_path.display().to_string(),
                    detail: format!("bad style index on line {}", lineno + 1),
                })?;
                max_style = max_style.max(k);
                entries.push((audio.to_string(), motion.to_string(), k));
            }
            _ => {
                return Err(Error::CorruptHeader {
                    path: manifest_path.display().to_string(),
                    detail: format!("unrecognized manifest line {}", lineno + 1),
                })
            }
        }
    }
    let template = template.ok_or_else(|| Error::CorruptHeader {
        path: manifest_path.display().to_string(),
        detail: "manifest missing template line".into(),
    })?;
    let style_count = max_style + 1;
    for (audio, motion, k) in entries {
        items.push(DatasetItem {
            audio: load_audio(&dir.join(audio))?,
            motion: load_motion(&dir.join(motion))?,
            style: StyleOneHot::new(k, style_count)?,
        });
    }
    Ok(SyntheticDataset { template, items })
}
