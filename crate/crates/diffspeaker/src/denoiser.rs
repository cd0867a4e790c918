//! The denoising network G(x_n, a, s_k, n).
//!
//! Condition encoders produce e_a (per-frame audio, T x C), e_s (style,
//! 1 x C) and e_n (diffusion step, 1 x C). The decoder projects the noisy
//! motion to C channels, runs biased conditional self-attention, biased
//! conditional cross-attention against e_a and a feedforward, each with a
//! residual connection, then projects back to V*3. All T frames are
//! processed in parallel.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_backward, biased_conditional_attention, variant_biases, AttentionParams,
    AttentionVariant, AttnCache, BiasMatrix,
};
use crate::nn::{check_finite, gelu_backward, gelu_map, Conv1d, Linear};
use crate::{Error, Motion, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    /// Hidden channel dimension C.
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Vertices per frame.
    pub vertex_count: usize,
    /// Audio feature dimension D.
    pub audio_dim: usize,
    /// Number of training subjects K.
    pub style_count: usize,
    /// Frames per second; also the self-bias interval p.
    pub fps: usize,
    /// Total diffusion steps N.
    pub diffusion_steps: usize,
    pub variant: AttentionVariant,
}

impl DenoiserConfig {
    /// Desk-scale defaults. The reference setup uses C=512/1024 with
    /// ff=2C, 4 heads and a single block; we keep the shape and shrink C.
    pub fn toy(vertex_count: usize, audio_dim: usize, style_count: usize) -> Self {
        Self {
            hidden_dim: 64,
            ff_dim: 128,
            heads: 4,
            blocks: 1,
            vertex_count,
            audio_dim,
            style_count,
            fps: 25,
            diffusion_steps: 50,
            variant: AttentionVariant::Full,
        }
    }

    pub fn motion_dim(&self) -> usize {
        self.vertex_count * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.ff_dim == 0
            || self.heads == 0
            || self.blocks == 0
            || self.vertex_count == 0
            || self.audio_dim == 0
            || self.style_count == 0
            || self.fps == 0
            || self.diffusion_steps == 0
        {
            return Err(Error::Config("all DenoiserConfig fields must be positive".into()));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even (sinusoidal step encoding)".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub audio_conv1: Conv1d,
    pub audio_conv2: Conv1d,
    pub audio_lin: Linear,
    /// (K, C) style table; a one-hot style selects its row.
    pub style_table: Array2<f64>,
    pub step_lin: Linear,
    pub input_proj: Linear,
    pub output_proj: Linear,
    pub blocks: Vec<BlockParams>,
}

impl DenoiserParams {
    pub fn zeros(cfg: &DenoiserConfig) -> Self {
        let c = cfg.hidden_dim;
        Self {
            audio_conv1: Conv1d::zeros(cfg.audio_dim, c),
            audio_conv2: Conv1d::zeros(c, c),
            audio_lin: Linear::zeros(c, c),
            style_table: Array2::zeros((cfg.style_count, c)),
            step_lin: Linear::zeros(c, c),
            input_proj: Linear::zeros(cfg.motion_dim(), c),
            output_proj: Linear::zeros(c, cfg.motion_dim()),
            blocks: (0..cfg.blocks)
                .map(|_| BlockParams {
                    self_attn: AttentionParams::zeros(c),
                    cross_attn: AttentionParams::zeros(c),
                    ff1: Linear::zeros(c, cfg.ff_dim),
                    ff2: Linear::zeros(cfg.ff_dim, c),
                })
                .collect(),
        }
    }

    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.hidden_dim;
        let limit = (6.0 / (cfg.style_count + c) as f64).sqrt();
        use rand::Rng;
        Self {
            audio_conv1: Conv1d::xavier(cfg.audio_dim, c, &mut rng),
            audio_conv2: Conv1d::xavier(c, c, &mut rng),
            audio_lin: Linear::xavier(c, c, &mut rng),
            style_table: Array2::from_shape_fn((cfg.style_count, c), |_| {
                rng.random_range(-limit..limit)
            }),
            step_lin: Linear::xavier(c, c, &mut rng),
            input_proj: Linear::xavier(cfg.motion_dim(), c, &mut rng),
            output_proj: Linear::xavier(c, cfg.motion_dim(), &mut rng),
            blocks: (0..cfg.blocks)
                .map(|_| BlockParams {
                    self_attn: AttentionParams::xavier(c, &mut rng),
                    cross_attn: AttentionParams::xavier(c, &mut rng),
                    ff1: Linear::xavier(c, cfg.ff_dim, &mut rng),
                    ff2: Linear::xavier(cfg.ff_dim, c, &mut rng),
                })
                .collect(),
        }
    }

    /// Visit every parameter tensor as a flat slice, in a fixed canonical
    /// order shared by gradients, the optimizer state, checkpoints and the
    /// finite-difference harness.
    pub fn visit(&self, f: &mut impl FnMut(&str, &[f64])) {
        let lin = |f: &mut dyn FnMut(&str, &[f64]), name: &str, l: &Linear| {
            f(&format!("{name}.w"), l.w.as_slice().unwrap());
            f(&format!("{name}.b"), l.b.as_slice().unwrap());
        };
        let conv = |f: &mut dyn FnMut(&str, &[f64]), name: &str, c: &Conv1d| {
            for (k, w) in c.w.iter().enumerate() {
                f(&format!("{name}.w{k}"), w.as_slice().unwrap());
            }
            f(&format!("{name}.b"), c.b.as_slice().unwrap());
        };
        let attn = |f: &mut dyn FnMut(&str, &[f64]), name: &str, a: &AttentionParams| {
            lin(f, &format!("{name}.wq"), &a.wq);
            lin(f, &format!("{name}.wk"), &a.wk);
            lin(f, &format!("{name}.wv"), &a.wv);
            lin(f, &format!("{name}.wo"), &a.wo);
        };
        conv(f, "audio_conv1", &self.audio_conv1);
        conv(f, "audio_conv2", &self.audio_conv2);
        lin(f, "audio_lin", &self.audio_lin);
        f("style_table", self.style_table.as_slice().unwrap());
        lin(f, "step_lin", &self.step_lin);
        lin(f, "input_proj", &self.input_proj);
        lin(f, "output_proj", &self.output_proj);
        for (i, b) in self.blocks.iter().enumerate() {
            attn(f, &format!("block{i}.self_attn"), &b.self_attn);
            attn(f, &format!("block{i}.cross_attn"), &b.cross_attn);
            lin(f, &format!("block{i}.ff1"), &b.ff1);
            lin(f, &format!("block{i}.ff2"), &b.ff2);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [f64])) {
        let lin = |f: &mut dyn FnMut(&str, &mut [f64]), name: &str, l: &mut Linear| {
            f(&format!("{name}.w"), l.w.as_slice_mut().unwrap());
            f(&format!("{name}.b"), l.b.as_slice_mut().unwrap());
        };
        let conv = |f: &mut dyn FnMut(&str, &mut [f64]), name: &str, c: &mut Conv1d| {
            for (k, w) in c.w.iter_mut().enumerate() {
                f(&format!("{name}.w{k}"), w.as_slice_mut().unwrap());
            }
            f(&format!("{name}.b"), c.b.as_slice_mut().unwrap());
        };
        let attn = |f: &mut dyn FnMut(&str, &mut [f64]), name: &str, a: &mut AttentionParams| {
            lin(f, &format!("{name}.wq"), &mut a.wq);
            lin(f, &format!("{name}.wk"), &mut a.wk);
            lin(f, &format!("{name}.wv"), &mut a.wv);
            lin(f, &format!("{name}.wo"), &mut a.wo);
        };
        conv(f, "audio_conv1", &mut self.audio_conv1);
        conv(f, "audio_conv2", &mut self.audio_conv2);
        lin(f, "audio_lin", &mut self.audio_lin);
        f("style_table", self.style_table.as_slice_mut().unwrap());
        lin(f, "step_lin", &mut self.step_lin);
        lin(f, "input_proj", &mut self.input_proj);
        lin(f, "output_proj", &mut self.output_proj);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            attn(f, &format!("block{i}.self_attn"), &mut b.self_attn);
            attn(f, &format!("block{i}.cross_attn"), &mut b.cross_attn);
            lin(f, &format!("block{i}.ff1"), &mut b.ff1);
            lin(f, &format!("block{i}.ff2"), &mut b.ff2);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    /// Flattened copy of all parameters in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len());
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    /// In-place elementwise update over (self, a, b) triples.
    pub fn zip2_mut(&mut self, a: &Self, b: &Self, f: impl Fn(&mut f64, f64, f64) + Copy) {
        let fa = a.to_flat();
        let fb = b.to_flat();
        let mut off = 0;
        self.visit_mut(&mut |_, s| {
            for v in s.iter_mut() {
                f(v, fa[off], fb[off]);
                off += 1;
            }
        });
    }

    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        let fo = other.to_flat();
        let mut off = 0;
        self.visit_mut(&mut |_, s| {
            for v in s.iter_mut() {
                *v += alpha * fo[off];
                off += 1;
            }
        });
    }

    pub fn scale(&mut self, alpha: f64) {
        self.visit_mut(&mut |_, s| {
            for v in s.iter_mut() {
                *v *= alpha;
            }
        });
    }
}

/// Sinusoidal frequency encoding of an integer step, length C (even):
/// pairs (sin(n w_i), cos(n w_i)) over a geometric frequency ladder.
pub fn sinusoid_encoding(n: usize, c: usize) -> Array1<f64> {
    assert!(c >= 2 && c % 2 == 0);
    let half = c / 2;
    let mut enc = Array1::zeros(c);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        enc[2 * i] = (n as f64 * freq).sin();
        enc[2 * i + 1] = (n as f64 * freq).cos();
    }
    enc
}

pub struct AudioCache {
    pub input: Array2<f64>,
    pub h1: Array2<f64>,
    pub g1: Array2<f64>,
    pub h2: Array2<f64>,
    pub g2: Array2<f64>,
}

struct AttnLayerCache {
    q_in: Array2<f64>,
    cache: AttnCache,
}

struct BlockCache {
    self_attn: AttnLayerCache,
    cross_attn: Option<(Array2<f64>, AttnLayerCache)>, // (kv source h1-state, cache)
    ff_in: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_mid: Array2<f64>,
}

pub struct ForwardCache {
    x_in: Array2<f64>,
    audio: Option<AudioCache>,
    e_a: Array2<f64>,
    step_sinusoid: Array1<f64>,
    style_index: usize,
    blocks: Vec<BlockCache>,
    h_final: Array2<f64>,
    /// Rows of the sequence fed to output_proj (motion rows only for the
    /// fully-self-attention variant).
    joint: bool,
    t: usize,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: DenoiserParams,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: DenoiserParams::init(&config, seed),
            config,
        })
    }

    /// e_n = linear(sinusoid(n)). Errors when n exceeds the schedule length.
    pub fn step_embedding(&self, n: usize) -> Result<Array1<f64>> {
        if n > self.config.diffusion_steps {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {n} out of range 0..={}",
                self.config.diffusion_steps
            )));
        }
        let enc = sinusoid_encoding(n, self.config.hidden_dim);
        let enc2 = enc.clone().insert_axis(ndarray::Axis(0));
        Ok(self.params.step_lin.forward(&enc2).row(0).to_owned())
    }

    /// e_s = row k of the style table.
    pub fn style_embedding(&self, k: usize) -> Result<Array1<f64>> {
        if k >= self.config.style_count {
            return Err(Error::InvalidArgument(format!(
                "style index {k} out of range 0..{}",
                self.config.style_count
            )));
        }
        Ok(self.params.style_table.row(k).to_owned())
    }

    /// Two kernel-3 temporal convolutions with GELU, then a linear map to
    /// C. T is preserved exactly.
    pub fn audio_encode(&self, a: &Array2<f64>) -> Result<(Array2<f64>, AudioCache)> {
        check_finite(a, "audio features")?;
        if a.ncols() != self.config.audio_dim {
            return Err(Error::ShapeMismatch(format!(
                "audio feature dim {} != configured {}",
                a.ncols(),
                self.config.audio_dim
            )));
        }
        let h1 = self.params.audio_conv1.forward(a);
        let g1 = gelu_map(&h1);
        let h2 = self.params.audio_conv2.forward(&g1);
        let g2 = gelu_map(&h2);
        let e_a = self.params.audio_lin.forward(&g2);
        Ok((
            e_a,
            AudioCache {
                input: a.clone(),
                h1,
                g1,
                h2,
                g2,
            },
        ))
    }

    pub fn denoise(&self, x_n: &Motion, audio: &Array2<f64>, style_k: usize, n: usize) -> Result<Motion> {
        Ok(self.denoise_full(x_n, audio, style_k, n)?.0)
    }

    /// Full forward pass retaining every intermediate needed by
    /// [`Denoiser::backward`]. `audio` is (T, D) per-frame features;
    /// pass zeros for the unconditional branch.
    pub fn denoise_full(
        &self,
        x_n: &Motion,
        audio: &Array2<f64>,
        style_k: usize,
        n: usize,
    ) -> Result<(Motion, ForwardCache)> {
        check_finite(x_n, "noisy motion")?;
        let t = x_n.nrows();
        if x_n.ncols() != self.config.motion_dim() {
            return Err(Error::ShapeMismatch(format!(
                "motion dim {} != configured V*3 = {}",
                x_n.ncols(),
                self.config.motion_dim()
            )));
        }
        if audio.nrows() != t {
            return Err(Error::ShapeMismatch(format!(
                "audio frames {} != motion frames {t}",
                audio.nrows()
            )));
        }
        let (e_a, audio_cache) = self.audio_encode(audio)?;
        let e_s = self.style_embedding(style_k)?;
        let step_sinusoid = sinusoid_encoding(n, self.config.hidden_dim);
        let e_n = self.step_embedding(n)?;

        let biases = variant_biases(self.config.variant, t, self.config.fps);
        let joint = self.config.variant == AttentionVariant::FullySelfAttn;

        let proj = self.params.input_proj.forward(x_n);
        let c = self.config.hidden_dim;
        let h0 = if joint {
            let mut h = Array2::zeros((2 * t + 2, c));
            h.slice_mut(ndarray::s![..t, ..]).assign(&proj);
            h.slice_mut(ndarray::s![t..2 * t, ..]).assign(&e_a);
            h.row_mut(2 * t).assign(&e_s);
            h.row_mut(2 * t + 1).assign(&e_n);
            h
        } else {
            proj
        };

        let mut h = h0.clone();
        let mut block_caches = Vec::with_capacity(self.config.blocks);
        for block in &self.params.blocks {
            let conds = if biases.self_conds {
                Some((&e_s, &e_n))
            } else {
                None
            };
            let (a_s, sa_cache) = biased_conditional_attention(
                &h,
                &h,
                conds,
                &biases.self_bias,
                self.config.heads,
                &block.self_attn,
            )?;
            let q_in_self = h.clone();
            let h1 = &h + &a_s;

            let (h2, cross_cache) = if let Some(cross_bias) = &biases.cross_bias {
                let (a_c, ca_cache) = biased_conditional_attention(
                    &h1,
                    &e_a,
                    Some((&e_s, &e_n)),
                    cross_bias,
                    self.config.heads,
                    &block.cross_attn,
                )?;
                (
                    &h1 + &a_c,
                    Some((
                        h1.clone(),
                        AttnLayerCache {
                            q_in: h1.clone(),
                            cache: ca_cache,
                        },
                    )),
                )
            } else {
                (h1.clone(), None)
            };

            let ff_pre = block.ff1.forward(&h2);
            let ff_mid = gelu_map(&ff_pre);
            let ff_out = block.ff2.forward(&ff_mid);
            let h3 = &h2 + &ff_out;

            block_caches.push(BlockCache {
                self_attn: AttnLayerCache {
                    q_in: q_in_self,
                    cache: sa_cache,
                },
                cross_attn: cross_cache,
                ff_in: h2,
                ff_pre,
                ff_mid,
            });
            h = h3;
        }

        let motion_rows = if joint {
            h.slice(ndarray::s![..t, ..]).to_owned()
        } else {
            h.clone()
        };
        let x_hat = self.params.output_proj.forward(&motion_rows);

        Ok((
            x_hat,
            ForwardCache {
                x_in: x_n.clone(),
                audio: Some(audio_cache),
                e_a,
                step_sinusoid,
                style_index: style_k,
                blocks: block_caches,
                h_final: h,
                joint,
                t,
            },
        ))
    }

    /// Backpropagate d(loss)/d(x_hat) through the cached forward pass,
    /// returning parameter gradients in the canonical layout.
    pub fn backward(&self, cache: &ForwardCache, d_x_hat: &Array2<f64>) -> DenoiserParams {
        let mut grads = DenoiserParams::zeros(&self.config);
        let t = cache.t;
        let c = self.config.hidden_dim;
        let biases = variant_biases(self.config.variant, t, self.config.fps);

        let motion_rows = if cache.joint {
            cache.h_final.slice(ndarray::s![..t, ..]).to_owned()
        } else {
            cache.h_final.clone()
        };
        let d_motion_rows =
            self.params
                .output_proj
                .backward(&motion_rows, d_x_hat, &mut grads.output_proj);

        let mut d_h = if cache.joint {
            let mut d = Array2::zeros(cache.h_final.raw_dim());
            d.slice_mut(ndarray::s![..t, ..]).assign(&d_motion_rows);
            d
        } else {
            d_motion_rows
        };

        let mut d_e_a = Array2::zeros(cache.e_a.raw_dim());
        let mut d_e_s = Array1::zeros(c);
        let mut d_e_n = Array1::zeros(c);

        for (bi, block) in self.params.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            let gb = &mut grads.blocks[bi];

            // h3 = h2 + ff2(gelu(ff1(h2)))
            let d_h3 = d_h;
            let d_ff_out = d_h3.clone();
            let d_ff_mid = block.ff2.backward(&bc.ff_mid, &d_ff_out, &mut gb.ff2);
            let d_ff_pre = gelu_backward(&bc.ff_pre, &d_ff_mid);
            let mut d_h2 = block.ff1.backward(&bc.ff_in, &d_ff_pre, &mut gb.ff1);
            d_h2 += &d_h3;

            // h2 = h1 + cross_attn(h1, e_a)
            let d_h1 = if let Some((_, ca)) = &bc.cross_attn {
                let ag = attention_backward(
                    &d_h2,
                    &ca.q_in,
                    &cache.e_a,
                    &ca.cache,
                    self.config.heads,
                    &block.cross_attn,
                    &mut gb.cross_attn,
                );
                d_e_a += &ag.d_kv_in;
                if let Some(ds) = ag.d_e_s {
                    d_e_s += &ds;
                }
                if let Some(dn) = ag.d_e_n {
                    d_e_n += &dn;
                }
                &d_h2 + &ag.d_q_in
            } else {
                d_h2
            };

            // h1 = h0 + self_attn(h0, h0)
            let ag = attention_backward(
                &d_h1,
                &bc.self_attn.q_in,
                &bc.self_attn.q_in,
                &bc.self_attn.cache,
                self.config.heads,
                &block.self_attn,
                &mut gb.self_attn,
            );
            let mut d_h0 = d_h1;
            d_h0 += &ag.d_q_in;
            d_h0 += &ag.d_kv_in;
            if biases.self_conds {
                if let Some(ds) = ag.d_e_s {
                    d_e_s += &ds;
                }
                if let Some(dn) = ag.d_e_n {
                    d_e_n += &dn;
                }
            }
            d_h = d_h0;
        }

        // split gradient on the initial hidden state
        let d_proj = if cache.joint {
            d_e_a += &d_h.slice(ndarray::s![t..2 * t, ..]);
            d_e_s += &d_h.row(2 * t);
            d_e_n += &d_h.row(2 * t + 1);
            d_h.slice(ndarray::s![..t, ..]).to_owned()
        } else {
            d_h
        };
        self.params
            .input_proj
            .backward(&cache.x_in, &d_proj, &mut grads.input_proj);

        // step embedding: e_n = step_lin(sinusoid)
        let sin2 = cache
            .step_sinusoid
            .clone()
            .insert_axis(ndarray::Axis(0));
        let d_en2 = d_e_n.insert_axis(ndarray::Axis(0));
        self.params
            .step_lin
            .backward(&sin2, &d_en2, &mut grads.step_lin);

        // style embedding: row select
        {
            let mut row = grads.style_table.row_mut(cache.style_index);
            row += &d_e_s;
        }

        // audio encoder
        if let Some(ac) = &cache.audio {
            let d_g2 = self
                .params
                .audio_lin
                .backward(&ac.g2, &d_e_a, &mut grads.audio_lin);
            let d_h2 = gelu_backward(&ac.h2, &d_g2);
            let d_g1 = self
                .params
                .audio_conv2
                .backward(&ac.g1, &d_h2, &mut grads.audio_conv2);
            let d_h1 = gelu_backward(&ac.h1, &d_g1);
            let _ = self
                .params
                .audio_conv1
                .backward(&ac.input, &d_h1, &mut grads.audio_conv1);
        }

        grads
    }
}

// --- checkpoint format ------------------------------------------------
//
// magic "DSCK", u16 version (=1), config: 9 u32 fields + 1 u8 variant,
// then for each tensor in canonical order: u16 name length, name bytes,
// u64 element count, f64 little-endian data. Round-trips bit-exactly.

const CKPT_MAGIC: &[u8; 4] = b"DSCK";
const CKPT_VERSION: u16 = 1;

fn variant_code(v: AttentionVariant) -> u8 {
    AttentionVariant::ALL.iter().position(|x| *x == v).unwrap() as u8
}

pub fn save_checkpoint(path: &Path, denoiser: &Denoiser) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = &denoiser.config;
    for v in [
        cfg.hidden_dim,
        cfg.ff_dim,
        cfg.heads,
        cfg.blocks,
        cfg.vertex_count,
        cfg.audio_dim,
        cfg.style_count,
        cfg.fps,
        cfg.diffusion_steps,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(variant_code(cfg.variant));
    denoiser.params.visit(&mut |name, data| {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Denoiser> {
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::TruncatedPayload {
                path: pstr.clone(),
                expected: *off + n,
                got: bytes.len(),
            });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != CKPT_MAGIC {
        return Err(Error::CorruptHeader {
            path: pstr,
            detail: "bad magic".into(),
        });
    }
    let version = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            path: pstr,
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let mut fields = [0usize; 9];
    for f in fields.iter_mut() {
        *f = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    }
    let vcode = take(&mut off, 1)?[0] as usize;
    let variant = *AttentionVariant::ALL.get(vcode).ok_or_else(|| Error::CorruptHeader {
        path: path.display().to_string(),
        detail: format!("invalid variant code {vcode}"),
    })?;
    let config = DenoiserConfig {
        hidden_dim: fields[0],
        ff_dim: fields[1],
        heads: fields[2],
        blocks: fields[3],
        vertex_count: fields[4],
        audio_dim: fields[5],
        style_count: fields[6],
        fps: fields[7],
        diffusion_steps: fields[8],
        variant,
    };
    config.validate()?;
    let mut params = DenoiserParams::zeros(&config);
    let mut err: Option<Error> = None;
    params.visit_mut(&mut |name, data| {
        if err.is_some() {
            return;
        }
        let r = (|| -> Result<()> {
            let nlen = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
            let fname = std::str::from_utf8(take(&mut off, nlen)?)
                .map_err(|_| Error::CorruptHeader {
                    path: path.display().to_string(),
                    detail: "non-utf8 tensor name".into(),
                })?
                .to_string();
            if fname != name {
                return Err(Error::CorruptHeader {
                    path: path.display().to_string(),
                    detail: format!("tensor name mismatch: file '{fname}' vs expected '{name}'"),
                });
            }
            let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
            if count != data.len() {
                return Err(Error::CorruptHeader {
                    path: path.display().to_string(),
                    detail: format!("tensor '{name}' length {count} != expected {}", data.len()),
                });
            }
            let raw = take(&mut off, count * 8)?;
            for (i, v) in data.iter_mut().enumerate() {
                *v = f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
            }
            Ok(())
        })();
        if let Err(e) = r {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(Denoiser { config, params })
}

/// Precomputed biases are rebuilt per call; expose them for inspection.
pub fn biases_for(config: &DenoiserConfig, t: usize) -> (BiasMatrix, Option<BiasMatrix>) {
    let b = variant_biases(config.variant, t, config.fps);
    (b.self_bias, b.cross_bias)
}
