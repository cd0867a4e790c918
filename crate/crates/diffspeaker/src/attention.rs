//! Static attention biases and biased conditional attention.
//!
//! Cross-attention for query frame i may only see the two condition tokens
//! and the audio key aligned to frame i. Self-attention sees the condition
//! tokens freely and pays a distance penalty of -floor(d / p) toward other
//! frames, where p is the frame rate. Condition tokens (style embedding,
//! step embedding) are prepended raw to the key/value sequences.

use ndarray::{Array1, Array2, Axis};

use crate::nn::{softmax_backward, softmax_rows, Linear};
use crate::{Error, Result};

/// Additive pre-softmax mask value standing in for -inf. Large enough that
/// exp underflows to exact 0 after the row-max shift, small enough that no
/// intermediate overflows.
pub const NEG_INF: f64 = -1e9;

/// Returns true for entries that act as a hard mask.
pub fn is_masked(v: f64) -> bool {
    v <= NEG_INF / 2.0
}

/// Additive pre-softmax attention bias of shape (T, T'+nc) where nc is the
/// number of prepended condition columns (2 or 0).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    pub data: Array2<f64>,
}

impl BiasMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        for (i, row) in data.rows().into_iter().enumerate() {
            if !row.iter().any(|&v| !is_masked(v)) {
                return Err(Error::InvalidArgument(format!(
                    "bias row {i} is fully masked"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: Array2::zeros((rows, cols)),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }
}

/// Table 2 architecture variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Full,
    NoCrossBias,
    NoSelfBias,
    NoCondSelfAttn,
    FaceFormerBias,
    FullySelfAttn,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 6] = [
        AttentionVariant::Full,
        AttentionVariant::NoCrossBias,
        AttentionVariant::NoSelfBias,
        AttentionVariant::NoCondSelfAttn,
        AttentionVariant::FaceFormerBias,
        AttentionVariant::FullySelfAttn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttentionVariant::Full => "full",
            AttentionVariant::NoCrossBias => "no-cross-bias",
            AttentionVariant::NoSelfBias => "no-self-bias",
            AttentionVariant::NoCondSelfAttn => "no-cond-self-attn",
            AttentionVariant::FaceFormerBias => "faceformer-bias",
            AttentionVariant::FullySelfAttn => "fully-self-attn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention variant '{s}'")))
    }
}

/// Cross-attention bias, shape (T, T+2). Query frame i (0-based) sees the
/// two condition columns and the audio key aligned to the same frame, which
/// sits at column i+2 after the condition tokens are prepended.
pub fn cross_attention_bias(t: usize) -> BiasMatrix {
    assert!(t >= 1);
    let mut b = Array2::from_elem((t, t + 2), NEG_INF);
    for i in 0..t {
        b[[i, 0]] = 0.0;
        b[[i, 1]] = 0.0;
        b[[i, i + 2]] = 0.0;
    }
    BiasMatrix { data: b }
}

/// Self-attention bias, shape (T, T+2). Condition columns are 0; motion
/// columns pay -floor(d / p) where d is the frame distance, so the zero
/// band spans 2p-1 entries around the diagonal and the penalty grows with
/// separation.
pub fn self_attention_bias(t: usize, p: usize) -> BiasMatrix {
    assert!(t >= 1 && p >= 1);
    let mut b = Array2::zeros((t, t + 2));
    for i in 0..t {
        for j in 0..t {
            let d = i.abs_diff(j);
            b[[i, j + 2]] = -((d / p) as f64);
        }
    }
    BiasMatrix { data: b }
}

/// FaceFormer-style biases without condition columns: a causal periodic
/// self bias of shape (T, T) and a diagonal alignment cross bias of shape
/// (T, T).
pub fn faceformer_bias(t: usize, p: usize) -> (BiasMatrix, BiasMatrix) {
    assert!(t >= 1 && p >= 1);
    let mut self_b = Array2::from_elem((t, t), NEG_INF);
    let mut cross_b = Array2::from_elem((t, t), NEG_INF);
    for i in 0..t {
        for j in 0..=i {
            self_b[[i, j]] = -(((i - j) / p) as f64);
        }
        cross_b[[i, i]] = 0.0;
    }
    (BiasMatrix { data: self_b }, BiasMatrix { data: cross_b })
}

/// FaceFormer biases extended over the two prepended condition columns,
/// treating condition tokens like motion tokens sitting just before frame 0
/// (Table 2's "FaceFormer-Bias" row: the bias affects conditions and motion
/// equally instead of anchoring conditions at zero).
pub fn faceformer_bias_with_conds(t: usize, p: usize) -> (BiasMatrix, BiasMatrix) {
    let mut self_b = Array2::from_elem((t, t + 2), NEG_INF);
    let mut cross_b = Array2::from_elem((t, t + 2), NEG_INF);
    for i in 0..t {
        // condition tokens at causal positions i+2 and i+1 back from query i
        self_b[[i, 0]] = -(((i + 2) / p) as f64);
        self_b[[i, 1]] = -(((i + 1) / p) as f64);
        for j in 0..=i {
            self_b[[i, j + 2]] = -(((i - j) / p) as f64);
        }
        cross_b[[i, i + 2]] = 0.0;
    }
    (BiasMatrix { data: self_b }, BiasMatrix { data: cross_b })
}

/// Bias pair used by one decoder block for a given variant.
pub struct VariantBiases {
    pub self_bias: BiasMatrix,
    /// None only for FullySelfAttn (no cross-attention layer at all).
    pub cross_bias: Option<BiasMatrix>,
    /// Whether self-attention prepends the condition tokens.
    pub self_conds: bool,
}

pub fn variant_biases(variant: AttentionVariant, t: usize, p: usize) -> VariantBiases {
    match variant {
        AttentionVariant::Full => VariantBiases {
            self_bias: self_attention_bias(t, p),
            cross_bias: Some(cross_attention_bias(t)),
            self_conds: true,
        },
        AttentionVariant::NoCrossBias => VariantBiases {
            self_bias: self_attention_bias(t, p),
            cross_bias: Some(BiasMatrix::zeros(t, t + 2)),
            self_conds: true,
        },
        AttentionVariant::NoSelfBias => VariantBiases {
            self_bias: BiasMatrix::zeros(t, t + 2),
            cross_bias: Some(cross_attention_bias(t)),
            self_conds: true,
        },
        AttentionVariant::NoCondSelfAttn => {
            // motion block of the self bias, no condition columns
            let full = self_attention_bias(t, p);
            let motion = full.data.slice(ndarray::s![.., 2..]).to_owned();
            VariantBiases {
                self_bias: BiasMatrix { data: motion },
                cross_bias: Some(cross_attention_bias(t)),
                self_conds: false,
            }
        }
        AttentionVariant::FaceFormerBias => {
            let (s, c) = faceformer_bias_with_conds(t, p);
            VariantBiases {
                self_bias: s,
                cross_bias: Some(c),
                self_conds: true,
            }
        }
        AttentionVariant::FullySelfAttn => VariantBiases {
            // joint sequence: T motion + T audio + 2 condition tokens
            self_bias: BiasMatrix::zeros(2 * t + 2, 2 * t + 2),
            cross_bias: None,
            self_conds: false,
        },
    }
}

/// Learned projections for one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttentionParams {
    pub fn zeros(c: usize) -> Self {
        Self {
            wq: Linear::zeros(c, c),
            wk: Linear::zeros(c, c),
            wv: Linear::zeros(c, c),
            wo: Linear::zeros(c, c),
        }
    }

    pub fn xavier(c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            wq: Linear::xavier(c, c, rng),
            wk: Linear::xavier(c, c, rng),
            wv: Linear::xavier(c, c, rng),
            wo: Linear::xavier(c, c, rng),
        }
    }
}

pub struct AttnCache {
    pub q: Array2<f64>,
    pub k_full: Array2<f64>,
    pub v_full: Array2<f64>,
    /// Per-head softmax outputs, each (T, T'+nc).
    pub probs: Vec<Array2<f64>>,
    pub o_concat: Array2<f64>,
    pub nc: usize,
}

/// Biased conditional multi-head attention.
///
/// `q_in`: (T, C) query source. `kv_in`: (T', C) key/value source. When
/// `conds` is set, the style and step embeddings are prepended raw to the
/// projected keys and values, so the bias must have T'+2 columns; otherwise
/// T'. Per head: softmax(q_h [cond; K]_h^T / sqrt(C/h) + bias) [cond; V]_h,
/// heads concatenated then projected by wo.
pub fn biased_conditional_attention(
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    conds: Option<(&Array1<f64>, &Array1<f64>)>,
    bias: &BiasMatrix,
    heads: usize,
    params: &AttentionParams,
) -> Result<(Array2<f64>, AttnCache)> {
    let c = q_in.ncols();
    if c % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "channel dim {c} not divisible by {heads} heads"
        )));
    }
    if kv_in.ncols() != c {
        return Err(Error::ShapeMismatch(format!(
            "kv channel dim {} != query channel dim {c}",
            kv_in.ncols()
        )));
    }
    let nc = if conds.is_some() { 2 } else { 0 };
    let (t, t_kv) = (q_in.nrows(), kv_in.nrows());
    if bias.rows() != t || bias.cols() != t_kv + nc {
        return Err(Error::ShapeMismatch(format!(
            "bias shape ({}, {}) does not match ({t}, {})",
            bias.rows(),
            bias.cols(),
            t_kv + nc
        )));
    }

    let q = params.wq.forward(q_in);
    let k = params.wk.forward(kv_in);
    let v = params.wv.forward(kv_in);

    let mut k_full = Array2::zeros((t_kv + nc, c));
    let mut v_full = Array2::zeros((t_kv + nc, c));
    if let Some((e_s, e_n)) = conds {
        k_full.row_mut(0).assign(e_s);
        k_full.row_mut(1).assign(e_n);
        v_full.row_mut(0).assign(e_s);
        v_full.row_mut(1).assign(e_n);
    }
    k_full.slice_mut(ndarray::s![nc.., ..]).assign(&k);
    v_full.slice_mut(ndarray::s![nc.., ..]).assign(&v);

    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o_concat = Array2::zeros((t, c));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = ndarray::s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k_full.slice(cols);
        let vh = v_full.slice(cols);
        let mut logits = qh.dot(&kh.t());
        logits *= scale;
        logits += &bias.data;
        let p = softmax_rows(&logits);
        let oh = p.dot(&vh);
        o_concat.slice_mut(cols).assign(&oh);
        probs.push(p);
    }
    let out = params.wo.forward(&o_concat);
    Ok((
        out,
        AttnCache {
            q,
            k_full,
            v_full,
            probs,
            o_concat,
            nc,
        },
    ))
}

/// Gradients flowing out of an attention layer.
pub struct AttnGrads {
    pub d_q_in: Array2<f64>,
    pub d_kv_in: Array2<f64>,
    pub d_e_s: Option<Array1<f64>>,
    pub d_e_n: Option<Array1<f64>>,
}

pub fn attention_backward(
    d_out: &Array2<f64>,
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    cache: &AttnCache,
    heads: usize,
    params: &AttentionParams,
    grads: &mut AttentionParams,
) -> AttnGrads {
    let c = q_in.ncols();
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nc = cache.nc;

    let d_o_concat = params.wo.backward(&cache.o_concat, d_out, &mut grads.wo);

    let mut d_q = Array2::zeros(cache.q.raw_dim());
    let mut d_k_full = Array2::<f64>::zeros(cache.k_full.raw_dim());
    let mut d_v_full = Array2::<f64>::zeros(cache.v_full.raw_dim());
    for h in 0..heads {
        let cols = ndarray::s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let d_oh = d_o_concat.slice(cols);
        let vh = cache.v_full.slice(cols);
        let kh = cache.k_full.slice(cols);
        let qh = cache.q.slice(cols);

        let d_p = d_oh.dot(&vh.t());
        let d_vh = p.t().dot(&d_oh);
        let d_logits = softmax_backward(p, &d_p);
        let d_qh = d_logits.dot(&kh) * scale;
        let d_kh = d_logits.t().dot(&qh) * scale;

        d_q.slice_mut(cols).assign(&d_qh);
        d_k_full.slice_mut(cols).assign(&d_kh);
        d_v_full.slice_mut(cols).assign(&d_vh);
    }

    let d_q_in = params.wq.backward(q_in, &d_q, &mut grads.wq);
    let d_k = d_k_full.slice(ndarray::s![nc.., ..]).to_owned();
    let d_v = d_v_full.slice(ndarray::s![nc.., ..]).to_owned();
    let mut d_kv_in = params.wk.backward(kv_in, &d_k, &mut grads.wk);
    d_kv_in += &params.wv.backward(kv_in, &d_v, &mut grads.wv);

    let (d_e_s, d_e_n) = if nc == 2 {
        (
            Some(&d_k_full.row(0) + &d_v_full.row(0)),
            Some(&d_k_full.row(1) + &d_v_full.row(1)),
        )
    } else {
        (None, None)
    };

    // self-attention callers (same source for q and kv) must sum
    // d_q_in and d_kv_in themselves
    AttnGrads {
        d_q_in,
        d_kv_in,
        d_e_s,
        d_e_n,
    }
}

/// Head-averaged attention probability matrix, shape (T, T'+nc). Rows sum
/// to 1; masked positions are exactly 0.
pub fn attention_weights_debug(
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    conds: Option<(&Array1<f64>, &Array1<f64>)>,
    bias: &BiasMatrix,
    heads: usize,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    let (_, cache) = biased_conditional_attention(q_in, kv_in, conds, bias, heads, params)?;
    let mut acc = Array2::zeros(cache.probs[0].raw_dim());
    for p in &cache.probs {
        acc += p;
    }
    acc /= heads as f64;
    Ok(acc)
}

#[allow(unused)]
fn row_sums(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn finite_count(row: ndarray::ArrayView1<f64>) -> usize {
        row.iter().filter(|&&v| !is_masked(v)).count()
    }

    #[test]
    fn cross_bias_t1_single_row() {
        let b = cross_attention_bias(1);
        assert_eq!(b.data.shape(), &[1, 3]);
        assert_eq!(b.data.row(0).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_bias_t3_rows() {
        let b = cross_attention_bias(3);
        let ni = NEG_INF;
        assert_eq!(b.data.row(0).to_vec(), vec![0.0, 0.0, 0.0, ni, ni]);
        assert_eq!(b.data.row(1).to_vec(), vec![0.0, 0.0, ni, 0.0, ni]);
        assert_eq!(b.data.row(2).to_vec(), vec![0.0, 0.0, ni, ni, 0.0]);
    }

    #[test]
    fn cross_bias_three_finite_entries_per_row() {
        for t in 1..=64 {
            let b = cross_attention_bias(t);
            for row in b.data.rows() {
                assert_eq!(finite_count(row), 3);
            }
        }
    }

    #[test]
    fn self_bias_t4_p2_examples() {
        let b = self_attention_bias(4, 2);
        // row i=0 (paper's i=1): motion columns
        assert_eq!(
            b.data.slice(ndarray::s![0, 2..]).to_vec(),
            vec![0.0, 0.0, -1.0, -1.0]
        );
        // row i=2 (paper's i=3)
        assert_eq!(
            b.data.slice(ndarray::s![2, 2..]).to_vec(),
            vec![-1.0, 0.0, 0.0, 0.0]
        );
        for i in 0..4 {
            assert_eq!(b.data[[i, 0]], 0.0);
            assert_eq!(b.data[[i, 1]], 0.0);
        }
    }

    #[test]
    fn self_bias_band_covers_sequence_when_p_large() {
        let b = self_attention_bias(6, 6);
        assert!(b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_bias_distance_steps_t50_p25() {
        let b = self_attention_bias(50, 25);
        // frame distance d = |i - (j-2)|
        assert_eq!(b.data[[0, 24 + 2]], 0.0); // d = 24
        assert_eq!(b.data[[0, 25 + 2]], -1.0); // d = 25
        assert_eq!(b.data[[0, 49 + 2]], -1.0); // d = 49
        let b = self_attention_bias(51, 25);
        assert_eq!(b.data[[0, 50 + 2]], -2.0); // d = 50
    }

    #[test]
    fn self_bias_symmetric_in_frame_distance() {
        let b = self_attention_bias(10, 3);
        for i in 0..10usize {
            for j in 0..10usize {
                let d = i.abs_diff(j);
                let expected = -((d / 3) as f64);
                assert_eq!(b.data[[i, j + 2]], expected);
            }
        }
    }

    #[test]
    fn faceformer_self_bias_causal_and_periodic() {
        let (s, _) = faceformer_bias(6, 2);
        for i in 0..6usize {
            for j in 0..6usize {
                if j > i {
                    assert!(is_masked(s.data[[i, j]]));
                } else {
                    // independent re-evaluation of the published formula
                    assert_eq!(s.data[[i, j]], -(((i - j) / 2) as f64));
                }
            }
        }
    }

    #[test]
    fn faceformer_cross_bias_diagonal() {
        let (_, c) = faceformer_bias(2, 1);
        assert_eq!(c.data[[0, 0]], 0.0);
        assert!(is_masked(c.data[[0, 1]]));
        assert!(is_masked(c.data[[1, 0]]));
        assert_eq!(c.data[[1, 1]], 0.0);
    }

    #[test]
    fn variant_algebra() {
        let t = 5;
        let v = variant_biases(AttentionVariant::NoCrossBias, t, 2);
        assert!(v.cross_bias.unwrap().data.iter().all(|&x| x == 0.0));
        let v = variant_biases(AttentionVariant::NoSelfBias, t, 2);
        assert!(v.self_bias.data.iter().all(|&x| x == 0.0));
        let v = variant_biases(AttentionVariant::NoCondSelfAttn, t, 2);
        assert_eq!(v.self_bias.data.shape(), &[t, t]);
        assert!(!v.self_conds);
        let v = variant_biases(AttentionVariant::FullySelfAttn, t, 2);
        assert_eq!(v.self_bias.data.shape(), &[2 * t + 2, 2 * t + 2]);
        assert!(v.cross_bias.is_none());
    }

    #[test]
    fn fully_masked_row_rejected() {
        let data = Array2::from_elem((2, 3), NEG_INF);
        assert!(BiasMatrix::new(data).is_err());
    }

    /// Dense reference: explicit softmax over the full logit matrix, no
    /// masking shortcuts, computed independently of the library path.
    fn dense_attention_oracle(
        q_in: &Array2<f64>,
        kv_in: &Array2<f64>,
        conds: Option<(&Array1<f64>, &Array1<f64>)>,
        bias: &Array2<f64>,
        heads: usize,
        p: &AttentionParams,
    ) -> Array2<f64> {
        let t = q_in.nrows();
        let c = q_in.ncols();
        let dh = c / heads;
        let q = q_in.dot(&p.wq.w) + &p.wq.b;
        let k = kv_in.dot(&p.wk.w) + &p.wk.b;
        let v = kv_in.dot(&p.wv.w) + &p.wv.b;
        let nc = if conds.is_some() { 2 } else { 0 };
        let rows = kv_in.nrows() + nc;
        let mut kf = Array2::zeros((rows, c));
        let mut vf = Array2::zeros((rows, c));
        if let Some((es, en)) = conds {
            kf.row_mut(0).assign(es);
            kf.row_mut(1).assign(en);
            vf.row_mut(0).assign(es);
            vf.row_mut(1).assign(en);
        }
        kf.slice_mut(ndarray::s![nc.., ..]).assign(&k);
        vf.slice_mut(ndarray::s![nc.., ..]).assign(&v);
        let mut o = Array2::zeros((t, c));
        for h in 0..heads {
            for i in 0..t {
                let mut logits = vec![0.0f64; rows];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += q[[i, h * dh + d]] * kf[[j, h * dh + d]];
                    }
                    *l = dot / (dh as f64).sqrt() + bias[[i, j]];
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for d in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..rows {
                        acc += exps[j] / z * vf[[j, h * dh + d]];
                    }
                    o[[i, h * dh + d]] = acc;
                }
            }
        }
        o.dot(&p.wo.w) + &p.wo.b
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..20 {
            let t = rng.random_range(1..=8);
            let heads = [1, 2][case % 2];
            let c = 8 * heads;
            let params = AttentionParams::xavier(c, &mut rng);
            let q_in = rand_mat(t, c, &mut rng);
            let kv_in = rand_mat(t, c, &mut rng);
            let e_s = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
            let e_n = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
            let bias = cross_attention_bias(t);
            let (out, _) = biased_conditional_attention(
                &q_in,
                &kv_in,
                Some((&e_s, &e_n)),
                &bias,
                heads,
                &params,
            )
            .unwrap();
            let expect =
                dense_attention_oracle(&q_in, &kv_in, Some((&e_s, &e_n)), &bias.data, heads, &params);
            let max_rel = out
                .iter()
                .zip(expect.iter())
                .map(|(a, b)| (a - b).abs() / b.abs().max(1e-9))
                .fold(0.0f64, f64::max);
            assert!(max_rel < 1e-6, "case {case}: rel err {max_rel}");
        }
    }

    #[test]
    fn single_finite_entry_selects_value_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let params = AttentionParams::xavier(c, &mut rng);
        let q_in = rand_mat(2, c, &mut rng);
        let kv_in = rand_mat(3, c, &mut rng);
        // only column 2 (first motion key... column j* = 3) finite in row 0
        let mut bias = Array2::from_elem((2, 5), NEG_INF);
        bias[[0, 3]] = 0.0;
        bias[[1, 0]] = 0.0;
        let e_s = Array1::zeros(c);
        let e_n = Array1::zeros(c);
        let bias = BiasMatrix::new(bias).unwrap();
        let (out, cache) = biased_conditional_attention(
            &q_in,
            &kv_in,
            Some((&e_s, &e_n)),
            &bias,
            1,
            &params,
        )
        .unwrap();
        // row 0 of o_concat must equal v_full row 3 exactly (one-hot softmax)
        for d in 0..c {
            assert_eq!(cache.probs[0][[0, 3]], 1.0);
            assert_eq!(cache.o_concat[[0, d]], cache.v_full[[3, d]]);
        }
        // and the output equals the projected value row
        let expected = cache
            .v_full
            .row(3)
            .dot(&params.wo.w)
            + &params.wo.b;
        for d in 0..c {
            assert!((out[[0, d]] - expected[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_values_zero_bias_give_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 4;
        let mut params = AttentionParams::xavier(c, &mut rng);
        // wv = identity, wo = identity so values pass through untouched
        params.wv = Linear::zeros(c, c);
        params.wo = Linear::zeros(c, c);
        for i in 0..c {
            params.wv.w[[i, i]] = 1.0;
            params.wo.w[[i, i]] = 1.0;
        }
        let q_in = rand_mat(3, c, &mut rng);
        let row = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let mut kv_in = Array2::zeros((3, c));
        for mut r in kv_in.rows_mut() {
            r.assign(&row);
        }
        let bias = BiasMatrix::zeros(3, 3);
        let (out, _) =
            biased_conditional_attention(&q_in, &kv_in, None, &bias, 1, &params).unwrap();
        for i in 0..3 {
            for d in 0..c {
                assert!((out[[i, d]] - row[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_debug_mask_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 8;
        let params = AttentionParams::xavier(c, &mut rng);
        let t = 5;
        let q_in = rand_mat(t, c, &mut rng);
        let kv_in = rand_mat(t, c, &mut rng);
        let e_s = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let e_n = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let bias = cross_attention_bias(t);
        let w =
            attention_weights_debug(&q_in, &kv_in, Some((&e_s, &e_n)), &bias, 2, &params).unwrap();
        for i in 0..t {
            let sum: f64 = w.row(i).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for j in 0..t + 2 {
                if is_masked(bias.data[[i, j]]) {
                    assert_eq!(w[[i, j]], 0.0, "weight not exactly 0 at masked ({i},{j})");
                } else if j < 2 {
                    assert!(w[[i, j]] > 0.0, "condition column {j} unreachable");
                }
            }
        }
    }

    #[test]
    fn equal_logits_2x2_give_quarter_weights() {
        let c = 2;
        let params = AttentionParams::zeros(c); // zero q => equal logits
        let q_in = Array2::ones((2, c));
        let kv_in = Array2::ones((2, c));
        let e_s = Array1::ones(c);
        let e_n = Array1::ones(c);
        let bias = BiasMatrix::zeros(2, 4);
        let w =
            attention_weights_debug(&q_in, &kv_in, Some((&e_s, &e_n)), &bias, 1, &params).unwrap();
        for v in w.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_locality_of_cross_attention() {
        // swapping motion frames i <-> i' together with the matching bias
        // rows and aligned audio frames permutes outputs identically
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 8;
        let t = 4;
        let params = AttentionParams::xavier(c, &mut rng);
        let q_in = rand_mat(t, c, &mut rng);
        let kv_in = rand_mat(t, c, &mut rng);
        let e_s = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let e_n = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let bias = cross_attention_bias(t);
        let (out, _) = biased_conditional_attention(
            &q_in,
            &kv_in,
            Some((&e_s, &e_n)),
            &bias,
            1,
            &params,
        )
        .unwrap();

        let mut q_p = q_in.clone();
        let mut kv_p = kv_in.clone();
        let (a, b) = (1, 3);
        for d in 0..c {
            q_p[[a, d]] = q_in[[b, d]];
            q_p[[b, d]] = q_in[[a, d]];
            kv_p[[a, d]] = kv_in[[b, d]];
            kv_p[[b, d]] = kv_in[[a, d]];
        }
        let (out_p, _) = biased_conditional_attention(
            &q_p,
            &kv_p,
            Some((&e_s, &e_n)),
            &bias,
            1,
            &params,
        )
        .unwrap();
        for d in 0..c {
            assert!((out[[a, d]] - out_p[[b, d]]).abs() < 1e-12);
            assert!((out[[b, d]] - out_p[[a, d]]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let t = 3;
        let params = AttentionParams::xavier(c, &mut rng);
        let q_in = rand_mat(t, c, &mut rng);
        let kv_in = rand_mat(t, c, &mut rng);
        let e_s = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let e_n = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
        let bias = self_attention_bias(t, 1);

        let loss = |p: &AttentionParams, q: &Array2<f64>, kv: &Array2<f64>| {
            let (out, _) =
                biased_conditional_attention(q, kv, Some((&e_s, &e_n)), &bias, 2, p).unwrap();
            out.mapv(|v| v * v).sum()
        };

        let (out, cache) =
            biased_conditional_attention(&q_in, &kv_in, Some((&e_s, &e_n)), &bias, 2, &params)
                .unwrap();
        let d_out = out.mapv(|v| 2.0 * v);
        let mut grads = AttentionParams::zeros(c);
        let ag = attention_backward(&d_out, &q_in, &kv_in, &cache, 2, &params, &mut grads);

        let h = 1e-6;
        for idx in [(0usize, 0usize), (1, 2), (3, 1)] {
            let mut pp = params.clone();
            pp.wq.w[idx] += h;
            let mut pm = params.clone();
            pm.wq.w[idx] -= h;
            let fd = (loss(&pp, &q_in, &kv_in) - loss(&pm, &q_in, &kv_in)) / (2.0 * h);
            assert!(
                (fd - grads.wq.w[idx]).abs() < 1e-4 * fd.abs().max(1.0),
                "wq grad mismatch at {idx:?}: fd {fd} vs {}",
                grads.wq.w[idx]
            );
        }
        let mut qp = q_in.clone();
        qp[[1, 1]] += h;
        let mut qm = q_in.clone();
        qm[[1, 1]] -= h;
        let fd = (loss(&params, &qp, &kv_in) - loss(&params, &qm, &kv_in)) / (2.0 * h);
        assert!((fd - ag.d_q_in[[1, 1]]).abs() < 1e-4 * fd.abs().max(1.0));
        let mut kp = kv_in.clone();
        kp[[2, 0]] += h;
        let mut km = kv_in.clone();
        km[[2, 0]] -= h;
        let fd = (loss(&params, &q_in, &kp) - loss(&params, &q_in, &km)) / (2.0 * h);
        assert!((fd - ag.d_kv_in[[2, 0]]).abs() < 1e-4 * fd.abs().max(1.0));
    }
}
