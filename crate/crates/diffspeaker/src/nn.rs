//! Small dense layers with explicit forward caches and hand-written
//! backward passes. Everything is f64 and single-threaded per call so
//! gradient checks against central finite differences stay tight.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// y = x . w + b, with x of shape (n, in) and w of shape (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
        Self {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Returns d_x; accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &Array2<f64>, d_y: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.w += &x.t().dot(d_y);
        grads.b += &d_y.sum_axis(Axis(0));
        d_y.dot(&self.w.t())
    }
}

/// 1-D convolution along the time axis, kernel width 3, zero padding so
/// the sequence length is preserved. Weights are one (in, out) matrix per
/// kernel tap.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: [Array2<f64>; 3],
    pub b: Array1<f64>,
}

impl Conv1d {
    pub fn zeros(ch_in: usize, ch_out: usize) -> Self {
        Self {
            w: std::array::from_fn(|_| Array2::zeros((ch_in, ch_out))),
            b: Array1::zeros(ch_out),
        }
    }

    pub fn xavier(ch_in: usize, ch_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (3 * ch_in + ch_out) as f64).sqrt();
        Self {
            w: std::array::from_fn(|_| {
                Array2::from_shape_fn((ch_in, ch_out), |_| rng.random_range(-limit..limit))
            }),
            b: Array1::zeros(ch_out),
        }
    }

    /// x: (T, in) -> (T, out); tap k reads frame t + k - 1.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let t_len = x.nrows();
        let ch_out = self.b.len();
        let mut y = Array2::zeros((t_len, ch_out));
        y += &self.b;
        for (k, w) in self.w.iter().enumerate() {
            let shift = k as isize - 1;
            for t in 0..t_len {
                let src = t as isize + shift;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let contrib = x.row(src as usize).dot(w);
                let mut row = y.row_mut(t);
                row += &contrib;
            }
        }
        y
    }

    pub fn backward(&self, x: &Array2<f64>, d_y: &Array2<f64>, grads: &mut Conv1d) -> Array2<f64> {
        let t_len = x.nrows();
        let mut d_x = Array2::zeros(x.raw_dim());
        grads.b += &d_y.sum_axis(Axis(0));
        for (k, w) in self.w.iter().enumerate() {
            let shift = k as isize - 1;
            for t in 0..t_len {
                let src = t as isize + shift;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                // y[t] += x[src] . w  =>  dw += x[src]^T d_y[t]; d_x[src] += d_y[t] . w^T
                let xr = x.row(src);
                let dyr = d_y.row(t);
                for (i, xi) in xr.iter().enumerate() {
                    for (j, dj) in dyr.iter().enumerate() {
                        grads.w[k][[i, j]] += xi * dj;
                    }
                }
                let contrib = dyr.dot(&w.t());
                let mut row = d_x.row_mut(src);
                row += &contrib;
            }
        }
        d_x
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu_map(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

pub fn gelu_backward(x: &Array2<f64>, d_y: &Array2<f64>) -> Array2<f64> {
    let mut d_x = x.mapv(gelu_deriv);
    d_x *= d_y;
    d_x
}

/// Row-wise softmax. Masked logits (large negative) underflow to exact 0.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            // exp underflows to exactly 0 well before -1e6; skip the call
            // for heavily masked logits (same bits, much cheaper)
            let shifted = *v - max;
            *v = if shifted < -1e6 { 0.0 } else { shifted.exp() };
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// d_logits given softmax output p and upstream d_p.
pub fn softmax_backward(p: &Array2<f64>, d_p: &Array2<f64>) -> Array2<f64> {
    let mut d_logits = Array2::zeros(p.raw_dim());
    for i in 0..p.nrows() {
        let pi = p.row(i);
        let di = d_p.row(i);
        let dot: f64 = pi.iter().zip(di.iter()).map(|(a, b)| a * b).sum();
        for j in 0..p.ncols() {
            d_logits[[i, j]] = pi[j] * (di[j] - dot);
        }
    }
    d_logits
}

pub fn check_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}
