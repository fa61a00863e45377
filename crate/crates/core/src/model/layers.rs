//! Layers with explicit forward/backward passes.
//!
//! Activations are `(batch · seq, features)` matrices with rows ordered by
//! sample, then position. Forward passes take `&self` and return a cache;
//! backward passes accumulate parameter gradients and return the input
//! gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Sequence geometry of an activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geom {
    pub batch: usize,
    pub len: usize,
}

impl Geom {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// A trainable array and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>, decay: bool) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    fn zeros(name: impl Into<String>, rows: usize, cols: usize, decay: bool) -> Self {
        Self::new(name, Array2::zeros((rows, cols)), decay)
    }

    fn fan_in_uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        fan_in: usize,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        Self::new(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// `c ← a·b + beta·c`
#[inline]
fn gemm(a: &ArrayView2<f64>, b: &ArrayView2<f64>, beta: f64, c: &mut Array2<f64>) {
    general_mat_mul(1.0, a, b, beta, c);
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::fan_in_uniform(format!("{name}.weight"), input, input, output, rng),
            bias: Param::zeros(format!("{name}.bias"), 1, output, false),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.output_dim()));
        y.assign(&self.bias.value.row(0));
        gemm(x, &self.weight.value.view(), 1.0, &mut y);
        y
    }

    pub fn backward(&mut self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
        gemm(&x.t(), dy, 1.0, &mut self.weight.grad);
        self.bias.grad.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let mut dx = Array2::zeros((dy.nrows(), self.weight.value.nrows()));
        gemm(dy, &self.weight.value.t(), 0.0, &mut dx);
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// 1-D convolution along the sequence axis with zero "same" padding.
///
/// Implemented as im2col followed by one matrix product; the weight has shape
/// `(kernel · input, output)` with the kernel offset as the slow index.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: usize,
    pub input: usize,
    pub inner: Linear,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        Conv1d {
            kernel,
            input,
            inner: Linear::new(name, kernel * input, output, rng),
        }
    }

    fn im2col(&self, x: &ArrayView2<f64>, geom: Geom) -> Array2<f64> {
        let half = (self.kernel / 2) as isize;
        let mut cols = Array2::zeros((geom.rows(), self.kernel * self.input));
        for b in 0..geom.batch {
            for t in 0..geom.len {
                let mut row = cols.row_mut(b * geom.len + t);
                for j in 0..self.kernel {
                    let src = t as isize + j as isize - half;
                    if src < 0 || src >= geom.len as isize {
                        continue;
                    }
                    row.slice_mut(s![j * self.input..(j + 1) * self.input])
                        .assign(&x.row(b * geom.len + src as usize));
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, geom: Geom) -> Array2<f64> {
        let half = (self.kernel / 2) as isize;
        let mut dx = Array2::zeros((geom.rows(), self.input));
        for b in 0..geom.batch {
            for t in 0..geom.len {
                let row = dcols.row(b * geom.len + t);
                for j in 0..self.kernel {
                    let src = t as isize + j as isize - half;
                    if src < 0 || src >= geom.len as isize {
                        continue;
                    }
                    dx.row_mut(b * geom.len + src as usize)
                        .scaled_add(1.0, &row.slice(s![j * self.input..(j + 1) * self.input]));
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, x: &ArrayView2<f64>, geom: Geom) -> (Array2<f64>, Array2<f64>) {
        let cols = if self.kernel == 1 {
            x.to_owned()
        } else {
            self.im2col(x, geom)
        };
        (self.inner.forward(&cols.view()), cols)
    }

    pub fn backward(&mut self, cols: &Array2<f64>, dy: &ArrayView2<f64>, geom: Geom) -> Array2<f64> {
        let dcols = self.inner.backward(&cols.view(), dy);
        if self.kernel == 1 {
            dcols
        } else {
            self.col2im(&dcols, geom)
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), Array2::ones((1, dim)), false),
            bias: Param::zeros(format!("{name}.bias"), 1, dim, false),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *inv = 1.0 / (var + NORM_EPS).sqrt();
            row *= *inv;
        }
        let y = &xhat * &self.gain.value + &self.bias.value;
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
        self.gain
            .grad
            .row_mut(0)
            .scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
        self.bias.grad.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let n = dy.ncols() as f64;
        let mut dx = dy * &self.gain.value;
        for ((mut row, xhat), &inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum = row.sum();
            let dot = row.dot(&xhat);
            Zip::from(&mut row)
                .and(&xhat)
                .for_each(|g, &xh| *g = inv * (*g - sum / n - xh * dot / n));
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gain, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.gain, &self.bias]
    }
}

/// Batch normalization over all rows (samples × positions) per feature.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gain: Param,
    pub bias: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

/// Batch statistics observed in a training pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Unbiased variance estimate.
    pub var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(name: &str, dim: usize, momentum: f64) -> Self {
        BatchNorm {
            gain: Param::new(format!("{name}.gain"), Array2::ones((1, dim)), false),
            bias: Param::zeros(format!("{name}.bias"), 1, dim, false),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum,
        }
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache, BatchStats) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gain.value + &self.bias.value;
        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var };
        (
            y,
            NormCache { xhat, inv_std },
            BatchStats {
                mean,
                var: unbiased,
            },
        )
    }

    pub fn forward_infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let scale = &inv_std * &self.gain.value.row(0);
        let shift = &self.bias.value.row(0) - &(&self.running_mean * &scale);
        x * &scale + &shift
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &stats.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &stats.var * m;
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
        let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
        let dbias = dy.sum_axis(Axis(0));
        self.gain.grad.row_mut(0).scaled_add(1.0, &dgain);
        self.bias.grad.row_mut(0).scaled_add(1.0, &dbias);
        let n = dy.nrows() as f64;
        // dx = γ·inv_std/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
        let coef = &self.gain.value.row(0) * &cache.inv_std / n;
        let mut dx = dy * n - &dbias;
        dx -= &(&cache.xhat * &dgain);
        dx * &coef
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gain, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.gain, &self.bias]
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + libm::erf(v / SQRT_2)))
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let cdf = 0.5 * (1.0 + libm::erf(v / SQRT_2));
        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
        *g *= cdf + v * pdf;
    });
    dx
}

/// Inverted dropout; `None` mask means identity.
pub fn dropout<R: Rng + ?Sized>(
    x: Array2<f64>,
    rate: f64,
    rng: Option<&mut R>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask =
                Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f64>() < rate { 0.0 } else { keep });
            (x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

pub fn dropout_backward(dy: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy,
    }
}

/// Sinusoidal position table: even dimensions `sin(p / 10000^(i/M))`, odd
/// dimensions the matching cosine.
pub fn position_encoding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(p, i)| {
        let pair = (i / 2 * 2) as f64;
        let angle = p as f64 / 10_000f64.powf(pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub(crate) fn normal_init<R: Rng + ?Sized>(
    name: impl Into<String>,
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Param {
    let dist = Normal::new(0.0, std).expect("positive std");
    let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
    Param::new(name, value, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of `sum(forward(x) ⊙ w)` with respect to x.
    fn check_input_grad(
        x: &Array2<f64>,
        forward: impl Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
        w: &Array2<f64>,
    ) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fp = (forward(&xp) * w).sum();
            let fm = (forward(&xm) * w).sum();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (numeric - a).abs() <= 1e-6 * (1.0 + a.abs()),
                "idx {idx}: numeric {numeric} analytic {a}"
            );
        }
    }

    #[test]
    fn position_zero_is_sin_zero_cos_one() {
        let pe = position_encoding(3, 8);
        for i in 0..8 {
            assert_eq!(pe[[0, i]], if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[1, 3]] - (1.0 / 10_000f64.powf(2.0 / 8.0)).cos()).abs() < 1e-15);
    }

    #[test]
    fn conv_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = Geom { batch: 2, len: 4 };
        let conv = Conv1d::new("c", 3, 2, 3, &mut rng);
        let x = random(8, 3, 2);
        let w = random(8, 2, 3);
        let (_, cols) = conv.forward(&x.view(), geom);
        let mut c2 = conv.clone();
        let dx = c2.backward(&cols, &w.view(), geom);
        check_input_grad(&x, |x| conv.forward(&x.view(), geom).0, &dx, &w);
    }

    #[test]
    fn conv_receptive_field_is_three_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = Geom { batch: 1, len: 7 };
        let conv = Conv1d::new("c", 2, 2, 3, &mut rng);
        let x = random(7, 2, 6);
        let base = conv.forward(&x.view(), geom).0;
        let mut bumped = x.clone();
        bumped[[3, 0]] += 1.0;
        let out = conv.forward(&bumped.view(), geom).0;
        for t in 0..7 {
            let changed = (&out.row(t) - &base.row(t)).iter().any(|v| v.abs() > 1e-12);
            assert_eq!(changed, (2..=4).contains(&t), "frame {t}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_differences() {
        let ln = {
            let mut ln = LayerNorm::new("ln", 5);
            ln.gain.value = random(1, 5, 9) + 1.0;
            ln.bias.value = random(1, 5, 10);
            ln
        };
        let x = random(3, 5, 11);
        let w = random(3, 5, 12);
        let (_, cache) = ln.forward(&x);
        let dx = ln.clone().backward(&cache, &w);
        check_input_grad(&x, |x| ln.forward(x).0, &dx, &w);
    }

    #[test]
    fn batch_norm_gradient_matches_differences() {
        let mut bn = BatchNorm::new("bn", 4, 0.1);
        bn.gain.value = random(1, 4, 20) + 1.0;
        let x = random(6, 4, 21);
        let w = random(6, 4, 22);
        let (_, cache, _) = bn.forward_train(&x);
        let dx = bn.clone().backward(&cache, &w);
        check_input_grad(&x, |x| bn.forward_train(x).0, &dx, &w);
    }

    #[test]
    fn batch_norm_infer_uses_running_stats() {
        let mut bn = BatchNorm::new("bn", 2, 0.5);
        let x = random(10, 2, 3);
        let (_, _, stats) = bn.forward_train(&x);
        bn.update_running(&stats);
        let y = bn.forward_infer(&x);
        for c in 0..2 {
            let expect = (x[[0, c]] - bn.running_mean[c]) / (bn.running_var[c] + NORM_EPS).sqrt();
            assert!((y[[0, c]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_gradient_matches_differences() {
        let x = random(4, 3, 30) * 3.0;
        let w = random(4, 3, 31);
        let dx = gelu_backward(&x, &w);
        check_input_grad(&x, gelu, &dx, &w);
        assert_eq!(gelu(&Array2::zeros((1, 1)))[[0, 0]], 0.0);
    }
}
