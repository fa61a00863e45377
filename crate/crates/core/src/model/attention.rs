//! Multi-head scaled dot-product self-attention over the full sequence.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

use super::layers::{Geom, Linear, Param};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights, `(batch · heads, len, len)`.
    weights: Array3<f64>,
    merged: Array2<f64>,
}

impl AttentionCache {
    /// Attention weights of sample `b`, head `h`; rows are queries.
    pub fn weights(&self, b: usize, h: usize, heads: usize) -> ndarray::ArrayView2<'_, f64> {
        self.weights.index_axis(Axis(0), b * heads + h)
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim.is_multiple_of(heads), "model dim must divide into heads");
        MultiHeadAttention {
            heads,
            query: Linear::new(&format!("{name}.query"), dim, dim, rng),
            key: Linear::new(&format!("{name}.key"), dim, dim, rng),
            value: Linear::new(&format!("{name}.value"), dim, dim, rng),
            output: Linear::new(&format!("{name}.output"), dim, dim, rng),
        }
    }

    fn head_dim(&self) -> usize {
        self.query.output_dim() / self.heads
    }

    pub fn forward(&self, x: &Array2<f64>, geom: Geom) -> (Array2<f64>, AttentionCache) {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(&x.view());
        let k = self.key.forward(&x.view());
        let v = self.value.forward(&x.view());
        let len = geom.len;
        let mut weights = Array3::zeros((geom.batch * self.heads, len, len));
        let mut merged = Array2::zeros(q.raw_dim());
        for b in 0..geom.batch {
            let rows = b * len..(b + 1) * len;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut a = weights.index_axis_mut(Axis(0), b * self.heads + h);
                general_mat_mul(scale, &qh, &kh.t(), 0.0, &mut a);
                for mut row in a.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                let mut out = merged.slice_mut(s![rows.clone(), cols]);
                general_mat_mul(1.0, &a, &vh, 0.0, &mut out);
            }
        }
        let y = self.output.forward(&merged.view());
        (
            y,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                weights,
                merged,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Array2<f64>, geom: Geom) -> Array2<f64> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let dmerged = self.output.backward(&cache.merged.view(), &dy.view());
        let len = geom.len;
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let mut da = Array2::zeros((len, len));
        for b in 0..geom.batch {
            let rows = b * len..(b + 1) * len;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let a = cache.weights.index_axis(Axis(0), b * self.heads + h);
                let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                let dout = dmerged.slice(s![rows.clone(), cols.clone()]);
                general_mat_mul(1.0, &dout, &vh.t(), 0.0, &mut da);
                {
                    let mut dvh = dv.slice_mut(s![rows.clone(), cols.clone()]);
                    general_mat_mul(1.0, &a.t(), &dout, 0.0, &mut dvh);
                }
                // softmax backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
                for (mut drow, arow) in da.rows_mut().into_iter().zip(a.rows()) {
                    let dot = drow.dot(&arow);
                    drow.zip_mut_with(&arow, |g, &w| *g = w * (*g - dot));
                }
                {
                    let mut dqh = dq.slice_mut(s![rows.clone(), cols.clone()]);
                    general_mat_mul(scale, &da, &kh, 0.0, &mut dqh);
                }
                let mut dkh = dk.slice_mut(s![rows.clone(), cols]);
                general_mat_mul(scale, &da.t(), &qh, 0.0, &mut dkh);
            }
        }
        let x = cache.input.view();
        let mut dx = self.query.backward(&x, &dq.view());
        dx += &self.key.backward(&x, &dk.view());
        dx += &self.value.backward(&x, &dv.view());
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::with_capacity(8);
        out.extend(self.query.params_mut());
        out.extend(self.key.params_mut());
        out.extend(self.value.params_mut());
        out.extend(self.output.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::with_capacity(8);
        out.extend(self.query.params());
        out.extend(self.key.params());
        out.extend(self.value.params());
        out.extend(self.output.params());
        out
    }
}
