//! One hybrid attention block: a global (self-attention) sublayer followed
//! by a local sublayer of parallel convolution and GELU feed-forward
//! branches fused by a kernel-1 convolution.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionCache, MultiHeadAttention};
use super::layers::{
    dropout, dropout_backward, gelu, gelu_backward, Conv1d, Geom, LayerNorm, Linear, NormCache,
    Param,
};

#[derive(Debug, Clone)]
pub struct HamBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub linear1: Linear,
    pub linear2: Linear,
    pub fuse: Conv1d,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct GlobalCache {
    attention: AttentionCache,
    drop: Option<Array2<f64>>,
    norm: NormCache,
}

#[derive(Debug, Clone)]
pub struct LocalCache {
    input: Array2<f64>,
    conv1_cols: Array2<f64>,
    conv1_out: Array2<f64>,
    conv2_cols: Array2<f64>,
    linear1_out: Array2<f64>,
    linear2_in: Array2<f64>,
    fuse_cols: Array2<f64>,
    drop: Option<Array2<f64>>,
    norm: NormCache,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    global: GlobalCache,
    local: LocalCache,
}

impl HamBlock {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        dim: usize,
        heads: usize,
        kernel: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        HamBlock {
            attention: MultiHeadAttention::new(&format!("{name}.attention"), dim, heads, rng),
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            conv1: Conv1d::new(&format!("{name}.conv1"), dim, dim, kernel, rng),
            conv2: Conv1d::new(&format!("{name}.conv2"), dim, dim, kernel, rng),
            linear1: Linear::new(&format!("{name}.linear1"), dim, hidden, rng),
            linear2: Linear::new(&format!("{name}.linear2"), hidden, dim, rng),
            fuse: Conv1d::new(&format!("{name}.conv3"), 2 * dim, dim, 1, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
        }
    }

    /// `LN(x + Dropout(MSA(x)))`
    pub fn global_view(
        &self,
        x: &Array2<f64>,
        geom: Geom,
        drop_rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, GlobalCache) {
        let (a, attention) = self.attention.forward(x, geom);
        let (a, drop) = dropout(a, drop_rate, rng);
        let (y, norm) = self.norm1.forward(&(a + x));
        (
            y,
            GlobalCache {
                attention,
                drop,
                norm,
            },
        )
    }

    /// The hybrid branch `conv3(cat(CNN(x), GFFN(x)))`, before the residual.
    /// Returns the output and the concatenation it was fused from.
    pub fn hybrid_branches(&self, x: &Array2<f64>, geom: Geom) -> (Array2<f64>, Array2<f64>) {
        let (c, _) = self.conv1.forward(&x.view(), geom);
        let (c, _) = self.conv2.forward(&gelu(&c).view(), geom);
        let l = self.linear1.forward(&x.view());
        let l = self.linear2.forward(&gelu(&l).view());
        let cat = concatenate![Axis(1), c, l];
        let (y, _) = self.fuse.forward(&cat.view(), geom);
        (y, cat)
    }

    /// `LN(x + Dropout(HA(x)))`
    pub fn local_view(
        &self,
        x: &Array2<f64>,
        geom: Geom,
        drop_rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, LocalCache) {
        let (conv1_out, conv1_cols) = self.conv1.forward(&x.view(), geom);
        let (cnn, conv2_cols) = self.conv2.forward(&gelu(&conv1_out).view(), geom);
        let linear1_out = self.linear1.forward(&x.view());
        let linear2_in = gelu(&linear1_out);
        let ffn = self.linear2.forward(&linear2_in.view());
        let cat = concatenate![Axis(1), cnn, ffn];
        let (ha, fuse_cols) = self.fuse.forward(&cat.view(), geom);
        let (ha, drop) = dropout(ha, drop_rate, rng);
        let (y, norm) = self.norm2.forward(&(ha + x));
        (
            y,
            LocalCache {
                input: x.clone(),
                conv1_cols,
                conv1_out,
                conv2_cols,
                linear1_out,
                linear2_in,
                fuse_cols,
                drop,
                norm,
            },
        )
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        geom: Geom,
        drop_rate: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, BlockCache) {
        let (g, global) = self.global_view(x, geom, drop_rate, rng.as_deref_mut());
        let (y, local) = self.local_view(&g, geom, drop_rate, rng);
        (y, BlockCache { global, local })
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Array2<f64>, geom: Geom) -> Array2<f64> {
        let dim = dy.ncols();
        let lc = &cache.local;
        // local sublayer
        let dsum = self.norm2.backward(&lc.norm, dy);
        let mut dg = dsum.clone();
        let dha = dropout_backward(dsum, &lc.drop);
        let dcat = self.fuse.backward(&lc.fuse_cols, &dha.view(), geom);
        let dcnn = dcat.slice(s![.., ..dim]);
        let dffn = dcat.slice(s![.., dim..]);
        let dg1 = self.conv2.backward(&lc.conv2_cols, &dcnn, geom);
        let dc1 = gelu_backward(&lc.conv1_out, &dg1);
        dg += &self.conv1.backward(&lc.conv1_cols, &dc1.view(), geom);
        let dl2 = self.linear2.backward(&lc.linear2_in.view(), &dffn);
        let dl1 = gelu_backward(&lc.linear1_out, &dl2);
        dg += &self.linear1.backward(&lc.input.view(), &dl1.view());
        // global sublayer
        let gc = &cache.global;
        let dsum = self.norm1.backward(&gc.norm, &dg);
        let mut dx = dsum.clone();
        let da = dropout_backward(dsum, &gc.drop);
        dx += &self.attention.backward(&gc.attention, &da, geom);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.attention.params_mut();
        out.extend(self.norm1.params_mut());
        out.extend(self.conv1.inner.params_mut());
        out.extend(self.conv2.inner.params_mut());
        out.extend(self.linear1.params_mut());
        out.extend(self.linear2.params_mut());
        out.extend(self.fuse.inner.params_mut());
        out.extend(self.norm2.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.attention.params();
        out.extend(self.norm1.params());
        out.extend(self.conv1.inner.params());
        out.extend(self.conv2.inner.params());
        out.extend(self.linear1.params());
        out.extend(self.linear2.params());
        out.extend(self.fuse.inner.params());
        out.extend(self.norm2.params());
        out
    }
}
