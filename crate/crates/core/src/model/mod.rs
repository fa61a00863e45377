//! Hybrid attention classifier.
//!
//! Descriptor codewords are embedded per channel and summed per frame, a
//! sinusoidal position code is added, and the sequence passes through a stack
//! of [`HamBlock`]s. The stack output is batch-normalized, mean-pooled over
//! the sequence into the segment feature `h`, and mapped by a fully connected
//! layer to cover/stego probabilities.

mod attention;
mod block;
mod checkpoint;
pub mod layers;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::descriptors::{DescriptorKind, DescriptorMatrix};
use crate::error::{Error, Result};

pub use attention::{AttentionCache, MultiHeadAttention};
pub use block::{BlockCache, HamBlock};
pub use checkpoint::{Checkpoint, NamedArray, RngState, CHECKPOINT_FORMAT};
use layers::{normal_init, position_encoding, BatchNorm, BatchStats, Geom, Linear, NormCache, Param};

/// Which descriptor axis the attention runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceAxis {
    /// One token per frame; channel embeddings are summed into it.
    Frames,
    /// One token per channel, averaged over frames.
    Channels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: DescriptorKind,
    /// Per-channel vocabulary sizes; empty selects the kind's defaults.
    pub vocab: Vec<u32>,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
    /// Hidden width of the feed-forward branch as a multiple of `model_dim`.
    pub ffn_multiplier: usize,
    pub pooling: Pooling,
    pub sequence_axis: SequenceAxis,
    pub batchnorm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: DescriptorKind::Lsp,
            vocab: Vec::new(),
            model_dim: 64,
            num_blocks: 12,
            num_heads: 4,
            dropout: 0.1,
            conv_kernel: 3,
            ffn_multiplier: 2,
            pooling: Pooling::Mean,
            sequence_axis: SequenceAxis::Frames,
            batchnorm_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Two blocks instead of twelve; everything else as the default.
    pub fn desk_scale() -> Self {
        ModelConfig {
            num_blocks: 2,
            ..Default::default()
        }
    }

    pub fn for_kind(mut self, kind: DescriptorKind) -> Self {
        self.kind = kind;
        self.vocab = kind.default_vocab();
        self
    }

    pub fn vocab(&self) -> Vec<u32> {
        if self.vocab.is_empty() {
            self.kind.default_vocab()
        } else {
            self.vocab.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab().len() != self.kind.channels() || self.vocab().contains(&0) {
            return bad(format!("vocabulary {:?} does not fit kind {}", self.vocab, self.kind));
        }
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.ffn_multiplier == 0 {
            return bad("ffn_multiplier must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.batchnorm_momentum) {
            return bad("batchnorm_momentum outside [0, 1]".into());
        }
        Ok(())
    }

    /// Short stable hash of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Per-channel codeword tables plus the sinusoidal position code.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub tables: Vec<Param>,
    pub vocab: Vec<u32>,
    pub axis: SequenceAxis,
}

impl Embedding {
    fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let dim = config.model_dim;
        let std = 1.0 / (dim as f64).sqrt();
        let vocab = config.vocab();
        let tables = vocab
            .iter()
            .enumerate()
            .map(|(d, &v)| normal_init(format!("embedding.{d}"), v as usize, dim, std, rng))
            .collect();
        Embedding {
            tables,
            vocab,
            axis: config.sequence_axis,
        }
    }

    fn dim(&self) -> usize {
        self.tables[0].value.ncols()
    }

    fn geometry(&self, batch: &[&DescriptorMatrix]) -> Result<Geom> {
        let first = batch
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        for m in batch {
            if m.shape() != first.shape() || m.kind() != first.kind() {
                return Err(Error::invalid(format!(
                    "batch mixes shapes {:?} and {:?}",
                    first.shape(),
                    m.shape()
                )));
            }
            m.check_vocab(&self.vocab)
                .map_err(|e| Error::invalid(format!("out-of-vocabulary input: {e}")))?;
        }
        let len = match self.axis {
            SequenceAxis::Frames => first.frames(),
            SequenceAxis::Channels => first.channels(),
        };
        Ok(Geom {
            batch: batch.len(),
            len,
        })
    }

    fn forward(&self, batch: &[&DescriptorMatrix]) -> Result<(Array2<f64>, Geom)> {
        let geom = self.geometry(batch)?;
        let pe = position_encoding(geom.len, self.dim());
        let mut x = Array2::zeros((geom.rows(), self.dim()));
        for (b, m) in batch.iter().enumerate() {
            let (channels, frames) = m.shape();
            match self.axis {
                SequenceAxis::Frames => {
                    for t in 0..frames {
                        let mut row = x.row_mut(b * frames + t);
                        row.assign(&pe.row(t));
                        for d in 0..channels {
                            row += &self.tables[d].value.row(m.get(d, t) as usize);
                        }
                    }
                }
                SequenceAxis::Channels => {
                    let inv = 1.0 / frames as f64;
                    for d in 0..channels {
                        let mut row = x.row_mut(b * channels + d);
                        for t in 0..frames {
                            row.scaled_add(inv, &self.tables[d].value.row(m.get(d, t) as usize));
                        }
                        row += &pe.row(d);
                    }
                }
            }
        }
        Ok((x, geom))
    }

    fn backward(&mut self, batch: &[DescriptorMatrix], dx: &Array2<f64>) {
        for (b, m) in batch.iter().enumerate() {
            let (channels, frames) = m.shape();
            match self.axis {
                SequenceAxis::Frames => {
                    for t in 0..frames {
                        let g = dx.row(b * frames + t);
                        for d in 0..channels {
                            self.tables[d]
                                .grad
                                .row_mut(m.get(d, t) as usize)
                                .scaled_add(1.0, &g);
                        }
                    }
                }
                SequenceAxis::Channels => {
                    let inv = 1.0 / frames as f64;
                    for d in 0..channels {
                        let g = dx.row(b * channels + d);
                        for t in 0..frames {
                            self.tables[d]
                                .grad
                                .row_mut(m.get(d, t) as usize)
                                .scaled_add(inv, &g);
                        }
                    }
                }
            }
        }
    }
}

/// Activations in `sequence × batch × model_dim` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    geom: Geom,
    data: Array2<f64>,
}

impl FeatureTensor {
    /// `(sequence, batch, model_dim)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.geom.len, self.geom.batch, self.data.ncols())
    }

    pub fn get(&self, t: usize, b: usize, m: usize) -> f64 {
        self.data[[b * self.geom.len + t, m]]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows ordered by sample, then position.
    pub fn as_matrix(&self) -> &Array2<f64> {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Pooled segment features `h`, `batch × model_dim`.
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
    /// `[p_cover, p_stego]` per row.
    pub probs: Array2<f64>,
}

impl ForwardOutput {
    pub fn stego_probs(&self) -> Array1<f64> {
        self.probs.column(1).to_owned()
    }
}

/// Everything `backward` needs from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<DescriptorMatrix>,
    geom: Geom,
    blocks: Vec<BlockCache>,
    norm: NormCache,
    features: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HamModel {
    config: ModelConfig,
    pub embedding: Embedding,
    pub blocks: Vec<HamBlock>,
    pub norm: BatchNorm,
    pub head: Linear,
    rng: ChaCha8Rng,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

impl HamModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = config.model_dim;
        let embedding = Embedding::new(&config, &mut rng);
        let blocks = (0..config.num_blocks)
            .map(|n| {
                HamBlock::new(
                    &format!("block{n}"),
                    dim,
                    config.num_heads,
                    config.conv_kernel,
                    config.ffn_multiplier * dim,
                    &mut rng,
                )
            })
            .collect();
        let norm = BatchNorm::new("batchnorm", dim, config.batchnorm_momentum);
        let head = Linear::new("classifier", dim, 2, &mut rng);
        // dropout draws come from a stream separate from initialization
        let rng = ChaCha8Rng::seed_from_u64(crate::descriptors::sub_seed(seed, u64::MAX));
        Ok(HamModel {
            config,
            embedding,
            blocks,
            norm,
            head,
            rng,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Embedding lookup plus position code, `sequence × batch × model_dim`.
    pub fn embed_and_encode(&self, batch: &[&DescriptorMatrix]) -> Result<FeatureTensor> {
        let (data, geom) = self.embedding.forward(batch)?;
        Ok(FeatureTensor { geom, data })
    }

    /// Applies block `index` in inference mode.
    pub fn apply_block(&self, index: usize, x: &FeatureTensor) -> FeatureTensor {
        let (data, _) = self.blocks[index].forward(&x.data, x.geom, 0.0, None);
        FeatureTensor {
            geom: x.geom,
            data,
        }
    }

    fn head_forward(&self, features: Array2<f64>) -> ForwardOutput {
        let logits = self.head.forward(&features.view());
        let probs = softmax_rows(&logits);
        ForwardOutput {
            features,
            logits,
            probs,
        }
    }

    fn pool(&self, x: &Array2<f64>, geom: Geom) -> Array2<f64> {
        x.to_shape((geom.batch, geom.len, x.ncols()))
            .expect("contiguous activations")
            .mean_axis(Axis(1))
            .expect("non-empty sequence")
    }

    /// Inference pass: no dropout, BatchNorm on running statistics. Reentrant.
    pub fn infer(&self, batch: &[&DescriptorMatrix]) -> Result<ForwardOutput> {
        let (mut x, geom) = self.embedding.forward(batch)?;
        for block in &self.blocks {
            x = block.forward(&x, geom, 0.0, None).0;
        }
        let x = self.norm.forward_infer(&x);
        Ok(self.head_forward(self.pool(&x, geom)))
    }

    /// Re-estimates the BatchNorm running statistics from `batches`, pooling
    /// every row seen (no dropout). Replaces the moving averages.
    pub fn recalibrate_norm(&mut self, batches: &[Vec<&DescriptorMatrix>]) -> Result<()> {
        let dim = self.model_dim();
        let mut sum = Array1::<f64>::zeros(dim);
        let mut sumsq = Array1::<f64>::zeros(dim);
        let mut rows = 0usize;
        for batch in batches.iter().filter(|b| !b.is_empty()) {
            let (mut x, geom) = self.embedding.forward(batch)?;
            for block in &self.blocks {
                x = block.forward(&x, geom, 0.0, None).0;
            }
            sum += &x.sum_axis(Axis(0));
            sumsq += &x.mapv(|v| v * v).sum_axis(Axis(0));
            rows += x.nrows();
        }
        if rows < 2 {
            return Err(Error::invalid("BatchNorm recalibration needs at least two rows"));
        }
        let n = rows as f64;
        let mean = &sum / n;
        let var = (&sumsq / n - &mean * &mean).mapv(|v| v.max(0.0)) * (n / (n - 1.0));
        self.norm.running_mean = mean;
        self.norm.running_var = var;
        Ok(())
    }

    /// Training-mode pass (batch statistics) that leaves the model untouched.
    /// Dropout is applied only when `rng` is given.
    pub fn forward_traced(
        &self,
        batch: &[&DescriptorMatrix],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ForwardOutput, Tape, BatchStats)> {
        let (mut x, geom) = self.embedding.forward(batch)?;
        let rate = self.config.dropout;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, geom, rate, rng.as_deref_mut());
            caches.push(cache);
            x = y;
        }
        let (x, norm, stats) = self.norm.forward_train(&x);
        let features = self.pool(&x, geom);
        let tape = Tape {
            inputs: batch.iter().map(|m| (*m).clone()).collect(),
            geom,
            blocks: caches,
            norm,
            features: features.clone(),
        };
        Ok((self.head_forward(features), tape, stats))
    }

    /// Training pass with dropout; updates BatchNorm running statistics.
    pub fn forward_train(&mut self, batch: &[&DescriptorMatrix]) -> Result<(ForwardOutput, Tape)> {
        let mut rng = self.rng.clone();
        let (out, tape, stats) = self.forward_traced(batch, Some(&mut rng))?;
        self.rng = rng;
        self.norm.update_running(&stats);
        Ok((out, tape))
    }

    pub fn forward(&mut self, batch: &[&DescriptorMatrix], mode: Mode) -> Result<ForwardOutput> {
        match mode {
            Mode::Train => self.forward_train(batch).map(|(out, _)| out),
            Mode::Infer => self.infer(batch),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Accumulates parameter gradients given the loss gradient with respect
    /// to the pooled features and to the logits.
    pub fn backward(&mut self, tape: &Tape, d_features: &Array2<f64>, d_logits: &Array2<f64>) {
        let mut dh = self.head.backward(&tape.features.view(), &d_logits.view());
        dh += d_features;
        let geom = tape.geom;
        let dim = dh.ncols();
        let inv = 1.0 / geom.len as f64;
        let mut dx = Array2::zeros((geom.rows(), dim));
        for b in 0..geom.batch {
            let g = dh.row(b).mapv(|v| v * inv);
            for t in 0..geom.len {
                dx.row_mut(b * geom.len + t).assign(&g);
            }
        }
        let mut dx = self.norm.backward(&tape.norm, &dx);
        for (block, cache) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            dx = block.backward(cache, &dx, geom);
        }
        self.embedding.backward(&tape.inputs, &dx);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.embedding.tables.iter_mut().collect();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.norm.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.embedding.tables.iter().collect();
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.norm.params());
        out.extend(self.head.params());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::gen_cover;

    fn tiny() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            num_heads: 2,
            num_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn batch(n: usize, frames: usize, seed: u64) -> Vec<DescriptorMatrix> {
        gen_cover(n, DescriptorKind::Lsp, frames, seed)
            .unwrap()
            .into_iter()
            .map(|s| s.matrix)
            .collect()
    }

    #[test]
    fn encode_shape_is_seq_batch_dim() {
        let model = HamModel::new(ModelConfig::desk_scale(), 1).unwrap();
        let data = batch(6, 100, 2);
        let refs: Vec<_> = data.iter().collect();
        let f = model.embed_and_encode(&refs).unwrap();
        assert_eq!(f.shape(), (100, 6, 64));
        assert!(f.all_finite());
    }

    #[test]
    fn out_of_vocab_rejected() {
        let model = HamModel::new(tiny(), 1).unwrap();
        let m = DescriptorMatrix::new(DescriptorKind::Lsp, 1, vec![0, 32, 0]).unwrap();
        assert!(matches!(model.infer(&[&m]), Err(Error::InvalidArgument(_))));
        assert!(matches!(model.infer(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn block_preserves_shape_for_any_depth() {
        for n in 1..=3 {
            let cfg = ModelConfig {
                num_blocks: n,
                ..tiny()
            };
            let model = HamModel::new(cfg, 3).unwrap();
            let data = batch(2, 7, 4);
            let refs: Vec<_> = data.iter().collect();
            let mut x = model.embed_and_encode(&refs).unwrap();
            for i in 0..n {
                x = model.apply_block(i, &x);
                assert_eq!(x.shape(), (7, 2, 8));
                assert!(x.all_finite());
            }
        }
    }

    #[test]
    fn zero_input_through_hybrid_branch() {
        let model = HamModel::new(tiny(), 5).unwrap();
        let block = &model.blocks[0];
        let geom = Geom { batch: 2, len: 4 };
        let zero = Array2::zeros((8, 8));
        let (ha, cat) = block.hybrid_branches(&zero, geom);
        assert_eq!(cat.ncols(), 16);
        assert!(ha.iter().all(|&v| v == 0.0));
        let (out, _) = block.local_view(&zero, geom, 0.0, None);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probabilities_sum_to_one_and_infer_is_deterministic() {
        let model = HamModel::new(tiny(), 9).unwrap();
        let data = batch(5, 12, 10);
        let refs: Vec<_> = data.iter().collect();
        let a = model.infer(&refs).unwrap();
        let b = model.infer(&refs).unwrap();
        assert_eq!(a, b);
        for row in a.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn infer_is_batch_independent() {
        let mut model = HamModel::new(tiny(), 11).unwrap();
        let data = batch(4, 9, 12);
        let refs: Vec<_> = data.iter().collect();
        model.forward(&refs, Mode::Train).unwrap();
        let alone = model.infer(&refs[..1]).unwrap();
        let dup = model.infer(&[refs[0], refs[0], refs[1]]).unwrap();
        let perm = model.infer(&[refs[3], refs[2], refs[1], refs[0]]).unwrap();
        let all = model.infer(&refs).unwrap();
        for m in 0..8 {
            assert!((alone.features[[0, m]] - dup.features[[1, m]]).abs() < 1e-12);
            assert!((all.features[[0, m]] - perm.features[[3, m]]).abs() < 1e-12);
        }
        assert!((alone.probs[[0, 1]] - dup.probs[[0, 1]]).abs() < 1e-12);
    }

    #[test]
    fn channel_axis_uses_channels_as_tokens() {
        let cfg = ModelConfig {
            sequence_axis: SequenceAxis::Channels,
            ..tiny()
        };
        let model = HamModel::new(cfg, 2).unwrap();
        let data = batch(3, 20, 1);
        let refs: Vec<_> = data.iter().collect();
        assert_eq!(model.embed_and_encode(&refs).unwrap().shape(), (3, 3, 8));
        assert!(model.infer(&refs).unwrap().probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { num_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { num_blocks: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { vocab: vec![4, 4], ..tiny() }.validate().is_err());
        assert_eq!(ModelConfig::default().num_blocks, 12);
    }
}
