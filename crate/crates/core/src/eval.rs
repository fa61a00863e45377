//! Accuracy, experiment grids, latency benchmark and feature export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::descriptors::{
    embed, frames_for_length, sub_seed, CoverModel, DescriptorKind, DescriptorMatrix, VoipSegment,
    FRAMES_PER_SECOND,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, HamModel};

/// `(TP + TN) / (TP + TN + FP + FN)`
pub fn accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy of stego probabilities thresholded at 0.5.
pub fn accuracy_at_half(p_stego: &[f64], labels: &[bool]) -> Result<f64> {
    let predictions: Vec<bool> = p_stego.iter().map(|&p| p >= 0.5).collect();
    accuracy(&predictions, labels)
}

/// Stego probabilities for `segments`, inferred in batches of consecutive
/// equally shaped segments.
pub fn predict(model: &HamModel, segments: &[VoipSegment], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(segments.len());
    let mut start = 0;
    while start < segments.len() {
        let shape = segments[start].matrix.shape();
        let mut end = start + 1;
        while end < segments.len() && end - start < batch_size.max(1) && segments[end].matrix.shape() == shape {
            end += 1;
        }
        let batch: Vec<&DescriptorMatrix> = segments[start..end].iter().map(|s| &s.matrix).collect();
        out.extend(model.infer(&batch)?.stego_probs());
        start = end;
    }
    Ok(out)
}

/// `n` covers and `n` stego segments of `frames` frames, stego embedded at
/// `rate`. Covers and stego come from independent cover draws.
pub fn balanced_cell(
    kind: DescriptorKind,
    vocab: &[u32],
    frames: usize,
    rate: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<VoipSegment>> {
    let model = CoverModel::default();
    let mut covers = model.generate_segments(kind, vocab, n, frames, sub_seed(seed, 0))?;
    let carriers = model.generate_segments(kind, vocab, n, frames, sub_seed(seed, 1))?;
    for (i, c) in carriers.iter().enumerate() {
        let mut s = embed(c, vocab, rate, sub_seed(seed, 2 + i as u64))?;
        s.id = format!("stego-{i}");
        covers.push(s);
    }
    Ok(covers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    EmbeddingRate,
    SegmentLength,
}

impl GridAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            GridAxis::EmbeddingRate => "embedding_rate",
            GridAxis::SegmentLength => "segment_length",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub value: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub axis: GridAxis,
    pub cells: Vec<EvalCell>,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.accuracy).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},accuracy,count\n", self.axis.as_str());
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{}", c.value, c.accuracy, c.count);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let (label, scale, unit) = match self.axis {
            GridAxis::EmbeddingRate => ("rate", 100.0, "%"),
            GridAxis::SegmentLength => ("length", 1.0, " s"),
        };
        let mut out = format!("{:>10} | {:>8} | {:>6}\n", label, "accuracy", "n");
        out.push_str(&format!("{:-<11}+{:-<10}+{:-<7}\n", "", "", ""));
        for c in &self.cells {
            let v = format!("{}{unit}", c.value * scale);
            let _ = writeln!(out, "{v:>10} | {:>7.2}% | {:>6}", c.accuracy * 100.0, c.count);
        }
        let _ = writeln!(out, "config {}", self.config_fingerprint);
        out
    }
}

fn warn_if_untrained(ckpt: &Checkpoint) {
    if ckpt.step == 0 {
        log::warn!("checkpoint has taken no optimizer steps; evaluating an untrained model");
    }
}

fn run_grid(
    ckpt: &Checkpoint,
    axis: GridAxis,
    values: &[f64],
    n_per_cell: usize,
    seed: u64,
    cell: impl Fn(f64) -> Result<(usize, f64)>,
) -> Result<EvalReport> {
    if values.is_empty() || n_per_cell == 0 {
        return Err(Error::invalid("grid needs at least one cell and one sample per class"));
    }
    warn_if_untrained(ckpt);
    let model = ckpt.model()?;
    let cfg = model.config().clone();
    let vocab = cfg.vocab();
    let cells = values
        .iter()
        .enumerate()
        .map(|(k, &value)| {
            let (frames, rate) = cell(value)?;
            let segs = balanced_cell(cfg.kind, &vocab, frames, rate, n_per_cell, sub_seed(seed, k as u64))?;
            let probs = predict(&model, &segs, 256)?;
            let labels: Vec<bool> = segs.iter().map(VoipSegment::is_stego).collect();
            Ok(EvalCell {
                value,
                accuracy: accuracy_at_half(&probs, &labels)?,
                count: segs.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        axis,
        cells,
        config_fingerprint: cfg.fingerprint(),
        seed,
    })
}

/// Accuracy per embedding rate on balanced 1 s cells.
pub fn run_rate_grid(ckpt: &Checkpoint, rates: &[f64], n_per_cell: usize, seed: u64) -> Result<EvalReport> {
    run_grid(ckpt, GridAxis::EmbeddingRate, rates, n_per_cell, seed, |rate| {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::invalid(format!("embedding rate {rate} outside (0, 1]")));
        }
        Ok((100, rate))
    })
}

/// Accuracy per segment length on balanced cells at full embedding rate.
pub fn run_length_grid(
    ckpt: &Checkpoint,
    lengths_s: &[f64],
    n_per_cell: usize,
    seed: u64,
) -> Result<EvalReport> {
    run_grid(ckpt, GridAxis::SegmentLength, lengths_s, n_per_cell, seed, |len| {
        Ok((frames_for_length(len)?, 1.0))
    })
}

pub const WARMUP_ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub n: usize,
    pub config_fingerprint: String,
}

impl LatencyStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("latency stats serialize")
    }

    /// Detection is near-real-time when it is faster than the audio it covers.
    pub fn is_near_real_time(&self, segment_s: f64) -> bool {
        self.mean_ms < segment_s * 1000.0
    }
}

/// Times single-segment (batch 1) inference of `frames`-frame segments,
/// including descriptor-to-tensor preparation. Warm-up iterations are
/// excluded.
pub fn bench_latency(model: &HamModel, n_segments: usize, frames: usize, seed: u64) -> Result<LatencyStats> {
    if n_segments < 100 {
        return Err(Error::invalid(format!(
            "latency needs at least 100 timed segments, got {n_segments}"
        )));
    }
    let cfg = model.config();
    let segs = CoverModel::default().generate_segments(
        cfg.kind,
        &cfg.vocab(),
        n_segments + WARMUP_ITERATIONS,
        frames,
        seed,
    )?;
    let mut times = Vec::with_capacity(n_segments);
    for (i, s) in segs.iter().enumerate() {
        let start = Instant::now();
        let out = model.infer(&[&s.matrix])?;
        let elapsed = start.elapsed().as_secs_f64() * 1000.0;
        std::hint::black_box(out);
        if i >= WARMUP_ITERATIONS {
            times.push(elapsed);
        }
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let rank = ((0.95 * times.len() as f64).ceil() as usize).clamp(1, times.len());
    let stats = LatencyStats {
        mean_ms,
        p95_ms: times[rank - 1],
        n: times.len(),
        config_fingerprint: cfg.fingerprint(),
    };
    let segment_s = frames as f64 / FRAMES_PER_SECOND;
    if !stats.is_near_real_time(segment_s) {
        log::warn!("mean latency {mean_ms:.3} ms exceeds the {segment_s} s segment duration");
    }
    Ok(stats)
}

/// Writes one CSV row per segment: id, label, embedding rate and the pooled
/// feature vector `h`.
pub fn export_features(model: &HamModel, segments: &[VoipSegment], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::open(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "id,label,embedding_rate")?;
    for m in 0..model.model_dim() {
        write!(out, ",h{m}")?;
    }
    writeln!(out)?;
    for s in segments {
        let f = model.infer(&[&s.matrix])?.features;
        write!(out, "{},{},{}", s.id, s.label, s.embedding_rate)?;
        for v in f.row(0) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
