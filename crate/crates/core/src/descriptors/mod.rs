//! Codec descriptor data model.
//!
//! A segment of a low-bit-rate voice stream is represented by a small integer
//! matrix with one row per codec parameter channel and one column per 10 ms
//! frame. LSP codeword descriptors have three channels (the three split
//! vector-quantizer indices), pitch-delay descriptors have four (one decoded
//! adaptive-codebook delay per subframe pair).

mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_dataset, write_dataset, DatasetReader, DatasetWriter};
pub use synth::{
    embed, embed_pms, embed_qim, embed_traced, gen_cover, sub_seed, CoverModel, EmbedTrace,
};

/// Codec frames per second of audio.
pub const FRAMES_PER_SECOND: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    /// Quantized line spectrum pair codewords (QIM target).
    Lsp,
    /// Decoded pitch delays (pitch-modulation target).
    Pitch,
}

impl DescriptorKind {
    pub fn channels(self) -> usize {
        match self {
            DescriptorKind::Lsp => 3,
            DescriptorKind::Pitch => 4,
        }
    }

    /// Per-channel vocabulary sizes matching the G.729 parameter bit widths.
    pub fn default_vocab(self) -> Vec<u32> {
        match self {
            DescriptorKind::Lsp => vec![128, 32, 32],
            DescriptorKind::Pitch => vec![144; 4],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DescriptorKind::Lsp => "lsp",
            DescriptorKind::Pitch => "pitch",
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DescriptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsp" => Ok(DescriptorKind::Lsp),
            "pitch" => Ok(DescriptorKind::Pitch),
            other => Err(Error::invalid(format!(
                "unknown descriptor kind {other:?} (expected lsp or pitch)"
            ))),
        }
    }
}

/// Integer descriptor matrix of shape `channels × frames`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptorMatrix {
    kind: DescriptorKind,
    frames: usize,
    values: Vec<u32>,
}

impl DescriptorMatrix {
    pub fn new(kind: DescriptorKind, frames: usize, values: Vec<u32>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("descriptor matrix needs at least one frame"));
        }
        let expected = kind.channels() * frames;
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "{kind} matrix with {frames} frames needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(DescriptorMatrix {
            kind,
            frames,
            values,
        })
    }

    /// Builds a matrix from one slice per channel.
    pub fn from_rows(kind: DescriptorKind, rows: &[Vec<u32>]) -> Result<Self> {
        if rows.len() != kind.channels() {
            return Err(Error::invalid(format!(
                "{kind} matrix needs {} rows, got {}",
                kind.channels(),
                rows.len()
            )));
        }
        let frames = rows[0].len();
        if rows.iter().any(|r| r.len() != frames) {
            return Err(Error::invalid("ragged descriptor rows"));
        }
        Self::new(kind, frames, rows.concat())
    }

    pub fn kind(&self) -> DescriptorKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels(), self.frames)
    }

    #[inline]
    pub fn get(&self, channel: usize, frame: usize) -> u32 {
        self.values[channel * self.frames + frame]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, frame: usize, value: u32) {
        self.values[channel * self.frames + frame] = value;
    }

    pub fn row(&self, channel: usize) -> &[u32] {
        &self.values[channel * self.frames..(channel + 1) * self.frames]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    /// Copies frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::invalid(format!(
                "frame range {start}..{} outside 0..{}",
                start + len,
                self.frames
            )));
        }
        let values = (0..self.channels())
            .flat_map(|d| self.row(d)[start..start + len].iter().copied())
            .collect();
        Ok(DescriptorMatrix {
            kind: self.kind,
            frames: len,
            values,
        })
    }

    /// Checks every entry against the per-channel vocabulary sizes.
    pub fn check_vocab(&self, vocab: &[u32]) -> Result<()> {
        if vocab.len() != self.channels() {
            return Err(Error::Validation(format!(
                "{} vocabulary sizes for a {}-channel {} matrix",
                vocab.len(),
                self.channels(),
                self.kind
            )));
        }
        for (d, &size) in vocab.iter().enumerate() {
            if let Some((t, &v)) = self.row(d).iter().enumerate().find(|(_, &v)| v >= size) {
                return Err(Error::Validation(format!(
                    "channel {d} frame {t}: value {v} outside vocabulary [0, {size})"
                )));
            }
        }
        Ok(())
    }
}

/// A labelled descriptor segment.
#[derive(Debug, Clone, PartialEq)]
pub struct VoipSegment {
    pub id: String,
    pub matrix: DescriptorMatrix,
    /// 0 = cover, 1 = stego; fractional only for mixed samples.
    pub label: f64,
    pub embedding_rate: f64,
    pub duration_s: f64,
}

impl VoipSegment {
    pub fn cover(id: impl Into<String>, matrix: DescriptorMatrix) -> Self {
        let duration_s = matrix.frames() as f64 / FRAMES_PER_SECOND;
        VoipSegment {
            id: id.into(),
            matrix,
            label: 0.0,
            embedding_rate: 0.0,
            duration_s,
        }
    }

    pub fn is_stego(&self) -> bool {
        self.label >= 0.5
    }

    pub fn kind(&self) -> DescriptorKind {
        self.matrix.kind()
    }

    pub fn frames(&self) -> usize {
        self.matrix.frames()
    }
}

/// Dataset-level metadata stored in the first line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub kind: DescriptorKind,
    pub vocab: Vec<u32>,
    pub seed: u64,
    pub codec: String,
}

impl DatasetHeader {
    pub fn new(kind: DescriptorKind, seed: u64) -> Self {
        let codec = match kind {
            DescriptorKind::Lsp => "g729-lsp",
            DescriptorKind::Pitch => "g729-pitch",
        };
        DatasetHeader {
            kind,
            vocab: kind.default_vocab(),
            seed,
            codec: codec.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.len() != self.kind.channels() {
            return Err(Error::Validation(format!(
                "{} vocabulary sizes declared for kind {}",
                self.vocab.len(),
                self.kind
            )));
        }
        if self.vocab.contains(&0) {
            return Err(Error::Validation("vocabulary sizes must be positive".into()));
        }
        if self.codec.is_empty() || self.codec.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "codec tag {:?} must be a non-empty token",
                self.codec
            )));
        }
        Ok(())
    }
}

/// Frame count of a segment `length_s` seconds long.
pub fn frames_for_length(length_s: f64) -> Result<usize> {
    if !(length_s.is_finite() && length_s > 0.0) {
        return Err(Error::invalid(format!(
            "segment length must be positive, got {length_s}"
        )));
    }
    let frames = (length_s * FRAMES_PER_SECOND).round() as usize;
    if frames == 0 {
        return Err(Error::invalid(format!(
            "segment length {length_s} s is shorter than one 10 ms frame"
        )));
    }
    Ok(frames)
}

/// Cuts a stream into contiguous, non-overlapping segments of `length_s`
/// seconds. A trailing remainder shorter than one segment is dropped.
pub fn segment_frames(stream: &VoipSegment, length_s: f64) -> Result<Vec<VoipSegment>> {
    let frames = frames_for_length(length_s)?;
    let count = stream.frames() / frames;
    (0..count)
        .map(|k| {
            let matrix = stream.matrix.slice_frames(k * frames, frames)?;
            Ok(VoipSegment {
                id: format!("{}-{k}", stream.id),
                matrix,
                label: stream.label,
                embedding_rate: stream.embedding_rate,
                duration_s: frames as f64 / FRAMES_PER_SECOND,
            })
        })
        .collect()
}
