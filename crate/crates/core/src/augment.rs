//! CutMix obfuscation of descriptor matrices.
//!
//! A rectangular region of a "pronounced" sample's descriptors is replaced by
//! the same region of a hard-to-detect sample, and the labels are mixed with
//! the sampled ratio `λ`:
//!
//! ```text
//! d_c = M ⊙ d_p + (1 − M) ⊙ d_h        y_c = λ·y_p + (1 − λ)·y_h
//! ```
//!
//! `M` is zero inside the region and one elsewhere; the region has a uniform
//! random center and extent `(D·√(1−λ), T·√(1−λ))`, and `λ ~ Beta(α, α)`.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::descriptors::{DescriptorMatrix, VoipSegment};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.6;

/// The replaced rectangle, before and after snapping to the matrix grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CutRegion {
    /// `(C_x, C_y)`: channel and frame coordinates of the center.
    pub center: (f64, f64),
    /// `(C_depth, C_height)` before flooring and clipping.
    pub extent: (f64, f64),
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl CutRegion {
    pub fn area(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows.contains(&row) && self.cols.contains(&col)
    }

    /// True when flooring left the full `floor(extent)` rectangle inside the
    /// matrix, i.e. nothing was clipped.
    pub fn is_interior(&self) -> bool {
        self.rows.len() == self.extent.0.floor() as usize
            && self.cols.len() == self.extent.1.floor() as usize
    }
}

/// Binary mask `M`, row-major `channels × frames`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutMask {
    channels: usize,
    frames: usize,
    keep: Vec<bool>,
}

impl CutMask {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.keep[row * self.frames + col] as u8
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.frames)
    }

    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        self.zeros() as f64 / self.keep.len() as f64
    }
}

/// Draws `λ ~ Beta(α, α)`, strictly inside (0, 1).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("Beta parameter must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    loop {
        let lambda = beta.sample(rng);
        if lambda > 0.0 && lambda < 1.0 {
            return Ok(lambda);
        }
    }
}

fn snap(center: f64, extent: f64, size: usize) -> Range<usize> {
    let len = extent.floor();
    let start = (center - extent / 2.0).floor();
    let lo = start.clamp(0.0, size as f64) as usize;
    let hi = (start + len).clamp(0.0, size as f64) as usize;
    lo..hi.max(lo)
}

/// Samples the cut region for a `channels × frames` matrix.
///
/// Each side starts at `floor(center − extent/2)` and spans `floor(extent)`
/// cells, clipped to the matrix; `λ` is not re-derived from the clipped area.
pub fn cutmix_mask<R: Rng + ?Sized>(
    channels: usize,
    frames: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<(CutMask, CutRegion)> {
    if channels == 0 || frames == 0 {
        return Err(Error::invalid("mask dimensions must be positive"));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!("λ must lie in (0, 1), got {lambda}")));
    }
    let cx = rng.random::<f64>() * channels as f64;
    let cy = rng.random::<f64>() * frames as f64;
    let ratio = (1.0 - lambda).sqrt();
    let extent = (channels as f64 * ratio, frames as f64 * ratio);
    let region = CutRegion {
        center: (cx, cy),
        extent,
        rows: snap(cx, extent.0, channels),
        cols: snap(cy, extent.1, frames),
    };
    let mut keep = vec![true; channels * frames];
    for i in region.rows.clone() {
        for j in region.cols.clone() {
            keep[i * frames + j] = false;
        }
    }
    Ok((
        CutMask {
            channels,
            frames,
            keep,
        },
        region,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub matrix: DescriptorMatrix,
    pub label: f64,
    pub lambda: f64,
    pub region: CutRegion,
}

/// Applies a given mask: entries where `M = 1` come from `pronounced`, the
/// rest from `hard`.
pub fn apply_mask(
    pronounced: &DescriptorMatrix,
    hard: &DescriptorMatrix,
    mask: &CutMask,
) -> Result<DescriptorMatrix> {
    if pronounced.kind() != hard.kind() || pronounced.shape() != hard.shape() {
        return Err(Error::invalid(format!(
            "cannot mix {} {:?} with {} {:?}",
            pronounced.kind(),
            pronounced.shape(),
            hard.kind(),
            hard.shape()
        )));
    }
    if mask.shape() != pronounced.shape() {
        return Err(Error::invalid("mask shape differs from descriptor shape"));
    }
    let values = pronounced
        .values()
        .iter()
        .zip(hard.values())
        .zip(&mask.keep)
        .map(|((&p, &h), &keep)| if keep { p } else { h })
        .collect();
    DescriptorMatrix::new(pronounced.kind(), pronounced.frames(), values)
}

/// CutMix of a pronounced sample `(d_p, y_p)` with a hard sample `(d_h, y_h)`.
pub fn cutmix<R: Rng + ?Sized>(
    d_p: &DescriptorMatrix,
    y_p: f64,
    d_h: &DescriptorMatrix,
    y_h: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<MixedSample> {
    if d_p.kind() != d_h.kind() || d_p.shape() != d_h.shape() {
        return Err(Error::invalid(format!(
            "cannot mix {} {:?} with {} {:?}",
            d_p.kind(),
            d_p.shape(),
            d_h.kind(),
            d_h.shape()
        )));
    }
    let lambda = sample_lambda(alpha, rng)?;
    let (channels, frames) = d_p.shape();
    let (mask, region) = cutmix_mask(channels, frames, lambda, rng)?;
    Ok(MixedSample {
        matrix: apply_mask(d_p, d_h, &mask)?,
        label: lambda * y_p + (1.0 - lambda) * y_h,
        lambda,
        region,
    })
}

/// CutMix settings for the training stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutMixConfig {
    pub enabled: bool,
    pub alpha: f64,
    /// Stego samples at or above this embedding rate count as pronounced.
    pub pronounced_threshold: f64,
    /// Probability that a training sample is replaced by a mixed one.
    pub apply_probability: f64,
    /// Allow cover × stego pairs.
    pub cross_class: bool,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        CutMixConfig {
            enabled: true,
            alpha: DEFAULT_ALPHA,
            pronounced_threshold: 0.5,
            apply_probability: 1.0,
            cross_class: false,
        }
    }
}

impl CutMixConfig {
    pub fn disabled() -> Self {
        CutMixConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("cutmix.alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config("cutmix.apply_probability must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.pronounced_threshold) {
            return Err(Error::Config("cutmix.pronounced_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A sample ready for the training stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub matrix: DescriptorMatrix,
    /// Soft label used by the cross-entropy term.
    pub label: f64,
    /// Hard class used for triplet membership (true = stego).
    pub stego: bool,
    /// `λ` when the sample is a CutMix product.
    pub lambda: Option<f64>,
}

impl TrainingSample {
    pub fn plain(segment: &VoipSegment) -> Self {
        TrainingSample {
            matrix: segment.matrix.clone(),
            label: segment.label,
            stego: segment.is_stego(),
            lambda: None,
        }
    }
}

fn pick<R: Rng + ?Sized>(pool: &[usize], fallback: &[usize], rng: &mut R) -> usize {
    let pool = if pool.is_empty() { fallback } else { pool };
    pool[rng.random_range(0..pool.len())]
}

/// Produces one training sample per input segment, mixing according to the
/// pairing policy:
///
/// * covers mix with covers;
/// * a pronounced stego sample (rate ≥ threshold) plays `d_p` against a
///   random hard stego sample, a hard one plays `d_h` against a random
///   pronounced one; when the opposite pool is empty any stego sample is used;
/// * with `cross_class` the partner is drawn from the whole pool.
///
/// A mixed sample joins the class of its dominant parent (`λ ≥ 0.5` picks
/// `d_p`'s class).
pub fn obfuscate<R: Rng + ?Sized>(
    segments: &[VoipSegment],
    config: &CutMixConfig,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    if !config.enabled {
        return Ok(segments.iter().map(TrainingSample::plain).collect());
    }
    config.validate()?;
    let mut covers = Vec::new();
    let mut pronounced = Vec::new();
    let mut hard = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        if !s.is_stego() {
            covers.push(i);
        } else if s.embedding_rate >= config.pronounced_threshold {
            pronounced.push(i);
        } else {
            hard.push(i);
        }
    }
    let stego: Vec<usize> = pronounced.iter().chain(&hard).copied().collect();
    let all: Vec<usize> = (0..segments.len()).collect();

    segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            if rng.random::<f64>() >= config.apply_probability {
                return Ok(TrainingSample::plain(seg));
            }
            let (p, h) = if config.cross_class {
                (i, pick(&all, &all, rng))
            } else if !seg.is_stego() {
                (i, pick(&covers, &covers, rng))
            } else if seg.embedding_rate >= config.pronounced_threshold {
                (i, pick(&hard, &stego, rng))
            } else {
                (pick(&pronounced, &stego, rng), i)
            };
            let (sp, sh) = (&segments[p], &segments[h]);
            let mixed = cutmix(
                &sp.matrix,
                sp.label,
                &sh.matrix,
                sh.label,
                config.alpha,
                rng,
            )?;
            let stego = if mixed.lambda >= 0.5 {
                sp.is_stego()
            } else {
                sh.is_stego()
            };
            Ok(TrainingSample {
                matrix: mixed.matrix,
                label: mixed.label,
                stego,
                lambda: Some(mixed.lambda),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::{embed_qim, gen_cover, DescriptorKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn lambda_rejects_bad_alpha() {
        assert!(sample_lambda(0.0, &mut rng(0)).is_err());
        assert!(sample_lambda(-1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn lambda_draws_are_open_interval_with_mean_half() {
        let mut r = rng(1);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let l = sample_lambda(DEFAULT_ALPHA, &mut r).unwrap();
            assert!(l > 0.0 && l < 1.0);
            sum += l;
        }
        let mean = sum / n as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    }

    #[test]
    fn extent_for_three_quarters() {
        let mut r = rng(2);
        for _ in 0..200 {
            let (mask, region) = cutmix_mask(3, 100, 0.75, &mut r).unwrap();
            assert!((region.extent.0 - 1.5).abs() < 1e-12);
            assert!((region.extent.1 - 50.0).abs() < 1e-12);
            assert!(region.area() <= 50);
            assert_eq!(mask.zeros(), region.area());
            assert!(region.rows.end <= 3 && region.cols.end <= 100);
        }
    }

    #[test]
    fn lambda_one_gives_empty_region() {
        let (mask, region) = cutmix_mask(4, 10, 1.0, &mut rng(3)).unwrap();
        assert_eq!(region.area(), 0);
        assert_eq!(mask.zeros(), 0);
    }

    #[test]
    fn interior_regions_have_floor_extent() {
        let mut r = rng(4);
        let mut interior = 0;
        for _ in 0..1000 {
            let (mask, region) = cutmix_mask(3, 100, 0.25, &mut r).unwrap();
            if region.is_interior() {
                interior += 1;
                let s = 0.75f64.sqrt();
                assert_eq!(
                    mask.zeros(),
                    (3.0 * s).floor() as usize * (100.0 * s).floor() as usize
                );
            }
        }
        assert!(interior > 0);
    }

    #[test]
    fn label_algebra() {
        let m = gen_cover(1, DescriptorKind::Lsp, 20, 1).unwrap().remove(0).matrix;
        let mut r = rng(5);
        let mixed = cutmix(&m, 1.0, &m, 1.0, 0.6, &mut r).unwrap();
        assert_eq!(mixed.label, 1.0);
        assert_eq!(mixed.matrix, m);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = gen_cover(1, DescriptorKind::Lsp, 20, 1).unwrap().remove(0).matrix;
        let b = gen_cover(1, DescriptorKind::Lsp, 10, 1).unwrap().remove(0).matrix;
        let c = gen_cover(1, DescriptorKind::Pitch, 20, 1).unwrap().remove(0).matrix;
        assert!(cutmix(&a, 0.0, &b, 0.0, 0.6, &mut rng(0)).is_err());
        assert!(cutmix(&a, 0.0, &c, 0.0, 0.6, &mut rng(0)).is_err());
    }

    #[test]
    fn pairing_keeps_classes_apart() {
        let covers = gen_cover(20, DescriptorKind::Lsp, 30, 11).unwrap();
        let mut pool = covers.clone();
        for (i, c) in covers.iter().enumerate() {
            let rate = if i % 2 == 0 { 0.2 } else { 0.9 };
            pool.push(embed_qim(c, rate, i as u64).unwrap());
        }
        let out = obfuscate(&pool, &CutMixConfig::default(), &mut rng(6)).unwrap();
        assert_eq!(out.len(), pool.len());
        for (s, o) in pool.iter().zip(&out) {
            assert_eq!(s.is_stego(), o.stego);
            assert_eq!(o.label, s.label);
            assert!(o.lambda.is_some());
        }
    }

    #[test]
    fn disabled_is_passthrough() {
        let pool = gen_cover(3, DescriptorKind::Pitch, 10, 2).unwrap();
        let out = obfuscate(&pool, &CutMixConfig::disabled(), &mut rng(0)).unwrap();
        assert!(out.iter().zip(&pool).all(|(o, s)| o.matrix == s.matrix && o.lambda.is_none()));
    }
}
