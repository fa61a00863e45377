//! Seeded synthetic cover streams and parity-coset embedding.
//!
//! Covers come from a per-channel first-order Markov chain over codeword
//! indices. The transition kernel is banded around the current index with
//! geometric tails, and down-weights odd target indices, so natural covers
//! carry a parity imbalance. Embedding snaps selected codewords onto the
//! coset (even/odd) that encodes a message bit, which pulls the parity
//! distribution towards uniform: the same kind of codeword-distribution
//! shift real QIM and pitch-modulation schemes leave behind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DescriptorKind, DescriptorMatrix, VoipSegment, FRAMES_PER_SECOND};
use crate::error::{Error, Result};

/// Derives an independent sub-seed for item `index` of a seeded collection.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index.wrapping_add(1)))
}

/// Banded Markov cover model.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverModel {
    /// Weight of staying on the current index.
    pub stay: f64,
    /// Geometric ratio between successive step sizes.
    pub tail: f64,
    /// Largest step the kernel can take.
    pub band: u32,
    /// Relative weight of odd target indices (1.0 = no parity preference).
    pub odd_weight: f64,
    /// Transitions discarded before the first emitted frame.
    pub burn_in: usize,
}

impl Default for CoverModel {
    fn default() -> Self {
        CoverModel {
            stay: 0.5,
            tail: 0.5,
            band: 8,
            odd_weight: 0.4,
            burn_in: 32,
        }
    }
}

impl CoverModel {
    fn step_weights(&self) -> Vec<f64> {
        (0..=self.band)
            .map(|k| {
                if k == 0 {
                    self.stay
                } else {
                    0.5 * (1.0 - self.stay) * (1.0 - self.tail) * self.tail.powi(k as i32 - 1)
                }
            })
            .collect()
    }

    fn next_index<R: Rng>(&self, rng: &mut R, steps: &[f64], current: u32, size: u32) -> u32 {
        let lo = current.saturating_sub(self.band);
        let hi = (current + self.band).min(size - 1);
        let weight = |j: u32| {
            let parity = if j.is_multiple_of(2) { 1.0 } else { self.odd_weight };
            steps[current.abs_diff(j) as usize] * parity
        };
        let total: f64 = (lo..=hi).map(weight).sum();
        let mut u = rng.random::<f64>() * total;
        for j in lo..=hi {
            u -= weight(j);
            if u < 0.0 {
                return j;
            }
        }
        hi
    }

    /// Generates one cover matrix; a pure function of its arguments.
    pub fn generate(
        &self,
        kind: DescriptorKind,
        vocab: &[u32],
        frames: usize,
        seed: u64,
    ) -> Result<DescriptorMatrix> {
        if frames == 0 {
            return Err(Error::invalid("cover needs at least one frame"));
        }
        if vocab.len() != kind.channels() || vocab.contains(&0) {
            return Err(Error::invalid(format!(
                "bad vocabulary {vocab:?} for kind {kind}"
            )));
        }
        let steps = self.step_weights();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(kind.channels() * frames);
        for &size in vocab {
            let mut x = rng.random_range(0..size);
            for _ in 0..self.burn_in {
                x = self.next_index(&mut rng, &steps, x, size);
            }
            for _ in 0..frames {
                x = self.next_index(&mut rng, &steps, x, size);
                values.push(x);
            }
        }
        DescriptorMatrix::new(kind, frames, values)
    }

    /// Generates `n` cover segments with per-segment sub-seeds, so any subset
    /// can be regenerated independently of the others.
    pub fn generate_segments(
        &self,
        kind: DescriptorKind,
        vocab: &[u32],
        n: usize,
        frames: usize,
        seed: u64,
    ) -> Result<Vec<VoipSegment>> {
        if n == 0 {
            return Err(Error::invalid("cover count must be at least 1"));
        }
        (0..n)
            .map(|i| {
                let m = self.generate(kind, vocab, frames, sub_seed(seed, i as u64))?;
                Ok(VoipSegment::cover(format!("cover-{i}"), m))
            })
            .collect()
    }
}

/// Generates `n` cover segments of `frames` frames with the default model and
/// the kind's default vocabulary.
pub fn gen_cover(
    n: usize,
    kind: DescriptorKind,
    frames: usize,
    seed: u64,
) -> Result<Vec<VoipSegment>> {
    CoverModel::default().generate_segments(kind, &kind.default_vocab(), n, frames, seed)
}

/// What an embedding pass did, for verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedTrace {
    /// Per frame: whether it carries message bits.
    pub selected: Vec<bool>,
    /// Row-major `channels × frames` message bits; zero where unselected.
    pub bits: Vec<u8>,
}

impl EmbedTrace {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Parity-coset embedding shared by the QIM and pitch-modulation simulators.
///
/// Each frame is selected independently with probability `rate`. In a
/// selected frame every channel gets a fresh message bit and its value is
/// moved to the nearest index whose parity equals the bit (distance ≤ 1,
/// direction drawn at random when both neighbours are in range).
pub fn embed_traced(
    segment: &VoipSegment,
    vocab: &[u32],
    rate: f64,
    seed: u64,
) -> Result<(VoipSegment, EmbedTrace)> {
    if segment.label != 0.0 {
        return Err(Error::invalid(format!(
            "segment {} is already stego (label {})",
            segment.id, segment.label
        )));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "embedding rate must lie in [0, 1], got {rate}"
        )));
    }
    let matrix = &segment.matrix;
    matrix.check_vocab(vocab)?;
    if rate > 0.0 && vocab.iter().any(|&v| v < 2) {
        return Err(Error::invalid(
            "parity embedding needs every vocabulary size ≥ 2",
        ));
    }
    let (channels, frames) = matrix.shape();
    let mut out = matrix.clone();
    let mut trace = EmbedTrace {
        selected: vec![false; frames],
        bits: vec![0; channels * frames],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..frames {
        if !rng.random_bool(rate) {
            continue;
        }
        trace.selected[t] = true;
        for (d, &size) in vocab.iter().enumerate() {
            let bit = rng.random::<bool>() as u32;
            trace.bits[d * frames + t] = bit as u8;
            let v = matrix.get(d, t);
            if v % 2 == bit {
                continue;
            }
            let replacement = match (v > 0, v + 1 < size) {
                (true, true) => {
                    if rng.random::<bool>() {
                        v + 1
                    } else {
                        v - 1
                    }
                }
                (true, false) => v - 1,
                (false, true) => v + 1,
                (false, false) => unreachable!("vocabulary size checked ≥ 2"),
            };
            out.set(d, t, replacement);
        }
    }
    let stego = VoipSegment {
        id: segment.id.clone(),
        matrix: out,
        label: if rate > 0.0 { 1.0 } else { 0.0 },
        embedding_rate: rate,
        duration_s: frames as f64 / FRAMES_PER_SECOND,
    };
    Ok((stego, trace))
}

/// Embeds with the simulator matching the segment's descriptor kind.
pub fn embed(segment: &VoipSegment, vocab: &[u32], rate: f64, seed: u64) -> Result<VoipSegment> {
    embed_traced(segment, vocab, rate, seed).map(|(s, _)| s)
}

fn embed_kind(
    segment: &VoipSegment,
    kind: DescriptorKind,
    rate: f64,
    seed: u64,
) -> Result<VoipSegment> {
    if segment.kind() != kind {
        return Err(Error::invalid(format!(
            "expected a {kind} segment, got {}",
            segment.kind()
        )));
    }
    embed(segment, &kind.default_vocab(), rate, seed)
}

/// QIM simulator on LSP codewords.
pub fn embed_qim(segment: &VoipSegment, rate: f64, seed: u64) -> Result<VoipSegment> {
    embed_kind(segment, DescriptorKind::Lsp, rate, seed)
}

/// Pitch-modulation simulator on decoded pitch delays.
pub fn embed_pms(segment: &VoipSegment, rate: f64, seed: u64) -> Result<VoipSegment> {
    embed_kind(segment, DescriptorKind::Pitch, rate, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cover(kind: DescriptorKind, frames: usize, seed: u64) -> VoipSegment {
        gen_cover(1, kind, frames, seed).unwrap().remove(0)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_cover(1, DescriptorKind::Lsp, 100, 7).unwrap();
        let b = gen_cover(1, DescriptorKind::Lsp, 100, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_cover(1, DescriptorKind::Lsp, 100, 8).unwrap();
        assert_ne!(a[0].matrix, c[0].matrix);
    }

    #[test]
    fn prefix_of_collection_is_stable() {
        let few = gen_cover(2, DescriptorKind::Pitch, 20, 3).unwrap();
        let many = gen_cover(5, DescriptorKind::Pitch, 20, 3).unwrap();
        assert_eq!(few[..], many[..2]);
    }

    #[test]
    fn pitch_values_stay_in_range() {
        for seg in gen_cover(2, DescriptorKind::Pitch, 10, 1).unwrap() {
            assert_eq!(seg.matrix.shape(), (4, 10));
            seg.matrix.check_vocab(&[144; 4]).unwrap();
            assert_eq!(seg.label, 0.0);
            assert_eq!(seg.embedding_rate, 0.0);
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let cover = one_cover(DescriptorKind::Lsp, 50, 1);
        let stego = embed_qim(&cover, 0.0, 9).unwrap();
        assert_eq!(stego.matrix, cover.matrix);
        assert_eq!(stego.label, 0.0);
        let stego = embed_pms(&one_cover(DescriptorKind::Pitch, 50, 1), 0.0, 9).unwrap();
        assert_eq!(stego.label, 0.0);
    }

    #[test]
    fn stego_input_rejected() {
        let cover = one_cover(DescriptorKind::Lsp, 20, 1);
        let stego = embed_qim(&cover, 1.0, 2).unwrap();
        assert!(matches!(
            embed_qim(&stego, 0.5, 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn wrong_kind_rejected() {
        let cover = one_cover(DescriptorKind::Lsp, 20, 1);
        assert!(embed_pms(&cover, 0.5, 3).is_err());
        assert!(embed_qim(&cover, 1.5, 3).is_err());
    }

    #[test]
    fn edge_values_move_inward() {
        let m = DescriptorMatrix::from_rows(
            DescriptorKind::Pitch,
            &[vec![0; 64], vec![143; 64], vec![0; 64], vec![143; 64]],
        )
        .unwrap();
        let cover = VoipSegment::cover("edge", m);
        let (stego, trace) = embed_traced(&cover, &[144; 4], 1.0, 5).unwrap();
        for d in 0..4 {
            for t in 0..64 {
                let v = stego.matrix.get(d, t);
                assert!(v < 144);
                assert_eq!(v % 2, trace.bits[d * 64 + t] as u32);
            }
        }
    }
}
