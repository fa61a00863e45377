//! Cyclic triplet construction.

use crate::error::{Error, Result};

/// Aligned `(anchor, positive, negative)` lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch<T> {
    pub anchors: Vec<T>,
    pub positives: Vec<T>,
    pub negatives: Vec<T>,
}

impl<T> TripletBatch<T> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// `(anchor, positive, negative)` tuples in order.
    pub fn triples(&self) -> impl Iterator<Item = (&T, &T, &T)> {
        self.anchors
            .iter()
            .zip(&self.positives)
            .zip(&self.negatives)
            .map(|((a, p), n)| (a, p, n))
    }

    /// Anchors, then positives, then negatives: the layout of one forward
    /// batch of size `3 · len`.
    pub fn flatten(&self) -> impl Iterator<Item = &T> {
        self.anchors
            .iter()
            .chain(&self.positives)
            .chain(&self.negatives)
    }
}

/// Pairs positive batch `i` with negative batch `j` (cycling through the
/// negatives), truncates both to the smaller size, and pairs every positive
/// sample with its successor (the last wraps to the first) against the
/// negative at the same position.
pub fn build_triplets<T: Clone>(
    positive_batches: &[Vec<T>],
    negative_batches: &[Vec<T>],
) -> Result<Vec<TripletBatch<T>>> {
    if positive_batches.is_empty() || negative_batches.is_empty() {
        return Err(Error::invalid("triplets need positive and negative batches"));
    }
    if positive_batches
        .iter()
        .chain(negative_batches)
        .any(Vec::is_empty)
    {
        return Err(Error::invalid("triplet source batches must be non-empty"));
    }
    let n = negative_batches.len();
    let mut j = 0;
    let mut out = Vec::with_capacity(positive_batches.len());
    for pos in positive_batches {
        let neg = &negative_batches[j];
        let size = pos.len().min(neg.len());
        out.push(TripletBatch {
            anchors: pos[..size].to_vec(),
            positives: (0..size).map(|s| pos[(s + 1) % size].clone()).collect(),
            negatives: neg[..size].to_vec(),
        });
        j = (j + 1) % n;
    }
    Ok(out)
}
