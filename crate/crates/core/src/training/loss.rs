//! Training objectives and their gradients.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Probability clamp for the cross-entropy logarithms.
pub const CE_EPSILON: f64 = 1e-12;

fn normalize_rows(h: &ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut u = h.to_owned();
    let mut norms = Vec::with_capacity(h.nrows());
    for (i, mut row) in u.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::invalid(format!(
                "feature row {i} has norm {norm}; cosine similarity undefined"
            )));
        }
        row /= norm;
        norms.push(norm);
    }
    Ok((u, norms))
}

/// Supervised contrastive loss over triplet features with its gradient.
///
/// `features` stacks anchors, positives and negatives (`3·n × M`). For every
/// anchor `i`, with cosine similarity `sim` and temperature `τ`:
///
/// ```text
/// ℓ_i = −log( e^{sim(h_i, h⁺_i)/τ} / Σ_j [e^{sim(h_i, h⁺_j)/τ} + e^{sim(h_i, h⁻_j)/τ}] )
/// ```
///
/// The result is the mean over anchors; the gradient is with respect to
/// `features`.
pub fn supcon_with_grad(features: &Array2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let rows = features.nrows();
    if rows == 0 || !rows.is_multiple_of(3) {
        return Err(Error::invalid(format!(
            "{rows} feature rows do not form triplets"
        )));
    }
    let n = rows / 3;
    let (u, norms) = normalize_rows(&features.view())?;
    let ua = u.slice(s![..n, ..]);
    let up = u.slice(s![n..2 * n, ..]);
    let un = u.slice(s![2 * n.., ..]);
    // logits against [positives | negatives]
    let others = concatenate![Axis(0), up, un];
    let logits = ua.dot(&others.t()) / tau;

    let mut loss = 0.0;
    let mut g = logits.clone();
    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
        // ℓ_i = log Σ_j e^{l_j − l_ii}; the matched term contributes the 1
        let own = logits[[i, i]];
        let shift = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v - own));
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| (v - own - shift.max(0.0)).exp())
            .sum();
        let term = if shift <= 0.0 {
            rest.ln_1p()
        } else {
            shift + ((-shift).exp() + rest).ln()
        };
        let lse = own + term;
        loss += term;
        row.mapv_inplace(|v| (v - lse).exp() / n as f64);
        row[i] -= 1.0 / n as f64;
    }
    loss /= n as f64;

    // g = ∂L/∂logits; logits = ua · othersᵀ / τ
    let du_a = g.dot(&others) / tau;
    let du_o = g.t().dot(&ua) / tau;
    let du = concatenate![Axis(0), du_a, du_o];
    let mut dh = du;
    for ((mut drow, urow), &norm) in dh.rows_mut().into_iter().zip(u.rows()).zip(&norms) {
        let dot = drow.dot(&urow);
        drow.zip_mut_with(&urow, |d, &uv| *d = (*d - uv * dot) / norm);
    }
    Ok((loss, dh))
}

/// Supervised contrastive loss for aligned anchor/positive/negative features.
pub fn supcon_loss(
    anchors: &ArrayView2<f64>,
    positives: &ArrayView2<f64>,
    negatives: &ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    if anchors.dim() != positives.dim() || anchors.dim() != negatives.dim() {
        return Err(Error::invalid("anchor, positive and negative shapes differ"));
    }
    let stacked = concatenate![Axis(0), *anchors, *positives, *negatives];
    supcon_with_grad(&stacked, tau).map(|(l, _)| l)
}

fn check_ce_inputs(p_stego: &[f64], labels: &[f64]) -> Result<()> {
    if p_stego.len() != labels.len() || p_stego.is_empty() {
        return Err(Error::invalid(format!(
            "{} probabilities for {} labels",
            p_stego.len(),
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::invalid(format!("label {y} outside [0, 1]")));
    }
    Ok(())
}

/// Mean binary cross-entropy of stego probabilities against soft labels.
pub fn ce_loss(p_stego: &[f64], labels: &[f64]) -> Result<f64> {
    check_ce_inputs(p_stego, labels)?;
    let sum: f64 = p_stego
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / p_stego.len() as f64)
}

/// Cross-entropy on a `batch × 2` softmax output and its gradient with
/// respect to the logits that produced it.
pub fn ce_with_grad(probs: &Array2<f64>, labels: &[f64]) -> Result<(f64, Array2<f64>)> {
    let p: Vec<f64> = probs.column(1).to_vec();
    let loss = ce_loss(&p, labels)?;
    let n = p.len() as f64;
    let mut grad = Array2::zeros((p.len(), 2));
    for (i, (&pi, &y)) in p.iter().zip(labels).enumerate() {
        // the clamp is flat outside [ε, 1−ε]
        let g = if (CE_EPSILON..=1.0 - CE_EPSILON).contains(&pi) {
            (pi - y) / n
        } else {
            0.0
        };
        grad[[i, 1]] = g;
        grad[[i, 0]] = -g;
    }
    Ok((loss, grad))
}

/// Unweighted sum of the two objectives.
pub fn joint_loss(scl: f64, ce: f64) -> f64 {
    scl + ce
}
