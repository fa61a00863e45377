//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView1};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use voipsteg_core::descriptors::{DescriptorMatrix, VoipSegment};
use voipsteg_core::model::{HamModel, ModelConfig};
use voipsteg_core::training::{joint_objective, joint_objective_value};

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Direct double-loop contrastive loss, no stabilisation.
pub fn naive_supcon(a: &Array2<f64>, p: &Array2<f64>, n: &Array2<f64>, tau: f64) -> f64 {
    let b = a.nrows();
    let mut total = 0.0;
    for i in 0..b {
        // −log(num / den) = log(1 + Σ_{terms ≠ num} term / num)
        let own = cosine(a.row(i), p.row(i)) / tau;
        let mut rest = 0.0;
        for j in 0..b {
            if j != i {
                rest += (cosine(a.row(i), p.row(j)) / tau - own).exp();
            }
            rest += (cosine(a.row(i), n.row(j)) / tau - own).exp();
        }
        total += rest.ln_1p();
    }
    total / b as f64
}

/// Literal 1-based transcription of the triplet enumeration.
pub fn algorithm1<T: Clone>(pos: &[Vec<T>], neg: &[Vec<T>]) -> Vec<Vec<(T, T, T)>> {
    let p = pos.len();
    let n = neg.len();
    let mut j = 1;
    let mut out = Vec::new();
    for i in 1..=p {
        let min_size = pos[i - 1].len().min(neg[j - 1].len());
        let mut batch = Vec::new();
        for s in 1..=min_size {
            let r = (s % min_size) + 1;
            batch.push((
                pos[i - 1][s - 1].clone(),
                pos[i - 1][r - 1].clone(),
                neg[j - 1][s - 1].clone(),
            ));
        }
        out.push(batch);
        j = (j % n) + 1;
    }
    out
}

/// Even/odd value counts over every entry of the segments.
pub fn parity_counts(segments: &[&VoipSegment]) -> (u64, u64) {
    let mut even = 0;
    let mut odd = 0;
    for s in segments {
        for &v in s.matrix.values() {
            if v % 2 == 0 {
                even += 1;
            } else {
                odd += 1;
            }
        }
    }
    (even, odd)
}

/// p-value of the 2×2 chi-square independence test on parity counts.
pub fn parity_chi_square(a: (u64, u64), b: (u64, u64)) -> f64 {
    let obs = [[a.0 as f64, a.1 as f64], [b.0 as f64, b.1 as f64]];
    let total: f64 = obs.iter().flatten().sum();
    let mut stat = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let expect = (obs[r][0] + obs[r][1]) * (obs[0][c] + obs[1][c]) / total;
            stat += (obs[r][c] - expect).powi(2) / expect;
        }
    }
    1.0 - ChiSquared::new(1.0).unwrap().cdf(stat)
}

/// Even-fraction threshold classifier fitted on `train`, scored on `test`.
pub fn parity_oracle_accuracy(train: &[VoipSegment], test: &[VoipSegment]) -> f64 {
    let frac = |s: &VoipSegment| {
        let (e, o) = parity_counts(&[s]);
        e as f64 / (e + o) as f64
    };
    let mean = |stego: bool| {
        let v: Vec<f64> = train.iter().filter(|s| s.is_stego() == stego).map(frac).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let threshold = 0.5 * (mean(true) + mean(false));
    let correct = test
        .iter()
        .filter(|s| (frac(s) < threshold) == s.is_stego())
        .count();
    correct as f64 / test.len() as f64
}

/// Gradients smaller than this cannot be resolved to 1e-4 relative by
/// central differences at h = 1e-5: round-off in the objective alone is
/// about ε·|L|/h ≈ 1e-9 at the losses seen with τ = 0.025.
pub const GRAD_FLOOR: f64 = 1e-4;

pub struct GradCheck {
    pub max_rel_error: f64,
    /// Largest absolute error among entries below `GRAD_FLOOR`.
    pub max_small_abs_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares analytic gradients of the joint objective with central
/// differences on every parameter entry that a step of `h` can reach.
pub fn gradient_check(
    config: ModelConfig,
    seed: u64,
    batch: &[DescriptorMatrix],
    labels: &[f64],
    tau: f64,
    h: f64,
) -> GradCheck {
    let mut model = HamModel::new(config, seed).unwrap();
    let refs: Vec<&DescriptorMatrix> = batch.iter().collect();
    joint_objective(&mut model, &refs, labels, tau, true, false).unwrap();
    let analytic: Vec<(String, Array2<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut max_rel_error: f64 = 0.0;
    let mut max_small_abs_error: f64 = 0.0;
    let mut worst = String::new();
    let mut checked = 0;
    for (k, (name, grad)) in analytic.iter().enumerate() {
        for ((r, c), &a) in grad.indexed_iter() {
            let original = model.params()[k].value[[r, c]];
            let mut eval = |x: f64| {
                model.params_mut()[k].value[[r, c]] = x;
                joint_objective_value(&model, &refs, labels, tau, true).unwrap()
            };
            let numeric = (eval(original + h) - eval(original - h)) / (2.0 * h);
            eval(original);
            let scale = a.abs().max(numeric.abs());
            if scale < GRAD_FLOOR {
                max_small_abs_error = max_small_abs_error.max((a - numeric).abs());
            }
            let rel = (a - numeric).abs() / scale.max(GRAD_FLOOR);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = format!("{name}[{r},{c}] analytic {a:e} numeric {numeric:e}");
            }
            checked += 1;
        }
    }
    GradCheck {
        max_rel_error,
        max_small_abs_error,
        worst,
        checked,
    }
}
