//! Adaptive-moment optimizer and decoupled weight decay.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::model::layers::Param;
use crate::model::NamedArray;

/// `θ ← (1 − ω)·θ` for every parameter flagged for decay. Normalization
/// gains, biases and embedding tables are not flagged.
pub fn apply_weight_decay(params: &mut [&mut Param], omega: f64) {
    if omega == 0.0 {
        return;
    }
    let keep = 1.0 - omega;
    for p in params.iter_mut().filter(|p| p.decay) {
        p.value.mapv_inplace(|v| v * keep);
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }

    pub fn state(&self) -> Vec<NamedArray> {
        let mut out = vec![NamedArray {
            name: "adam.step".into(),
            rows: 1,
            cols: 1,
            data: vec![self.step as f64],
        }];
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            out.push(NamedArray::from_array(format!("adam.m.{i}"), m));
            out.push(NamedArray::from_array(format!("adam.v.{i}"), v));
        }
        out
    }

    pub fn restore(&mut self, state: &[NamedArray]) -> Result<()> {
        let (head, rest) = state
            .split_first()
            .ok_or_else(|| Error::Checkpoint("empty optimizer state".into()))?;
        if head.name != "adam.step" || rest.len() % 2 != 0 {
            return Err(Error::Checkpoint("malformed optimizer state".into()));
        }
        self.step = head.data[0] as u64;
        self.first = rest.iter().step_by(2).map(NamedArray::to_array).collect();
        self.second = rest.iter().skip(1).step_by(2).map(NamedArray::to_array).collect();
        Ok(())
    }
}
