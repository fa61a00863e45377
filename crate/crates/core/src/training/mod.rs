//! Joint contrastive + cross-entropy training over cyclic triplets.

mod loss;
mod optim;
mod triplets;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{obfuscate, TrainingSample};
use crate::config::Config;
use crate::descriptors::{sub_seed, DescriptorMatrix, VoipSegment};
use crate::error::{Error, Result};
use crate::eval::{accuracy_at_half, predict};
use crate::model::layers::BatchStats;
use crate::model::{Checkpoint, HamModel};

pub use loss::{ce_loss, ce_with_grad, joint_loss, supcon_loss, supcon_with_grad, CE_EPSILON};
pub use optim::{apply_weight_decay, Adam};
pub use triplets::{build_triplets, TripletBatch};

/// Which class supplies anchors and positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveClass {
    Stego,
    Cover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Triplets per step; one forward batch holds three times as many segments.
    pub batch_size: usize,
    pub epochs: usize,
    /// Contrastive temperature τ.
    pub temperature: f64,
    /// Decoupled weight-decay coefficient ω.
    pub weight_decay: f64,
    pub seed: u64,
    /// Include the contrastive term; `false` trains on cross-entropy only.
    pub joint: bool,
    pub positive_class: PositiveClass,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: u64,
    pub eval_batch_size: usize,
    /// Training segments used to re-estimate BatchNorm statistics before each
    /// validation and snapshot (0 keeps the moving averages).
    pub norm_recalibration: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 300,
            temperature: 0.025,
            weight_decay: 1e-4,
            seed: 0,
            joint: true,
            positive_class: PositiveClass::Stego,
            max_steps: 0,
            eval_batch_size: 256,
            norm_recalibration: 1024,
        }
    }
}

impl TrainConfig {
    pub fn desk_scale() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 30,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.temperature > 0.0) {
            return bad("train.temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return bad("train.weight_decay must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive");
        }
        if self.eval_batch_size == 0 {
            return bad("train.eval_batch_size must be positive");
        }
        Ok(())
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub scl: f64,
    pub ce: f64,
    pub joint: f64,
    /// Filled on the last step of each epoch.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricLog {
    /// Hyperparameters echoed in the CSV comment line.
    pub header: Vec<(String, String)>,
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("#");
        for (k, v) in &self.header {
            let _ = write!(out, " {k}={v}");
        }
        out.push_str("\nstep,L_scl,L_ce,L_joint,val_accuracy\n");
        for r in &self.rows {
            let val = r.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.scl, r.ce, r.joint, val);
        }
        out
    }

    pub fn joint_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.joint).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the highest validation accuracy (the last one when
    /// there is no validation data).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_val_accuracy: Option<f64>,
    pub log: MetricLog,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub scl: f64,
    pub ce: f64,
    pub joint: f64,
}

/// Forward + backward of the joint objective on one flattened triplet batch
/// (`anchors | positives | negatives`, each `batch.len() / 3` long).
/// Gradients are left in the model's parameters.
///
/// Runs in training mode (batch statistics) with dropout only when `dropout`
/// is set, and never updates BatchNorm running statistics.
pub fn joint_objective(
    model: &mut HamModel,
    batch: &[&DescriptorMatrix],
    labels: &[f64],
    temperature: f64,
    contrastive: bool,
    dropout: bool,
) -> Result<LossParts> {
    objective_step(model, batch, labels, temperature, contrastive, dropout).map(|(parts, _)| parts)
}

fn objective_step(
    model: &mut HamModel,
    batch: &[&DescriptorMatrix],
    labels: &[f64],
    temperature: f64,
    contrastive: bool,
    dropout: bool,
) -> Result<(LossParts, BatchStats)> {
    let mut rng = model.rng_mut().clone();
    let (out, tape, stats) = model.forward_traced(batch, dropout.then_some(&mut rng))?;
    if dropout {
        *model.rng_mut() = rng;
    }
    let (scl, d_features) = if contrastive {
        supcon_with_grad(&out.features, temperature)?
    } else {
        (0.0, Array2::zeros(out.features.raw_dim()))
    };
    let (ce, d_logits) = ce_with_grad(&out.probs, labels)?;
    model.zero_grad();
    model.backward(&tape, &d_features, &d_logits);
    let parts = LossParts {
        scl,
        ce,
        joint: joint_loss(scl, ce),
    };
    Ok((parts, stats))
}

/// Value of the joint objective without touching gradients or state.
pub fn joint_objective_value(
    model: &HamModel,
    batch: &[&DescriptorMatrix],
    labels: &[f64],
    temperature: f64,
    contrastive: bool,
) -> Result<f64> {
    let (out, _, _) = model.forward_traced(batch, None)?;
    let scl = if contrastive {
        supcon_with_grad(&out.features, temperature)?.0
    } else {
        0.0
    };
    let p: Vec<f64> = out.probs.column(1).to_vec();
    Ok(joint_loss(scl, ce_loss(&p, labels)?))
}

fn batches(indices: &[usize], size: usize) -> Vec<Vec<usize>> {
    indices.chunks(size).map(<[usize]>::to_vec).collect()
}

fn validation_accuracy(model: &HamModel, val: &[VoipSegment], batch: usize) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let probs = predict(model, val, batch)?;
    let labels: Vec<bool> = val.iter().map(VoipSegment::is_stego).collect();
    accuracy_at_half(&probs, &labels).map(Some)
}

fn recalibrate(model: &mut HamModel, train_set: &[VoipSegment], order: &[usize], limit: usize, batch: usize) -> Result<()> {
    if limit == 0 {
        return Ok(());
    }
    let mut picked: Vec<&DescriptorMatrix> = order.iter().take(limit).map(|&i| &train_set[i].matrix).collect();
    picked.sort_by_key(|m| m.shape());
    let mut groups: Vec<Vec<&DescriptorMatrix>> = Vec::new();
    for m in picked {
        match groups.last_mut() {
            Some(g) if g.len() < batch && g[0].shape() == m.shape() => g.push(m),
            _ => groups.push(vec![m]),
        }
    }
    model.recalibrate_norm(&groups)
}

fn snapshot(model: &HamModel, adam: &Adam, meta: &BTreeMap<String, String>, epoch: usize) -> Checkpoint {
    let mut ckpt = model.to_checkpoint(adam.steps());
    ckpt.optimizer = adam.state();
    ckpt.meta = meta.clone();
    ckpt.meta.insert("epoch".into(), epoch.to_string());
    ckpt
}

/// Trains a fresh model.
///
/// Every epoch: CutMix the training pool according to the config, split it
/// by (dominant) class, shuffle, cut into batches, assemble cyclic triplets
/// and take one optimizer step per triplet batch: joint loss, backward, Adam,
/// then decoupled weight decay.
pub fn train(config: &Config, train_set: &[VoipSegment], val_set: &[VoipSegment]) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let kind = train_set
        .first()
        .ok_or_else(|| Error::invalid("empty training set"))?
        .kind();
    if kind != config.model.kind {
        return Err(Error::invalid(format!(
            "model configured for {} descriptors, training data is {kind}",
            config.model.kind
        )));
    }
    let stego = train_set.iter().filter(|s| s.is_stego()).count();
    if stego == 0 || stego == train_set.len() {
        return Err(Error::invalid(
            "training set must contain both cover and stego segments",
        ));
    }

    let mut model = HamModel::new(config.model.clone(), sub_seed(tc.seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(tc.seed, 2));
    let mut adam = Adam::new(tc.learning_rate);
    let mut log = MetricLog {
        header: vec![
            ("tau".into(), tc.temperature.to_string()),
            ("learning_rate".into(), tc.learning_rate.to_string()),
            ("batch_size".into(), tc.batch_size.to_string()),
            ("epochs".into(), tc.epochs.to_string()),
            ("weight_decay".into(), tc.weight_decay.to_string()),
            ("seed".into(), tc.seed.to_string()),
            ("joint".into(), tc.joint.to_string()),
            ("cutmix".into(), config.cutmix.enabled.to_string()),
            ("num_blocks".into(), config.model.num_blocks.to_string()),
            ("model_dim".into(), config.model.model_dim.to_string()),
        ],
        rows: Vec::new(),
    };
    let mut meta = BTreeMap::new();
    meta.insert("config".into(), config.to_toml_string()?);

    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0u64;
    let mut epoch = 0;
    let want_stego = tc.positive_class == PositiveClass::Stego;
    while epoch < tc.epochs && !(tc.max_steps > 0 && step >= tc.max_steps) {
        let samples: Vec<TrainingSample> = obfuscate(train_set, &config.cutmix, &mut rng)?;
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
            (0..samples.len()).partition(|&i| samples[i].stego == want_stego);
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::invalid("mixing left a class empty"));
        }
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let triplets = build_triplets(&batches(&pos, tc.batch_size), &batches(&neg, tc.batch_size))?;
        for tb in &triplets {
            let batch: Vec<&DescriptorMatrix> = tb.flatten().map(|&i| &samples[i].matrix).collect();
            let labels: Vec<f64> = tb.flatten().map(|&i| samples[i].label).collect();
            let (parts, stats) =
                objective_step(&mut model, &batch, &labels, tc.temperature, tc.joint, true)?;
            model.norm.update_running(&stats);
            let mut params = model.params_mut();
            adam.step(&mut params);
            apply_weight_decay(&mut params, tc.weight_decay);
            step += 1;
            log.rows.push(MetricRow {
                step,
                scl: parts.scl,
                ce: parts.ce,
                joint: parts.joint,
                val_accuracy: None,
            });
            if tc.max_steps > 0 && step >= tc.max_steps {
                break;
            }
        }
        epoch += 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        recalibrate(&mut model, train_set, &order, tc.norm_recalibration, tc.eval_batch_size)?;
        let val = validation_accuracy(&model, val_set, tc.eval_batch_size)?;
        if let Some(row) = log.rows.last_mut() {
            row.val_accuracy = val;
        }
        log::info!(
            "epoch {epoch}/{}: step {step}, L_joint {:.4}, val accuracy {}",
            tc.epochs,
            log.rows.last().map_or(f64::NAN, |r| r.joint),
            val.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
        if let Some(acc) = val {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, snapshot(&model, &adam, &meta, epoch)));
            }
        }
    }

    let last = snapshot(&model, &adam, &meta, epoch);
    let (best_val_accuracy, best) = match best {
        Some((acc, ckpt)) => (Some(acc), ckpt),
        None => (None, last.clone()),
    };
    Ok(TrainOutcome {
        best,
        last,
        best_val_accuracy,
        log,
    })
}
