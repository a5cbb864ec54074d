//! Dataset preparation, the per-epoch training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::loss::loss_total;
use super::model::{Mode, Model, Sample};
use super::schedule::lr_schedule;
use crate::autodiff::Tape;
use crate::error::{KgsError, Result};
use crate::optim::sgd_step;
use crate::skeleton::{prepare, NormalizationParams, SkeletonSequence};
use crate::splat::{build_primitives, RenderConfig};
use crate::tensor::argmax_rows;
use crate::topology::{build_prior_adjacency, PriorAdjacency};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub loss_ce: f64,
    pub loss_topo: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,lambda,loss_ce,loss_topo,accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.lambda, self.loss_ce, self.loss_topo, self.accuracy
        )
    }
}

/// Normalizes a labeled sequence and attaches its prior adjacency. The prior
/// uses the configured log-scale rather than the trained one, so it is the
/// same whenever a dataset is rebuilt.
pub fn build_sample(seq: &SkeletonSequence, id: impl Into<String>, model: &Model) -> Result<Sample> {
    let id = id.into();
    let label = seq
        .label
        .ok_or_else(|| KgsError::Data(format!("sequence `{id}` has no label")))?;
    if label >= model.config.num_classes {
        return Err(KgsError::Data(format!(
            "sequence `{id}` has label {label} outside [0, {})",
            model.config.num_classes
        )));
    }
    sample_with_label(seq, id, label, model)
}

fn sample_with_label(seq: &SkeletonSequence, id: String, label: usize, model: &Model) -> Result<Sample> {
    let kin = prepare(seq, &NormalizationParams::default())?;
    let config = RenderConfig {
        log_scale: model.config.render.log_scale,
        ..model.render_config()
    };
    let grids = build_primitives(&kin, &config)?;
    let mut prior = build_prior_adjacency(&grids)?;
    prior.source = Some(id.clone());
    Ok(Sample { id, kin, prior, label })
}

pub fn build_dataset(seqs: &[(String, SkeletonSequence)], model: &Model) -> Result<Vec<Sample>> {
    seqs.iter().map(|(id, seq)| build_sample(seq, id.clone(), model)).collect()
}

/// Seeded per-epoch visiting order, independent of earlier epochs so that
/// resumed runs replay the same batches.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over `dataset`: forward, joint loss, gradients and an SGD step per mini-batch.
pub fn train_epoch(dataset: &[Sample], model: &mut Model, epoch: usize, config: &RunConfig) -> Result<EpochMetrics> {
    if dataset.is_empty() {
        return Err(KgsError::Config("training dataset is empty".into()));
    }
    let lr = lr_schedule(epoch, &config.loss);
    let use_topo = !model.config.ablation.no_pt;
    let order = epoch_order(dataset.len(), config.train.seed, epoch);
    let (mut ce_sum, mut topo_sum, mut correct) = (0.0, 0.0, 0usize);
    let mut lambda_value = 0.0;
    for chunk in order.chunks(config.train.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let prior = if use_topo {
            Some(PriorAdjacency::mean(&batch.iter().map(|s| &s.prior).collect::<Vec<_>>())?)
        } else {
            None
        };
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Mode::Train)?;
        let terms = loss_total(&mut tape, out.logits, &labels, &out.a_learn, prior.as_ref(), epoch, &config.loss)?;
        let k = model.config.num_classes;
        let preds = argmax_rows(tape.value(out.logits).data(), k);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        ce_sum += terms.ce * batch.len() as f64;
        topo_sum += terms.topo * batch.len() as f64;
        lambda_value = terms.lambda;

        model.params.zero_grad();
        tape.backward(terms.total, &mut model.params)?;
        model.update_running_stats(&out.stats);
        sgd_step(&mut model.params, lr, &config.train.sgd)?;
    }
    let n = dataset.len() as f64;
    Ok(EpochMetrics {
        epoch,
        lr,
        lambda: if use_topo { lambda_value } else { 0.0 },
        loss_ce: ce_sum / n,
        loss_topo: topo_sum / n,
        accuracy: correct as f64 / n,
    })
}

/// Class predictions in evaluation mode.
pub fn predict(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Mode::Eval)?;
        preds.extend(argmax_rows(tape.value(out.logits).data(), model.config.num_classes));
    }
    Ok(preds)
}

/// Predicted class of a single, possibly unlabeled, sequence.
pub fn predict_sequence(model: &Model, seq: &SkeletonSequence) -> Result<usize> {
    let sample = sample_with_label(seq, "input".into(), 0, model)?;
    Ok(predict(model, std::slice::from_ref(&sample), 1)?[0])
}

/// Top-1 accuracy.
pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(KgsError::Config("evaluation dataset is empty".into()));
    }
    let preds = predict(model, samples, batch_size)?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}
