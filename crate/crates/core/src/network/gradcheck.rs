//! Central finite-difference verification of the assembled network's gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::LossConfig;
use super::loss::loss_total;
use super::model::{Mode, Model, Sample};
use crate::autodiff::{ParamId, Tape};
use crate::error::Result;
use crate::topology::PriorAdjacency;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Parameters larger than this are checked on a seeded random subset of entries.
    pub max_entries: usize,
    pub epoch: usize,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient of this parameter before comparing.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            max_entries: 24,
            epoch: 5,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    /// `max |a − n|` over the checked entries divided by the largest `|a|` or `|n|` among them.
    pub max_rel_error: f64,
    /// Largest entry-wise [`relative_error`]; dominated by finite-difference
    /// roundoff for entries whose gradient is near zero.
    pub max_entry_rel_error: f64,
    /// Analytic and numeric values at the entry with the largest absolute difference.
    pub worst_pair: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn loss_value(model: &Model, batch: &[&Sample], prior: Option<&PriorAdjacency>, epoch: usize, loss: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, Mode::Train)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let terms = loss_total(&mut tape, out.logits, &labels, &out.a_learn, prior, epoch, loss)?;
    Ok(tape.value(terms.total).item())
}

/// Compares the analytic gradient of the full training loss with central
/// differences for every parameter of `model`.
pub fn gradient_check(model: &Model, samples: &[Sample], loss: &LossConfig, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let batch: Vec<&Sample> = samples.iter().collect();
    let prior = if model.config.ablation.no_pt {
        None
    } else {
        Some(PriorAdjacency::mean(&batch.iter().map(|s| &s.prior).collect::<Vec<_>>())?)
    };

    let mut analytic = model.clone();
    analytic.params.zero_grad();
    let mut tape = Tape::new();
    let out = analytic.forward(&mut tape, &batch, Mode::Train)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let terms = loss_total(&mut tape, out.logits, &labels, &out.a_learn, prior.as_ref(), options.epoch, loss)?;
    tape.backward(terms.total, &mut analytic.params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = model.clone();
    let mut groups = Vec::new();
    for index in 0..model.params.len() {
        let id = ParamId(index);
        let param = analytic.params.get(id);
        let n = param.value.len();
        let entries: Vec<usize> = if n <= options.max_entries {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, options.max_entries).into_vec();
            picked.sort_unstable();
            picked
        };
        let corrupt = options.corrupt.as_deref() == Some(param.name.as_str());
        let (mut max_diff, mut max_mag, mut max_entry): (f64, f64, f64) = (0.0, 0.0, 0.0);
        let mut worst_pair = (0.0, 0.0);
        for &e in &entries {
            let mut a = param.grad.data()[e];
            if corrupt {
                a += 1e-3 * (1.0 + a.abs());
            }
            let original = model.params.get(id).value.data()[e];
            probe.params.get_mut(id).value.data_mut()[e] = original + options.step;
            let plus = loss_value(&probe, &batch, prior.as_ref(), options.epoch, loss)?;
            probe.params.get_mut(id).value.data_mut()[e] = original - options.step;
            let minus = loss_value(&probe, &batch, prior.as_ref(), options.epoch, loss)?;
            probe.params.get_mut(id).value.data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * options.step);
            let diff = (a - numeric).abs();
            if diff >= max_diff {
                max_diff = diff;
                worst_pair = (a, numeric);
            }
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
            max_entry = max_entry.max(relative_error(a, numeric));
        }
        groups.push(GroupResult {
            name: param.name.clone(),
            checked: entries.len(),
            max_rel_error: max_diff / max_mag.max(1e-8),
            max_entry_rel_error: max_entry,
            worst_pair,
        });
    }
    Ok(GradCheckReport { groups, tolerance: options.tolerance })
}
