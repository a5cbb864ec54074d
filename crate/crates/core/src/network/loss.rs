//! Cross-entropy plus the topology-consistency regularizer.

use super::config::LossConfig;
use super::schedule::lambda;
use crate::autodiff::{Tape, Var};
use crate::error::{KgsError, Result};
use crate::tensor::Tensor;
use crate::topology::PriorAdjacency;

pub struct LossTerms {
    pub total: Var,
    pub ce: f64,
    pub topo: f64,
    pub lambda: f64,
}

/// `(1/L)·Σ_l ‖mean_k σ(A_learn^(l,k)) − A_prior‖²_F`; the prior is a constant target.
pub fn topology_loss(tape: &mut Tape, a_learn: &[Vec<Var>], prior: &PriorAdjacency) -> Result<Var> {
    if a_learn.is_empty() {
        return Err(KgsError::Contract("topology loss needs at least one block".into()));
    }
    let v = prior.joints;
    let target = tape.constant(Tensor::new(vec![v, v], prior.matrix.clone())?);
    let mut total: Option<Var> = None;
    for subsets in a_learn {
        let mut acc: Option<Var> = None;
        for &a in subsets {
            if tape.shape(a) != [v, v] {
                return Err(KgsError::Dimension(format!(
                    "A_learn {:?} vs prior {v}×{v}",
                    tape.shape(a)
                )));
            }
            let s = tape.sigmoid(a);
            acc = Some(match acc {
                Some(x) => tape.add(x, s)?,
                None => s,
            });
        }
        let mean = tape.scale(acc.expect("non-empty subsets"), 1.0 / subsets.len() as f64);
        let diff = tape.sub(mean, target)?;
        let sq = tape.mul(diff, diff)?;
        let frob = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, frob)?,
            None => frob,
        });
    }
    Ok(tape.scale(total.expect("non-empty blocks"), 1.0 / a_learn.len() as f64))
}

/// `l_ce + λ(epoch)·l_topo`. Passing `prior = None` disables the topology term.
pub fn loss_total(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    a_learn: &[Vec<Var>],
    prior: Option<&PriorAdjacency>,
    epoch: usize,
    config: &LossConfig,
) -> Result<LossTerms> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let ce_value = tape.value(ce).item();
    let Some(prior) = prior else {
        return Ok(LossTerms { total: ce, ce: ce_value, topo: 0.0, lambda: 0.0 });
    };
    let weight = lambda(epoch, config);
    let topo = topology_loss(tape, a_learn, prior)?;
    let topo_value = tape.value(topo).item();
    let weighted = tape.scale(topo, weight);
    let total = tape.add(ce, weighted)?;
    Ok(LossTerms { total, ce: ce_value, topo: topo_value, lambda: weight })
}
