//! The gated spatio-temporal graph convolutional classifier.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::graph;
use crate::autodiff::{BatchStats, ParamId, ParamStore, Tape, Var, BN_EPS};
use crate::error::{KgsError, Result};
use crate::skeleton::KinematicSequence;
use crate::splat::{render_sequence_with_grad, RenderConfig};
use crate::tensor::Tensor;
use crate::topology::PriorAdjacency;

/// BN running-average momentum.
const BN_MOMENTUM: f64 = 0.1;

/// One training/evaluation record.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub kin: KinematicSequence,
    pub prior: PriorAdjacency,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct NormIds {
    key: String,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct BranchIds {
    dilation: usize,
    input: ParamId,
    norm: NormIds,
    temporal: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    c_in: usize,
    c_out: usize,
    stride: usize,
    gcn: Vec<ParamId>,
    a_learn: Vec<ParamId>,
    beta: ParamId,
    residual: Option<ParamId>,
    gate_w: ParamId,
    gate_b: ParamId,
    branches: Vec<BranchIds>,
    tcn_residual: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct EncoderIds {
    conv1: ParamId,
    norm1: NormIds,
    conv2: ParamId,
    norm2: NormIds,
    proj_w: ParamId,
    proj_b: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    embed_w: ParamId,
    embed_b: ParamId,
    encoder: EncoderIds,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
    log_scale: ParamId,
}

/// Parameters, normalization statistics and fixed graph structure.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub running: BTreeMap<String, RunningStats>,
    ids: ModelIds,
    physical: Vec<Tensor>,
}

/// Tape handles produced by [`Model::forward`].
pub struct ForwardOutput {
    pub logits: Var,
    /// Learned adjacency of every block, one entry per subset.
    pub a_learn: Vec<Vec<Var>>,
    pub f_vis: Var,
    pub heatmaps: Var,
    pub stats: Vec<(String, BatchStats)>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

fn add_norm(params: &mut ParamStore, key: String, channels: usize) -> NormIds {
    NormIds {
        gamma: params.add(format!("{key}.gamma"), Tensor::full(&[channels], 1.0)),
        beta: params.add(format!("{key}.beta"), Tensor::zeros(&[channels])),
        key,
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mut params = ParamStore::new();
        let views = config.render.views.len();
        let c0 = config.block_channels(0);
        let embed_w = params.add("embed.w", init.normal(&[c0, config.in_channels, 1], (1.0 / config.in_channels as f64).sqrt()));
        let embed_b = params.add("embed.b", Tensor::zeros(&[c0]));

        let [e1, e2] = config.encoder_channels;
        let conv1 = params.add("encoder.conv1.w", init.normal(&[e1, views, 3, 3], (2.0 / (9 * views) as f64).sqrt()));
        let norm1 = add_norm(&mut params, "encoder.bn1".into(), e1);
        let conv2 = params.add("encoder.conv2.w", init.normal(&[e2, e1, 3, 3], (2.0 / (9 * e1) as f64).sqrt()));
        let norm2 = add_norm(&mut params, "encoder.bn2".into(), e2);
        let proj_w = params.add("encoder.proj.w", init.normal(&[e2, config.visual_dim], (1.0 / e2 as f64).sqrt()));
        let proj_b = params.add("encoder.proj.b", Tensor::zeros(&[config.visual_dim]));
        let encoder = EncoderIds { conv1, norm1, conv2, norm2, proj_w, proj_b };

        let v = config.num_joints;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut c_in = c0;
        for l in 0..config.num_blocks {
            let c_out = config.block_channels(l);
            let stride = config.temporal_strides[l];
            let p = format!("block{}", l + 1);
            let gcn_std = (1.0 / (c_in * config.subsets) as f64).sqrt();
            let gcn = (0..config.subsets)
                .map(|k| params.add(format!("{p}.gcn{k}.w"), init.normal(&[c_out, c_in, 1], gcn_std)))
                .collect();
            let a_learn = (0..config.subsets)
                .map(|k| params.add(format!("{p}.a_learn{k}"), Tensor::zeros(&[v, v])))
                .collect();
            let beta_value = if config.ablation.no_pt { 0.0 } else { config.beta_init };
            let beta = params.add(format!("{p}.beta"), Tensor::scalar(beta_value));
            if config.ablation.no_pt {
                params.get_mut(beta).trainable = false;
            }
            let residual = (c_in != c_out)
                .then(|| params.add(format!("{p}.res.w"), init.normal(&[c_out, c_in, 1], (1.0 / c_in as f64).sqrt())));
            let gate_w = params.add(format!("{p}.gate.w"), init.normal(&[config.visual_dim, c_out], (1.0 / config.visual_dim as f64).sqrt()));
            let gate_b = params.add(format!("{p}.gate.b"), Tensor::zeros(&[c_out]));
            let width = (c_out / config.dilations.len()).max(1);
            let t_std = (1.0 / (3 * width * config.dilations.len()) as f64).sqrt();
            let branches = config
                .dilations
                .iter()
                .enumerate()
                .map(|(i, &dilation)| BranchIds {
                    dilation,
                    input: params.add(format!("{p}.tcn{i}.in.w"), init.normal(&[width, c_out, 1], (2.0 / c_out as f64).sqrt())),
                    norm: add_norm(&mut params, format!("{p}.tcn{i}.bn"), width),
                    temporal: params.add(format!("{p}.tcn{i}.t.w"), init.normal(&[c_out, width, 3], t_std)),
                })
                .collect();
            let tcn_residual = (stride > 1)
                .then(|| params.add(format!("{p}.tcn_res.w"), init.normal(&[c_out, c_out, 1], (1.0 / c_out as f64).sqrt())));
            blocks.push(BlockIds {
                c_in,
                c_out,
                stride,
                gcn,
                a_learn,
                beta,
                residual,
                gate_w,
                gate_b,
                branches,
                tcn_residual,
            });
            c_in = c_out;
        }
        let fused = c_in + config.visual_dim;
        let head_w = params.add("head.w", init.normal(&[fused, config.num_classes], (1.0 / fused as f64).sqrt()));
        let head_b = params.add("head.b", Tensor::zeros(&[config.num_classes]));
        let log_scale = params.add("log_scale", Tensor::scalar(config.render.log_scale));

        let mut running = BTreeMap::new();
        let mut register = |ids: &NormIds, channels: usize| {
            running.insert(
                ids.key.clone(),
                RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] },
            );
        };
        register(&encoder.norm1, e1);
        register(&encoder.norm2, e2);
        for block in &blocks {
            for branch in &block.branches {
                register(&branch.norm, params.get(branch.norm.gamma).value.len());
            }
        }

        let physical = graph::partition(v, &config.physical_edges, config.center_joint, config.subsets);
        Ok(Self {
            ids: ModelIds { embed_w, embed_b, encoder, blocks, head_w, head_b, log_scale },
            config,
            params,
            running,
            physical,
        })
    }

    pub fn log_scale_id(&self) -> ParamId {
        self.ids.log_scale
    }

    /// Current rendering configuration (log-scale taken from the parameter).
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            log_scale: self.params.get(self.ids.log_scale).value.item(),
            isotropic: self.config.render.isotropic || self.config.ablation.no_kgsm,
            ..self.config.render.clone()
        }
    }

    pub fn physical_subsets(&self) -> &[Tensor] {
        &self.physical
    }

    /// Folds the batch statistics of a training forward pass into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (key, batch) in stats {
            if let Some(run) = self.running.get_mut(key) {
                for (r, b) in run.mean.iter_mut().zip(&batch.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                for (r, b) in run.var.iter_mut().zip(&batch.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    fn norm(
        &self,
        tape: &mut Tape,
        x: Var,
        ids: &NormIds,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let normalized = match mode {
            Mode::Train => {
                let (y, batch) = tape.batch_norm(x)?;
                stats.push((ids.key.clone(), batch));
                y
            }
            Mode::Eval => {
                let run = &self.running[&ids.key];
                let inv: Vec<f64> = run.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let shift: Vec<f64> = run.mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
                let c = inv.len();
                let inv = tape.constant(Tensor::new(vec![c], inv)?);
                let shift = tape.constant(Tensor::new(vec![c], shift)?);
                let y = tape.mul_bias(x, inv, 1)?;
                tape.add_bias(y, shift, 1)?
            }
        };
        let gamma = tape.param(&self.params, ids.gamma);
        let beta = tape.param(&self.params, ids.beta);
        let y = tape.mul_bias(normalized, gamma, 1)?;
        tape.add_bias(y, beta, 1)
    }

    /// Heatmaps of the whole batch as a `(B·T, views, H, W)` tape value that
    /// is differentiable with respect to the log-scale parameter.
    pub fn render_batch(&self, tape: &mut Tape, log_scale: Var, batch: &[&Sample]) -> Result<Var> {
        let config = RenderConfig {
            log_scale: tape.value(log_scale).item(),
            ..self.render_config()
        };
        let mut parts = Vec::with_capacity(batch.len());
        for sample in batch {
            let (stack, grad) = render_sequence_with_grad(&sample.kin, &config)?;
            let (views, frames, size) = (stack.views, stack.frames, stack.height * stack.width);
            let mut values = Vec::with_capacity(stack.values.len());
            let mut jac = Vec::with_capacity(stack.values.len());
            for t in 0..frames {
                for view in 0..views {
                    let start = (view * frames + t) * size;
                    values.extend_from_slice(&stack.values[start..start + size]);
                    jac.extend_from_slice(&grad[start..start + size]);
                }
            }
            let tensor = Tensor::new(vec![frames, views, stack.height, stack.width], values)?;
            parts.push(tape.scalar_map(log_scale, tensor, jac)?);
        }
        tape.concat(&parts, 0)
    }

    /// Per-frame CNN over `(B·T, views, H, W)` heatmaps, returning `F_vis (B, C′, T)`.
    pub fn visual_encode(
        &self,
        tape: &mut Tape,
        heatmaps: Var,
        batch: usize,
        frames: usize,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let ids = &self.ids.encoder;
        let w1 = tape.param(&self.params, ids.conv1);
        let h = tape.conv2d(heatmaps, w1, 2, 1)?;
        let h = self.norm(tape, h, &ids.norm1, mode, stats)?;
        let h = tape.relu(h);
        let w2 = tape.param(&self.params, ids.conv2);
        let h = tape.conv2d(h, w2, 2, 1)?;
        let h = self.norm(tape, h, &ids.norm2, mode, stats)?;
        let h = tape.relu(h);
        let pooled = tape.mean_trailing(h, 2)?;
        let pw = tape.param(&self.params, ids.proj_w);
        let pb = tape.param(&self.params, ids.proj_b);
        let f = tape.matmul(pooled, pw)?;
        let f = tape.add_bias(f, pb, 1)?;
        let f = tape.reshape(f, &[batch, frames, self.config.visual_dim])?;
        tape.permute(f, &[0, 2, 1])
    }

    /// Joint positions as a `(B, C, T, V)` constant.
    fn positions(&self, tape: &mut Tape, batch: &[&Sample]) -> Result<Var> {
        let first = &batch[0].kin;
        let (t_len, v, c) = (first.frames(), first.joints(), first.channels());
        let mut data = vec![0.0; batch.len() * c * t_len * v];
        for (b, sample) in batch.iter().enumerate() {
            let pos = sample.kin.positions();
            for t in 0..t_len {
                for j in 0..v {
                    for ch in 0..c {
                        data[((b * c + ch) * t_len + t) * v + j] = pos[(t * v + j) * c + ch];
                    }
                }
            }
        }
        Ok(tape.constant(Tensor::new(vec![batch.len(), c, t_len, v], data)?))
    }

    fn check_batch(&self, batch: &[&Sample]) -> Result<()> {
        let first = batch
            .first()
            .ok_or_else(|| KgsError::Config("forward called with an empty batch".into()))?;
        for s in batch {
            if s.kin.joints() != self.config.num_joints || s.kin.channels() != self.config.in_channels {
                return Err(KgsError::Dimension(format!(
                    "sample `{}` has V={}, C={} but the model expects V={}, C={}",
                    s.id,
                    s.kin.joints(),
                    s.kin.channels(),
                    self.config.num_joints,
                    self.config.in_channels
                )));
            }
            if s.kin.frames() != first.kin.frames() {
                return Err(KgsError::Dimension(format!(
                    "batch mixes T={} and T={}",
                    first.kin.frames(),
                    s.kin.frames()
                )));
            }
            if s.prior.joints != self.config.num_joints {
                return Err(KgsError::Dimension(format!(
                    "prior of `{}` covers {} joints, expected {}",
                    s.id, s.prior.joints, self.config.num_joints
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, batch: &[&Sample], mode: Mode) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let (b, t_len, v) = (batch.len(), batch[0].kin.frames(), self.config.num_joints);
        let mut stats = Vec::new();

        let log_scale = tape.param(&self.params, self.ids.log_scale);
        let heatmaps = self.render_batch(tape, log_scale, batch)?;
        let f_vis = self.visual_encode(tape, heatmaps, b, t_len, mode, &mut stats)?;

        let use_prior = !self.config.ablation.no_pt;
        let prior = if use_prior {
            let data = batch.iter().flat_map(|s| s.prior.matrix.iter().copied()).collect();
            Some(tape.constant(Tensor::new(vec![b, v, v], data)?))
        } else {
            None
        };

        let x = self.positions(tape, batch)?;
        let ew = tape.param(&self.params, self.ids.embed_w);
        let eb = tape.param(&self.params, self.ids.embed_b);
        let x = tape.temporal_conv(x, ew, 1, 1)?;
        let mut z = tape.add_bias(x, eb, 1)?;

        let mut a_learn = Vec::with_capacity(self.ids.blocks.len());
        for block in &self.ids.blocks {
            let t_l = tape.shape(z)[2];
            let learned: Vec<Var> = block.a_learn.iter().map(|&id| tape.param(&self.params, id)).collect();
            let shared = learned
                .iter()
                .zip(&self.physical)
                .map(|(&a, phy)| {
                    if self.config.use_physical {
                        let phy = tape.constant(phy.clone());
                        tape.add(phy, a)
                    } else {
                        Ok(a)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let beta = tape.param(&self.params, block.beta);
            let weights: Vec<Var> = block.gcn.iter().map(|&id| tape.param(&self.params, id)).collect();
            let y_gcn = graph_conv_fused(tape, z, &shared, beta, prior, &weights)?;

            let y_res = match block.residual {
                Some(id) => {
                    let w = tape.param(&self.params, id);
                    tape.temporal_conv(z, w, 1, 1)?
                }
                None => z,
            };
            let fused = if self.config.ablation.no_vcg {
                tape.add(y_gcn, y_res)?
            } else {
                let pooled = if t_l == t_len { f_vis } else { tape.adaptive_avg_pool_last(f_vis, t_l)? };
                let gw = tape.param(&self.params, block.gate_w);
                let gb = tape.param(&self.params, block.gate_b);
                visual_gate(tape, y_gcn, pooled, gw, gb, y_res)?
            };
            z = self.ms_tcn(tape, fused, block, mode, &mut stats)?;
            a_learn.push(learned);
        }

        let gap_z = tape.mean_trailing(z, 2)?;
        let gap_v = tape.mean_trailing(f_vis, 2)?;
        let features = tape.concat(&[gap_z, gap_v], 1)?;
        let hw = tape.param(&self.params, self.ids.head_w);
        let hb = tape.param(&self.params, self.ids.head_b);
        let logits = tape.matmul(features, hw)?;
        let logits = tape.add_bias(logits, hb, 1)?;
        tape.ensure_finite()?;
        Ok(ForwardOutput { logits, a_learn, f_vis, heatmaps, stats })
    }

    fn ms_tcn(
        &self,
        tape: &mut Tape,
        x: Var,
        block: &BlockIds,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        debug_assert_eq!(tape.shape(x)[1], block.c_out);
        let mut out = match block.tcn_residual {
            Some(id) => {
                let w = tape.param(&self.params, id);
                tape.temporal_conv(x, w, 1, block.stride)?
            }
            None => x,
        };
        for branch in &block.branches {
            let w_in = tape.param(&self.params, branch.input);
            let h = tape.temporal_conv(x, w_in, 1, 1)?;
            let h = self.norm(tape, h, &branch.norm, mode, stats)?;
            let h = tape.relu(h);
            let w_t = tape.param(&self.params, branch.temporal);
            let h = tape.temporal_conv(h, w_t, branch.dilation, block.stride)?;
            out = tape.add(out, h)?;
        }
        Ok(out)
    }

    /// Input channels of each block, for inspection and tests.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.ids.blocks.iter().map(|b| (b.c_in, b.c_out, b.stride)).collect()
    }

    /// Parameter ids of the learned adjacency of every block.
    pub fn a_learn_ids(&self) -> Vec<Vec<ParamId>> {
        self.ids.blocks.iter().map(|b| b.a_learn.clone()).collect()
    }

    pub fn beta_ids(&self) -> Vec<ParamId> {
        self.ids.blocks.iter().map(|b| b.beta).collect()
    }
}

/// `Σ_k (A_k + β·A_prior)·X·W_k`, where `A_k` already holds the physical and
/// learned parts of subset `k`, adjacency acts along the joint axis and
/// `W_k (C_out, C_in, 1)` is a per-joint channel transform.
pub fn graph_conv_fused(
    tape: &mut Tape,
    x: Var,
    shared: &[Var],
    beta: Var,
    prior: Option<Var>,
    weights: &[Var],
) -> Result<Var> {
    if shared.len() != weights.len() || shared.is_empty() {
        return Err(KgsError::Dimension(format!(
            "{} adjacency subsets for {} weight matrices",
            shared.len(),
            weights.len()
        )));
    }
    let prior_term = match prior {
        Some(p) => {
            let agg = tape.graph_agg(x, p)?;
            Some(tape.mul_scalar(agg, beta)?)
        }
        None => None,
    };
    let mut total: Option<Var> = None;
    for (&a, &w) in shared.iter().zip(weights) {
        let mut agg = tape.graph_agg(x, a)?;
        if let Some(p) = prior_term {
            agg = tape.add(agg, p)?;
        }
        let y = tape.temporal_conv(agg, w, 1, 1)?;
        total = Some(match total {
            Some(t) => tape.add(t, y)?,
            None => y,
        });
    }
    Ok(total.expect("at least one subset"))
}

/// `Ỹ = Y_gcn ⊙ (1 + σ(W_gᵀ·F_vis + b_g)) + Y_res`, with the gate shared by all joints.
///
/// `f_vis` must already have the time length of `y_gcn`.
pub fn visual_gate(tape: &mut Tape, y_gcn: Var, f_vis: Var, gate_w: Var, gate_b: Var, y_res: Var) -> Result<Var> {
    let gate = gate_coefficients(tape, y_gcn, f_vis, gate_w, gate_b)?;
    let modulated = tape.mul(y_gcn, gate)?;
    let y = tape.add(y_gcn, modulated)?;
    tape.add(y, y_res)
}

/// The gate `G` broadcast to the shape of `y_gcn`.
pub fn gate_coefficients(tape: &mut Tape, y_gcn: Var, f_vis: Var, gate_w: Var, gate_b: Var) -> Result<Var> {
    let sy = tape.shape(y_gcn).to_vec();
    let sf = tape.shape(f_vis).to_vec();
    let sw = tape.shape(gate_w).to_vec();
    if sy.len() != 4 || sf.len() != 3 || sf[0] != sy[0] || sf[2] != sy[2] || sw.len() != 2 || sw[0] != sf[1] {
        return Err(KgsError::Dimension(format!(
            "visual gate: Y_gcn {sy:?}, F_vis {sf:?}, W_g {sw:?}"
        )));
    }
    if sw[1] != sy[1] {
        return Err(KgsError::Dimension(format!(
            "gate projects to {} channels but Y_gcn has {}",
            sw[1], sy[1]
        )));
    }
    let (b, c, t, v) = (sy[0], sy[1], sy[2], sy[3]);
    let f = tape.permute(f_vis, &[0, 2, 1])?;
    let f = tape.reshape(f, &[b * t, sf[1]])?;
    let g = tape.matmul(f, gate_w)?;
    let g = tape.add_bias(g, gate_b, 1)?;
    let g = tape.sigmoid(g);
    let g = tape.reshape(g, &[b, t, c])?;
    let g = tape.permute(g, &[0, 2, 1])?;
    Ok(tape.broadcast_last(g, v))
}
