use serde::{Deserialize, Serialize};

use crate::error::{KgsError, Result};
use crate::optim::SgdConfig;
use crate::splat::RenderConfig;

/// Components that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Isotropic splats: velocities are ignored when building covariances.
    pub no_kgsm: bool,
    /// β frozen at zero and the topology loss disabled.
    pub no_pt: bool,
    /// Visual gate removed (multiplier fixed at 1).
    pub no_vcg: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut ablation = Ablation::default();
        match name {
            "kgsm" => ablation.no_kgsm = true,
            "pt" => ablation.no_pt = true,
            "vcg" => ablation.no_vcg = true,
            "none" => {}
            other => {
                return Err(KgsError::Config(format!(
                    "unknown ablation `{other}` (expected kgsm, pt or vcg)"
                )))
            }
        }
        Ok(ablation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_joints: usize,
    pub in_channels: usize,
    pub num_blocks: usize,
    /// Output channels of each stage.
    pub channels_per_stage: Vec<usize>,
    /// 1-based index of the first block of every stage.
    pub stage_starts: Vec<usize>,
    /// Temporal stride of every block.
    pub temporal_strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub num_classes: usize,
    pub visual_dim: usize,
    pub encoder_channels: [usize; 2],
    pub beta_init: f64,
    pub physical_edges: Vec<(usize, usize)>,
    /// Root joint for the spatial partitioning.
    pub center_joint: usize,
    /// 1 (whole graph) or 3 (self / centripetal / centrifugal).
    pub subsets: usize,
    /// Include the physical graph in the fused topology.
    pub use_physical: bool,
    pub render: RenderConfig,
    pub ablation: Ablation,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(5, 3, 2)
    }
}

fn chain_edges(joints: usize) -> Vec<(usize, usize)> {
    (1..joints).map(|j| (j - 1, j)).collect()
}

impl ModelConfig {
    /// Desk-scale configuration: 4 blocks, channels 8/16/32, stride 2 at block 3.
    pub fn toy(num_joints: usize, in_channels: usize, num_classes: usize) -> Self {
        Self {
            num_joints,
            in_channels,
            num_blocks: 4,
            channels_per_stage: vec![8, 16, 32],
            stage_starts: vec![1, 2, 3],
            temporal_strides: vec![1, 1, 2, 1],
            dilations: vec![1, 2, 3, 4],
            num_classes,
            visual_dim: 16,
            encoder_channels: [8, 16],
            beta_init: 0.1,
            physical_edges: chain_edges(num_joints),
            center_joint: 0,
            subsets: 3,
            use_physical: true,
            render: RenderConfig::for_channels(in_channels),
            ablation: Ablation::default(),
            init_seed: 0,
        }
    }

    /// Full-size configuration: 10 blocks, channels 64/128/256, strides at blocks 5 and 8.
    pub fn paper(num_joints: usize, in_channels: usize, num_classes: usize) -> Self {
        Self {
            num_blocks: 10,
            channels_per_stage: vec![64, 128, 256],
            stage_starts: vec![1, 5, 8],
            temporal_strides: vec![1, 1, 1, 1, 2, 1, 1, 2, 1, 1],
            visual_dim: 128,
            ..Self::toy(num_joints, in_channels, num_classes)
        }
    }

    /// Output channels of block `l` (0-based).
    pub fn block_channels(&self, l: usize) -> usize {
        let stage = self
            .stage_starts
            .iter()
            .rposition(|&start| start <= l + 1)
            .unwrap_or(0);
        self.channels_per_stage[stage]
    }

    pub fn validate(&self) -> Result<()> {
        let field = |field: &str, message: String| {
            Err(KgsError::Field {
                field: field.into(),
                message,
            })
        };
        if self.num_classes < 2 {
            return field("num_classes", format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_joints == 0 {
            return field("num_joints", "at least one joint is required".into());
        }
        if !(self.in_channels == 2 || self.in_channels == 3) {
            return field("in_channels", format!("expected 2 or 3, got {}", self.in_channels));
        }
        if self.num_blocks == 0 {
            return field("num_blocks", "at least one block is required".into());
        }
        if self.channels_per_stage.is_empty()
            || self.channels_per_stage.len() != self.stage_starts.len()
            || self.channels_per_stage.contains(&0)
        {
            return field(
                "channels_per_stage",
                "one non-zero channel count per entry of stage_starts is required".into(),
            );
        }
        if self.stage_starts[0] != 1
            || self.stage_starts.windows(2).any(|w| w[0] >= w[1])
            || self.stage_starts.iter().any(|&s| s < 1 || s > self.num_blocks)
        {
            return field(
                "stage_starts",
                format!("must increase from 1 and stay within [1, {}]", self.num_blocks),
            );
        }
        if self.temporal_strides.len() != self.num_blocks || self.temporal_strides.contains(&0) {
            return field("temporal_strides", format!("need {} positive strides", self.num_blocks));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return field("dilations", "need at least one positive dilation".into());
        }
        if self.visual_dim == 0 || self.encoder_channels.contains(&0) {
            return field("visual_dim", "visual widths must be positive".into());
        }
        if !(self.subsets == 1 || self.subsets == 3) {
            return field("subsets", format!("supported partitions are 1 or 3, got {}", self.subsets));
        }
        if self.center_joint >= self.num_joints {
            return field("center_joint", format!("{} is not a joint index", self.center_joint));
        }
        if let Some(&(a, b)) = self
            .physical_edges
            .iter()
            .find(|&&(a, b)| a >= self.num_joints || b >= self.num_joints)
        {
            return field("physical_edges", format!("edge ({a}, {b}) references a missing joint"));
        }
        if self.render.height < 8 || self.render.width < 8 {
            return Err(KgsError::Config(format!(
                "the visual encoder needs heatmaps of at least 8×8, got {}×{}",
                self.render.height, self.render.width
            )));
        }
        self.render.validate()?;
        if self.render.views.iter().any(|v| v.0.index() >= self.in_channels || v.1.index() >= self.in_channels) {
            return field("render.views", format!("views exceed C={}", self.in_channels));
        }
        Ok(())
    }
}

/// Loss weighting and learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_base: f64,
    pub lambda_ramp_epochs: usize,
    pub lr_base: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_base: 0.2,
            lambda_ramp_epochs: 5,
            lr_base: 0.05,
            warmup_epochs: 10,
            decay_epochs: vec![40, 60],
            decay_factor: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_base > 0.0 && self.lr_base > 0.0 && self.decay_factor > 0.0) {
            return Err(KgsError::Config("loss weights and rates must be positive".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(KgsError::Config("decay_epochs must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 65,
            batch_size: 16,
            seed: 0,
            sgd: SgdConfig::default(),
        }
    }
}

/// Everything a training run reads from its config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| KgsError::from_toml(text, e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KgsError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.train.batch_size == 0 {
            return Err(KgsError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}
