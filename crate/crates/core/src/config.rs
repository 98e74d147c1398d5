//! Model and training configuration, loaded from JSON with defaults filled in and
//! every divisibility and feasibility constraint checked up front.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::HttSplit;
use crate::block::{BlockDims, BlockKind};
use crate::error::{bail, Result};
use crate::group::{build_group_spec, BandProfile, SpectralGroupSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

/// Which tokens the MAE hides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Independently over the group-major token sequence.
    #[default]
    Token,
    /// Whole spatial patches, across all groups at once.
    Spatial,
}

/// How the retrieval head merges the `k` group tokens of one spatial slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldMode {
    #[default]
    Mean,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Spectral group count.
    pub k: usize,
    pub alpha: f64,
    pub tt_cores: usize,
    pub tt_rank: usize,
    pub lmf_rank: usize,
    pub d_hidden: usize,
    pub patch: usize,
    /// Side of the square input tile.
    pub tile: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    /// Loss over every token instead of the masked ones only.
    pub loss_all_tokens: bool,
    pub top_m: usize,
    pub block_kind: BlockKind,
    /// Block-attention window side.
    pub window: usize,
    /// Grid-attention cell side: tokens sharing an offset inside their cell attend.
    pub grid: usize,
    /// Hidden width multiplier of the LGA/GGA channel FFN.
    pub group_ffn_mult: usize,
    pub bands: BandProfile,
    /// Minimum blue, red and SWIR bands per group.
    pub min_per_group: [usize; 3],
    pub head_channels: usize,
    pub fold: FoldMode,
    /// Start every residual branch at zero.
    pub zero_init_residual: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 768,
            heads: 8,
            k: 9,
            alpha: 0.5,
            tt_cores: 3,
            tt_rank: 3,
            lmf_rank: 192,
            d_hidden: 3072,
            patch: 8,
            tile: 96,
            n_enc: 4,
            n_dec: 8,
            mask_ratio: 0.75,
            mask_mode: MaskMode::Token,
            loss_all_tokens: false,
            top_m: 6,
            block_kind: BlockKind::Hypoformer,
            window: 8,
            grid: 8,
            group_ffn_mult: 4,
            bands: BandProfile::PACE,
            min_per_group: [13, 18, 1],
            head_channels: 64,
            fold: FoldMode::Mean,
            zero_init_residual: false,
            seed: 0,
            precision: Precision::Single,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 48 bands in 3 groups, 32×32 tiles, width 128.
    pub fn toy() -> Self {
        Self {
            d: 128,
            heads: 8,
            k: 3,
            lmf_rank: 32,
            d_hidden: 512,
            tile: 32,
            top_m: 3,
            bands: BandProfile {
                blue: 16,
                red: 28,
                swir: 4,
            },
            min_per_group: [5, 9, 1],
            head_channels: 32,
            ..Self::default()
        }
    }

    /// Smallest configuration used by the gradient audit: 24 bands in 2 groups,
    /// 16×16 tiles.
    pub fn audit() -> Self {
        Self {
            d: 16,
            heads: 2,
            k: 2,
            lmf_rank: 4,
            d_hidden: 32,
            tile: 16,
            n_enc: 1,
            n_dec: 1,
            top_m: 2,
            window: 8,
            grid: 8,
            group_ffn_mult: 2,
            bands: BandProfile {
                blue: 8,
                red: 14,
                swir: 2,
            },
            min_per_group: [4, 7, 1],
            head_channels: 4,
            precision: Precision::Double,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| crate::error::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn channels(&self) -> usize {
        self.bands.total()
    }

    /// Spatial patches per group, `(tile/p)²`.
    pub fn spatial_tokens(&self) -> usize {
        let s = self.tile / self.patch;
        s * s
    }

    /// Token count `L = k·(tile/p)²`.
    pub fn tokens(&self) -> usize {
        self.k * self.spatial_tokens()
    }

    pub fn masked_count(&self) -> usize {
        let units = match self.mask_mode {
            MaskMode::Token => self.tokens(),
            MaskMode::Spatial => self.spatial_tokens(),
        };
        let m = (self.mask_ratio * units as f64).floor() as usize;
        match self.mask_mode {
            MaskMode::Token => m,
            MaskMode::Spatial => m * self.k,
        }
    }

    /// Upsampling stages of the retrieval head, `log2(p)`.
    pub fn head_stages(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    pub fn split(&self) -> Result<HttSplit> {
        HttSplit::resolve(self.d, self.alpha, self.tt_cores, self.tt_rank)
    }

    pub fn block_dims(&self) -> Result<BlockDims> {
        Ok(BlockDims {
            d: self.d,
            heads: self.heads,
            d_hidden: self.d_hidden,
            lmf_rank: self.lmf_rank,
            split: self.split()?,
        })
    }

    pub fn group_spec(&self) -> Result<SpectralGroupSpec> {
        build_group_spec(&self.bands.tags(), self.k, self.min_per_group)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("k", self.k),
            ("tt_cores", self.tt_cores),
            ("tt_rank", self.tt_rank),
            ("lmf_rank", self.lmf_rank),
            ("d_hidden", self.d_hidden),
            ("patch", self.patch),
            ("tile", self.tile),
            ("n_enc", self.n_enc),
            ("n_dec", self.n_dec),
            ("window", self.window),
            ("grid", self.grid),
            ("group_ffn_mult", self.group_ffn_mult),
            ("head_channels", self.head_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{name} must be positive");
        }
        if !self.d.is_multiple_of(self.heads) {
            bail!(Config, "d = {} is not divisible by heads = {}", self.d, self.heads);
        }
        if !self.patch.is_power_of_two() {
            bail!(Config, "patch = {} must be a power of two for the upsampling head", self.patch);
        }
        for (name, v) in [("patch", self.patch), ("window", self.window), ("grid", self.grid)] {
            if !self.tile.is_multiple_of(v) {
                bail!(Config, "{name} = {v} does not divide tile = {}", self.tile);
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            bail!(Config, "mask_ratio = {} must lie in [0, 1)", self.mask_ratio);
        }
        if self.masked_count() >= self.tokens() {
            bail!(Config, "mask_ratio = {} leaves no visible token", self.mask_ratio);
        }
        if self.top_m == 0 || self.top_m > self.k {
            bail!(Config, "top_m = {} must lie in [1, k = {}]", self.top_m, self.k);
        }
        self.split()?;
        self.group_spec()?;
        Ok(())
    }
}

/// Optimizer, schedule and early-stopping settings of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub lr: f64,
    /// Fraction of the total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            epochs: 250,
            batch: 4,
            patience: 50,
            lr: 1.5e-4,
            warmup_frac: 0.1,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: None,
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            patience: 30,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            bail!(Config, "epochs and batch must be positive");
        }
        if !(self.lr > 0.0) {
            bail!(Config, "lr = {} must be positive", self.lr);
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            bail!(Config, "warmup_frac = {} must lie in [0, 1)", self.warmup_frac);
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || !(self.eps > 0.0) {
            bail!(Config, "weight_decay must be ≥ 0 and eps > 0");
        }
        Ok(())
    }
}

/// Everything a run needs: model plus the two training phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| crate::error::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }
}
