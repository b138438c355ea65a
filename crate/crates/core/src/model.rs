//! End-to-end network: backbone, dense nest and fusion head.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, SwinBackbone, NUM_STAGES};
use crate::blocks::AcmixFuse;
use crate::error::{Error, Result};
use crate::head::{FusionHead, PredictionSet};
use crate::nest::{DenseNest, FeatureGrid, NestConfig};
use crate::params::{ParamBuilder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub ab_mask: [bool; NUM_STAGES],
    pub acmix_heads: usize,
    pub acmix_fuse: AcmixFuse,
    pub acmix_activation: bool,
    pub rcb_norm: bool,
    /// Channel normalization after every node's merge convolution.
    pub merge_norm: bool,
    /// Width of the unified head maps; `0` means the stage-0 width.
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            ab_mask: [true; NUM_STAGES],
            acmix_heads: 4,
            acmix_fuse: AcmixFuse::Concat,
            acmix_activation: false,
            rcb_norm: true,
            merge_norm: true,
            head_channels: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            backbone: BackboneConfig::full(),
            ..Self::desk()
        }
    }

    pub fn row_channels(&self) -> [usize; NUM_STAGES] {
        core::array::from_fn(|i| self.backbone.stage_channels(i))
    }

    pub fn head_width(&self) -> usize {
        if self.head_channels == 0 {
            self.backbone.embed_dim
        } else {
            self.head_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.acmix_heads == 0 {
            return Err(Error::Config("model.acmix_heads must be >= 1".into()));
        }
        for (i, c) in self.row_channels().into_iter().enumerate() {
            if self.ab_mask[i] && c % self.acmix_heads != 0 {
                return Err(Error::Config(alloc::format!(
                    "acmix heads {} do not divide row {i} width {c}",
                    self.acmix_heads
                )));
            }
        }
        Ok(())
    }

    fn nest(&self) -> NestConfig {
        NestConfig {
            row_channels: self.row_channels(),
            ab_mask: self.ab_mask,
            acmix_heads: self.acmix_heads,
            acmix_fuse: self.acmix_fuse,
            acmix_activation: self.acmix_activation,
            rcb_norm: self.rcb_norm,
            merge_norm: self.merge_norm,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Idnanet {
    pub cfg: ModelConfig,
    pub backbone: SwinBackbone,
    pub nest: DenseNest,
    pub head: FusionHead,
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub grid: FeatureGrid,
    pub preds: PredictionSet,
}

impl Idnanet {
    /// Registers all parameters (under `backbone.`, `nest.`, `head.`) in `store`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(store, rng);
        let backbone = SwinBackbone::new(&mut b, "backbone", &cfg.backbone)?;
        let nest = DenseNest::new(&mut b, "nest", &cfg.nest())?;
        let head = FusionHead::new(&mut b, "head", cfg.row_channels(), cfg.head_width());
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            nest,
            head,
        })
    }

    pub fn forward(&self, t: &mut Tape, image: Var) -> Result<ForwardOutput> {
        let column0 = self.backbone.extract_pyramid(t, image)?;
        let grid = self.nest.forward_grid(t, column0)?;
        let s = t.shape(image);
        let (h, w) = (s[1], s[2]);
        let preds = self.head.forward(t, &grid, h, w)?;
        Ok(ForwardOutput { grid, preds })
    }

    /// Inference logits `[1, H, W]` from the primary prediction.
    pub fn predict_logits(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new(params);
        let x = t.constant(image.clone());
        let out = self.forward(&mut t, x)?;
        Ok(t.value(out.preds.primary()).clone())
    }
}
