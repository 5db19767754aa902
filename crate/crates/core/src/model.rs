//! The full encoder → stage 1 → (CMAttn) → stage 2 pipeline.

use serde::{Deserialize, Serialize};

use crate::attention::{CmAttn, Mode, NoiseTable};
use crate::decoder::{ensemble, DecoderConfig, Stage1, Stage1Output, Stage2};
use crate::error::{shape_err, Result};
use crate::lora::{Encoder, EncoderConfig};
use crate::loss::downsample_labels;
use crate::nn::{ParamStore, Scope};
use crate::rng::{label, Rng, Seed};
use crate::tensor::Var;

/// The three ablation switches. All off leaves only stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub learnable_mask_attention: bool,
    pub hierarchical_pixel_decoder: bool,
    pub cmattn: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { learnable_mask_attention: true, hierarchical_pixel_decoder: true, cmattn: true }
    }
}

impl Toggles {
    pub const OFF: Toggles =
        Toggles { learnable_mask_attention: false, hierarchical_pixel_decoder: false, cmattn: false };

    pub fn any(&self) -> bool {
        self.learnable_mask_attention || self.hierarchical_pixel_decoder || self.cmattn
    }

    /// All eight combinations, baseline first.
    pub fn all() -> [Toggles; 8] {
        core::array::from_fn(|i| Toggles {
            learnable_mask_attention: i & 1 != 0,
            hierarchical_pixel_decoder: i & 2 != 0,
            cmattn: i & 4 != 0,
        })
    }
}

/// Which probabilities a two-stage model predicts with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOutput {
    #[default]
    Ensemble,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub toggles: Toggles,
    pub eval_output: EvalOutput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            toggles: Toggles::default(),
            eval_output: EvalOutput::Ensemble,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HSam {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub stage1: Stage1,
    pub cmattn: Option<CmAttn>,
    pub stage2: Option<Stage2>,
}

#[derive(Clone, Copy)]
pub struct ModelOutput<'t> {
    pub stage1: Stage1Output<'t>,
    /// `[N, C, H, W]` when stage 2 exists.
    pub stage2_logits: Option<Var<'t>>,
}

impl HSam {
    /// Registers all parameters in `store`, drawing from `seed`'s init stream.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: Seed) -> Result<Self> {
        let rng = &mut seed.derive(label::INIT).rng();
        let encoder = Encoder::new(store, &cfg.encoder, rng)?;
        let dim = cfg.encoder.dim;
        let stage1 = Stage1::new(store, &cfg.decoder, dim, rng)?;
        let t = cfg.toggles;
        let cmattn = t.cmattn.then(|| CmAttn::new(store, "cmattn", cfg.decoder.classes, dim, rng)).transpose()?;
        let stage2 = t
            .any()
            .then(|| Stage2::new(store, &cfg.decoder, dim, cfg.encoder.patch, t.hierarchical_pixel_decoder, rng))
            .transpose()?;
        Ok(HSam { cfg: cfg.clone(), encoder, stage1, cmattn, stage2 })
    }

    /// Transformer decoder layers over both stages.
    pub fn transformer_layers(&self) -> usize {
        self.stage1.blocks.len() + self.stage2.as_ref().map_or(0, |s| s.blocks.len())
    }

    /// `images: [N, c, H, W]`; `gt` are full-resolution labels, needed for
    /// CMAttn noise in training mode.
    pub fn forward<'t>(
        &self,
        s: &Scope<'t, '_>,
        images: Var<'t>,
        gt: Option<&[u8]>,
        table: &NoiseTable,
        rng: &mut Rng,
        mode: Mode,
    ) -> Result<ModelOutput<'t>> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(shape_err!("images must be [N, c, H, W], got {shape:?}"));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let embedding = self.encoder.forward(s, images)?;
        let stage1 = self.stage1.forward(s, embedding)?;
        let Some(stage2) = &self.stage2 else {
            return Ok(ModelOutput { stage1, stage2_logits: None });
        };
        let (eh, ew) = (h / self.cfg.encoder.patch, w / self.cfg.encoder.patch);
        let enhanced = match &self.cmattn {
            Some(block) => {
                let small = gt.map(|g| downsample_labels(g, n, h, w, eh, ew));
                block.forward(s, embedding, stage1.mask_feature, small.as_deref(), table, rng, mode)?
            }
            None => embedding,
        };
        let logits = stage2.forward(
            s,
            enhanced,
            stage1.prior,
            &stage1.skip_features,
            stage1.tokens_out,
            self.cfg.toggles.learnable_mask_attention,
        )?;
        Ok(ModelOutput { stage1, stage2_logits: Some(logits) })
    }

    /// Per-pixel class probabilities `[N, C, H, W]` used for prediction.
    pub fn probabilities<'t>(&self, out: &ModelOutput<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        match (out.stage2_logits, self.cfg.eval_output) {
            (None, _) => out.stage1.prior.resize_bilinear(h, w),
            (Some(l), EvalOutput::Ensemble) => ensemble(out.stage1.prior, l),
            (Some(l), EvalOutput::Stage2) => l.softmax(1),
        }
    }
}
