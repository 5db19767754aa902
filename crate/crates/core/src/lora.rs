//! Frozen ViT encoder with trainable low-rank bypasses on attention projections.
//!
//! The base weights are seeded random, not pretrained.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{Attention, AttnMask, Proj};
use crate::error::{shape_err, usage_err, Result};
use crate::nn::{from_tokens, init, LayerNorm, Linear, Mlp, ParamId, ParamStore, PatchEmbed, Scope};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// `y = base(x) + scale · up(down(x))` with `base` frozen.
#[derive(Clone, Debug)]
pub struct LoraLayer {
    pub base: Linear,
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraLayer {
    /// `down` is uniform on `±1/√in`, `up` is zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        base: Linear,
        rank: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank == 0 || rank >= base.in_dim.min(base.out_dim) {
            return Err(usage_err!(
                "LoRA rank {rank} must be in 1..{}",
                base.in_dim.min(base.out_dim)
            ));
        }
        let down = init::fan_in_uniform(&[rank, base.in_dim], base.in_dim, rng);
        let down = store.add(format!("{name}.lora_down"), down, true);
        let up = store.add(format!("{name}.lora_up"), Tensor::zeros(&[base.out_dim, rank]), true);
        Ok(LoraLayer { base, down, up, rank, scale })
    }

    pub fn forward<'t>(&self, s: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.base.forward(s, x)?;
        let shape = x.shape();
        let rows = shape.iter().product::<usize>() / self.base.in_dim;
        let flat = x.reshape(&[rows, self.base.in_dim])?;
        let bypass = flat.matmul_t(&s.param(self.down))?.matmul_t(&s.param(self.up))?;
        y.add(&bypass.scale(self.scale).reshape(&y.shape())?)
    }

    /// Trainable entries added by the bypass: `r·(in + out)`.
    pub fn bypass_params(&self) -> usize {
        self.rank * (self.base.in_dim + self.base.out_dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraTargets {
    pub query: bool,
    pub value: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        LoraTargets { query: true, value: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub lora_targets: LoraTargets,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            channels: 1,
            patch: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            lora_rank: 4,
            lora_scale: 1.0,
            lora_targets: LoraTargets::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(usage_err!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.lora_rank == 0 {
            return Err(usage_err!("lora_rank must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(usage_err!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(usage_err!("depth, channels and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Bypass entries over the whole encoder.
    pub fn lora_param_count(&self) -> usize {
        let per = 2 * self.lora_rank * self.dim;
        let targets = self.lora_targets.query as usize + self.lora_targets.value as usize;
        self.depth * targets * per
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch: PatchEmbed,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let size = (cfg.image_size, cfg.image_size);
        let patch = PatchEmbed::new(store, "enc.patch", cfg.channels, size, cfg.patch, d, false, rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("enc.block{i}");
            let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d, false);
            let mut attn = Attention::new(store, &format!("{name}.attn"), d, d, d, cfg.heads, false, rng)?;
            if cfg.lora_targets.query {
                attn.q = adapt(store, &format!("{name}.attn.q"), attn.q, cfg, rng)?;
            }
            if cfg.lora_targets.value {
                attn.v = adapt(store, &format!("{name}.attn.v"), attn.v, cfg, rng)?;
            }
            let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d, false);
            let mlp = Mlp::new(store, &format!("{name}.mlp"), (d, d * cfg.mlp_ratio, d), false, rng);
            blocks.push(EncoderBlock { norm1, attn, norm2, mlp });
        }
        let norm = LayerNorm::new(store, "enc.norm", d, false);
        Ok(Encoder { cfg: cfg.clone(), patch, blocks, norm })
    }

    /// `[N, c, H, W]` → `[N, dim, H/patch, W/patch]`.
    pub fn forward<'t>(&self, s: &Scope<'t, '_>, image: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        let size = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != self.cfg.channels || shape[2] != size || shape[3] != size {
            return Err(shape_err!(
                "encoder expects [N, {}, {size}, {size}], got {shape:?}",
                self.cfg.channels
            ));
        }
        let mut x = self.patch.forward(s, image)?;
        for b in &self.blocks {
            let h = b.norm1.forward(s, x)?;
            x = x.add(&b.attn.forward(s, h, h, AttnMask::None)?)?;
            let h = b.norm2.forward(s, x)?;
            x = x.add(&b.mlp.forward(s, h)?)?;
        }
        let x = self.norm.forward(s, x)?;
        let g = self.cfg.grid();
        from_tokens(x, g, g)
    }

    pub fn lora_layers(&self) -> impl Iterator<Item = &LoraLayer> {
        self.blocks.iter().flat_map(|b| [b.attn.q.lora(), b.attn.v.lora()]).flatten()
    }
}

fn adapt(store: &mut ParamStore, name: &str, proj: Proj, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Proj> {
    Ok(Proj::Lora(LoraLayer::new(store, name, proj.base().clone(), cfg.lora_rank, cfg.lora_scale, rng)?))
}

/// Runs the encoder.
pub fn vit_encode<'t>(encoder: &Encoder, s: &Scope<'t, '_>, image: Var<'t>) -> Result<Var<'t>> {
    encoder.forward(s, image)
}
