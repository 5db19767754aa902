//! Two-way transformer blocks and the two decoding stages.
//!
//! Stage 1 turns the encoder embedding (`H/8`) into a per-class prior at
//! `H/4`. Stage 2 reattends with the prior as a multiplicative mask and runs a
//! pixel decoder up to full resolution, fed by stage-1 skip features.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{learnable_mask_attention, Attention, AttnMask};
use crate::error::{shape_err, usage_err, Result};
use crate::math;
use crate::nn::{from_tokens, init, to_tokens, Conv2d, ConvSpec, LayerNorm, Mlp, ParamId, ParamStore, Scope};
use crate::rng::Rng;
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub classes: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Stage 2 learns its own class queries instead of reusing stage-1 tokens.
    pub fresh_stage2_queries: bool,
    /// 3×3 convolution on the full-resolution stage-2 feature.
    pub refine: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { classes: 4, heads: 4, mlp_dim: 128, fresh_stage2_queries: false, refine: true }
    }
}

/// Token self-attention, token→image cross-attention (optionally masked),
/// MLP, image→token cross-attention; each followed by residual and norm.
#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_t2i: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub cross_i2t: Attention,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let attn = |store: &mut ParamStore, p: &str, rng: &mut Rng| {
            Attention::new(store, &format!("{name}.{p}"), dim, dim, dim, heads, true, rng)
        };
        let norm = |store: &mut ParamStore, p: &str| LayerNorm::new(store, &format!("{name}.{p}"), dim, true);
        Ok(TwoWayBlock {
            self_attn: attn(store, "self_attn", rng)?,
            norm1: norm(store, "norm1"),
            cross_t2i: attn(store, "cross_t2i", rng)?,
            norm2: norm(store, "norm2"),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, mlp_dim, dim), true, rng),
            norm3: norm(store, "norm3"),
            cross_i2t: attn(store, "cross_i2t", rng)?,
            norm4: norm(store, "norm4"),
        })
    }

    /// `tokens: [N, T, d]`, `image: [N, S, d]`, `mask: [N, T, S]` or `[T, S]`.
    pub fn forward<'t>(
        &self,
        s: &Scope<'t, '_>,
        tokens: Var<'t>,
        image: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let t = tokens.add(&self.self_attn.forward(s, tokens, tokens, AttnMask::None)?)?;
        let t = self.norm1.forward(s, t)?;
        let t = match mask {
            Some(m) => {
                let (ts, is, ms) = (t.shape(), image.shape(), m.shape());
                if ms[ms.len() - 2..] != [ts[1], is[1]] {
                    return Err(shape_err!("mask {ms:?} must be [tokens={}, positions={}]", ts[1], is[1]));
                }
                learnable_mask_attention(s, &self.cross_t2i, t, image, m)?
            }
            None => t.add(&self.cross_t2i.forward(s, t, image, AttnMask::None)?)?,
        };
        let t = self.norm2.forward(s, t)?;
        let t = self.norm3.forward(s, t.add(&self.mlp.forward(s, t)?)?)?;
        let i = image.add(&self.cross_i2t.forward(s, image, t, AttnMask::None)?)?;
        let i = self.norm4.forward(s, i)?;
        Ok((t, i))
    }
}

#[derive(Clone, Copy)]
pub struct Stage1Output<'t> {
    /// `[N, C, H/4, W/4]`
    pub logits: Var<'t>,
    /// Softmax of `logits` over classes.
    pub prior: Var<'t>,
    /// `[N, C, H/8, W/8]` token·embedding inner products.
    pub mask_feature: Var<'t>,
    /// Embedding-resolution feature `[N, d, H/8, W/8]` and pixel-decoder
    /// feature `[N, d/2, H/4, W/4]`.
    pub skip_features: [Var<'t>; 2],
    /// `[N, C, d]`
    pub tokens_out: Var<'t>,
}

/// Per-class hypernetwork logits: `hyper(tokens) · feature`.
fn hyper_logits<'t>(s: &Scope<'t, '_>, hyper: &Mlp, tokens: Var<'t>, feature: Var<'t>) -> Result<Var<'t>> {
    let fs = feature.shape();
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let weights = hyper.forward(s, tokens)?;
    let classes = weights.shape()[1];
    weights.matmul(&feature.reshape(&[n, c, h * w])?)?.reshape(&[n, classes, h, w])
}

fn broadcast_queries<'t>(s: &Scope<'t, '_>, queries: ParamId, n: usize) -> Result<Var<'t>> {
    let q = s.param(queries);
    let qs = q.shape();
    q.reshape(&[1, qs[0], qs[1]])?.broadcast_to(&[n, qs[0], qs[1]])
}

#[derive(Clone, Debug)]
pub struct Stage1 {
    pub queries: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub upscale: Conv2d,
    pub hyper: Mlp,
    pub dim: usize,
}

impl Stage1 {
    pub const LAYERS: usize = 2;

    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, dim: usize, rng: &mut Rng) -> Result<Self> {
        let queries = store.add("s1.queries", init::trunc_normal(&[cfg.classes, dim], 1.0, rng), true);
        let blocks = (0..Self::LAYERS)
            .map(|i| TwoWayBlock::new(store, &format!("s1.block{i}"), dim, cfg.heads, cfg.mlp_dim, rng))
            .collect::<Result<_>>()?;
        let upscale = Conv2d::new(store, "s1.upscale", ConvSpec::transposed(dim, dim / 2, 2, 2, 0), true, rng);
        let hyper = Mlp::new(store, "s1.hyper", (dim, dim, dim / 2), true, rng);
        Ok(Stage1 { queries, blocks, upscale, hyper, dim })
    }

    /// `embedding: [N, d, h, w]`.
    pub fn forward<'t>(&self, s: &Scope<'t, '_>, embedding: Var<'t>) -> Result<Stage1Output<'t>> {
        let es = embedding.shape();
        if es.len() != 4 || es[1] != self.dim {
            return Err(shape_err!("stage 1 expects [N, {}, h, w], got {es:?}", self.dim));
        }
        let (n, h, w) = (es[0], es[2], es[3]);
        let mut tokens = broadcast_queries(s, self.queries, n)?;
        let mut image = to_tokens(embedding)?;
        for b in &self.blocks {
            (tokens, image) = b.forward(s, tokens, image, None)?;
        }
        let src = from_tokens(image, h, w)?;
        let f1 = self.upscale.forward(s, src)?.gelu();
        let logits = hyper_logits(s, &self.hyper, tokens, f1)?;
        let prior = logits.softmax(1)?;
        let classes = tokens.shape()[1];
        let mask_feature = tokens
            .matmul(&src.reshape(&[n, self.dim, h * w])?)?
            .scale(1.0 / math::sqrt(self.dim as f64))
            .reshape(&[n, classes, h, w])?;
        Ok(Stage1Output { logits, prior, mask_feature, skip_features: [src, f1], tokens_out: tokens })
    }
}

/// Stage-2 pixel decoder.
#[derive(Clone, Debug)]
pub enum PixelDecoder {
    /// Three transposed-conv stages `H/8 → H/4 → H/2 → H`; the stage-1 skip
    /// at matching resolution is concatenated and fused by a 1×1 conv before
    /// the first two.
    Hierarchical {
        fuse0: Conv2d,
        up0: Conv2d,
        fuse1: Conv2d,
        up1: Conv2d,
        up2: Conv2d,
        refine: Option<Conv2d>,
        hyper: Mlp,
    },
    /// Stage-1 style: one stage to `H/4`, logits resized to `H`.
    Flat { up: Conv2d, hyper: Mlp },
}

#[derive(Clone, Debug)]
pub struct Stage2 {
    pub queries: Option<ParamId>,
    pub blocks: Vec<TwoWayBlock>,
    pub pixel: PixelDecoder,
    pub dim: usize,
    pub scale: usize,
}

impl Stage2 {
    pub const LAYERS: usize = 2;

    /// `scale` is the image size over the embedding grid size.
    pub fn new(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        dim: usize,
        scale: usize,
        hierarchical: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dim % 8 != 0 {
            return Err(usage_err!("decoder dim {dim} must be divisible by 8"));
        }
        let queries = cfg
            .fresh_stage2_queries
            .then(|| store.add("s2.queries", init::trunc_normal(&[cfg.classes, dim], 1.0, rng), true));
        let blocks = (0..Self::LAYERS)
            .map(|i| TwoWayBlock::new(store, &format!("s2.block{i}"), dim, cfg.heads, cfg.mlp_dim, rng))
            .collect::<Result<_>>()?;
        let mut conv = |name: &str, spec| Conv2d::new(store, &format!("s2.{name}"), spec, true, rng);
        let pixel = if hierarchical {
            if scale != 8 {
                return Err(usage_err!("hierarchical pixel decoder needs an 8× embedding, got {scale}×"));
            }
            let fuse0 = conv("fuse0", ConvSpec::conv(2 * dim, dim, 1, 1, 0));
            let up0 = conv("up0", ConvSpec::transposed(dim, dim / 2, 2, 2, 0));
            let fuse1 = conv("fuse1", ConvSpec::conv(dim, dim / 2, 1, 1, 0));
            let up1 = conv("up1", ConvSpec::transposed(dim / 2, dim / 4, 2, 2, 0));
            let up2 = conv("up2", ConvSpec::transposed(dim / 4, dim / 8, 2, 2, 0));
            let refine = cfg.refine.then(|| conv("refine", ConvSpec::conv(dim / 8, dim / 8, 3, 1, 1)));
            let hyper = Mlp::new(store, "s2.hyper", (dim, dim, dim / 8), true, rng);
            PixelDecoder::Hierarchical { fuse0, up0, fuse1, up1, up2, refine, hyper }
        } else {
            let up = conv("up", ConvSpec::transposed(dim, dim / 2, 2, 2, 0));
            let hyper = Mlp::new(store, "s2.hyper", (dim, dim, dim / 2), true, rng);
            PixelDecoder::Flat { up, hyper }
        };
        Ok(Stage2 { queries, blocks, pixel, dim, scale })
    }

    /// Returns logits `[N, C, H, W]`. With `use_mask`, the prior resized to
    /// the embedding grid modulates token→image attention row by row.
    pub fn forward<'t>(
        &self,
        s: &Scope<'t, '_>,
        embedding: Var<'t>,
        prior: Var<'t>,
        skips: &[Var<'t>],
        tokens: Var<'t>,
        use_mask: bool,
    ) -> Result<Var<'t>> {
        let es = embedding.shape();
        if es.len() != 4 || es[1] != self.dim {
            return Err(shape_err!("stage 2 expects [N, {}, h, w], got {es:?}", self.dim));
        }
        let (n, h, w) = (es[0], es[2], es[3]);
        let mut tokens = match self.queries {
            Some(q) => broadcast_queries(s, q, n)?,
            None => tokens,
        };
        let classes = tokens.shape()[1];
        let mask = if use_mask {
            Some(prior.resize_bilinear(h, w)?.reshape(&[n, classes, h * w])?)
        } else {
            None
        };
        let mut image = to_tokens(embedding)?;
        for b in &self.blocks {
            (tokens, image) = b.forward(s, tokens, image, mask)?;
        }
        let x = from_tokens(image, h, w)?;
        let (full_h, full_w) = (h * self.scale, w * self.scale);
        match &self.pixel {
            PixelDecoder::Hierarchical { fuse0, up0, fuse1, up1, up2, refine, hyper } => {
                let skip = |i: usize, hh: usize, ww: usize| -> Result<Var<'t>> {
                    let f = skips.get(i).ok_or_else(|| usage_err!("missing skip feature {i}"))?;
                    let fs = f.shape();
                    if fs.len() != 4 || fs[0] != n || fs[2..] != [hh, ww] {
                        return Err(usage_err!("skip feature {i} is {fs:?}, need {hh}×{ww}"));
                    }
                    Ok(*f)
                };
                let t = s.tape();
                let x = fuse0.forward(s, t.concat(&[x, skip(0, h, w)?], 1)?)?;
                let x = up0.forward(s, x)?.gelu();
                let x = fuse1.forward(s, t.concat(&[x, skip(1, 2 * h, 2 * w)?], 1)?)?;
                let x = up1.forward(s, x)?.gelu();
                let mut x = up2.forward(s, x)?.gelu();
                if let Some(r) = refine {
                    x = x.add(&r.forward(s, x)?.gelu())?;
                }
                hyper_logits(s, hyper, tokens, x)
            }
            PixelDecoder::Flat { up, hyper } => {
                let x = up.forward(s, x)?.gelu();
                hyper_logits(s, hyper, tokens, x)?.resize_bilinear(full_h, full_w)
            }
        }
    }
}

/// Mean of the upsampled stage-1 probabilities and the stage-2 softmax.
pub fn ensemble<'t>(prior: Var<'t>, stage2_logits: Var<'t>) -> Result<Var<'t>> {
    let ls = stage2_logits.shape();
    let p1 = prior.resize_bilinear(ls[2], ls[3])?;
    Ok(p1.add(&stage2_logits.softmax(1)?)?.scale(0.5))
}
