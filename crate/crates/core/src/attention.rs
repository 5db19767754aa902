//! Scaled dot-product attention and its masked variants.
//!
//! Logits are query rows against key columns, `Q·Kᵀ/√d_head`. A mask is
//! `[T, S]` or `[N, T, S]` (queries × keys) and is shared by every head.
//!
//! The output projection carries no bias, so a row whose attention weights
//! are all zero contributes exactly nothing and only the residual remains.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, usage_err, Result};
use crate::lora::LoraLayer;
use crate::math;
use crate::nn::{from_tokens, to_tokens, Linear, ParamStore, Scope};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// A projection that is either plain or carries a low-rank bypass.
#[derive(Clone, Debug)]
pub enum Proj {
    Plain(Linear),
    Lora(LoraLayer),
}

impl Proj {
    pub fn forward<'t>(&self, s: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Proj::Plain(l) => l.forward(s, x),
            Proj::Lora(l) => l.forward(s, x),
        }
    }

    pub fn base(&self) -> &Linear {
        match self {
            Proj::Plain(l) => l,
            Proj::Lora(l) => &l.base,
        }
    }

    pub fn lora(&self) -> Option<&LoraLayer> {
        match self {
            Proj::Plain(_) => None,
            Proj::Lora(l) => Some(l),
        }
    }
}

#[derive(Clone, Copy)]
pub enum AttnMask<'t> {
    None,
    /// Entries in {0, 1}; 0 becomes −∞ before the softmax.
    Binary(Var<'t>),
    /// Entries in [0, 1], multiplied into the softmax weights.
    Learnable(Var<'t>),
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Proj,
    pub k: Proj,
    pub v: Proj,
    pub out: Linear,
    pub heads: usize,
    pub inner: usize,
}

impl Attention {
    /// Query input extent `dim`, key/value input extent `kv_dim`, projected to
    /// `inner` channels split over `heads`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        inner: usize,
        heads: usize,
        trainable: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(shape_err!("{inner} channels do not split over {heads} heads"));
        }
        let lin = |store: &mut ParamStore, p: &str, i, o, bias, rng: &mut Rng| {
            Linear::new(store, &format!("{name}.{p}"), i, o, bias, trainable, rng)
        };
        Ok(Attention {
            q: Proj::Plain(lin(store, "q", dim, inner, true, rng)),
            k: Proj::Plain(lin(store, "k", kv_dim, inner, true, rng)),
            v: Proj::Plain(lin(store, "v", kv_dim, inner, true, rng)),
            out: lin(store, "out", inner, dim, false, rng),
            heads,
            inner,
        })
    }

    /// Attention output for queries `x: [N, T, d]` over `src: [N, S, d_kv]`,
    /// without residual.
    pub fn forward<'t>(
        &self,
        s: &Scope<'t, '_>,
        x: Var<'t>,
        src: Var<'t>,
        mask: AttnMask<'t>,
    ) -> Result<Var<'t>> {
        let xs = x.shape();
        let ss = src.shape();
        if xs.len() != 3 || ss.len() != 3 || xs[0] != ss[0] {
            return Err(shape_err!("attention expects [N, T, d] and [N, S, d], got {xs:?} {ss:?}"));
        }
        let (n, t, sl) = (xs[0], xs[1], ss[1]);
        let (h, dh) = (self.heads, self.inner / self.heads);
        let split = |v: Var<'t>, len: usize| v.reshape(&[n, len, h, dh])?.permute(&[0, 2, 1, 3]);
        let q = split(self.q.forward(s, x)?, t)?;
        let k = split(self.k.forward(s, src)?, sl)?;
        let v = split(self.v.forward(s, src)?, sl)?;
        let logits = q.matmul_t(&k)?.scale(1.0 / math::sqrt(dh as f64));
        let weights = match mask {
            AttnMask::None => logits.softmax(3)?,
            AttnMask::Binary(m) => logits.masked_softmax(&per_head(m, n, t, sl)?)?,
            AttnMask::Learnable(m) => {
                if m.value().data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(domain_err!("learnable mask entries must lie in [0, 1]"));
                }
                logits.softmax(3)?.mul(&per_head(m, n, t, sl)?)?
            }
        };
        let y = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[n, t, self.inner])?;
        self.out.forward(s, y)
    }
}

fn per_head<'t>(m: Var<'t>, n: usize, t: usize, sl: usize) -> Result<Var<'t>> {
    let ms = m.shape();
    let lead = match ms.as_slice() {
        [a, b] if (*a, *b) == (t, sl) => 1,
        [b, a, c] if (*a, *c) == (t, sl) && (*b == n || *b == 1) => *b,
        _ => return Err(shape_err!("mask {ms:?} does not align with {t} queries × {sl} keys")),
    };
    m.reshape(&[lead, 1, t, sl])
}

/// Plain multi-head attention.
pub fn multi_head_attention<'t>(
    s: &Scope<'t, '_>,
    attn: &Attention,
    x: Var<'t>,
    src: Var<'t>,
) -> Result<Var<'t>> {
    attn.forward(s, x, src, AttnMask::None)
}

/// `softmax(t(M) + Q·Kᵀ/√d)·V + X` with `t(1) = 0`, `t(0) = −∞`. A query row
/// whose mask is all zero returns its residual unchanged.
pub fn original_mask_attention<'t>(
    s: &Scope<'t, '_>,
    attn: &Attention,
    x: Var<'t>,
    src: Var<'t>,
    mask: Var<'t>,
) -> Result<Var<'t>> {
    attn.forward(s, x, src, AttnMask::Binary(mask))?.add(&x)
}

/// `M ⊙ softmax(Q·Kᵀ/√d)·V + X` with a probabilistic mask that stays on the tape.
pub fn learnable_mask_attention<'t>(
    s: &Scope<'t, '_>,
    attn: &Attention,
    x: Var<'t>,
    src: Var<'t>,
    mask: Var<'t>,
) -> Result<Var<'t>> {
    attn.forward(s, x, src, AttnMask::Learnable(mask))?.add(&x)
}

/// Per-class Gaussian variances for the mask-feature perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTable {
    pub var: Vec<f64>,
}

impl NoiseTable {
    pub fn zeros(classes: usize) -> Self {
        NoiseTable { var: alloc::vec![0.0; classes] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Noise to add to a `[N, C, h, w]` mask feature: at each pixel whose label is
/// `i`, every channel receives an independent draw from `N(0, var(i))`.
/// Returns `None` when every entry would be zero.
pub fn class_noise(shape: &[usize], gt: &[u8], table: &NoiseTable, rng: &mut Rng) -> Result<Option<Tensor>> {
    let [n, c, h, w] = shape else {
        return Err(shape_err!("mask feature must be [N, C, h, w], got {shape:?}"));
    };
    let (n, c, plane) = (*n, *c, h * w);
    if gt.len() != n * plane {
        return Err(shape_err!("label grid has {} entries, expected {}", gt.len(), n * plane));
    }
    if table.var.len() != c {
        return Err(shape_err!("noise table has {} classes, feature has {c}", table.var.len()));
    }
    if let Some(&bad) = gt.iter().find(|&&l| l as usize >= c) {
        return Err(domain_err!("label {bad} out of range for {c} classes"));
    }
    if table.var.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let std: Vec<f64> = table.var.iter().map(|&v| math::sqrt(v)).collect();
    let mut noise = alloc::vec![0.0; n * c * plane];
    for b in 0..n {
        for p in 0..plane {
            let sd = std[gt[b * plane + p] as usize];
            if sd == 0.0 {
                continue;
            }
            for ch in 0..c {
                noise[(b * c + ch) * plane + p] = sd * rng.normal();
            }
        }
    }
    Ok(Some(Tensor::new(shape, noise)?))
}

/// Adds class-balanced noise to `p` in training mode; identity in evaluation.
pub fn cmattn_augment(
    p: &Tensor,
    gt: &[u8],
    table: &NoiseTable,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Tensor> {
    if mode == Mode::Eval {
        return Ok(p.clone());
    }
    let mut out = p.clone();
    if let Some(noise) = class_noise(p.shape(), gt, table, rng)? {
        for (o, z) in out.data_mut().iter_mut().zip(noise.data()) {
            if *z != 0.0 {
                *o += z;
            }
        }
    }
    Ok(out)
}

/// Class-balanced mask-guided self-attention:
/// `E' = E + E ⊙ proj(SA(augment(softmax_C(P))))`.
#[derive(Clone, Debug)]
pub struct CmAttn {
    pub attn: Attention,
    pub proj: Linear,
}

impl CmAttn {
    /// `proj` starts at zero so the block is initially the identity on `E`.
    pub fn new(store: &mut ParamStore, name: &str, classes: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(CmAttn {
            attn: Attention::new(store, &format!("{name}.attn"), classes, classes, classes, 1, true, rng)?,
            proj: Linear::zeros(store, &format!("{name}.proj"), classes, dim, true),
        })
    }

    /// `embedding: [N, d, h, w]`, `p: [N, C, h, w]` unnormalised mask
    /// feature, `gt`: labels at `h×w` (required in training).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        s: &Scope<'t, '_>,
        embedding: Var<'t>,
        p: Var<'t>,
        gt: Option<&[u8]>,
        table: &NoiseTable,
        rng: &mut Rng,
        mode: Mode,
    ) -> Result<Var<'t>> {
        let es = embedding.shape();
        let ps = p.shape();
        if es.len() != 4 || ps.len() != 4 || es[0] != ps[0] || es[2..] != ps[2..] {
            return Err(shape_err!("embedding {es:?} and mask feature {ps:?} must share N, h, w"));
        }
        let mut probs = p.softmax(1)?;
        if mode == Mode::Train {
            let gt = gt.ok_or_else(|| usage_err!("training mode needs ground-truth labels"))?;
            if let Some(noise) = class_noise(&ps, gt, table, rng)? {
                probs = probs.add(&s.tape().constant(noise))?;
            }
        }
        let tokens = to_tokens(probs)?;
        let attended = self.attn.forward(s, tokens, tokens, AttnMask::None)?;
        let gate = from_tokens(self.proj.forward(s, attended)?, es[2], es[3])?;
        embedding.add(&embedding.mul(&gate)?)
    }
}
