//! Dice and cross-entropy objectives, the stage-weight schedule and the
//! deep-supervision combination.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::math;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// `start · exp(−decay · t)`
    Exponential,
    /// `start · max(0, 1 − t / linear_epochs)`
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub lambda_w_start: f64,
    pub lambda_w_decay: f64,
    pub smoothing_eps: f64,
    pub schedule: LambdaSchedule,
    pub linear_epochs: f64,
    /// Advance the schedule once per optimizer step instead of once per epoch.
    pub per_iteration: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ce: 0.1,
            lambda_dice: 0.9,
            lambda_w_start: 0.8,
            lambda_w_decay: 0.005,
            smoothing_eps: 1e-5,
            schedule: LambdaSchedule::Exponential,
            linear_epochs: 300.0,
            per_iteration: false,
        }
    }
}

impl LossConfig {
    /// The alternative schedule: 0.4 falling linearly to 0 over 300 epochs.
    pub fn linear_alternative() -> Self {
        LossConfig {
            lambda_w_start: 0.4,
            schedule: LambdaSchedule::Linear,
            linear_epochs: 300.0,
            ..Self::default()
        }
    }
}

/// Stage-1 weight after `t` schedule units (epochs, or steps when
/// `per_iteration` is set).
pub fn lambda_w_at(t: f64, cfg: &LossConfig) -> f64 {
    match cfg.schedule {
        LambdaSchedule::Exponential => cfg.lambda_w_start * math::exp(-cfg.lambda_w_decay * t),
        LambdaSchedule::Linear => cfg.lambda_w_start * (1.0 - t / cfg.linear_epochs).max(0.0),
    }
}

pub fn lambda_w(epoch: u64, cfg: &LossConfig) -> f64 {
    lambda_w_at(epoch as f64, cfg)
}

fn one_hot(gt: &[u8], n: usize, c: usize, plane: usize) -> Result<Tensor> {
    if gt.len() != n * plane {
        return Err(shape_err!("label grid has {} entries, expected {}", gt.len(), n * plane));
    }
    let mut data = vec![0.0; n * c * plane];
    for (i, &l) in gt.iter().enumerate() {
        if l as usize >= c {
            return Err(domain_err!("label {l} out of range for {c} classes"));
        }
        let (b, p) = (i / plane, i % plane);
        data[(b * c + l as usize) * plane + p] = 1.0;
    }
    Tensor::new(&[n, c, plane], data)
}

fn dims(x: &Var<'_>) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected [N, C, h, w], got {s:?}"));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

/// `1 − mean_c (2·Σpg + eps)/(Σp + Σg + eps)`, sums pooled over batch and pixels.
pub fn dice_loss<'t>(probs: Var<'t>, gt: &[u8], eps: f64) -> Result<Var<'t>> {
    let (n, c, plane) = dims(&probs)?;
    let tape = probs.tape();
    let g = one_hot(gt, n, c, plane)?;
    let g_sum: Vec<f64> = (0..c)
        .map(|k| (0..n).map(|b| g.data()[(b * c + k) * plane..(b * c + k + 1) * plane].iter().sum::<f64>()).sum())
        .collect();
    let p = probs.reshape(&[n, c, plane])?;
    let per_class = |x: Var<'t>| -> Result<Var<'t>> { x.sum(Some(2))?.sum(Some(0)) };
    let inter = per_class(p.mul(&tape.constant(g))?)?;
    let p_sum = per_class(p)?;
    let num = inter.scale(2.0).shift(eps);
    let g_eps = Tensor::new(&[c], g_sum.iter().map(|v| v + eps).collect())?;
    let den = p_sum.add(&tape.constant(g_eps))?;
    Ok(num.div(&den)?.mean(None)?.scale(-1.0).shift(1.0))
}

/// Mean per-pixel multi-class cross-entropy from logits.
pub fn ce_loss<'t>(logits: Var<'t>, gt: &[u8]) -> Result<Var<'t>> {
    let (n, c, plane) = dims(&logits)?;
    let g = one_hot(gt, n, c, plane)?;
    let logp = logits.log_softmax(1)?.reshape(&[n, c, plane])?;
    Ok(logp.mul(&logits.tape().constant(g))?.sum(None)?.scale(-1.0 / (n * plane) as f64))
}

/// `λ_ce·CE + λ_dice·Dice` on one stage's logits.
pub fn stage_loss<'t>(logits: Var<'t>, gt: &[u8], cfg: &LossConfig) -> Result<(Var<'t>, f64, f64)> {
    let ce = ce_loss(logits, gt)?;
    let dice = dice_loss(logits.softmax(1)?, gt, cfg.smoothing_eps)?;
    let total = ce.scale(cfg.lambda_ce).add(&dice.scale(cfg.lambda_dice))?;
    Ok((total, ce.item(), dice.item()))
}

/// Nearest-neighbour label downsampling; output pixel `i` reads source
/// `⌊(i + ½)·in/out⌋`.
pub fn downsample_labels(gt: &[u8], n: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let src = |i: usize, size: usize, out: usize| ((2 * i + 1) * size / (2 * out)).min(size - 1);
    let mut out = Vec::with_capacity(n * oh * ow);
    for b in 0..n {
        for y in 0..oh {
            let sy = src(y, h, oh);
            for x in 0..ow {
                out.push(gt[(b * h + sy) * w + src(x, w, ow)]);
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub lambda_w: f64,
    pub stage1: f64,
    pub stage2: Option<f64>,
    pub ce1: f64,
    pub dice1: f64,
}

/// `λ_w·L(stage1, gt↓) + (1 − λ_w)·L(stage2, gt)`; without stage 2 the stage-1
/// loss alone. `gt` is `[N, H, W]` at full resolution.
pub fn total_loss<'t>(
    stage1_logits: Var<'t>,
    stage2_logits: Option<Var<'t>>,
    gt: &[u8],
    full: (usize, usize),
    lambda_w: f64,
    cfg: &LossConfig,
) -> Result<LossParts<'t>> {
    let s1 = stage1_logits.shape();
    if s1.len() != 4 || full.0 % s1[2] != 0 || full.1 % s1[3] != 0 {
        return Err(shape_err!("stage-1 logits {s1:?} do not divide {full:?}"));
    }
    let n = s1[0];
    let gt1 = downsample_labels(gt, n, full.0, full.1, s1[2], s1[3]);
    let (l1, ce1, dice1) = stage_loss(stage1_logits, &gt1, cfg)?;
    let Some(l2_logits) = stage2_logits else {
        return Ok(LossParts { total: l1, lambda_w: 1.0, stage1: l1.item(), stage2: None, ce1, dice1 });
    };
    let s2 = l2_logits.shape();
    if s2.len() != 4 || (s2[2], s2[3]) != full {
        return Err(shape_err!("stage-2 logits {s2:?} must be at {full:?}"));
    }
    let (l2, _, _) = stage_loss(l2_logits, gt, cfg)?;
    let total = l1.scale(lambda_w).add(&l2.scale(1.0 - lambda_w))?;
    Ok(LossParts { total, lambda_w, stage1: l1.item(), stage2: Some(l2.item()), ce1, dice1 })
}
