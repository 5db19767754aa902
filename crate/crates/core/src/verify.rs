//! Self-checks reported as measured values against tolerances: gradient
//! checks, attention identities, noise statistics, the stage-weight schedule
//! and LoRA parameter counts.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::Serialize;

use crate::attention::{
    cmattn_augment, class_noise, learnable_mask_attention, multi_head_attention, original_mask_attention, Attention,
    Mode, NoiseTable,
};
use crate::config::RunConfig;
use crate::decoder::{DecoderConfig, Stage1};
use crate::error::Result;
use crate::lora::{EncoderConfig, LoraLayer, LoraTargets};
use crate::loss::{ce_loss, dice_loss, lambda_w, stage_loss, total_loss, LambdaSchedule};
use crate::math;
use crate::model::{HSam, ModelConfig, Toggles};
use crate::nn::{Linear, ParamId, ParamStore, Scope};
use crate::rng::{label, Rng, Seed};
use crate::tensor::{grad_check_many, rel_error, GradCheckReport, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `measured ≤ tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64, detail: String) -> Self {
        Check { name: name.into(), passed: measured <= tolerance, measured, tolerance, detail }
    }

    pub fn flag(name: impl Into<String>, passed: bool, measured: f64, detail: String) -> Self {
        Check { name: name.into(), passed, measured, tolerance: 0.0, detail }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Runs every check; `seeds` repetitions for the gradient suite.
pub fn run(cfg: &RunConfig, seeds: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    checks.extend(op_gradient_suite(seeds)?);
    checks.extend(end_to_end_gradients(seeds)?);
    checks.extend(attention_identities(Seed(cfg.seed))?);
    checks.extend(noise_statistics(&example_table(cfg.model.decoder.classes), 100_000, Seed(cfg.seed))?);
    checks.extend(schedule_checks(cfg)?);
    checks.extend(lora_rank_report(&cfg.model.encoder, &[1, 4, 8, 16])?);
    Ok(VerifyReport { checks })
}

/// Variances spread over `(0, 1]`, rarer classes noisier.
pub fn example_table(classes: usize) -> NoiseTable {
    NoiseTable { var: (0..classes).map(|i| 0.05 + 0.95 * i as f64 / (classes - 1).max(1) as f64).collect() }
}

type ScalarFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

/// How an op's inputs are drawn.
#[derive(Clone, Copy)]
enum Draw {
    Normal,
    /// Magnitude at least 0.5, random sign; keeps kinks and poles away.
    AwayFromZero,
    Positive,
    /// In `[0.05, 0.95]`.
    Unit,
}

fn draw(shape: &[usize], kind: Draw, rng: &mut Rng) -> Tensor {
    match kind {
        Draw::Normal => Tensor::randn(shape, 1.0, rng),
        Draw::AwayFromZero => Tensor::from_fn(shape, |_| {
            let m = rng.uniform_in(0.5, 1.5);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        }),
        Draw::Positive => Tensor::uniform(shape, 0.3, 2.0, rng),
        Draw::Unit => Tensor::uniform(shape, 0.05, 0.95, rng),
    }
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output component matters.
fn project<'t>(y: Var<'t>, salt: u64) -> Result<Var<'t>> {
    let mut rng = Seed(salt).derive(label::PROBE).rng();
    let r = Tensor::randn(&y.shape(), 1.0, &mut rng);
    y.mul(&y.tape().constant(r))?.sum(None)
}

struct OpCase {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Draw)>,
    f: ScalarFn,
}

fn case(name: &'static str, inputs: &[(&[usize], Draw)], f: ScalarFn) -> OpCase {
    OpCase { name, inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(), f }
}

fn op_cases() -> Vec<OpCase> {
    use Draw::*;
    let mut cases = vec![
        case("add", &[(&[3, 4], Normal), (&[4], Normal)], Box::new(|_, x| project(x[0].add(&x[1])?, 1))),
        case("sub", &[(&[3, 4], Normal), (&[3, 1], Normal)], Box::new(|_, x| project(x[0].sub(&x[1])?, 2))),
        case("mul", &[(&[2, 3, 4], Normal), (&[3, 4], Normal)], Box::new(|_, x| project(x[0].mul(&x[1])?, 3))),
        case("div", &[(&[3, 4], Normal), (&[3, 4], AwayFromZero)], Box::new(|_, x| project(x[0].div(&x[1])?, 4))),
        case("exp", &[(&[3, 4], Normal)], Box::new(|_, x| project(x[0].exp(), 5))),
        case("ln", &[(&[3, 4], Positive)], Box::new(|_, x| project(x[0].ln()?, 6))),
        case("relu", &[(&[3, 4], AwayFromZero)], Box::new(|_, x| project(x[0].relu(), 7))),
        case("gelu", &[(&[3, 4], Normal)], Box::new(|_, x| project(x[0].gelu(), 8))),
        case("scale_shift", &[(&[5], Normal)], Box::new(|_, x| project(x[0].scale(-1.7).shift(0.3), 9))),
        case(
            "matmul",
            &[(&[2, 3, 4], Normal), (&[2, 4, 5], Normal)],
            Box::new(|_, x| project(x[0].matmul(&x[1])?, 10)),
        ),
        case(
            "matmul_t",
            &[(&[2, 3, 4], Normal), (&[2, 5, 4], Normal)],
            Box::new(|_, x| project(x[0].matmul_t(&x[1])?, 11)),
        ),
        case("softmax", &[(&[2, 5, 3], Normal)], Box::new(|_, x| project(x[0].softmax(1)?, 12))),
        case("log_softmax", &[(&[2, 3, 5], Normal)], Box::new(|_, x| project(x[0].log_softmax(2)?, 13))),
        case(
            "masked_softmax",
            &[(&[3, 4], Normal)],
            Box::new(|t, x| {
                let m = Tensor::new(&[3, 4], vec![1., 0., 1., 1., 0., 0., 0., 0., 0., 1., 0., 0.])?;
                project(x[0].masked_softmax(&t.constant(m))?, 14)
            }),
        ),
        case("sum", &[(&[2, 3, 4], Normal)], Box::new(|_, x| project(x[0].sum(Some(1))?, 15))),
        case("mean", &[(&[2, 3, 4], Normal)], Box::new(|_, x| project(x[0].mean(Some(2))?, 16))),
        case("max", &[(&[3, 5], Normal)], Box::new(|_, x| project(x[0].max(Some(1))?, 17))),
        case(
            "reshape_permute",
            &[(&[2, 3, 4], Normal)],
            Box::new(|_, x| project(x[0].reshape(&[6, 4])?.transpose()?.reshape(&[2, 2, 6])?.permute(&[2, 0, 1])?, 18)),
        ),
        case("broadcast", &[(&[3, 1], Normal)], Box::new(|_, x| project(x[0].broadcast_to(&[2, 3, 4])?, 19))),
        case(
            "concat_narrow",
            &[(&[2, 3], Normal), (&[2, 2], Normal)],
            Box::new(|t, x| project(t.concat(&[x[0], x[1]], 1)?.narrow(1, 1, 3)?, 20)),
        ),
        case(
            "layer_norm",
            &[(&[3, 6], Normal), (&[6], Normal), (&[6], Normal)],
            Box::new(|_, x| project(x[0].layer_norm(&x[1], &x[2], 1e-5)?, 21)),
        ),
        case(
            "conv2d",
            &[(&[2, 2, 5, 5], Normal), (&[3, 2, 3, 3], Normal), (&[3], Normal)],
            Box::new(|_, x| project(x[0].conv2d(&x[1], Some(&x[2]), 2, 1)?, 22)),
        ),
        case(
            "conv_transpose2d",
            &[(&[1, 3, 3, 3], Normal), (&[3, 2, 2, 2], Normal), (&[2], Normal)],
            Box::new(|_, x| project(x[0].conv_transpose2d(&x[1], Some(&x[2]), 2, 0)?, 23)),
        ),
        case(
            "resize_bilinear",
            &[(&[1, 2, 3, 4], Normal)],
            Box::new(|_, x| project(x[0].resize_bilinear(7, 2)?, 24)),
        ),
        case(
            "dice_loss",
            &[(&[2, 3, 2, 3], Normal)],
            Box::new(|_, x| dice_loss(x[0].softmax(1)?, &[0, 1, 2, 2, 1, 0, 1, 1, 0, 2, 2, 2], 1e-5)),
        ),
        case("ce_loss", &[(&[2, 3, 2, 3], Normal)], Box::new(|_, x| ce_loss(x[0], &[0, 1, 2, 2, 1, 0, 1, 1, 0, 2, 2, 2]))),
    ];
    // Layers whose own parameters are fixed constants here; only the inputs vary.
    cases.push(case(
        "linear",
        &[(&[2, 3, 4], Normal)],
        Box::new(|t, x| {
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "l", 4, 5, true, true, &mut Seed(25).rng());
            project(lin.forward(&Scope::new(t, &store), x[0])?, 25)
        }),
    ));
    cases.push(case(
        "lora",
        &[(&[3, 6], Normal)],
        Box::new(|t, x| {
            let mut store = ParamStore::new();
            let rng = &mut Seed(26).rng();
            let base = Linear::new(&mut store, "l", 6, 5, true, false, rng);
            let lora = LoraLayer::new(&mut store, "l", base, 2, 1.0, rng)?;
            store.get_mut(lora.up).value = Tensor::randn(&[5, 2], 0.5, rng);
            project(lora.forward(&Scope::new(t, &store), x[0])?, 26)
        }),
    ));
    cases.push(case(
        "attention",
        &[(&[2, 3, 8], Normal), (&[2, 5, 8], Normal)],
        Box::new(|t, x| {
            let (store, attn) = probe_attention(27)?;
            project(multi_head_attention(&Scope::new(t, &store), &attn, x[0], x[1])?, 27)
        }),
    ));
    cases.push(case(
        "learnable_mask_attention",
        &[(&[2, 3, 8], Normal), (&[2, 5, 8], Normal), (&[2, 3, 5], Unit)],
        Box::new(|t, x| {
            let (store, attn) = probe_attention(28)?;
            project(learnable_mask_attention(&Scope::new(t, &store), &attn, x[0], x[1], x[2])?, 28)
        }),
    ));
    cases
}

/// Attention with larger-than-default weights so the softmax is not flat.
fn probe_attention(seed: u64) -> Result<(ParamStore, Attention)> {
    let mut store = ParamStore::new();
    let rng = &mut Seed(seed).rng();
    let attn = Attention::new(&mut store, "a", 8, 8, 8, 2, true, rng)?;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = Tensor::randn(&shape, 0.4, rng);
    }
    Ok((store, attn))
}

/// Every op, each at `seeds` random input draws; one check per op reporting
/// the worst relative error.
pub fn op_gradient_suite(seeds: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for c in op_cases() {
        let mut worst = 0.0f64;
        let mut at = String::new();
        for seed in 0..seeds {
            let rng = &mut Seed(seed).derive_path(&[label::PROBE, 100]).rng();
            let xs: Vec<Tensor> = c.inputs.iter().map(|(s, d)| draw(s, *d, rng)).collect();
            let r = grad_check_many(|t, v| (c.f)(t, v), &xs, FD_STEP, OP_TOL)?;
            if r.max_rel_error > worst || r.max_rel_error.is_nan() {
                worst = r.max_rel_error;
                at = describe(&r, seed);
            }
        }
        out.push(Check::at_most(format!("grad.{}", c.name), worst, OP_TOL, at));
    }
    Ok(out)
}

fn describe(r: &GradCheckReport, seed: u64) -> String {
    format!(
        "seed {seed} input {} entry {}: analytic {:e} numeric {:e}",
        r.worst.0, r.worst.1, r.analytic_at_worst, r.numeric_at_worst
    )
}

/// Central differences on parameters held in `store`. `f` builds a scalar from
/// a scope; at most `per_param` evenly spaced entries of each listed
/// parameter are probed.
pub fn param_grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    step: f64,
    tol: f64,
    per_param: usize,
) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&Scope<'t, 's>) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let scope = Scope::new(&tape, store);
        let y = f(&scope)?;
        y.backward()?;
        ids.iter()
            .map(|&id| scope.grad(id).unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape())))
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&Scope::inference(&tape, store))?.item())
    };
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic_at_worst: 0.0, numeric_at_worst: 0.0, tol, passed: true };
    for (k, &id) in ids.iter().enumerate() {
        let len = store.get(id).value.len();
        let stride = len.div_ceil(per_param.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let x0 = store.get(id).value.data()[i];
            let (xp, xm) = (x0 + step, x0 - step);
            store.get_mut(id).value.data_mut()[i] = xp;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = xm;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0;
            let numeric = (fp - fm) / ((xp - x0) + (x0 - xm));
            let a = analytic[k].data()[i];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || err.is_nan() {
                report = GradCheckReport { max_rel_error: err, worst: (k, i), analytic_at_worst: a, numeric_at_worst: numeric, ..report };
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// A model small enough for exhaustive finite differences: 16×16 inputs,
/// a 2×2 embedding grid of width 16, three classes.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            channels: 1,
            patch: 8,
            depth: 1,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            lora_rank: 2,
            lora_scale: 1.0,
            lora_targets: LoraTargets::default(),
        },
        decoder: DecoderConfig { classes: 3, heads: 2, mlp_dim: 16, fresh_stage2_queries: false, refine: true },
        toggles: Toggles::default(),
        eval_output: Default::default(),
    }
}

/// Fills every trainable parameter with `N(0, std²)` so zero-initialised
/// branches carry gradient.
fn randomize(store: &mut ParamStore, std: f64, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = Tensor::randn(&shape, std, rng);
    }
}

fn trainable_ids(store: &ParamStore) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
}

/// Stage-1 loss and the full two-stage loss on the miniature model, with
/// respect to both inputs and every trainable parameter tensor.
pub fn end_to_end_gradients(seeds: u64) -> Result<Vec<Check>> {
    let cfg = miniature_config();
    let (hw, c, d) = (cfg.encoder.image_size, cfg.decoder.classes, cfg.encoder.dim);
    let loss_cfg = crate::loss::LossConfig::default();
    let table = example_table(c);
    let (mut s1_worst, mut s1_at) = (0.0f64, String::new());
    let (mut full_worst, mut full_at) = (0.0f64, String::new());
    for seed in 0..seeds {
        let root = Seed(seed).derive_path(&[label::PROBE, 200]);
        let rng = &mut root.rng();
        let n = 2;
        let gt: Vec<u8> = (0..n * hw * hw).map(|_| rng.below(c) as u8).collect();
        let images = Tensor::uniform(&[n, 1, hw, hw], 0.0, 1.0, rng);
        let grid = hw / cfg.encoder.patch;

        // Stage 1 alone, fed an embedding.
        let mut store = ParamStore::new();
        let stage1 = Stage1::new(&mut store, &cfg.decoder, d, rng)?;
        randomize(&mut store, 0.3, rng);
        let embedding = Tensor::randn(&[n, d, grid, grid], 1.0, rng);
        let gt1 = crate::loss::downsample_labels(&gt, n, hw, hw, 2 * grid, 2 * grid);
        let r = {
            let st = &store;
            grad_check_many(
                |t, x| {
                    let s = Scope::inference(t, st);
                    Ok(stage_loss(stage1.forward(&s, x[0])?.logits, &gt1, &loss_cfg)?.0)
                },
                core::slice::from_ref(&embedding),
                FD_STEP,
                END_TO_END_TOL,
            )?
        };
        keep_worst(&mut s1_worst, &mut s1_at, &r, seed, "embedding");
        let ids = trainable_ids(&store);
        let r = param_grad_check(
            &mut store,
            &ids,
            |s| {
                let e = s.tape().constant(embedding.clone());
                Ok(stage_loss(stage1.forward(s, e)?.logits, &gt1, &loss_cfg)?.0)
            },
            FD_STEP,
            END_TO_END_TOL,
            4,
        )?;
        keep_worst(&mut s1_worst, &mut s1_at, &r, seed, "parameters");

        // Both stages, training mode with CMAttn noise from a fixed stream.
        let mut store = ParamStore::new();
        let model = HSam::new(&mut store, &cfg, root.derive(label::INIT))?;
        randomize(&mut store, 0.3, rng);
        let noise_seed = root.derive(label::NOISE);
        let r = {
            let st = &store;
            let model = &model;
            let gt = &gt;
            let table = &table;
            let loss_cfg = &loss_cfg;
            grad_check_many(
                move |t, x| {
                    let s = Scope::inference(t, st);
                    let out = model.forward(&s, x[0], Some(gt), table, &mut noise_seed.rng(), Mode::Train)?;
                    Ok(total_loss(out.stage1.logits, out.stage2_logits, gt, (hw, hw), 0.6, loss_cfg)?.total)
                },
                core::slice::from_ref(&images),
                FD_STEP,
                END_TO_END_TOL,
            )?
        };
        keep_worst(&mut full_worst, &mut full_at, &r, seed, "image");
        let ids = trainable_ids(&store);
        let r = param_grad_check(
            &mut store,
            &ids,
            |s| {
                let x = s.tape().constant(images.clone());
                let out = model.forward(s, x, Some(&gt), &table, &mut noise_seed.rng(), Mode::Train)?;
                Ok(total_loss(out.stage1.logits, out.stage2_logits, &gt, (hw, hw), 0.6, &loss_cfg)?.total)
            },
            FD_STEP,
            END_TO_END_TOL,
            3,
        )?;
        keep_worst(&mut full_worst, &mut full_at, &r, seed, "parameters");
    }
    Ok(vec![
        Check::at_most("grad.end_to_end.stage1", s1_worst, END_TO_END_TOL, s1_at),
        Check::at_most("grad.end_to_end.two_stage", full_worst, END_TO_END_TOL, full_at),
    ])
}

fn keep_worst(worst: &mut f64, at: &mut String, r: &GradCheckReport, seed: u64, what: &str) {
    if r.max_rel_error > *worst || r.max_rel_error.is_nan() {
        *worst = r.max_rel_error;
        *at = format!("{what}: {}", describe(r, seed));
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Identities of masked attention that must hold exactly or to 1e-12.
pub fn attention_identities(seed: Seed) -> Result<Vec<Check>> {
    let (store, attn) = probe_attention(seed.derive(label::PROBE).0)?;
    let rng = &mut seed.derive_path(&[label::PROBE, 300]).rng();
    let x = Tensor::randn(&[2, 3, 8], 1.0, rng);
    let src = Tensor::randn(&[2, 5, 8], 1.0, rng);
    let tape = Tape::new();
    let s = Scope::new(&tape, &store);
    let (xv, sv) = (tape.constant(x.clone()), tape.constant(src.clone()));
    let plain = multi_head_attention(&s, &attn, xv, sv)?.add(&xv)?.value();

    let ones = learnable_mask_attention(&s, &attn, xv, sv, tape.constant(Tensor::ones(&[2, 3, 5])))?.value();
    let ones_diff = ones.max_abs_diff(&plain);

    let zeros = learnable_mask_attention(&s, &attn, xv, sv, tape.constant(Tensor::zeros(&[2, 3, 5])))?.value();
    let exact = bits(&zeros) == bits(&x);

    let binary = Tensor::from_fn(&[2, 3, 5], |i| if i % 3 == 0 { 0.0 } else { 1.0 });
    let bm = tape.leaf(binary, true);
    let y = project(original_mask_attention(&s, &attn, xv, sv, bm)?, 301)?;
    y.backward()?;
    let binary_grad = bm.grad().map_or(0.0, |g| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));

    let soft = Tensor::uniform(&[2, 3, 5], 0.05, 0.95, rng);
    let lm = tape.leaf(soft.clone(), true);
    let y = project(learnable_mask_attention(&s, &attn, xv, sv, lm)?, 302)?;
    y.backward()?;
    let soft_grad = lm.grad().map_or(0.0, |g| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let fd = {
        let st = &store;
        let attn = &attn;
        grad_check_many(
            |t, m| {
                let s = Scope::inference(t, st);
                project(learnable_mask_attention(&s, attn, t.constant(x.clone()), t.constant(src.clone()), m[0])?, 302)
            },
            core::slice::from_ref(&soft),
            FD_STEP,
            OP_TOL,
        )?
    };
    Ok(vec![
        Check::at_most("attention.ones_mask_equals_plain", ones_diff, 1e-12, String::from("max |difference|")),
        Check::flag(
            "attention.zero_mask_is_residual",
            exact,
            zeros.max_abs_diff(&x),
            String::from("bit-exact comparison with the residual"),
        ),
        Check::flag(
            "attention.binary_mask_gradient_zero",
            binary_grad == 0.0,
            binary_grad,
            String::from("max |dL/dM| through the additive binary mask"),
        ),
        Check::flag(
            "attention.learnable_mask_gradient_nonzero",
            soft_grad > 0.0,
            soft_grad,
            String::from("max |dL/dM| through the multiplicative mask"),
        ),
        Check::at_most("attention.learnable_mask_gradient_fd", fd.max_rel_error, OP_TOL, describe(&fd, 0)),
    ])
}

/// Empirical per-class variance of the CMAttn noise over `draws` draws, each
/// one pixel per class and every channel, against the table; and the
/// evaluation-mode identity.
pub fn noise_statistics(table: &NoiseTable, draws: usize, seed: Seed) -> Result<Vec<Check>> {
    let c = table.var.len();
    let gt: Vec<u8> = (0..c as u8).collect();
    let shape = [1, c, 1, c];
    let rng = &mut seed.derive_path(&[label::NOISE, 400]).rng();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for _ in 0..draws {
        if let Some(z) = class_noise(&shape, &gt, table, rng)? {
            for ch in 0..c {
                for (p, &l) in gt.iter().enumerate() {
                    let v = z.data()[ch * c + p];
                    sum[l as usize] += v;
                    sq[l as usize] += v * v;
                }
            }
        }
    }
    let count = (draws * c) as f64;
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for k in 0..c {
        let mean = sum[k] / count;
        let var = sq[k] / count - mean * mean;
        let expected = table.var[k];
        let rel = if expected == 0.0 { var.abs() } else { (var - expected).abs() / expected };
        detail.push_str(&format!("class {k}: {var:.5} vs {expected:.5}; "));
        worst = worst.max(rel);
    }
    let p = Tensor::randn(&shape, 1.0, rng);
    let a = cmattn_augment(&p, &gt, table, &mut seed.rng(), Mode::Eval)?;
    let b = cmattn_augment(&p, &gt, table, &mut seed.derive(9).rng(), Mode::Eval)?;
    let identity = bits(&a) == bits(&p) && bits(&b) == bits(&p);
    Ok(vec![
        Check::at_most("noise.variance_relative_error", worst, 0.05, detail),
        Check::flag("noise.eval_is_identity", identity, 0.0, String::from("bit comparison in evaluation mode")),
    ])
}

/// Closed-form schedule values, convex stage weights and loss defaults.
pub fn schedule_checks(cfg: &RunConfig) -> Result<Vec<Check>> {
    let l = &cfg.loss;
    let mut out = Vec::new();
    if l.schedule == LambdaSchedule::Exponential {
        let d0 = (lambda_w(0, l) - l.lambda_w_start).abs();
        let d300 = (lambda_w(300, l) - l.lambda_w_start * math::exp(-300.0 * l.lambda_w_decay)).abs();
        out.push(Check::at_most("schedule.lambda_w_0", d0, 1e-12, format!("lambda_w(0) = {}", lambda_w(0, l))));
        out.push(Check::at_most("schedule.lambda_w_300", d300, 1e-12, format!("lambda_w(300) = {}", lambda_w(300, l))));
    }
    // Recompose the total from its parts at every epoch of a long run.
    let tape = Tape::new();
    let rng = &mut Seed(cfg.seed).derive_path(&[label::PROBE, 500]).rng();
    let s1 = tape.constant(Tensor::randn(&[1, 2, 2, 2], 1.0, rng));
    let s2 = tape.constant(Tensor::randn(&[1, 2, 4, 4], 1.0, rng));
    let gt: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
    let mut worst = 0.0f64;
    for epoch in 0..=300u64 {
        let lw = lambda_w(epoch, l);
        let parts = total_loss(s1, Some(s2), &gt, (4, 4), lw, l)?;
        let weights = lw + (1.0 - lw);
        let recomposed = lw * parts.stage1 + (1.0 - lw) * parts.stage2.unwrap_or(0.0);
        worst = worst.max((weights - 1.0).abs()).max((recomposed - parts.total.item()).abs());
    }
    out.push(Check::at_most("schedule.stage_weights_sum_to_one", worst, 1e-12, String::from("epochs 0..=300")));
    out.push(Check::flag(
        "loss.default_weights",
        l.lambda_dice == 0.9 && l.lambda_ce == 0.1,
        l.lambda_dice,
        format!("dice {} ce {}", l.lambda_dice, l.lambda_ce),
    ));
    Ok(out)
}

/// Builds the encoder at each rank, checks zero bypasses reproduce the
/// frozen encoder bit-exactly, and compares parameter counts with the
/// closed form.
pub fn lora_rank_report(base: &EncoderConfig, ranks: &[usize]) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &r in ranks {
        let cfg = EncoderConfig { lora_rank: r, ..base.clone() };
        let mut store = ParamStore::new();
        let enc = crate::lora::Encoder::new(&mut store, &cfg, &mut Seed(r as u64).derive(label::INIT).rng())?;
        let counted: usize = enc.lora_layers().map(LoraLayer::bypass_params).sum();
        let stored = store.trainable_count();
        let closed = cfg.lora_param_count();
        out.push(Check::flag(
            format!("lora.rank{r}.param_count"),
            counted == closed && stored == closed,
            counted as f64,
            format!("bypass {counted}, trainable {stored}, closed form {closed}"),
        ));
        if r == base.lora_rank {
            let exact = zero_bypass_is_exact(&enc, &store, &cfg)?;
            out.push(Check::flag(
                format!("lora.rank{r}.zero_bypass_exact"),
                exact,
                0.0,
                String::from("encoder output with zero up-projections vs frozen projections"),
            ));
        }
    }
    Ok(out)
}

fn zero_bypass_is_exact(enc: &crate::lora::Encoder, store: &ParamStore, cfg: &EncoderConfig) -> Result<bool> {
    let mut frozen = enc.clone();
    for b in &mut frozen.blocks {
        b.attn.q = crate::attention::Proj::Plain(b.attn.q.base().clone());
        b.attn.v = crate::attention::Proj::Plain(b.attn.v.base().clone());
    }
    let img = Tensor::uniform(&[1, cfg.channels, cfg.image_size, cfg.image_size], 0.0, 1.0, &mut Seed(7).rng());
    let tape = Tape::new();
    let s = Scope::inference(&tape, store);
    let x = tape.constant(img);
    let a = enc.forward(&s, x)?.value();
    let b = frozen.forward(&s, x)?.value();
    Ok(bits(&a) == bits(&b))
}
