//! Batching, one training epoch and prediction, free of any IO.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{Mode, NoiseTable};
use crate::config::RunConfig;
use crate::data::{augment, Dataset, ImageSample};
use crate::error::{domain_err, shape_err, Error, Result};
use crate::loss::{lambda_w_at, total_loss};
use crate::metrics::{evaluate_maps, HdVariant, MetricReport};
use crate::model::HSam;
use crate::nn::{ParamStore, Scope};
use crate::optim::AdamW;
use crate::rng::{label, Seed};
use crate::tensor::{Tape, Tensor};

/// Images as `[N, 1, H, W]` and labels as `N·H·W` bytes.
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

pub fn make_batch(samples: &[&ImageSample], h: usize, w: usize) -> Result<Batch> {
    let n = samples.len();
    let mut pixels = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in samples {
        if s.image.len() != h * w || s.mask.len() != h * w {
            return Err(shape_err!("sample is not {h}×{w}"));
        }
        pixels.extend(s.image.iter().map(|&v| v as f64));
        labels.extend_from_slice(&s.mask);
    }
    Ok(Batch { images: Tensor::new(&[n, 1, h, w], pixels)?, labels })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    /// Stage weight at the first step of the epoch.
    pub lambda_w: f64,
    pub stage1: f64,
    pub stage2: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub steps: u64,
}

/// Model, parameters and optimizer state for one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub model: HSam,
    pub opt: AdamW,
    pub table: NoiseTable,
    /// Completed epochs.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, table: NoiseTable) -> Result<Self> {
        cfg.validate()?;
        if table.var.len() != cfg.model.decoder.classes {
            return Err(shape_err!(
                "noise table has {} classes, model has {}",
                table.var.len(),
                cfg.model.decoder.classes
            ));
        }
        let mut store = ParamStore::new();
        let model = HSam::new(&mut store, &cfg.model, Seed(cfg.seed))?;
        let opt = AdamW::new(cfg.optim.clone(), &store);
        Ok(Trainer { cfg: cfg.clone(), store, model, opt, table, epoch: 0 })
    }

    fn lambda_w(&self, epoch: u64, step: u64) -> f64 {
        let t = if self.cfg.loss.per_iteration { step as f64 } else { epoch as f64 };
        lambda_w_at(t, &self.cfg.loss)
    }

    /// Trains one epoch over `ds` in a seed-determined order with fresh
    /// augmentation; every random stream depends only on (seed, epoch, index).
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<EpochStats> {
        let epoch = self.epoch;
        let seed = Seed(self.cfg.seed);
        let (h, w) = (ds.height, ds.width);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        seed.derive_path(&[label::SHUFFLE, epoch]).rng().shuffle(&mut order);
        let first_lambda = self.lambda_w(epoch, self.opt.step);
        let (mut s1, mut s2, mut tot, mut lr, mut steps) = (0.0, 0.0, 0.0, 0.0, 0u64);
        let mut has_stage2 = false;
        for (b, chunk) in order.chunks(self.cfg.train.batch_size).enumerate() {
            let samples: Vec<ImageSample> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = seed.derive_path(&[label::AUGMENT, epoch, i as u64]).rng();
                    augment(&ds.samples[i], h, w, &self.cfg.data.augment, &mut rng)
                })
                .collect();
            let refs: Vec<&ImageSample> = samples.iter().collect();
            let batch = make_batch(&refs, h, w)?;
            let lambda_w = self.lambda_w(epoch, self.opt.step);
            let mut noise_rng = seed.derive_path(&[label::NOISE, epoch, b as u64]).rng();
            let tape = Tape::new();
            let scope = Scope::new(&tape, &self.store);
            let images = tape.constant(batch.images);
            let out = self.model.forward(&scope, images, Some(&batch.labels), &self.table, &mut noise_rng, Mode::Train)?;
            let parts = total_loss(out.stage1.logits, out.stage2_logits, &batch.labels, (h, w), lambda_w, &self.cfg.loss)?;
            let check = |term: &str, v: f64| -> Result<()> {
                if v.is_finite() {
                    Ok(())
                } else {
                    Err(domain_err!("non-finite {term} loss ({v}) in batch {b} of epoch {epoch}"))
                }
            };
            check("stage1", parts.stage1)?;
            if let Some(v) = parts.stage2 {
                check("stage2", v)?;
            }
            check("total", parts.total.item())?;
            parts.total.backward()?;
            let grads = scope.grads();
            drop(scope);
            lr = self.opt.step(&mut self.store, &grads)?;
            s1 += parts.stage1;
            if let Some(v) = parts.stage2 {
                s2 += v;
                has_stage2 = true;
            }
            tot += parts.total.item();
            steps += 1;
        }
        self.epoch += 1;
        let k = steps.max(1) as f64;
        Ok(EpochStats {
            epoch,
            lambda_w: if self.model.stage2.is_some() { first_lambda } else { 1.0 },
            stage1: s1 / k,
            stage2: has_stage2.then(|| s2 / k),
            total: tot / k,
            lr,
            steps,
        })
    }

    /// Arg-max label maps for each sample.
    pub fn predict(&self, samples: &[&ImageSample], h: usize, w: usize) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(samples.len());
        let mut unused = Seed(0).rng();
        for chunk in samples.chunks(16) {
            let batch = make_batch(chunk, h, w)?;
            let tape = Tape::new();
            let scope = Scope::inference(&tape, &self.store);
            let images = tape.constant(batch.images);
            let res = self.model.forward(&scope, images, None, &self.table, &mut unused, Mode::Eval)?;
            let probs = self.model.probabilities(&res, h, w)?.value();
            let c = probs.shape()[1];
            let plane = h * w;
            for (b, _) in chunk.iter().enumerate() {
                let data = &probs.data()[b * c * plane..(b + 1) * c * plane];
                out.push(argmax_channels(data, c, plane));
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, ds: &Dataset, variant: HdVariant) -> Result<(MetricReport, Vec<Vec<u8>>)> {
        if ds.classes != self.cfg.model.decoder.classes {
            return Err(Error::Usage(format!(
                "dataset has {} classes, model has {}",
                ds.classes, self.cfg.model.decoder.classes
            )));
        }
        let refs: Vec<&ImageSample> = ds.samples.iter().collect();
        let preds = self.predict(&refs, ds.height, ds.width)?;
        let gts: Vec<Vec<u8>> = ds.samples.iter().map(|s| s.mask.clone()).collect();
        let report = evaluate_maps(&preds, &gts, ds.height, ds.width, ds.classes, variant);
        Ok((report, preds))
    }
}

/// Per-pixel arg-max over `c` channel planes; ties go to the lower class.
pub fn argmax_channels(data: &[f64], c: usize, plane: usize) -> Vec<u8> {
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if data[k * plane + p] > data[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
