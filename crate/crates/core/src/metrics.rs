//! Dice coefficient and Hausdorff distance on label maps.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;

/// `2|A∩B|/(|A|+|B|)` for one class; 1 if both are empty.
pub fn dice_metric(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    DiceCounts::from_maps(pred, gt, class).dice()
}

/// Running overlap counts for pooling Dice over many samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub inter: u64,
    pub pred: u64,
    pub gt: u64,
}

impl DiceCounts {
    pub fn from_maps(pred: &[u8], gt: &[u8], class: u8) -> Self {
        assert_eq!(pred.len(), gt.len(), "label maps differ in size");
        let mut c = DiceCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            let (a, b) = (p == class, g == class);
            c.pred += a as u64;
            c.gt += b as u64;
            c.inter += (a && b) as u64;
        }
        c
    }

    pub fn merge(&mut self, other: DiceCounts) {
        self.inter += other.inter;
        self.pred += other.pred;
        self.gt += other.gt;
    }

    pub fn dice(&self) -> f64 {
        match (self.pred, self.gt) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (a, b) => 2.0 * self.inter as f64 / (a + b) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdVariant {
    Max,
    #[default]
    Avg,
}

pub type Point = (usize, usize);

fn dist(a: Point, b: Point) -> f64 {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = a.1 as f64 - b.1 as f64;
    math::sqrt(dy * dy + dx * dx)
}

fn nearest(p: Point, set: &[Point]) -> f64 {
    set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

fn combine(ab: &[f64], ba: &[f64], variant: HdVariant) -> f64 {
    match variant {
        HdVariant::Max => {
            let m = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
            m(ab).max(m(ba))
        }
        HdVariant::Avg => {
            let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
            0.5 * (mean(ab) + mean(ba))
        }
    }
}

/// Pairwise Hausdorff distance between pixel-centre point sets. `None` if
/// either set is empty.
pub fn hausdorff(a: &[Point], b: &[Point], variant: HdVariant) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let ab: Vec<f64> = a.iter().map(|&p| nearest(p, b)).collect();
    let ba: Vec<f64> = b.iter().map(|&p| nearest(p, a)).collect();
    Some(combine(&ab, &ba, variant))
}

/// Pixels of `class` in row-major order.
pub fn points_of(labels: &[u8], w: usize, class: u8) -> Vec<Point> {
    labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| (i / w, i % w)).collect()
}

/// Hausdorff distance between the `class` regions of two `h×w` label maps.
///
/// Same value as [`hausdorff`] on [`points_of`], computed faster: a point
/// inside the other region is at distance 0, and otherwise its nearest
/// neighbour there lies on that region's edge (a pixel with a 4-neighbour
/// outside it), since any other candidate has a neighbour one step closer.
pub fn mask_hausdorff(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8, variant: HdVariant) -> Option<f64> {
    let a = points_of(pred, w, class);
    let b = points_of(gt, w, class);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let edge = |m: &[u8]| -> Vec<Point> {
        let inside = |y: isize, x: isize| {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[y as usize * w + x as usize] == class
        };
        points_of(m, w, class)
            .into_iter()
            .filter(|&(y, x)| {
                let (y, x) = (y as isize, x as isize);
                !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1))
            })
            .collect()
    };
    let directed = |from: &[Point], other: &[u8]| -> Vec<f64> {
        let targets = edge(other);
        from.iter()
            .map(|&(y, x)| if other[y * w + x] == class { 0.0 } else { nearest((y, x), &targets) })
            .collect()
    };
    Some(combine(&directed(&a, gt), &directed(&b, pred), variant))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Pooled Dice per class, background included at index 0.
    pub per_class_dice: Vec<f64>,
    /// Mean over foreground classes present in the ground truth.
    pub mean_dice: f64,
    /// Mean per-sample Hausdorff per class over samples where both regions
    /// exist; `None` when there were none.
    pub per_class_hd: Vec<Option<f64>>,
    pub mean_hd: Option<f64>,
    pub variant: HdVariant,
}

/// Pools Dice and averages Hausdorff over paired `h×w` label maps.
pub fn evaluate_maps(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    h: usize,
    w: usize,
    classes: usize,
    variant: HdVariant,
) -> MetricReport {
    assert_eq!(preds.len(), gts.len(), "prediction and ground-truth counts differ");
    let mut counts = vec![DiceCounts::default(); classes];
    let mut hd_sum = vec![0.0; classes];
    let mut hd_n = vec![0usize; classes];
    for (p, g) in preds.iter().zip(gts) {
        for c in 0..classes {
            counts[c].merge(DiceCounts::from_maps(p, g, c as u8));
            if c > 0 {
                if let Some(d) = mask_hausdorff(p, g, h, w, c as u8, variant) {
                    hd_sum[c] += d;
                    hd_n[c] += 1;
                }
            }
        }
    }
    let per_class_dice: Vec<f64> = counts.iter().map(DiceCounts::dice).collect();
    let present: Vec<usize> = (1..classes).filter(|&c| counts[c].gt > 0).collect();
    let mean_dice = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|&c| per_class_dice[c]).sum::<f64>() / present.len() as f64
    };
    let per_class_hd: Vec<Option<f64>> =
        (0..classes).map(|c| (hd_n[c] > 0).then(|| hd_sum[c] / hd_n[c] as f64)).collect();
    let defined: Vec<f64> = per_class_hd.iter().skip(1).flatten().copied().collect();
    let mean_hd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    MetricReport { per_class_dice, mean_dice, per_class_hd, mean_hd, variant }
}
