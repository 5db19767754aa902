//! Synthetic long-tailed segmentation data.
//!
//! Every sample is a grey image with one textured ellipse per present
//! foreground class. Class `k ≥ 1` is present with probability
//! `tail_ratio^(k−1)`, so later classes are rarer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::NoiseTable;
use crate::error::{usage_err, Result};
use crate::math;
use crate::rng::{label, Rng, Seed};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// Row-major `H×W` intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major `H×W` labels in `[0, C)`.
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub split: String,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSpec {
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub tail_ratio: f64,
    pub split: String,
}

impl GenerateSpec {
    /// 64×64, four classes, tail ratio 0.4.
    pub fn desk_scale(seed: u64, n: usize, split: &str) -> Self {
        GenerateSpec { seed, n, height: 64, width: 64, classes: 4, tail_ratio: 0.4, split: split.into() }
    }
}

/// Mean intensity of class `k` regions.
fn class_level(k: usize, classes: usize) -> f64 {
    0.15 + 0.75 * k as f64 / (classes - 1) as f64
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut Rng, h: usize, w: usize) -> Self {
        let size = h.min(w) as f64;
        let theta = rng.uniform_in(0.0, core::f64::consts::PI);
        Ellipse {
            cy: rng.uniform_in(0.2, 0.8) * h as f64,
            cx: rng.uniform_in(0.2, 0.8) * w as f64,
            ry: rng.uniform_in(0.1, 0.22) * size,
            rx: rng.uniform_in(0.1, 0.22) * size,
            cos: math::cos(theta),
            sin: math::sin(theta),
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx) * (u / self.rx) + (v / self.ry) * (v / self.ry) <= 1.0
    }
}

/// Deterministic in `spec`; each sample draws from its own stream.
pub fn generate(spec: &GenerateSpec) -> Result<Dataset> {
    let (h, w, c) = (spec.height, spec.width, spec.classes);
    if h < 4 || w < 4 || spec.n == 0 {
        return Err(usage_err!("degenerate dataset extents {h}×{w}, n = {}", spec.n));
    }
    if !(2..=256).contains(&c) {
        return Err(usage_err!("class count {c} must be in 2..=256"));
    }
    if !(spec.tail_ratio > 0.0 && spec.tail_ratio <= 1.0) {
        return Err(usage_err!("tail ratio {} must be in (0, 1]", spec.tail_ratio));
    }
    let samples = (0..spec.n)
        .map(|i| {
            let mut rng = Seed(spec.seed).derive_path(&[label::DATA, i as u64]).rng();
            make_sample(&mut rng, h, w, c, spec.tail_ratio)
        })
        .collect();
    Ok(Dataset { height: h, width: w, classes: c, seed: spec.seed, split: spec.split.clone(), samples })
}

fn make_sample(rng: &mut Rng, h: usize, w: usize, classes: usize, tail: f64) -> ImageSample {
    let mut mask = vec![0u8; h * w];
    let mut value = vec![0.0f64; h * w];
    for v in value.iter_mut() {
        *v = class_level(0, classes) + 0.04 * rng.normal();
    }
    let mut p = 1.0;
    for k in 1..classes {
        let present = rng.bernoulli(p);
        p *= tail;
        if !present {
            continue;
        }
        // Prefer a placement on free background; fall back to the last try.
        let mut shape = Ellipse::random(rng, h, w);
        for _ in 0..30 {
            let (mut area, mut free) = (0usize, 0usize);
            for i in 0..h * w {
                if shape.contains(i / w, i % w) {
                    area += 1;
                    free += (mask[i] == 0) as usize;
                }
            }
            if area > 0 && free * 10 >= area * 9 {
                break;
            }
            shape = Ellipse::random(rng, h, w);
        }
        let level = class_level(k, classes);
        let freq = 0.4 + 0.3 * k as f64;
        let phase = rng.uniform_in(0.0, core::f64::consts::TAU);
        for i in 0..h * w {
            let (y, x) = (i / w, i % w);
            if mask[i] == 0 && shape.contains(y, x) {
                mask[i] = k as u8;
                let texture = 0.05 * math::sin(freq * (x as f64 + y as f64) + phase);
                value[i] = level + texture + 0.04 * rng.normal();
            }
        }
    }
    let image = value.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    ImageSample { image, mask }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBasis {
    /// Labelled pixel counts.
    #[default]
    Pixels,
    /// Number of samples in which the class occurs.
    Occurrences,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub sigma0: f64,
    pub var_max: f64,
    pub basis: FrequencyBasis,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma0: 0.05, var_max: 1.0, basis: FrequencyBasis::Pixels }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    /// Pixel count per class; sums to `n·H·W`.
    pub pixels: Vec<u64>,
    /// Samples containing each class.
    pub occurrences: Vec<u64>,
    pub table: NoiseTable,
    /// Classes absent from the split, whose variance was clamped to `var_max`.
    pub absent: Vec<bool>,
}

pub fn class_frequencies(ds: &Dataset, cfg: &NoiseConfig) -> ClassStats {
    let c = ds.classes;
    let mut pixels = vec![0u64; c];
    let mut occurrences = vec![0u64; c];
    for s in &ds.samples {
        let mut seen = vec![false; c];
        for &l in &s.mask {
            pixels[l as usize] += 1;
            seen[l as usize] = true;
        }
        for (o, s) in occurrences.iter_mut().zip(seen) {
            *o += s as u64;
        }
    }
    let freq: Vec<f64> = match cfg.basis {
        FrequencyBasis::Pixels => pixels.iter().map(|&v| v as f64).collect(),
        FrequencyBasis::Occurrences => occurrences.iter().map(|&v| v as f64).collect(),
    };
    let (table, absent) = noise_table(&freq, cfg);
    ClassStats { pixels, occurrences, table, absent }
}

/// `var(i) = σ₀·f_med/f_i` clamped to `[0, var_max]`; `f_med` is the median
/// over all classes. A zero frequency gets `var_max` and is flagged.
pub fn noise_table(freq: &[f64], cfg: &NoiseConfig) -> (NoiseTable, Vec<bool>) {
    let mut sorted = freq.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let med = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    let absent: Vec<bool> = freq.iter().map(|&f| f <= 0.0).collect();
    let var = freq
        .iter()
        .map(|&f| if f <= 0.0 { cfg.var_max } else { (cfg.sigma0 * med / f).clamp(0.0, cfg.var_max) })
        .collect();
    (NoiseTable { var }, absent)
}

/// Ranges are symmetric magnitudes: rotation `U(−r, r)` degrees, scale
/// `1 + U(−s, s)`, elastic displacement `alpha` pixels smoothed by a Gaussian
/// of `sigma` pixels. All zero means no augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub scale: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation_deg: 15.0, scale: 0.1, elastic_alpha: 1.5, elastic_sigma: 3.0 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { rotation_deg: 0.0, scale: 0.0, elastic_alpha: 0.0, elastic_sigma: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 0.0 && self.elastic_alpha == 0.0
    }
}

/// A concrete geometric warp: output pixel centre `p` samples the source at
/// `R(−θ)·(p − c)/s + c + d(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Warp {
    pub angle_deg: f64,
    pub scale: f64,
    /// Per-pixel `(dy, dx)` displacement, or empty.
    pub displacement: Vec<(f64, f64)>,
}

pub fn sample_warp(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut Rng) -> Warp {
    let angle_deg = if cfg.rotation_deg > 0.0 { rng.uniform_in(-cfg.rotation_deg, cfg.rotation_deg) } else { 0.0 };
    let scale = if cfg.scale > 0.0 { 1.0 + rng.uniform_in(-cfg.scale, cfg.scale) } else { 1.0 };
    let displacement = if cfg.elastic_alpha > 0.0 {
        let dy = smooth_field(h, w, cfg.elastic_sigma, rng);
        let dx = smooth_field(h, w, cfg.elastic_sigma, rng);
        dy.into_iter().zip(dx).map(|(a, b)| (cfg.elastic_alpha * a, cfg.elastic_alpha * b)).collect()
    } else {
        Vec::new()
    };
    Warp { angle_deg, scale, displacement }
}

/// Uniform `[-1, 1]` noise blurred by a separable Gaussian and rescaled to
/// unit peak magnitude.
fn smooth_field(h: usize, w: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    if sigma <= 0.0 {
        return raw;
    }
    let radius = math::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, kv) in kernel.iter().enumerate() {
                    let o = j as isize - radius;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + o) } else { (y as isize + o, x as isize) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += kv * src[yy as usize * w + xx as usize];
                        norm += kv;
                    }
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    let field = blur(&blur(&raw, true), false);
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter().map(|v| v / peak).collect()
    } else {
        field
    }
}

/// Applies `warp`: bilinear for the image, nearest for the mask; samples
/// falling outside the grid become 0 / background.
pub fn apply_warp(sample: &ImageSample, h: usize, w: usize, warp: &Warp) -> ImageSample {
    let theta = warp.angle_deg.to_radians();
    let (cos, sin) = (math::cos(theta), math::sin(theta));
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut image = vec![0.0f32; h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let mut sy = (-sin * px + cos * py) / warp.scale + cy;
            let mut sx = (cos * px + sin * py) / warp.scale + cx;
            if let Some(&(dy, dx)) = warp.displacement.get(y * w + x) {
                sy += dy;
                sx += dx;
            }
            // Continuous coordinates of pixel centres.
            let (fy, fx) = (sy - 0.5, sx - 0.5);
            let (ny, nx) = (math::floor(fy + 0.5), math::floor(fx + 0.5));
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                mask[y * w + x] = sample.mask[ny as usize * w + nx as usize];
            }
            let (y0, x0) = (math::floor(fy), math::floor(fx));
            let (ty, tx) = (fy - y0, fx - x0);
            let at = |yy: f64, xx: f64| -> f64 {
                if yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                    0.0
                } else {
                    sample.image[yy as usize * w + xx as usize] as f64
                }
            };
            let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1.0))
                + ty * ((1.0 - tx) * at(y0 + 1.0, x0) + tx * at(y0 + 1.0, x0 + 1.0));
            image[y * w + x] = v as f32;
        }
    }
    ImageSample { image, mask }
}

/// Random rotation, scaling and elastic deformation.
pub fn augment(sample: &ImageSample, h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> ImageSample {
    if cfg.is_identity() {
        return sample.clone();
    }
    let warp = sample_warp(cfg, h, w, rng);
    apply_warp(sample, h, w, &warp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GenerateSpec {
        GenerateSpec { seed: 3, n, height: 32, width: 32, classes: 4, tail_ratio: 0.4, split: "train".into() }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&spec(5)).unwrap(), generate(&spec(5)).unwrap());
    }

    #[test]
    fn degenerate_extents_rejected() {
        let mut s = spec(1);
        s.height = 0;
        assert!(matches!(generate(&s), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn doubling_frequency_halves_variance() {
        let cfg = NoiseConfig { sigma0: 0.05, var_max: 1e9, basis: FrequencyBasis::Pixels };
        let (t, _) = noise_table(&[100.0, 10.0, 20.0], &cfg);
        assert!((t.var[1] - 2.0 * t.var[2]).abs() < 1e-15);
        let (t, absent) = noise_table(&[100.0, 0.0, 20.0], &NoiseConfig::default());
        assert_eq!(t.var[1], 1.0);
        assert_eq!(absent, alloc::vec![false, true, false]);
    }
}
