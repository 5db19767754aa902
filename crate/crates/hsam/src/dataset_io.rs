//! The `HSD1` dataset container.
//!
//! Little-endian layout: magic `HSD1`, version `u32`, header length `u32`,
//! a UTF-8 `key=value` header (one per line: `n`, `height`, `width`,
//! `classes`, `seed`, `split`, `frequencies`), then for each sample `H·W`
//! `f32` intensities followed by `H·W` `u8` labels.

use std::path::Path;

use hsam_core::data::{class_frequencies, Dataset, ImageSample, NoiseConfig};

use crate::bytes::Reader;
use crate::error::{io_err, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"HSD1";
pub const VERSION: u32 = 1;

/// Header fields of a stored dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub split: String,
    /// Labelled pixels per class; sums to `n·H·W`.
    pub frequencies: Vec<u64>,
}

impl Manifest {
    pub fn of(ds: &Dataset) -> Self {
        let stats = class_frequencies(ds, &NoiseConfig::default());
        Manifest {
            n: ds.len(),
            height: ds.height,
            width: ds.width,
            classes: ds.classes,
            seed: ds.seed,
            split: ds.split.clone(),
            frequencies: stats.pixels,
        }
    }

    fn header_text(&self) -> String {
        let freq: Vec<String> = self.frequencies.iter().map(u64::to_string).collect();
        format!(
            "n={}\nheight={}\nwidth={}\nclasses={}\nseed={}\nsplit={}\nfrequencies={}\n",
            self.n,
            self.height,
            self.width,
            self.classes,
            self.seed,
            self.split,
            freq.join(",")
        )
    }
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let header = Manifest::of(ds).header_text();
    let plane = ds.plane();
    let mut out = Vec::with_capacity(12 + header.len() + ds.len() * plane * 5);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for s in &ds.samples {
        for v in &s.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.mask);
    }
    out
}

pub fn write(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds)).map_err(io_err(path))
}

pub fn read(path: &Path) -> Result<(Dataset, Manifest)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(decode(&bytes)?)
}

fn parse_header(text: &str, base: u64) -> std::result::Result<Manifest, FormatError> {
    let mut n = None;
    let mut height = None;
    let mut width = None;
    let mut classes = None;
    let mut seed = None;
    let mut split = None;
    let mut frequencies = None;
    let mut offset = base;
    for line in text.lines() {
        let at = offset;
        offset += line.len() as u64 + 1;
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| FormatError::at(at, format!("header line {line:?} has no '='")))?;
        let num = |v: &str| v.parse::<u64>().map_err(|_| FormatError::field(at, key, format!("{v:?} is not an integer")));
        match key {
            "n" => n = Some(num(value)? as usize),
            "height" => height = Some(num(value)? as usize),
            "width" => width = Some(num(value)? as usize),
            "classes" => classes = Some(num(value)? as usize),
            "seed" => seed = Some(num(value)?),
            "split" => split = Some(value.to_string()),
            "frequencies" => {
                frequencies = Some(if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?
                })
            }
            other => return Err(FormatError::field(at, other, "unknown header key")),
        }
    }
    fn need<T>(v: Option<T>, base: u64, key: &str) -> std::result::Result<T, FormatError> {
        v.ok_or_else(|| FormatError::field(base, key, "missing header key"))
    }
    Ok(Manifest {
        n: need(n, base, "n")?,
        height: need(height, base, "height")?,
        width: need(width, base, "width")?,
        classes: need(classes, base, "classes")?,
        seed: need(seed, base, "seed")?,
        split: need(split, base, "split")?,
        frequencies: need(frequencies, base, "frequencies")?,
    })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Dataset, Manifest), FormatError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(FormatError::field(0, "magic", "not an HSD1 dataset"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::field(4, "version", format!("unsupported version {version}")));
    }
    let header_len = r.u32("header length")? as usize;
    let base = r.offset();
    let header = r.take(header_len, "header")?;
    let text = std::str::from_utf8(header).map_err(|e| FormatError::field(base, "header", e.to_string()))?;
    let m = parse_header(text, base)?;
    if m.height == 0 || m.width == 0 || !(2..=256).contains(&m.classes) {
        return Err(FormatError::field(base, "classes", "degenerate extents or class count"));
    }
    if m.frequencies.len() != m.classes {
        return Err(FormatError::field(base, "frequencies", format!("{} entries for {} classes", m.frequencies.len(), m.classes)));
    }
    let plane = m.height * m.width;
    let per_sample = plane * 5;
    let payload = r.remaining();
    if payload != m.n * per_sample {
        return Err(FormatError::field(
            r.offset(),
            "n",
            format!("header says {} samples ({} bytes) but payload has {payload} bytes", m.n, m.n * per_sample),
        ));
    }
    let mut samples = Vec::with_capacity(m.n);
    for _ in 0..m.n {
        let image = r
            .take(plane * 4, "image")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let at = r.offset();
        let mask = r.take(plane, "mask")?.to_vec();
        if let Some(i) = mask.iter().position(|&l| l as usize >= m.classes) {
            return Err(FormatError::field(at + i as u64, "mask", format!("label {} ≥ {} classes", mask[i], m.classes)));
        }
        samples.push(ImageSample { image, mask });
    }
    let ds = Dataset {
        height: m.height,
        width: m.width,
        classes: m.classes,
        seed: m.seed,
        split: m.split.clone(),
        samples,
    };
    if Manifest::of(&ds).frequencies != m.frequencies {
        return Err(FormatError::field(base, "frequencies", "header frequencies disagree with the stored masks"));
    }
    Ok((ds, m))
}
