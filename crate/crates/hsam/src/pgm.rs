//! Binary portable graymap (`P5`) label dumps.

use std::path::Path;

use crate::error::{io_err, usage, Result};

/// Labels are written unscaled with `maxval = classes − 1`, so each grey
/// level is a class index.
pub fn encode(labels: &[u8], height: usize, width: usize, classes: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(usage(format!("{} labels for a {height}×{width} image", labels.len())));
    }
    let maxval = classes.saturating_sub(1).max(1);
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn write(path: &Path, labels: &[u8], height: usize, width: usize, classes: usize) -> Result<()> {
    std::fs::write(path, encode(labels, height, width, classes)?).map_err(io_err(path))
}

/// Parses a `P5` image with single-byte samples: `(width, height, maxval, pixels)`.
pub fn decode(bytes: &[u8]) -> Option<(usize, usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P5" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let maxval: usize = fields[3].parse().ok()?;
    let data = bytes.get(pos + 1..)?;
    (maxval < 256 && data.len() == w * h).then(|| (w, h, maxval, data.to_vec()))
}
