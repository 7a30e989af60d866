//! Binary PPM (P6, 8-bit) images and the JSON label manifest.

use super::{DegradationSpec, PromptLabels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Writes a `3×H×W` image in `[0, 1]`, rounding to 8 bits.
pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, got {c}")));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = d[(ch * h + y) * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Reads a P6 image with maxval ≤ 255 into `3×H×W` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    if header_token(&bytes, &mut pos) != Some(b"P6") {
        return Err(bad("not a binary PPM (P6)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(&bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let body = &bytes[pos + 1..];
    if w == 0 || h == 0 || body.len() < 3 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = body[(y * w + x) * 3 + ch] as f32 / maxval as f32;
            }
        }
    }
    Tensor::new([3, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub clean: String,
    pub degraded: String,
    pub spec: DegradationSpec,
    pub labels: PromptLabels,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
