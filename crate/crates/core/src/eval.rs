//! Reference-quality metrics and the analytic attention op counter.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use std::fmt::Write as _;
use std::path::Path;

fn same_shape<T: Real>(x: &Tensor<T>, y: &Tensor<T>, op: &str) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension(format!("{op}: shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(x, y, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::Contract(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Grayscale plane: the channel mean of `C×H×W`, or a rank-2 image as is.
fn gray<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    match x.shape() {
        &[h, w] => Ok((h, w, x.data().iter().map(|v| v.as_f64()).collect())),
        &[c, h, w] => {
            let d = x.data();
            let plane = (0..h * w).map(|i| (0..c).map(|ch| d[ch * h * w + i].as_f64()).sum::<f64>() / c as f64);
            Ok((h, w, plane.collect()))
        }
        s => Err(Error::Dimension(format!("ssim expects H×W or C×H×W, got {s:?}"))),
    }
}

/// Single-scale SSIM with peak 1.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    ssim_with_peak(x, y, 1.0)
}

/// Single-scale SSIM over the grayscale images, 11×11 Gaussian window with
/// σ = 1.5, averaged over valid window positions.
pub fn ssim_with_peak<T: Real>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(x, y, "ssim")?;
    let (h, w, gx) = gray(x)?;
    let (_, _, gy) = gray(y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}")));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let k = win[u * SSIM_WINDOW + v];
                    let (a, b) = (gx[(i + u) * w + j + v], gy[(i + u) * w + j + v]);
                    mx += k * a;
                    my += k * b;
                    sxx += k * (a * a);
                    syy += k * (b * b);
                    sxy += k * (a * b);
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpCount {
    pub additions: u64,
    pub multiplications: u64,
}

/// Scalar operations of one self-attention over a `C×H×W` feature map.
///
/// With `N` tokens of width `d`, QKᵀ and A·V each cost `N²·d` multiplications
/// and `N²·d` additions; the softmax row sums add another `N²`. The wavelet
/// variant attends over `(H/2)(W/2)` tokens of width `4C`.
pub fn attention_op_count(c: usize, h: usize, w: usize, wavelet: bool) -> Result<OpCount> {
    let (n, d) = if wavelet {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Parity { op: "attention_op_count", shape: vec![c, h, w] });
        }
        ((h / 2 * (w / 2)) as u64, 4 * c as u64)
    } else {
        ((h * w) as u64, c as u64)
    };
    Ok(OpCount { multiplications: 2 * n * n * d, additions: 2 * n * n * d + n * n })
}

/// `(name, value)` rows rendered as an aligned two-column text table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<(String, String)>,
}

impl MetricTable {
    pub fn push(&mut self, name: impl Into<String>, value: impl std::fmt::Display) {
        self.rows.push((name.into(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (n, v) in &self.rows {
            let _ = writeln!(out, "{n:<width$}  {v}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Three significant digits, e.g. `1.07e9`.
pub fn sci3(v: u64) -> String {
    format!("{:.2e}", v as f64)
}
