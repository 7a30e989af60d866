//! Straight-line reference implementations on plain `Vec<f64>`, written
//! without the tape so they can check it.

use adsm::nn::{Conv, Linear, PixelMlp};
use adsm::tensor::{ParamId, ParamStore};

pub fn p(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn silu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&z| z * sigmoid(z)).collect()
}

/// `y_o = Σ_i W[o][i] x_i + b_o`.
pub fn linear(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d_in = x.len();
    (0..b.len()).map(|o| b[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>()).collect()
}

pub fn linear_layer(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    linear(&p(store, l.w), &p(store, l.b), x)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|z| z.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|z| z / s).collect()
}

/// Row-major `m×k` times `k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Stride-1 "same" cross-correlation by direct summation.
pub fn conv(x: &[f64], c_in: usize, h: usize, w: usize, kern: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
    let c_out = bias.len();
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += kern[((o * c_in + c) * k + ky) * k + kx] * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

pub fn conv_layer(store: &ParamStore<f64>, l: &Conv, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let bias = l.b.map(|b| p(store, b)).unwrap_or_else(|| vec![0.0; l.c_out]);
    conv(x, l.c_in, h, w, &p(store, l.w), &bias, l.k)
}

/// Haar analysis from the 2×2 closed form; bands packed LL, LH, HL, HH.
pub fn haar(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let band = c * ho * wo;
    let mut out = vec![0.0; 4 * band];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let at = |y: usize, x_: usize| x[(ch * h + y) * w + x_];
                let (a, b, cc, d) = (at(2 * i, 2 * j), at(2 * i, 2 * j + 1), at(2 * i + 1, 2 * j), at(2 * i + 1, 2 * j + 1));
                let o = (ch * ho + i) * wo + j;
                out[o] = (a + b + cc + d) / 2.0;
                out[band + o] = (a + b - cc - d) / 2.0;
                out[2 * band + o] = (a - b + cc - d) / 2.0;
                out[3 * band + o] = (a - b - cc + d) / 2.0;
            }
        }
    }
    out
}

/// Inverse of [`haar`]; `c4` packed channels at `ho×wo`.
pub fn ihaar(s: &[f64], c4: usize, ho: usize, wo: usize) -> Vec<f64> {
    let c = c4 / 4;
    let band = c * ho * wo;
    let (h, w) = (2 * ho, 2 * wo);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let o = (ch * ho + i) * wo + j;
                let (ll, lh, hl, hh) = (s[o], s[band + o], s[2 * band + o], s[3 * band + o]);
                out[(ch * h + 2 * i) * w + 2 * j] = (ll + lh + hl + hh) / 2.0;
                out[(ch * h + 2 * i) * w + 2 * j + 1] = (ll + lh - hl - hh) / 2.0;
                out[(ch * h + 2 * i + 1) * w + 2 * j] = (ll - lh + hl - hh) / 2.0;
                out[(ch * h + 2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) / 2.0;
            }
        }
    }
    out
}

/// `x ⊙ s + s` with `s` per channel.
pub fn modulate(x: &[f64], s: &[f64]) -> Vec<f64> {
    let inner = x.len() / s.len();
    x.iter().enumerate().map(|(i, &v)| v * s[i / inner] + s[i / inner]).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn pixel_mlp(store: &ParamStore<f64>, m: &PixelMlp, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let hid = conv_layer(store, &m.fc1, x, h, w);
    conv_layer(store, &m.fc2, &silu(&hid), h, w)
}
