//! Procedural clean scenes, one family per content class.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

pub const CONTENT_NAMES: [&str; 8] =
    ["gradient", "stripes", "disks", "checker", "blobs", "diagonal", "rings", "blocks"];

fn palette(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    for c in 0..3 {
        a[c] = rng.random_range(0.0..0.15);
        b[c] = rng.random_range(0.75..0.95);
    }
    (a, b)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn smooth_step(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    v * v * (3.0 - 2.0 * v)
}

/// Deterministic `3×H×W` scene in `[0, 1]` for `content_id` (taken mod 8).
pub fn render(content_id: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (lo, hi) = palette(rng);
    let (hf, wf) = (h as f64, w as f64);
    let field: Box<dyn Fn(f64, f64) -> f64> = match content_id % 8 {
        0 => {
            let angle = rng.random_range(-0.4..0.4);
            let (ca, sa) = (f64::cos(angle), f64::sin(angle));
            Box::new(move |y, x| ((x / wf - 0.5) * ca + (y / hf - 0.5) * sa + 0.5).clamp(0.0, 1.0))
        }
        1 => {
            let period = rng.random_range(5.0..9.0) * wf / 32.0;
            let phase = rng.random_range(0.0..2.0 * PI);
            Box::new(move |_, x| smooth_step(0.5 + 1.5 * (2.0 * PI * x / period + phase).sin()))
        }
        2 => {
            let disks: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (rng.random_range(0.2..0.8) * hf, rng.random_range(0.2..0.8) * wf, rng.random_range(0.12..0.22) * wf)
                })
                .collect();
            Box::new(move |y, x| {
                disks.iter().map(|&(cy, cx, r)| smooth_step(r - ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() + 0.5)).fold(0.0, f64::max)
            })
        }
        3 => {
            let cell = rng.random_range(6.0..10.0) * wf / 32.0;
            let (oy, ox) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            Box::new(move |y, x| {
                let parity = (((y + oy) / cell).floor() + ((x + ox) / cell).floor()) as i64;
                if parity.rem_euclid(2) == 0 { 1.0 } else { 0.0 }
            })
        }
        4 => {
            let blobs: Vec<(f64, f64, f64)> = (0..4)
                .map(|_| (rng.random_range(0.0..1.0) * hf, rng.random_range(0.0..1.0) * wf, rng.random_range(0.12..0.25) * wf))
                .collect();
            Box::new(move |y, x| {
                let s: f64 = blobs.iter().map(|&(cy, cx, r)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp()).sum();
                s.min(1.0)
            })
        }
        5 => {
            let period = rng.random_range(7.0..11.0) * wf / 32.0;
            let phase = rng.random_range(0.0..2.0 * PI);
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Box::new(move |y, x| smooth_step(0.5 + 1.5 * (2.0 * PI * (x + dir * y) / (period * 1.414) + phase).sin()))
        }
        6 => {
            let (cy, cx) = (rng.random_range(0.35..0.65) * hf, rng.random_range(0.35..0.65) * wf);
            let period = rng.random_range(5.0..8.0) * wf / 32.0;
            Box::new(move |y, x| {
                let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                smooth_step(0.5 + 1.5 * (2.0 * PI * r / period).cos())
            })
        }
        _ => {
            let rects: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    let (y0, x0) = (rng.random_range(0.0..0.6) * hf, rng.random_range(0.0..0.6) * wf);
                    (y0, x0, y0 + rng.random_range(0.25..0.45) * hf, x0 + rng.random_range(0.25..0.45) * wf)
                })
                .collect();
            Box::new(move |y, x| {
                if rects.iter().any(|&(y0, x0, y1, x1)| y >= y0 && y < y1 && x >= x0 && x < x1) { 1.0 } else { 0.0 }
            })
        }
    };
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let rgb = mix(lo, hi, field(y as f64 + 0.5, x as f64 + 0.5));
            for c in 0..3 {
                data[(c * h + y) * w + x] = rgb[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new([3, h, w], data).expect("scene shape")
}
