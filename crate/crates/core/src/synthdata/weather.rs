//! Weather degradation models: additive oriented streaks (rain), additive
//! soft flakes (snow), atmospheric blend `t·x + (1-t)·A` (haze), and gamma
//! darkening (low light).

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Rain streaks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreakParams {
    /// Additive brightness of a streak; 0 is the identity.
    pub amplitude: f64,
    /// Streaks per pixel.
    pub density: f64,
    /// Streak length as a fraction of the image height.
    pub length: f64,
}

/// Snow flakes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlakeParams {
    pub amplitude: f64,
    pub density: f64,
    pub radius: f64,
}

/// Concrete degradation with continuous parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    Rain(StreakParams),
    Snow(FlakeParams),
    Haze { transmission: f64, airlight: f64 },
    LowLight { gamma: f64 },
}

fn add_clamped(img: &mut [f32], mask: &[f64], amplitude: f64) {
    let plane = mask.len();
    for (i, v) in img.iter_mut().enumerate() {
        *v = (*v as f64 + amplitude * mask[i % plane]).clamp(0.0, 1.0) as f32;
    }
}

fn streak_mask(h: usize, w: usize, p: &StreakParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mask = vec![0.0; h * w];
    let count = (p.density * (h * w) as f64).round() as usize;
    let length = p.length * h as f64;
    // one dominant direction per image, slight per-streak jitter
    let base: f64 = rng.random_range(-0.35..0.35);
    for _ in 0..count {
        let angle = base + rng.random_range(-0.05..0.05);
        let (dy, dx) = (angle.cos(), angle.sin());
        let (y0, x0) = (rng.random_range(-length..h as f64), rng.random_range(0.0..w as f64));
        let strength = rng.random_range(0.6..1.0);
        let steps = (length * 2.0).ceil() as usize;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            let (y, x) = (y0 + t * dy, x0 + t * dx);
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                let m = &mut mask[y as usize * w + x as usize];
                *m = f64::max(*m, strength);
            }
        }
    }
    mask
}

fn flake_mask(h: usize, w: usize, p: &FlakeParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mask = vec![0.0; h * w];
    let count = (p.density * (h * w) as f64).round() as usize;
    for _ in 0..count {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let r = p.radius * rng.random_range(0.7..1.3);
        let reach = (2.0 * r).ceil() as isize;
        for yy in (cy as isize - reach)..=(cy as isize + reach) {
            for xx in (cx as isize - reach)..=(cx as isize + reach) {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let d2 = (yy as f64 + 0.5 - cy).powi(2) + (xx as f64 + 0.5 - cx).powi(2);
                let v = (-d2 / (2.0 * r * r)).exp();
                let m = &mut mask[yy as usize * w + xx as usize];
                *m = f64::max(*m, v);
            }
        }
    }
    mask
}

/// Applies one degradation to a `3×H×W` image in `[0, 1]`.
pub fn apply(clean: &Tensor<f32>, d: &Degradation, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (_, h, w) = clean.dims3().expect("image is 3×H×W");
    let mut out = clean.clone();
    match *d {
        Degradation::Rain(p) => {
            let mask = streak_mask(h, w, &p, rng);
            add_clamped(out.data_mut(), &mask, p.amplitude);
        }
        Degradation::Snow(p) => {
            let mask = flake_mask(h, w, &p, rng);
            add_clamped(out.data_mut(), &mask, p.amplitude);
        }
        Degradation::Haze { transmission, airlight } => {
            for v in out.data_mut() {
                *v = (transmission * *v as f64 + (1.0 - transmission) * airlight).clamp(0.0, 1.0) as f32;
            }
        }
        Degradation::LowLight { gamma } => {
            for v in out.data_mut() {
                *v = (*v as f64).powf(gamma).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}
