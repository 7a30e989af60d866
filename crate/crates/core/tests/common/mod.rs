#![allow(dead_code)]

pub mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst-case errors over `cases` random tensors (even sizes in 2..=32,
/// channels 1..=8): round trip at 32 and 64 bits and relative energy error.
pub fn wavelet_suite(cases: usize, seed: u64) -> (f64, f64, f64) {
    use adsm::wavelet::{dwt2, idwt2, WaveletFilter};
    use adsm::Tensor;
    use rand::Rng;
    let f = WaveletFilter::haar();
    let mut r = rng(seed);
    let (mut e32, mut e64, mut energy) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let c = r.random_range(1..=8);
        let (h, w) = (2 * r.random_range(1..=16), 2 * r.random_range(1..=16));
        let x = Tensor::<f64>::randn([c, h, w], &mut r);
        let s = dwt2(&x, &f).unwrap();
        e64 = e64.max(idwt2(&s, &f).unwrap().max_abs_diff(&x));
        energy = energy.max((x.sum_sq() - s.packed().sum_sq()).abs() / x.sum_sq());
        let x32: Tensor<f32> = x.cast();
        let back = idwt2(&dwt2(&x32, &f).unwrap(), &f).unwrap();
        e32 = e32.max(back.max_abs_diff(&x32) as f64);
    }
    (e32, e64, energy)
}
