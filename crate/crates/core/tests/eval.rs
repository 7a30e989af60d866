mod common;

use adsm::eval::{attention_op_count, psnr, ssim, MetricTable, OpCount};
use adsm::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn psnr_identical_is_infinite() {
    let x = Tensor::<f32>::uniform([3, 8, 8], 0.0, 1.0, &mut common::rng(1));
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn psnr_constant_offset() {
    let x = Tensor::<f64>::zeros([3, 4, 4]);
    let y = Tensor::<f64>::full([3, 4, 4], 0.5);
    assert!((psnr(&x, &y, 1.0).unwrap() - 6.020599913279624).abs() < 1e-12);
}

#[test]
fn psnr_matches_direct_formula() {
    for seed in 0..10 {
        let mut rng = common::rng(seed);
        let x = Tensor::<f64>::uniform([3, 9, 7], 0.0, 1.0, &mut rng);
        let y = Tensor::<f64>::uniform([3, 9, 7], 0.0, 1.0, &mut rng);
        let mut se = 0.0;
        for i in (0..x.len()).rev() {
            let d = x.data()[i] - y.data()[i];
            se += d * d;
        }
        let want = 20.0 * 2f64.log10() - 10.0 * (se / x.len() as f64).log10() - 20.0 * 2f64.log10();
        assert!((psnr(&x, &y, 1.0).unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn psnr_rejects_bad_inputs() {
    let x = Tensor::<f64>::zeros([3, 4, 4]);
    let y = Tensor::<f64>::zeros([3, 4, 5]);
    assert!(matches!(psnr(&x, &y, 1.0), Err(Error::Dimension(_))));
    assert!(matches!(psnr(&x, &x, 0.0), Err(Error::Contract(_))));
}

#[test]
fn ssim_identity_and_symmetry() {
    let mut rng = common::rng(3);
    let x = Tensor::<f32>::uniform([3, 16, 20], 0.0, 1.0, &mut rng);
    let y = Tensor::<f32>::uniform([3, 16, 20], 0.0, 1.0, &mut rng);
    assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
    let s = ssim(&x, &y).unwrap();
    assert!((-1.0..1.0).contains(&s));
}

#[test]
fn ssim_constants_closed_form() {
    let x = Tensor::<f64>::full([3, 12, 12], 0.2);
    let y = Tensor::<f64>::full([3, 12, 12], 0.8);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let want = (2.0 * 0.2 * 0.8 + c1) * c2 / ((0.2f64 * 0.2 + 0.8 * 0.8 + c1) * c2);
    assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
}

#[test]
fn ssim_too_small_is_contract_error() {
    let x = Tensor::<f64>::zeros([3, 10, 32]);
    assert!(matches!(ssim(&x, &x), Err(Error::Contract(_))));
}

#[test]
fn op_count_table_values() {
    let t = attention_op_count(32, 64, 64, false).unwrap();
    let w = attention_op_count(32, 64, 64, true).unwrap();
    assert_eq!(t.multiplications, 1_073_741_824);
    assert_eq!(w.multiplications, 268_435_456);
    assert_eq!(w.additions, 269_484_032);
    assert_eq!(t.additions, 1_090_519_040);
    assert_eq!(adsm::eval::sci3(t.multiplications), "1.07e9");
    assert_eq!(adsm::eval::sci3(w.multiplications), "2.68e8");
    assert_eq!(adsm::eval::sci3(w.additions), "2.69e8");
    assert!((t.additions as f64 / 1.07e9 - 1.0).abs() < 0.03);
}

#[test]
fn op_count_smallest_case() {
    assert_eq!(attention_op_count(1, 1, 1, false).unwrap(), OpCount { multiplications: 2, additions: 3 });
    assert!(matches!(attention_op_count(4, 5, 4, true), Err(Error::Parity { .. })));
}

#[test]
fn metric_table_renders_rows() {
    let mut t = MetricTable::default();
    t.push("psnr", 21.5);
    t.push("ssim_long", 0.8);
    assert_eq!(t.render(), "psnr       21.5\nssim_long  0.8\n");
}

proptest! {
    #[test]
    fn wavelet_multiplications_are_a_quarter(c in 1usize..64, h in 1usize..40, w in 1usize..40) {
        let (h, w) = (2 * h, 2 * w);
        let t = attention_op_count(c, h, w, false).unwrap();
        let v = attention_op_count(c, h, w, true).unwrap();
        prop_assert_eq!(4 * v.multiplications, t.multiplications);
    }

    #[test]
    fn psnr_decreases_with_mse(a in 0.01f64..0.4, b in 0.01f64..0.4) {
        prop_assume!(a < b);
        let x = Tensor::<f64>::zeros([1, 2, 2]);
        let pa = psnr(&x, &Tensor::full([1, 2, 2], a), 1.0).unwrap();
        let pb = psnr(&x, &Tensor::full([1, 2, 2], b), 1.0).unwrap();
        prop_assert!(pa > pb);
    }
}
