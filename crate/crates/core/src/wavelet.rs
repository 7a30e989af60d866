//! One-level separable 2-D discrete wavelet transform.
//!
//! Analysis filters rows (along the width) first, then columns, and packs
//! the four subbands as channel blocks `[LL | LH | HL | HH]`, each holding
//! all `C` input channels. For an input `C×H×W` the packed result is
//! `4C×H/2×W/2`. For Haar on a 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a + b - c - d) / 2
//! HL = (a - b + c - d) / 2    HH = (a - b - c + d) / 2
//! ```

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Two-tap analysis filter pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveletFilter {
    scaling: [f64; 2],
    detail: [f64; 2],
}

impl WaveletFilter {
    pub fn haar() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        WaveletFilter { scaling: [s, s], detail: [s, -s] }
    }

    /// Rejects filter pairs that are not orthonormal (tolerance 1e-12); the
    /// inverse transform is exact only for those.
    pub fn new(scaling: [f64; 2], detail: [f64; 2]) -> Result<Self> {
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let ok = (dot(scaling, scaling) - 1.0).abs() < 1e-12
            && (dot(detail, detail) - 1.0).abs() < 1e-12
            && dot(scaling, detail).abs() < 1e-12;
        if !ok {
            return Err(Error::Contract(format!(
                "wavelet filter pair {scaling:?} / {detail:?} is not orthonormal"
            )));
        }
        Ok(WaveletFilter { scaling, detail })
    }

    pub fn scaling(&self) -> [f64; 2] {
        self.scaling
    }

    pub fn detail(&self) -> [f64; 2] {
        self.detail
    }

    pub(crate) fn coeffs<T: Real>(&self) -> [T; 4] {
        [
            T::lit(self.scaling[0]),
            T::lit(self.scaling[1]),
            T::lit(self.detail[0]),
            T::lit(self.detail[1]),
        ]
    }
}

impl Default for WaveletFilter {
    fn default() -> Self {
        Self::haar()
    }
}

/// Packed subbands `4C×H/2×W/2`, channel blocks ordered LL, LH, HL, HH.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandTensor<T> {
    packed: Tensor<T>,
}

impl<T: Real> SubbandTensor<T> {
    pub fn from_packed(packed: Tensor<T>) -> Result<Self> {
        let (c4, _, _) = packed.dims3()?;
        if c4 % 4 != 0 {
            return Err(Error::Dimension(format!(
                "packed subbands need a channel count divisible by 4, got {:?}",
                packed.shape()
            )));
        }
        Ok(SubbandTensor { packed })
    }

    pub fn packed(&self) -> &Tensor<T> {
        &self.packed
    }

    pub fn into_packed(self) -> Tensor<T> {
        self.packed
    }

    /// Channels of the pre-transform tensor.
    pub fn base_channels(&self) -> usize {
        self.packed.shape()[0] / 4
    }

    /// One subband block (0 = LL, 1 = LH, 2 = HL, 3 = HH) as `C×H/2×W/2`.
    pub fn band(&self, idx: usize) -> Tensor<T> {
        let (c4, h, w) = self.packed.dims3().expect("validated on construction");
        let c = c4 / 4;
        let span = c * h * w;
        Tensor::new([c, h, w], self.packed.data()[idx * span..(idx + 1) * span].to_vec()).expect("band")
    }
}

pub fn dwt2<T: Real>(x: &Tensor<T>, filter: &WaveletFilter) -> Result<SubbandTensor<T>> {
    Ok(SubbandTensor { packed: analysis(x, &filter.coeffs())? })
}

pub fn idwt2<T: Real>(s: &SubbandTensor<T>, filter: &WaveletFilter) -> Result<Tensor<T>> {
    synthesis(&s.packed, &filter.coeffs())
}

/// Forward analysis on a raw `C×H×W` tensor with coefficients `[s0, s1, d0, d1]`.
pub(crate) fn analysis<T: Real>(x: &Tensor<T>, f: &[T; 4]) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Parity { op: "dwt2", shape: x.shape().to_vec() });
    }
    let [s0, s1, d0, d1] = *f;
    let (ho, wo) = (h / 2, w / 2);
    let band = c * ho * wo;
    let mut out = vec![T::zero(); 4 * band];
    let src = x.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..ho {
            let top = &plane[2 * i * w..(2 * i + 1) * w];
            let bot = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..wo {
                let (a, b) = (top[2 * j], top[2 * j + 1]);
                let (cc, d) = (bot[2 * j], bot[2 * j + 1]);
                // along the width
                let lo_t = s0 * a + s1 * b;
                let hi_t = d0 * a + d1 * b;
                let lo_b = s0 * cc + s1 * d;
                let hi_b = d0 * cc + d1 * d;
                // along the height
                let at = ch * ho * wo + i * wo + j;
                out[at] = s0 * lo_t + s1 * lo_b;
                out[band + at] = d0 * lo_t + d1 * lo_b;
                out[2 * band + at] = s0 * hi_t + s1 * hi_b;
                out[3 * band + at] = d0 * hi_t + d1 * hi_b;
            }
        }
    }
    Tensor::new([4 * c, ho, wo], out)
}

/// Transpose of [`analysis`]; its inverse when the filter pair is orthonormal.
pub(crate) fn synthesis<T: Real>(s: &Tensor<T>, f: &[T; 4]) -> Result<Tensor<T>> {
    let (c4, ho, wo) = s.dims3()?;
    if c4 % 4 != 0 {
        return Err(Error::Dimension(format!(
            "idwt2 needs a channel count divisible by 4, got {:?}",
            s.shape()
        )));
    }
    let [s0, s1, d0, d1] = *f;
    let c = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let band = c * ho * wo;
    let src = s.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let at = ch * ho * wo + i * wo + j;
                let (ll, lh, hl, hh) = (src[at], src[band + at], src[2 * band + at], src[3 * band + at]);
                let lo_t = s0 * ll + d0 * lh;
                let lo_b = s1 * ll + d1 * lh;
                let hi_t = s0 * hl + d0 * hh;
                let hi_b = s1 * hl + d1 * hh;
                plane[2 * i * w + 2 * j] = s0 * lo_t + d0 * hi_t;
                plane[2 * i * w + 2 * j + 1] = s1 * lo_t + d1 * hi_t;
                plane[(2 * i + 1) * w + 2 * j] = s0 * lo_b + d0 * hi_b;
                plane[(2 * i + 1) * w + 2 * j + 1] = s1 * lo_b + d1 * hi_b;
            }
        }
    }
    Tensor::new([c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn haar_is_orthonormal() {
        let f = WaveletFilter::haar();
        let [s0, s1] = f.scaling();
        let [d0, d1] = f.detail();
        assert!((s0 * s0 + s1 * s1 - 1.0).abs() < 1e-15);
        assert!((d0 * d0 + d1 * d1 - 1.0).abs() < 1e-15);
        assert!((s0 * d0 + s1 * d1).abs() < 1e-15);
        assert!(WaveletFilter::new([1.0, 1.0], [1.0, -1.0]).is_err());
    }

    #[test]
    fn constant_block_has_only_ll() {
        let c = 0.7;
        let x = Tensor::<f64>::full([1, 2, 2], c);
        let s = dwt2(&x, &WaveletFilter::haar()).unwrap();
        let p = s.packed().data();
        assert!((p[0] - 2.0 * c).abs() < 1e-15);
        assert!(p[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn two_by_two_closed_form() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
        let x = Tensor::<f64>::from_slice([1, 2, 2], &[a, b, c, d]).unwrap();
        let p = dwt2(&x, &WaveletFilter::haar()).unwrap().into_packed();
        let expect = [(a + b + c + d) / 2.0, (a + b - c - d) / 2.0, (a - b + c - d) / 2.0, (a - b - c + d) / 2.0];
        for (got, want) in p.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn inverse_of_constant_ll() {
        let c = 0.3;
        let p = Tensor::<f64>::from_slice([4, 1, 1], &[2.0 * c, 0.0, 0.0, 0.0]).unwrap();
        let x = idwt2(&SubbandTensor::from_packed(p).unwrap(), &WaveletFilter::haar()).unwrap();
        assert!(x.data().iter().all(|v| (v - c).abs() < 1e-15));
        let zeros = SubbandTensor::from_packed(Tensor::<f64>::zeros([8, 3, 3])).unwrap();
        assert!(idwt2(&zeros, &WaveletFilter::haar()).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_extent_is_parity_error() {
        let x = Tensor::<f32>::zeros([2, 5, 4]);
        assert!(matches!(dwt2(&x, &WaveletFilter::haar()), Err(Error::Parity { .. })));
        let bad = Tensor::<f32>::zeros([6, 2, 2]);
        assert!(matches!(SubbandTensor::from_packed(bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn round_trips_in_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([3, 8, 8], &mut rng);
        let f = WaveletFilter::haar();
        let back = idwt2(&dwt2(&x, &f).unwrap(), &f).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);

        let s = SubbandTensor::from_packed(Tensor::<f64>::randn([12, 4, 4], &mut rng)).unwrap();
        let again = dwt2(&idwt2(&s, &f).unwrap(), &f).unwrap();
        assert!(again.packed().max_abs_diff(s.packed()) < 1e-10);
    }

    #[test]
    fn packing_matches_reference_shape() {
        let x = Tensor::<f32>::zeros([32, 64, 64]);
        let s = dwt2(&x, &WaveletFilter::haar()).unwrap();
        assert_eq!(s.packed().shape(), &[128, 32, 32]);
        assert_eq!(s.base_channels(), 32);
        assert_eq!(s.band(3).shape(), &[32, 32, 32]);
    }

    proptest! {
        #[test]
        fn linear_and_energy_preserving(
            seed in any::<u64>(),
            c in 1usize..5,
            h in 1usize..9,
            w in 1usize..9,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = WaveletFilter::haar();
            let x = Tensor::<f64>::randn([c, 2 * h, 2 * w], &mut rng);
            let y = Tensor::<f64>::randn([c, 2 * h, 2 * w], &mut rng);
            let dx = dwt2(&x, &f).unwrap().into_packed();
            let dy = dwt2(&y, &f).unwrap().into_packed();
            let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let dc = dwt2(&combo, &f).unwrap().into_packed();
            let expect = dx.zip_map(&dy, |p, q| a * p + b * q).unwrap();
            prop_assert!(dc.max_abs_diff(&expect) < 1e-6);
            let ex = x.sum_sq();
            prop_assert!((ex - dx.sum_sq()).abs() / ex < 1e-6);
        }
    }
}
