use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// On-disk element type code of the tensor container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        beta: Self,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $dtype:expr, $gemm:path, $n:expr) => {
        impl Real for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: extents were checked above against the slice lengths and the
                // strides address a dense row-major (or transposed) layout inside them.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $n];
                buf.copy_from_slice(&bytes[..$n]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_real!(f64, DType::F64, matrixmultiply::dgemm, 8);
