//! Floating-point scalar abstraction shared by the whole pipeline.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Real scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c ← a·b + beta·c` for an `m×k` times `k×n` product with explicit
    /// row/column strides.
    fn gemm(dims: [usize; 3], a: (&[Self], [usize; 2]), b: (&[Self], [usize; 2]), beta: Self, c: (&mut [Self], [usize; 2]));

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    fn gemm(dims: [usize; 3], a: (&[Self], [usize; 2]), b: (&[Self], [usize; 2]), beta: Self, c: (&mut [Self], [usize; 2])) {
        let [m, k, n] = dims;
        check_extent(a.0.len(), m, k, a.1);
        check_extent(b.0.len(), k, n, b.1);
        check_extent(c.0.len(), m, n, c.1);
        // SAFETY: every index reachable through the strides lies inside the slices
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1[0] as isize,
                a.1[1] as isize,
                b.0.as_ptr(),
                b.1[0] as isize,
                b.1[1] as isize,
                beta,
                c.0.as_mut_ptr(),
                c.1[0] as isize,
                c.1[1] as isize,
            )
        }
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    fn gemm(dims: [usize; 3], a: (&[Self], [usize; 2]), b: (&[Self], [usize; 2]), beta: Self, c: (&mut [Self], [usize; 2])) {
        let [m, k, n] = dims;
        check_extent(a.0.len(), m, k, a.1);
        check_extent(b.0.len(), k, n, b.1);
        check_extent(c.0.len(), m, n, c.1);
        // SAFETY: every index reachable through the strides lies inside the slices
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1[0] as isize,
                a.1[1] as isize,
                b.0.as_ptr(),
                b.1[0] as isize,
                b.1[1] as isize,
                beta,
                c.0.as_mut_ptr(),
                c.1[0] as isize,
                c.1[1] as isize,
            )
        }
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: [usize; 2]) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * strides[0] + (cols - 1) * strides[1] < len, "gemm operand out of bounds");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_roundtrip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-2.25f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..]), -2.25);
    }

    #[test]
    fn gemm_small_product() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] plus 1·c
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [1.0f64; 4];
        f64::gemm([2, 2, 2], (&a, [2, 1]), (&b, [2, 1]), 1.0, (&mut c, [2, 1]));
        assert_eq!(c, [20.0, 23.0, 44.0, 51.0]);
        // transposed a via strides
        let mut d = [0.0f32; 4];
        let a32 = [1.0f32, 2.0, 3.0, 4.0];
        let b32 = [5.0f32, 6.0, 7.0, 8.0];
        f32::gemm([2, 2, 2], (&a32, [1, 2]), (&b32, [2, 1]), 0.0, (&mut d, [2, 1]));
        assert_eq!(d, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn dtype_tags() {
        assert_eq!(DType::from_tag(f32::DTYPE.tag()), Some(DType::F32));
        assert_eq!(DType::from_tag(f64::DTYPE.tag()), Some(DType::F64));
        assert_eq!(DType::from_tag(3), None);
    }
}
