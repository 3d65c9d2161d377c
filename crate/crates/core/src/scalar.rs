use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar the solver and the applications are generic over: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Every finite `f64` is representable (possibly rounded)
    /// in the supported types, so this never fails for finite input.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal not representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize not representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sum of `rows` consecutive vectors of length `dim` stored row-major in `buf`, written to `out`.
///
/// Uses a pairwise tree whose shape depends only on `rows`, so the rounding is the same no
/// matter how the rows were produced.
pub fn pairwise_row_sum<T: Scalar>(buf: &[T], dim: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), dim);
    let rows = buf.len().checked_div(dim).unwrap_or(0);
    out.iter_mut().for_each(|o| *o = T::zero());
    if rows == 0 {
        return;
    }
    pairwise_rec(buf, dim, 0, rows, out);
}

const PAIRWISE_LEAF: usize = 8;

fn pairwise_rec<T: Scalar>(buf: &[T], dim: usize, lo: usize, hi: usize, out: &mut [T]) {
    if hi - lo <= PAIRWISE_LEAF {
        out.copy_from_slice(&buf[lo * dim..(lo + 1) * dim]);
        for r in lo + 1..hi {
            for (o, v) in out.iter_mut().zip(&buf[r * dim..(r + 1) * dim]) {
                *o += *v;
            }
        }
        return;
    }
    let mid = lo + (hi - lo) / 2;
    pairwise_rec(buf, dim, lo, mid, out);
    let mut right = vec![T::zero(); dim];
    pairwise_rec(buf, dim, mid, hi, &mut right);
    for (o, r) in out.iter_mut().zip(&right) {
        *o += *r;
    }
}

/// Pairwise sum of a slice of scalars.
pub fn pairwise_sum<T: Scalar>(values: &[T]) -> T {
    let mut out = [T::zero()];
    pairwise_row_sum(values, 1, &mut out);
    out[0]
}
