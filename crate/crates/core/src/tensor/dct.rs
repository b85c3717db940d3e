//! Orthonormal type-II DCT over whole frames.
//!
//! With `C[k][n] = s_k cos(pi (2n + 1) k / 2N)`, `s_0 = sqrt(1/N)` and
//! `s_k = sqrt(2/N)` otherwise, `C` is orthogonal, so the 2D transform
//! `C_h X C_w^T` preserves energy and its inverse is `C_h^T Y C_w`.

use std::f64::consts::PI;

use super::linalg::{gemm_strided, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// The `n x n` orthonormal DCT-II basis, rows indexed by frequency.
pub fn dct_matrix<T: Scalar>(n: usize) -> Vec<T> {
    let mut m = Vec::with_capacity(n * n);
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m.push(T::lit(s * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()));
        }
    }
    m
}

/// Precomputed bases for repeated transforms of same-sized planes.
pub(crate) struct DctPlan<T> {
    h: usize,
    w: usize,
    ch: Vec<T>,
    cw: Vec<T>,
}

impl<T: Scalar> DctPlan<T> {
    pub fn new(h: usize, w: usize) -> Self {
        DctPlan {
            h,
            w,
            ch: dct_matrix(h),
            cw: dct_matrix(w),
        }
    }

    /// `out = C_h x C_w^T` (forward) or `C_h^T x C_w` (inverse).
    pub fn apply(&self, x: &[T], out: &mut [T], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![T::zero(); h * w];
        let ch = MatRef::new(&self.ch, h, h, inverse);
        gemm_strided(ch, MatRef::new(x, h, w, false), &mut tmp, false);
        let cw = MatRef::new(&self.cw, w, w, !inverse);
        gemm_strided(MatRef::new(&tmp, h, w, false), cw, out, false);
    }
}

fn transform<T: Scalar>(x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(Error::shape("dct2d", format!("expected [h, w], got {:?}", x.shape())));
    }
    let plan = DctPlan::new(x.shape()[0], x.shape()[1]);
    let mut out = vec![T::zero(); x.numel()];
    plan.apply(x.data(), &mut out, inverse);
    Tensor::new(x.shape(), out)
}

pub fn dct2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    transform(x, false)
}

pub fn idct2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    transform(x, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_has_dc_only() {
        let n = 8;
        let x = Tensor::<f64>::full(&[n, n], 0.7);
        let y = dct2d(&x).unwrap();
        assert!((y.data()[0] - 0.7 * n as f64).abs() < 1e-12);
        assert!(y.data()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::uniform(&[32, 32], -1.0, 1.0, &mut rng);
        let y = dct2d(&x).unwrap();
        assert!(idct2d(&y).unwrap().max_abs_diff(&x) <= 1e-9);
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let ey: f64 = y.data().iter().map(|v| v * v).sum();
        assert!((ex - ey).abs() <= 1e-9);
    }

    #[test]
    fn matches_direct_double_sum_on_rectangle() {
        let (h, w) = (5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::uniform(&[h, w], -1.0, 1.0, &mut rng);
        let y = dct2d(&x).unwrap();
        let s = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for u in 0..h {
            for v in 0..w {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += x.data()[i * w + j]
                            * (PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                            * (PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    }
                }
                assert!((y.data()[u * w + v] - s(u, h) * s(v, w) * acc).abs() < 1e-12);
            }
        }
    }
}
