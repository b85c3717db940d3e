use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A logical `rows x cols` matrix view over a flat slice, possibly transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` storage, read transposed when `transpose` is set.
    pub fn new(data: &'a [T], rows: usize, cols: usize, transpose: bool) -> Self {
        if transpose {
            MatRef {
                data,
                rows: cols,
                cols: rows,
                row_stride: 1,
                col_stride: cols as isize,
            }
        } else {
            MatRef {
                data,
                rows,
                cols,
                row_stride: cols as isize,
                col_stride: 1,
            }
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out (+)= a * b` into a row-major `a.rows x b.cols` buffer.
pub fn gemm_strided<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        T::one(),
        a.data,
        a.row_stride,
        a.col_stride,
        b.data,
        b.row_stride,
        b.col_stride,
        beta,
        out,
        b.cols as isize,
        1,
    );
}

/// Real matrix product of `[m, k]` and `[k, n]` tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_strided(
        MatRef::new(a.data(), m, k, false),
        MatRef::new(b.data(), k, n, false),
        &mut out,
        false,
    );
    Tensor::new(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let z = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matmul(&a, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::uniform(&[7, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
    }
}
