use super::{Scalar, Tensor};
use crate::error::Result;

/// `max(x, 0)`, propagating NaN so corrupt inputs surface in the loss.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
}

/// Logistic function, evaluated in the branch that cannot overflow.
#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

/// Elementwise (Hadamard) product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_and_sigmoid_points() {
        let x = Tensor::<f64>::new(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::<f64>::scalar(0.0)).item(), 0.5);
        assert!(relu(&Tensor::<f64>::scalar(f64::NAN)).item().is_nan());
    }

    #[test]
    fn sigmoid_stays_open_interval_in_f64() {
        for v in [-30.0, -5.0, 0.0, 5.0, 30.0] {
            let s = sigmoid_scalar(v);
            assert!(s > 0.0 && s < 1.0, "{v} -> {s}");
        }
    }

    #[test]
    fn hadamard_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let got = mul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(got.data()[i * 3 + j], a.data()[i * 3 + j] * b.data()[i * 3 + j]);
            }
        }
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
    }
}
