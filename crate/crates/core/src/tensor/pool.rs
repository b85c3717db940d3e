use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Half-open source range of output bin `i` when `len` inputs are pooled into
/// `target` bins: `floor(i * len / target) .. ceil((i + 1) * len / target)`.
#[inline]
pub fn adaptive_bin(i: usize, len: usize, target: usize) -> (usize, usize) {
    (i * len / target, ((i + 1) * len).div_ceil(target))
}

struct PoolLayout {
    outer: usize,
    input: [usize; 3],
    target: [usize; 3],
    out_shape: Vec<usize>,
}

fn layout<T: Scalar>(x: &Tensor<T>, target: &[usize]) -> Result<PoolLayout> {
    let k = target.len();
    if k == 0 || k > 3 || k > x.ndim() {
        return Err(Error::shape(
            "adaptive_pool",
            format!("cannot pool {:?} to {target:?}", x.shape()),
        ));
    }
    let lead = x.ndim() - k;
    let trailing = &x.shape()[lead..];
    for (&t, &n) in target.iter().zip(trailing) {
        if t == 0 || t > n {
            return Err(Error::shape(
                "adaptive_pool",
                format!("target {target:?} must be within 1..={trailing:?}"),
            ));
        }
    }
    let mut input = [1; 3];
    let mut tgt = [1; 3];
    input[3 - k..].copy_from_slice(trailing);
    tgt[3 - k..].copy_from_slice(target);
    let mut out_shape = x.shape()[..lead].to_vec();
    out_shape.extend_from_slice(target);
    Ok(PoolLayout {
        outer: x.shape()[..lead].iter().product(),
        input,
        target: tgt,
        out_shape,
    })
}

/// Adaptive pooling over the trailing `target.len()` axes. For max pooling the
/// flat source index of every output cell is returned as well.
pub(crate) fn adaptive_pool_indexed<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    target: &[usize],
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let l = layout(x, target)?;
    let [a, b, c] = l.input;
    let [ta, tb, tc] = l.target;
    let vol = a * b * c;
    let out_len = l.outer * ta * tb * tc;
    let mut out = Vec::with_capacity(out_len);
    let mut arg = (kind == PoolKind::Max).then(|| Vec::with_capacity(out_len));
    for o in 0..l.outer {
        let base = o * vol;
        for i in 0..ta {
            let (i0, i1) = adaptive_bin(i, a, ta);
            for j in 0..tb {
                let (j0, j1) = adaptive_bin(j, b, tb);
                for k in 0..tc {
                    let (k0, k1) = adaptive_bin(k, c, tc);
                    match kind {
                        PoolKind::Avg => {
                            let mut s = T::zero();
                            for ii in i0..i1 {
                                for jj in j0..j1 {
                                    let row = base + (ii * b + jj) * c;
                                    s += x.data()[row + k0..row + k1].iter().copied().sum::<T>();
                                }
                            }
                            let cnt = (i1 - i0) * (j1 - j0) * (k1 - k0);
                            out.push(s / T::from_usize_lossy(cnt));
                        }
                        PoolKind::Max => {
                            let mut best = base + (i0 * b + j0) * c + k0;
                            for ii in i0..i1 {
                                for jj in j0..j1 {
                                    let row = base + (ii * b + jj) * c;
                                    for kk in k0..k1 {
                                        if x.data()[row + kk] > x.data()[best] {
                                            best = row + kk;
                                        }
                                    }
                                }
                            }
                            out.push(x.data()[best]);
                            arg.as_mut().expect("max").push(best);
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&l.out_shape, out)?, arg))
}

/// Adaptive average or max pooling of the trailing `target.len()` axes
/// (at most three) to the given sizes.
pub fn adaptive_pool<T: Scalar>(x: &Tensor<T>, kind: PoolKind, target: &[usize]) -> Result<Tensor<T>> {
    adaptive_pool_indexed(x, kind, target).map(|(t, _)| t)
}

/// Scatter the gradient of an adaptive pool back onto its input.
pub fn adaptive_pool_backward<T: Scalar>(
    input_shape: &[usize],
    kind: PoolKind,
    target: &[usize],
    grad_out: &Tensor<T>,
    argmax: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let l = layout(&probe, target)?;
    let mut gx = probe;
    match kind {
        PoolKind::Max => {
            let arg = argmax.ok_or_else(|| Error::shape("adaptive_pool_backward", "missing argmax"))?;
            for (&src, &g) in arg.iter().zip(grad_out.data()) {
                gx.data_mut()[src] += g;
            }
        }
        PoolKind::Avg => {
            let [a, b, c] = l.input;
            let [ta, tb, tc] = l.target;
            let vol = a * b * c;
            let mut idx = 0;
            for o in 0..l.outer {
                let base = o * vol;
                for i in 0..ta {
                    let (i0, i1) = adaptive_bin(i, a, ta);
                    for j in 0..tb {
                        let (j0, j1) = adaptive_bin(j, b, tb);
                        for k in 0..tc {
                            let (k0, k1) = adaptive_bin(k, c, tc);
                            let cnt = (i1 - i0) * (j1 - j0) * (k1 - k0);
                            let g = grad_out.data()[idx] / T::from_usize_lossy(cnt);
                            idx += 1;
                            for ii in i0..i1 {
                                for jj in j0..j1 {
                                    let row = base + (ii * b + jj) * c;
                                    gx.data_mut()[row + k0..row + k1].iter_mut().for_each(|v| *v += g);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Reduce every axis after `[n, c]` to a single value.
pub fn global_pool<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    if x.ndim() < 3 {
        return Err(Error::shape("global_pool", format!("need [n, c, ...], got {:?}", x.shape())));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let flat = x.clone().reshape(&[x.shape()[0], x.shape()[1], inner])?;
    adaptive_pool(&flat, kind, &[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pooling_to_own_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            assert_eq!(adaptive_pool(&x, kind, &[3, 4, 5]).unwrap(), x);
        }
    }

    #[test]
    fn global_average_of_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 2, 3, 4], 1.75);
        let g = global_pool(&x, PoolKind::Avg).unwrap();
        assert_eq!(g.shape(), &[2, 3, 1]);
        assert!(g.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn adaptive_max_matches_per_bin_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[1, 5, 5], -1.0, 1.0, &mut rng);
        for t in 1..=5 {
            let got = adaptive_pool(&x, PoolKind::Max, &[t, t]).unwrap();
            for i in 0..t {
                for j in 0..t {
                    let (r0, r1) = ((i * 5) as f64 / t as f64, ((i + 1) * 5) as f64 / t as f64);
                    let (c0, c1) = ((j * 5) as f64 / t as f64, ((j + 1) * 5) as f64 / t as f64);
                    let mut best = f64::NEG_INFINITY;
                    for r in r0.floor() as usize..r1.ceil() as usize {
                        for c in c0.floor() as usize..c1.ceil() as usize {
                            best = best.max(x.data()[r * 5 + c]);
                        }
                    }
                    assert_eq!(got.data()[i * t + j], best);
                }
            }
        }
    }

    #[test]
    fn rejects_target_larger_than_input() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3]);
        assert!(adaptive_pool(&x, PoolKind::Avg, &[4, 3]).is_err());
        assert!(adaptive_pool(&x, PoolKind::Avg, &[0, 3]).is_err());
    }

    #[test]
    fn avg_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[2, 5, 7, 3], -1.0, 1.0, &mut rng);
        let y = adaptive_pool(&x, PoolKind::Avg, &[3, 4, 2]).unwrap();
        let gy = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let gx = adaptive_pool_backward(x.shape(), PoolKind::Avg, &[3, 4, 2], &gy, None).unwrap();
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
