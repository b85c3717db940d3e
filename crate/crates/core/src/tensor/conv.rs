use rayon::prelude::*;

use super::linalg::{gemm_strided, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a 3D convolution, per (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dGeometry {
    fn default() -> Self {
        Conv3dGeometry {
            stride: [1; 3],
            padding: [0; 3],
        }
    }
}

impl Conv3dGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dGeometry { stride, padding }
    }
}

struct Dims {
    n: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    batched: bool,
}

impl Dims {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }
    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }
    fn patch(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }
    fn pointwise(&self, g: &Conv3dGeometry) -> bool {
        self.kernel == [1; 3] && g.stride == [1; 3] && g.padding == [0; 3]
    }
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Conv3dGeometry) -> Result<Dims> {
    let (n, xs, batched) = match x.ndim() {
        4 => (1, x.shape(), false),
        5 => (x.shape()[0], &x.shape()[1..], true),
        _ => {
            return Err(Error::shape(
                "conv3d",
                format!("input must be [c,d,h,w] or [n,c,d,h,w], got {:?}", x.shape()),
            ))
        }
    };
    w.expect_rank(5, "conv3d")?;
    let ws = w.shape();
    if ws[1] != xs[0] {
        return Err(Error::shape(
            "conv3d",
            format!("input has {} channels but weight {:?} expects {}", xs[0], ws, ws[1]),
        ));
    }
    if g.stride.contains(&0) {
        return Err(Error::shape("conv3d", "stride must be >= 1"));
    }
    let mut output = [0; 3];
    for a in 0..3 {
        let padded = xs[1 + a] + 2 * g.padding[a];
        if ws[2 + a] > padded {
            return Err(Error::shape(
                "conv3d",
                format!("kernel {:?} exceeds padded input {:?}", &ws[2..], &xs[1..]),
            ));
        }
        output[a] = (padded - ws[2 + a]) / g.stride[a] + 1;
    }
    Ok(Dims {
        n,
        c_in: xs[0],
        c_out: ws[0],
        input: [xs[1], xs[2], xs[3]],
        kernel: [ws[2], ws[3], ws[4]],
        output,
        batched,
    })
}

/// Output positions `o` in `0..out` whose source `o * stride + k - pad` lies in `0..len`.
#[inline]
fn valid_range(out: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o * stride + k - pad <= len - 1
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], d: &Dims, g: &Conv3dGeometry, col: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.output;
    let p = d.out_volume();
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    col.fill(T::zero());
    for c in 0..d.c_in {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (z0, z1) = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let (y0, y1) = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let (x0, x1) = valid_range(ow, iw, sw, e, pw);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for z in z0..z1 {
                        let iz = z * sd + a - pd;
                        for y in y0..y1 {
                            let iy = y * sh + b - ph;
                            let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let out = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if sw == 1 {
                                let ix0 = x0 + e - pw;
                                out[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for xo in x0..x1 {
                                    out[xo] = src[xo * sw + e - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &Dims, g: &Conv3dGeometry, x: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.output;
    let p = d.out_volume();
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    for c in 0..d.c_in {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (z0, z1) = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let (y0, y1) = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let (x0, x1) = valid_range(ow, iw, sw, e, pw);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &col[row * p..(row + 1) * p];
                    for z in z0..z1 {
                        let iz = z * sd + a - pd;
                        for y in y0..y1 {
                            let iy = y * sh + b - ph;
                            let base = (iz * ih + iy) * iw;
                            let s = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for xo in x0..x1 {
                                xc[base + xo * sw + e - pw] += s[xo];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn output_shape(d: &Dims) -> Vec<usize> {
    let mut shape = Vec::with_capacity(5);
    if d.batched {
        shape.push(d.n);
    }
    shape.push(d.c_out);
    shape.extend_from_slice(&d.output);
    shape
}

/// 3D cross-correlation. Accepts `[c, d, h, w]` or batched `[n, c, d, h, w]`
/// input and a `[c_out, c_in, kd, kh, kw]` kernel.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Conv3dGeometry,
) -> Result<Tensor<T>> {
    let d = dims(x, weight, &geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(Error::shape(
                "conv3d",
                format!("bias {:?} for {} output channels", b.shape(), d.c_out),
            ));
        }
    }
    let (vin, vout, k) = (d.in_volume(), d.out_volume(), d.patch());
    let mut out = vec![T::zero(); d.n * d.c_out * vout];
    let pointwise = d.pointwise(&geom);
    out.par_chunks_mut(d.c_out * vout)
        .enumerate()
        .for_each(|(i, y)| {
            let xi = &x.data()[i * d.c_in * vin..(i + 1) * d.c_in * vin];
            let wmat = MatRef::new(weight.data(), d.c_out, k, false);
            if pointwise {
                gemm_strided(wmat, MatRef::new(xi, d.c_in, vin, false), y, false);
            } else {
                let mut col = vec![T::zero(); k * vout];
                im2col(xi, &d, &geom, &mut col);
                gemm_strided(wmat, MatRef::new(&col, k, vout, false), y, false);
            }
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(vout).enumerate() {
                    let bv = b.data()[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Tensor::new(&output_shape(&d), out)
}

/// Gradients of [`conv3d`] given the upstream gradient.
///
/// Returns `(grad_input, grad_weight, grad_bias)`; the input gradient is only
/// computed when `need_input` is set.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: Conv3dGeometry,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let d = dims(x, weight, &geom)?;
    if grad_out.shape() != output_shape(&d).as_slice() {
        return Err(Error::shape(
            "conv3d_backward",
            format!("grad {:?} vs output {:?}", grad_out.shape(), output_shape(&d)),
        ));
    }
    let (vin, vout, k) = (d.in_volume(), d.out_volume(), d.patch());
    let pointwise = d.pointwise(&geom);

    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..d.n)
        .into_par_iter()
        .map(|i| {
            let xi = &x.data()[i * d.c_in * vin..(i + 1) * d.c_in * vin];
            let gy = &grad_out.data()[i * d.c_out * vout..(i + 1) * d.c_out * vout];
            let gy_mat = MatRef::new(gy, d.c_out, vout, false);
            let gb: Vec<T> = gy.chunks(vout).map(|p| p.iter().copied().sum()).collect();
            let mut gw = vec![T::zero(); d.c_out * k];
            let wt = MatRef::new(weight.data(), d.c_out, k, false).t();
            let gx = if pointwise {
                gemm_strided(gy_mat, MatRef::new(xi, d.c_in, vin, true), &mut gw, false);
                need_input.then(|| {
                    let mut gx = vec![T::zero(); d.c_in * vin];
                    gemm_strided(wt, gy_mat, &mut gx, false);
                    gx
                })
            } else {
                let mut col = vec![T::zero(); k * vout];
                im2col(xi, &d, &geom, &mut col);
                gemm_strided(gy_mat, MatRef::new(&col, k, vout, true), &mut gw, false);
                need_input.then(|| {
                    gemm_strided(wt, gy_mat, &mut col, false);
                    let mut gx = vec![T::zero(); d.c_in * vin];
                    col2im(&col, &d, &geom, &mut gx);
                    gx
                })
            };
            (gw, gb, gx)
        })
        .collect();

    let mut gw = vec![T::zero(); d.c_out * k];
    let mut gb = vec![T::zero(); d.c_out];
    let mut gx = need_input.then(|| Vec::with_capacity(d.n * d.c_in * vin));
    for (w_i, b_i, x_i) in per_sample {
        gw.iter_mut().zip(&w_i).for_each(|(a, &b)| *a += b);
        gb.iter_mut().zip(&b_i).for_each(|(a, &b)| *a += b);
        if let (Some(acc), Some(part)) = (gx.as_mut(), x_i) {
            acc.extend_from_slice(&part);
        }
    }
    let gx = match gx {
        Some(v) => Some(Tensor::new(x.shape(), v)?),
        None => None,
    };
    Ok((
        gx,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[d.c_out], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops over (c_out, z, y, x) x (c_in, kernel offsets).
    fn direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: Conv3dGeometry) -> Tensor<f64> {
        let (ci, id, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
        let od = (id + 2 * g.padding[0] - kd) / g.stride[0] + 1;
        let oh = (ih + 2 * g.padding[1] - kh) / g.stride[1] + 1;
        let ow = (iw + 2 * g.padding[2] - kw) / g.stride[2] + 1;
        let at = |c: usize, z: isize, y: isize, xx: isize| -> f64 {
            if z < 0 || y < 0 || xx < 0 || z >= id as isize || y >= ih as isize || xx >= iw as isize {
                0.0
            } else {
                x.data()[((c * id + z as usize) * ih + y as usize) * iw + xx as usize]
            }
        };
        Tensor::from_fn(&[co, od, oh, ow], |idx| {
            let o = idx / (od * oh * ow);
            let z = idx / (oh * ow) % od;
            let y = idx / ow % oh;
            let xo = idx % ow;
            let mut acc = b.data()[o];
            for c in 0..ci {
                for a in 0..kd {
                    for bb in 0..kh {
                        for e in 0..kw {
                            let wv = w.data()[(((o * ci + c) * kd + a) * kh + bb) * kw + e];
                            acc += wv
                                * at(
                                    c,
                                    (z * g.stride[0] + a) as isize - g.padding[0] as isize,
                                    (y * g.stride[1] + bb) as isize - g.padding[1] as isize,
                                    (xo * g.stride[2] + e) as isize - g.padding[2] as isize,
                                );
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform(&[1, 3, 4, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::ones(&[1, 1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv3d(&x, &w, Some(&b), Conv3dGeometry::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn averaging_kernel_on_ones() {
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let w = Tensor::full(&[1, 1, 2, 2, 2], 0.125);
        let y = conv3d(&x, &w, None, Conv3dGeometry::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 1.0);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[3], -1.0, 1.0, &mut rng);
        for g in [
            Conv3dGeometry::new([1; 3], [1; 3]),
            Conv3dGeometry::new([1, 2, 2], [1; 3]),
            Conv3dGeometry::new([2, 1, 3], [0, 1, 2]),
        ] {
            let got = conv3d(&x, &w, Some(&b), g).unwrap();
            let want = direct(&x, &w, &b, g);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) <= 1e-12, "{g:?}");
        }
    }

    #[test]
    fn batched_equals_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[3, 2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[4, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let g = Conv3dGeometry::new([1, 2, 2], [1; 3]);
        let batched = conv3d(&x, &w, None, g).unwrap();
        let per = 2 * 3 * 4 * 4;
        let out_per = batched.numel() / 3;
        for i in 0..3 {
            let xi = Tensor::new(&[2, 3, 4, 4], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let yi = conv3d(&xi, &w, None, g).unwrap();
            assert_eq!(yi.data(), &batched.data()[i * out_per..(i + 1) * out_per]);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::<f64>::zeros(&[2, 3, 3, 3]);
        let w = Tensor::<f64>::zeros(&[1, 3, 1, 1, 1]);
        let err = conv3d(&x, &w, None, Conv3dGeometry::default()).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let w = Tensor::<f64>::zeros(&[1, 2, 5, 1, 1]);
        assert!(conv3d(&x, &w, None, Conv3dGeometry::default()).is_err());
    }

    #[test]
    fn backward_matches_adjoint_identity() {
        // <conv(x), gy> == <x, conv^T(gy)> and == <w, dW>
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(&[2, 2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let g = Conv3dGeometry::new([1, 2, 1], [1; 3]);
        let y = conv3d(&x, &w, None, g).unwrap();
        let gy = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let (gx, gw, _) = conv3d_backward(&x, &w, &gy, g, true).unwrap();
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(gx.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
