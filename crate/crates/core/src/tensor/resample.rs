use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Source coordinate and interpolation weight pairs for one output axis under
/// the align-corners convention: output 0 maps to input 0 and output `out-1`
/// maps to input `len-1`.
fn axis_taps(out: usize, len: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            if out == 1 || len == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (len - 1) as f64 / (out - 1) as f64;
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn check<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "bilinear_upsample2d",
            format!("cannot resample {:?} to {out_h}x{out_w}", x.shape()),
        ));
    }
    let r = x.ndim();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    Ok((x.numel() / (h * w), h, w))
}

fn out_shape<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Vec<usize> {
    let mut s = x.shape().to_vec();
    let r = s.len();
    s[r - 2] = out_h;
    s[r - 1] = out_w;
    s
}

/// Align-corners bilinear resampling of the last two axes.
pub fn bilinear_upsample2d<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = check(x, out_h, out_w)?;
    let rows = axis_taps(out_h, h);
    let cols = axis_taps(out_w, w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            let fr = T::lit(fr);
            for &(c0, c1, fc) in &cols {
                let fc = T::lit(fc);
                let top = src[r0 * w + c0] * (T::one() - fc) + src[r0 * w + c1] * fc;
                let bot = src[r1 * w + c0] * (T::one() - fc) + src[r1 * w + c1] * fc;
                out.push(top * (T::one() - fr) + bot * fr);
            }
        }
    }
    Tensor::new(&out_shape(x, out_h, out_w), out)
}

/// Adjoint of [`bilinear_upsample2d`]: scatters output gradients back.
pub fn bilinear_upsample2d_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let r = grad_out.ndim();
    let (out_h, out_w) = (grad_out.shape()[r - 2], grad_out.shape()[r - 1]);
    let (planes, h, w) = check(&probe, out_h, out_w)?;
    if out_shape(&probe, out_h, out_w) != grad_out.shape() {
        return Err(Error::shape("bilinear_upsample2d_backward", "gradient shape mismatch"));
    }
    let rows = axis_taps(out_h, h);
    let cols = axis_taps(out_w, w);
    let mut gx = probe;
    let gd = grad_out.data();
    for p in 0..planes {
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        let g = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            let fr = T::lit(fr);
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let fc = T::lit(fc);
                let v = g[i * out_w + j];
                dst[r0 * w + c0] += v * (T::one() - fr) * (T::one() - fc);
                dst[r0 * w + c1] += v * (T::one() - fr) * fc;
                dst[r1 * w + c0] += v * fr * (T::one() - fc);
                dst[r1 * w + c1] += v * fr * fc;
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 0.3);
        let y = bilinear_upsample2d(&x, 9, 7).unwrap();
        assert_eq!(y.shape(), &[2, 3, 9, 7]);
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn single_pixel_replicates() {
        let x = Tensor::<f64>::full(&[1, 1, 1], 2.5);
        let y = bilinear_upsample2d(&x, 3, 4).unwrap();
        assert_eq!(y.data(), &[2.5; 12]);
    }

    #[test]
    fn affine_ramp_stays_affine() {
        let (h, w) = (4, 6);
        let x = Tensor::<f64>::from_fn(&[h, w], |i| (i / w + i % w) as f64);
        let (oh, ow) = (2 * h, 2 * w);
        let y = bilinear_upsample2d(&x, oh, ow).unwrap();
        for i in 0..oh {
            for j in 0..ow {
                let want = i as f64 * (h - 1) as f64 / (oh - 1) as f64 + j as f64 * (w - 1) as f64 / (ow - 1) as f64;
                assert!((y.data()[i * ow + j] - want).abs() <= 1e-12);
            }
        }
        // corners map to corners
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[oh * ow - 1], (h - 1 + w - 1) as f64);
    }
}
