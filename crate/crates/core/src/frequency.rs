//! Multi-band DCT decomposition producing the frequency-map input stream.
//!
//! Each colour plane is transformed with a whole-frame orthonormal DCT, split
//! into low, middle and high bands along anti-diagonals `u + v`, and each band
//! is mapped back to the pixel domain. The three band images, each scaled by a
//! learnable weight in `(0, 1)`, are stacked on the channel axis.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{DctPlan, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Low, Band::Mid, Band::High];

    pub fn name(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::Mid => "mid",
            Band::High => "high",
        }
    }
}

/// Band membership of every DCT coefficient of an `h x w` plane.
#[derive(Clone, Debug)]
pub struct BandFilters {
    pub h: usize,
    pub w: usize,
    pub tau1: usize,
    pub tau2: usize,
}

/// Coefficient `(u, v)` is low when `u + v < tau1`, middle when
/// `tau1 <= u + v < tau2`, otherwise high, with `tau1 = ceil((h + w) / 16)` and
/// `tau2 = ceil((h + w) / 8)`.
pub fn build_band_filters(h: usize, w: usize) -> Result<BandFilters> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!("band filters need h, w >= 2, got {h}x{w}")));
    }
    Ok(BandFilters {
        h,
        w,
        tau1: (h + w).div_ceil(16),
        tau2: (h + w).div_ceil(8),
    })
}

impl BandFilters {
    pub fn band_of(&self, u: usize, v: usize) -> Band {
        let s = u + v;
        if s < self.tau1 {
            Band::Low
        } else if s < self.tau2 {
            Band::Mid
        } else {
            Band::High
        }
    }

    /// `{0, 1}` mask of one band over the `[h, w]` coefficient grid.
    pub fn mask<T: Scalar>(&self, band: Band) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w], |i| {
            if self.band_of(i / self.w, i % self.w) == band {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Per-coefficient band index (0 low, 1 mid, 2 high), row-major.
    fn labels(&self) -> Vec<u8> {
        (0..self.h * self.w)
            .map(|i| self.band_of(i / self.w, i % self.w) as u8)
            .collect()
    }
}

/// Unweighted band images `Y_low, Y_mid, Y_high` of every `[h, w]` plane of
/// `x` (any leading axes). Each output has the shape of `x`.
pub fn band_components<T: Scalar>(x: &Tensor<T>, filters: &BandFilters) -> Result<[Tensor<T>; 3]> {
    let (h, w) = (filters.h, filters.w);
    if x.ndim() < 2 || x.shape()[x.ndim() - 2..] != [h, w] {
        return Err(Error::shape(
            "band_components",
            format!("filters built for {h}x{w}, input {:?}", x.shape()),
        ));
    }
    let plan = DctPlan::new(h, w);
    let labels = filters.labels();
    let mut outs: [Vec<T>; 3] = std::array::from_fn(|_| vec![T::zero(); x.numel()]);
    let mut spec = vec![T::zero(); h * w];
    let mut part = vec![T::zero(); h * w];
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        plan.apply(plane, &mut spec, false);
        for (band, out) in outs.iter_mut().enumerate() {
            for ((dst, &s), &l) in part.iter_mut().zip(&spec).zip(&labels) {
                *dst = if l as usize == band { s } else { T::zero() };
            }
            plan.apply(&part, &mut out[p * h * w..(p + 1) * h * w], true);
        }
    }
    let [a, b, c] = outs;
    Ok([
        Tensor::new(x.shape(), a)?,
        Tensor::new(x.shape(), b)?,
        Tensor::new(x.shape(), c)?,
    ])
}

/// Frequency map of one RGB frame `[3, h, w] -> [9, h, w]` with fixed band
/// weights `alphas`; channels are `[low x 3, mid x 3, high x 3]`.
pub fn decompose<T: Scalar>(x_rgb: &Tensor<T>, filters: &BandFilters, alphas: [T; 3]) -> Result<Tensor<T>> {
    if x_rgb.ndim() != 3 || x_rgb.shape()[0] != 3 {
        return Err(Error::shape("decompose", format!("expected [3, h, w], got {:?}", x_rgb.shape())));
    }
    let comps = band_components(x_rgb, filters)?;
    let scaled: Vec<Tensor<T>> = comps
        .iter()
        .zip(alphas)
        .map(|(c, a)| c.map(|v| v * a).unsqueeze0())
        .collect();
    let refs: Vec<&Tensor<T>> = scaled.iter().collect();
    let (h, w) = (filters.h, filters.w);
    Tensor::concat_channels(&refs)?.reshape(&[9, h, w])
}

/// Learnable band weights `alpha_i = sigmoid(raw_i)`, raw initialized to 0.
#[derive(Clone, Debug)]
pub struct BandWeights {
    pub raw: [ParamId; 3],
}

impl BandWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        let mut ids = Vec::with_capacity(3);
        for band in Band::ALL {
            ids.push(store.add_param(format!("{name}.raw_{}", band.name()), Tensor::zeros(&[1]))?);
        }
        Ok(BandWeights {
            raw: [ids[0], ids[1], ids[2]],
        })
    }

    pub fn alphas<T: Scalar>(&self, store: &ParamStore<T>) -> [T; 3] {
        self.raw.map(|id| crate::tensor::sigmoid_scalar(store.value(id).item()))
    }

    /// Weighted frequency map from precomputed `[n, 3, ...]` band components,
    /// giving `[n, 9, ...]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, components: [Tensor<T>; 3]) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        for (comp, raw) in components.into_iter().zip(self.raw) {
            let y = g.input(comp);
            let r = g.param(raw);
            let alpha = g.sigmoid(r);
            parts.push(g.scalar_mul(alpha, y)?);
        }
        g.concat(&parts)
    }
}
