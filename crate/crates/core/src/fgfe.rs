//! Region-guided enhancement of low-level features.
//!
//! Region features pooled from the four face boxes are compared against the
//! temporally averaged feature map through a learnable bilinear form. The
//! resulting attention, mapped back to full resolution, gates the input
//! residually: `x + x * A'`.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::fslr::{region_pool_var, FslrBoxMatrix, NUM_REGIONS};
use crate::nn::{BatchNorm, Conv3d};
use crate::tensor::{Conv3dGeometry, PoolKind, Scalar, Tensor};

/// Initial batch-norm scale of the attention branch; small but non-zero so the
/// ReLU does not start dead.
const ATTENTION_GAMMA: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Fgfe {
    /// Similarity form `W`, `[c, 4c]`.
    pub w: ParamId,
    pub conv1: Conv3d,
    pub bn: BatchNorm,
    pub channels: usize,
    pub pool: (usize, usize),
}

/// Intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FgfeTrace {
    /// `S = X'^T W R'`, `[n, hw, d * ph * pw]`.
    pub similarity: Var,
    /// `A = X' S`, `[n, c, d * ph * pw]`.
    pub attention: Var,
    /// `A'` at feature resolution, `[n, c, d, h, w]`, non-negative.
    pub enhancement: Var,
    /// `x + x * A'`.
    pub output: Var,
}

impl Fgfe {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        pool: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((NUM_REGIONS * channels) as f64).sqrt();
        let w = store.add_param(
            format!("{name}.w"),
            Tensor::uniform(&[channels, NUM_REGIONS * channels], -bound, bound, rng),
        )?;
        let conv1 = Conv3d::new(
            store,
            &format!("{name}.conv1"),
            channels,
            channels,
            [1, 1, 1],
            Conv3dGeometry::default(),
            true,
            0.1,
            rng,
        )?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), channels, ATTENTION_GAMMA)?;
        Ok(Fgfe {
            w,
            conv1,
            bn,
            channels,
            pool,
        })
    }

    /// `x` is `[n, c, d, h, w]`; `boxes[b][t]` are sample `b`'s frame-`t` boxes
    /// projected to `(h, w)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, boxes: &[Vec<FslrBoxMatrix>]) -> Result<FgfeTrace> {
        let s = g.shape(x).to_vec();
        let &[n, c, d, h, w] = s.as_slice() else {
            return Err(Error::shape("fgfe", format!("expected [n, c, d, h, w], got {s:?}")));
        };
        if c != self.channels {
            return Err(Error::shape(
                "fgfe",
                format!("input has {c} channels, attention weights expect {}", self.channels),
            ));
        }
        let (ph, pw) = self.pool;
        let cells = d * ph * pw;

        let r = region_pool_var(g, x, boxes, ph, pw)?;
        let r = g.reshape(r, &[n, NUM_REGIONS * c, cells])?;
        let xm = g.adaptive_pool(x, PoolKind::Avg, &[1, h, w])?;
        let xm = g.reshape(xm, &[n, c, h * w])?;

        let wv = g.param(self.w);
        let wr = g.matmul(wv, r, false, false)?;
        let similarity = g.matmul(xm, wr, true, false)?;
        let attention = g.matmul(xm, similarity, false, false)?;

        let a = g.reshape(attention, &[n, c, d, ph, pw])?;
        let a = g.upsample_bilinear(a, h, w)?;
        let a = self.conv1.forward(g, a)?;
        let a = self.bn.forward(g, a)?;
        let enhancement = g.relu(a);

        let gated = g.mul(x, enhancement)?;
        let output = g.add(x, gated)?;
        Ok(FgfeTrace {
            similarity,
            attention,
            enhancement,
            output,
        })
    }
}
