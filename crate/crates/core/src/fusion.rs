//! Cross-domain merging: cross attention between the two streams, channel
//! attention fusion of each level, and the weighted multi-level ensemble.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, ConvBn, Linear};
use crate::tensor::{adaptive_pool, sigmoid_scalar, Conv3dGeometry, PoolKind, Scalar, Tensor};

fn conv_bn_relu<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut impl Rng,
) -> Result<ConvBn> {
    Ok(ConvBn {
        conv: Conv3d::new(store, &format!("{name}.conv"), c_in, c_out, [1, 1, 1], Conv3dGeometry::default(), false, 1.0, rng)?,
        bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, 1.0)?,
        relu: true,
    })
}

fn expect_pair<T: Scalar>(g: &Graph<'_, T>, x: Var, xf: Var, op: &'static str, channels: usize) -> Result<()> {
    if g.shape(x) != g.shape(xf) {
        return Err(Error::shape(op, format!("stream shapes differ: {:?} vs {:?}", g.shape(x), g.shape(xf))));
    }
    if g.shape(x).len() < 3 || g.shape(x)[1] != channels {
        return Err(Error::shape(op, format!("expected [n, {channels}, ...], got {:?}", g.shape(x))));
    }
    Ok(())
}

/// Spatio-temporal attention maps computed from both streams, one per stream.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub channels: usize,
    /// `2C -> C`, 1x1x1, with norm and ReLU.
    pub reduce: ConvBn,
    /// `C -> 2`, 3x3x3, padding 1.
    pub conv3: Conv3d,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionOut {
    pub x: Var,
    pub xf: Var,
    /// Sigmoid maps `[n, 2, ...]`: channel 0 gates `x`, channel 1 gates `xf`.
    pub maps: Var,
}

impl CrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let reduce = conv_bn_relu(store, &format!("{name}.reduce"), 2 * channels, channels, rng)?;
        let conv3 = Conv3d::new(
            store,
            &format!("{name}.conv3"),
            channels,
            2,
            [3, 3, 3],
            Conv3dGeometry::new([1, 1, 1], [1, 1, 1]),
            true,
            0.5,
            rng,
        )?;
        Ok(CrossAttention { channels, reduce, conv3 })
    }

    /// 2D variant: the temporal kernel extent is 1.
    pub fn new_2d<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let reduce = conv_bn_relu(store, &format!("{name}.reduce"), 2 * channels, channels, rng)?;
        let conv3 = Conv3d::new(
            store,
            &format!("{name}.conv3"),
            channels,
            2,
            [1, 3, 3],
            Conv3dGeometry::new([1, 1, 1], [0, 1, 1]),
            true,
            0.5,
            rng,
        )?;
        Ok(CrossAttention { channels, reduce, conv3 })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, xf: Var) -> Result<CrossAttentionOut> {
        expect_pair(g, x, xf, "cross_attention", self.channels)?;
        let u = g.concat(&[x, xf])?;
        let u = self.reduce.forward(g, u)?;
        let m = self.conv3.forward(g, u)?;
        let maps = g.sigmoid(m);
        let a = g.slice_channels(maps, 0, 1)?;
        let af = g.slice_channels(maps, 1, 1)?;
        Ok(CrossAttentionOut {
            x: g.spatial_mul(x, a)?,
            xf: g.spatial_mul(xf, af)?,
            maps,
        })
    }
}

/// Squeeze-and-excitation style channel attention over the concatenated
/// streams, followed by a 1x1x1 convolution back to `C` channels.
#[derive(Clone, Debug)]
pub struct FeatureFusion {
    pub channels: usize,
    pub reduction: usize,
    /// `None` for plain concatenation (no channel attention).
    pub gate: Option<(Linear, Linear)>,
    pub out: ConvBn,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOut {
    /// Tensor entering the output convolution, `U + U * A_c` when gated.
    pub pre: Var,
    /// Channel attention `[n, 2C]` when gated.
    pub gate: Option<Var>,
    pub output: Var,
}

impl FeatureFusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        gated: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let wide = 2 * channels;
        let gate = if gated {
            if reduction == 0 || wide % reduction != 0 {
                return Err(Error::Config(format!(
                    "reduction ratio {reduction} must divide the fused width {wide}"
                )));
            }
            let hidden = wide / reduction;
            let w1 = Linear::new(store, &format!("{name}.w1"), wide, hidden, false, (3.0 / wide as f64).sqrt(), rng)?;
            let w2 = Linear::new(store, &format!("{name}.w2"), hidden, wide, false, (3.0 / hidden as f64).sqrt(), rng)?;
            Some((w1, w2))
        } else {
            None
        };
        let out = conv_bn_relu(store, &format!("{name}.out"), wide, channels, rng)?;
        Ok(FeatureFusion {
            channels,
            reduction,
            gate,
            out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, xf: Var) -> Result<FusionOut> {
        expect_pair(g, x, xf, "feature_fusion", self.channels)?;
        let u = g.concat(&[x, xf])?;
        let (pre, gate) = match &self.gate {
            Some((w1, w2)) => {
                let mut branches = Vec::with_capacity(2);
                for kind in [PoolKind::Avg, PoolKind::Max] {
                    let v = g.global_pool(u, kind)?;
                    let h = w1.forward(g, v)?;
                    let h = g.relu(h);
                    branches.push(w2.forward(g, h)?);
                }
                let s = g.add(branches[0], branches[1])?;
                let a = g.sigmoid(s);
                let gated = g.channel_mul(u, a)?;
                (g.add(u, gated)?, Some(a))
            }
            None => (u, None),
        };
        let output = self.out.forward(g, pre)?;
        Ok(FusionOut { pre, gate, output })
    }
}

/// Learnable level weights `lambda_i = sigmoid(raw_i)`, raw initialized to 0.
#[derive(Clone, Debug)]
pub struct FeatureEnsemble {
    pub raw: [ParamId; 3],
}

fn ensemble_target(shapes: [&[usize]; 3]) -> Result<Vec<usize>> {
    for s in shapes {
        if s.len() != shapes[2].len() || s.len() < 3 || s[0] != shapes[2][0] {
            return Err(Error::shape("feature_ensemble", format!("incompatible levels {shapes:?}")));
        }
    }
    let target = shapes[2][2..].to_vec();
    let ordered = |a: &[usize], b: &[usize]| a[2..].iter().zip(&b[2..]).all(|(x, y)| x <= y);
    if !ordered(shapes[2], shapes[1]) || !ordered(shapes[1], shapes[0]) {
        return Err(Error::shape(
            "feature_ensemble",
            format!("levels must shrink from low to high: {shapes:?}"),
        ));
    }
    Ok(target)
}

/// Pools low and mid levels to the high level's extent, scales each level by
/// its weight and concatenates `[low, mid, high]` on the channel axis.
pub fn feature_ensemble<T: Scalar>(levels: [&Tensor<T>; 3], lambdas: [T; 3]) -> Result<Tensor<T>> {
    let target = ensemble_target(levels.map(|t| t.shape()))?;
    let mut parts = Vec::with_capacity(3);
    for (x, l) in levels.into_iter().zip(lambdas) {
        parts.push(adaptive_pool(x, PoolKind::Avg, &target)?.map(|v| v * l));
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat_channels(&refs)
}

impl FeatureEnsemble {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        let mut ids = Vec::with_capacity(3);
        for level in ["low", "mid", "high"] {
            ids.push(store.add_param(format!("{name}.raw_{level}"), Tensor::zeros(&[1]))?);
        }
        Ok(FeatureEnsemble {
            raw: [ids[0], ids[1], ids[2]],
        })
    }

    pub fn lambdas<T: Scalar>(&self, store: &ParamStore<T>) -> [T; 3] {
        self.raw.map(|id| sigmoid_scalar(store.value(id).item()))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, levels: [Var; 3]) -> Result<Var> {
        let target = ensemble_target([g.shape(levels[0]), g.shape(levels[1]), g.shape(levels[2])])?;
        let mut parts = Vec::with_capacity(3);
        for (x, raw) in levels.into_iter().zip(self.raw) {
            let pooled = g.adaptive_pool(x, PoolKind::Avg, &target)?;
            let r = g.param(raw);
            let l = g.sigmoid(r);
            parts.push(g.scalar_mul(l, pooled)?);
        }
        g.concat(&parts)
    }
}
