//! Residual 3D CNN stream with three level taps.

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv3d, ConvBn};
use crate::tensor::{Conv3dGeometry, Scalar};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
    /// `(t, h, w)` stride of the first block.
    pub stride: [usize; 3],
}

/// Stem plus three stages; stage outputs are the low, mid and high taps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_stride: [usize; 3],
    pub stages: [StageConfig; 3],
}

impl Default for BackboneConfig {
    /// 8-channel stem and stages of 16, 32 and 64 channels, one block each.
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 8,
            stem_stride: [1, 2, 2],
            stages: [
                StageConfig {
                    channels: 16,
                    blocks: 1,
                    stride: [1, 1, 1],
                },
                StageConfig {
                    channels: 32,
                    blocks: 1,
                    stride: [2, 2, 2],
                },
                StageConfig {
                    channels: 64,
                    blocks: 1,
                    stride: [2, 2, 2],
                },
            ],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::Config("stem channels must be positive".into()));
        }
        let widths: Vec<usize> = self.stages.iter().map(|s| s.channels).collect();
        if widths[0] == 0 || widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("tap widths must strictly increase, got {widths:?}")));
        }
        let strides = self.stages.iter().map(|s| s.stride).chain([self.stem_stride]);
        for s in strides {
            if s.contains(&0) {
                return Err(Error::Config(format!("zero stride in {s:?}")));
            }
        }
        if self.stages.iter().any(|s| s.blocks == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        self.stages.clone().map(|s| s.channels)
    }

    /// `(d, h, w)` of each tap for a `(d, h, w)` input; temporal strides are
    /// ignored when `temporal` is false.
    pub fn tap_dims(&self, input: [usize; 3], temporal: bool) -> [[usize; 3]; 3] {
        let step = |dims: [usize; 3], stride: [usize; 3]| {
            let mut out = dims;
            for a in 0..3 {
                let s = if a == 0 && !temporal { 1 } else { stride[a] };
                // Kernel 3, padding 1.
                out[a] = (dims[a] - 1) / s + 1;
            }
            out
        };
        let mut dims = step(input, self.stem_stride);
        let mut taps = [[0; 3]; 3];
        for (tap, stage) in taps.iter_mut().zip(&self.stages) {
            dims = step(dims, stage.stride);
            *tap = dims;
        }
        taps
    }
}

/// Convolution geometry for 3D (`k x k x k`) or per-frame 2D (`1 x k x k`)
/// kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelMode {
    pub temporal: bool,
}

impl KernelMode {
    pub fn kernel(self, k: usize) -> [usize; 3] {
        [if self.temporal { k } else { 1 }, k, k]
    }

    pub fn geometry(self, k: usize, stride: [usize; 3]) -> Conv3dGeometry {
        let p = k / 2;
        if self.temporal {
            Conv3dGeometry::new(stride, [p, p, p])
        } else {
            Conv3dGeometry::new([1, stride[1], stride[2]], [0, p, p])
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bn<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: [usize; 3],
    mode: KernelMode,
    relu: bool,
    rng: &mut impl Rng,
) -> Result<ConvBn> {
    let conv = Conv3d::new(
        store,
        &format!("{name}.conv"),
        c_in,
        c_out,
        mode.kernel(k),
        mode.geometry(k, stride),
        false,
        1.0,
        rng,
    )?;
    let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out, 1.0)?;
    Ok(ConvBn { conv, bn, relu })
}

/// Two 3x3x3 convolutions with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: [usize; 3],
        mode: KernelMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = conv_bn(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, mode, true, rng)?;
        let conv2 = conv_bn(store, &format!("{name}.conv2"), c_out, c_out, 3, [1, 1, 1], mode, false, rng)?;
        let projects = c_in != c_out || stride != [1, 1, 1];
        let shortcut = if projects {
            Some(conv_bn(store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, mode, false, rng)?)
        } else {
            None
        };
        Ok(BasicBlock { conv1, conv2, shortcut })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.conv2.forward(g, y)?;
        let s = match &self.shortcut {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let sum = g.add(y, s)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub stem: ConvBn,
    pub stages: Vec<Vec<BasicBlock>>,
}

impl Stream {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        cfg: &BackboneConfig,
        mode: KernelMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stem = conv_bn(
            store,
            &format!("{name}.stem"),
            in_channels,
            cfg.stem_channels,
            3,
            cfg.stem_stride,
            mode,
            true,
            rng,
        )?;
        let mut c_in = cfg.stem_channels;
        let mut stages = Vec::with_capacity(3);
        for (s, stage) in cfg.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(stage.blocks);
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { [1, 1, 1] };
                blocks.push(BasicBlock::new(
                    store,
                    &format!("{name}.stage{}.block{b}", s + 1),
                    c_in,
                    stage.channels,
                    stride,
                    mode,
                    rng,
                )?);
                c_in = stage.channels;
            }
            stages.push(blocks);
        }
        Ok(Stream { stem, stages })
    }

    pub fn stem<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.stem.forward(g, x)
    }

    pub fn stage<T: Scalar>(&self, g: &mut Graph<'_, T>, level: usize, mut x: Var) -> Result<Var> {
        for block in &self.stages[level] {
            x = block.forward(g, x)?;
        }
        Ok(x)
    }
}
