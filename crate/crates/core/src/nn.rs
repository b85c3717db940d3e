//! Parameterized layers wired onto a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, NormState, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::{Conv3dGeometry, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv3dGeometry,
}

impl Conv3d {
    /// He-uniform initialization scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        geom: Conv3dGeometry,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel.iter().product::<usize>()) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let shape = [c_out, c_in, kernel[0], kernel[1], kernel[2]];
        let weight = store.add_param(format!("{name}.weight"), Tensor::uniform(&shape, -bound, bound, rng))?;
        let bias = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[c_out]))?)
        } else {
            None
        };
        Ok(Conv3d { weight, bias, geom })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv3d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: NormState,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, gamma_init: f64) -> Result<Self> {
        let gamma = store.add_param(format!("{name}.gamma"), Tensor::full(&[channels], T::lit(gamma_init)))?;
        let beta = store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?;
        Ok(BatchNorm {
            gamma,
            beta,
            state: NormState {
                running_mean,
                running_var,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, gamma, beta, self.state)
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv3d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

/// `y = x W^T + b` over `[n, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_param(
            format!("{name}.weight"),
            Tensor::uniform(&[outputs, inputs], -bound, bound, rng),
        )?;
        let bias = if bias {
            Some(store.add_param(format!("{name}.bias"), Tensor::zeros(&[outputs]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w, false, true)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}
