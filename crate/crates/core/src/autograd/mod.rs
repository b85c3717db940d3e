//! Tape-based reverse-mode differentiation over [`Tensor`] kernels.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape through [`Graph::param`], which reads their current value from a
//! borrowed [`ParamStore`]; [`Graph::backward`] returns the gradients, which
//! the caller folds back into the store. Batch-norm running statistics
//! computed in training mode are collected on the graph and applied with
//! [`ParamStore::apply_stat_updates`].

mod params;

use std::collections::HashMap;

pub use params::{BufferId, ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{
    self, adaptive_pool_backward, adaptive_pool_indexed, batch_moments, bilinear_upsample2d,
    bilinear_upsample2d_backward, channel_layout, conv3d, conv3d_backward, gemm_strided, normalize,
    sigmoid_scalar, Conv3dGeometry, MatRef, PoolKind, RunningStats, Scalar, Tensor,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv3dGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScalarMul {
        s: Var,
        x: Var,
    },
    ChannelMul {
        x: Var,
        a: Var,
    },
    SpatialMul {
        x: Var,
        a: Var,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        target: Vec<usize>,
        argmax: Option<Vec<usize>>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Upsample(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Reshape(Var),
    FrameMean {
        x: Var,
        frames: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch-norm layer state as seen by the graph.
#[derive(Clone, Copy, Debug)]
pub struct NormState {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

/// Gradients produced by one backward pass, kept only for leaves.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf or parameter variable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.leaves.get(v))
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.leaves.get(v).map(|g| (*p, g)))
    }
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    training: bool,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<(BufferId, Tensor<T>)>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Graph {
            store,
            training,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Running-statistic updates gathered in training mode.
    pub fn take_stat_updates(&mut self) -> Vec<(BufferId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// A free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id), &[]);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv3dGeometry) -> Result<Var> {
        let y = conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv3d { x, w, b, geom }, &inputs))
    }

    /// Batch normalization over `[n, c, ...]`: batch statistics when the graph
    /// is in training mode, running statistics otherwise.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: NormState) -> Result<Var> {
        let (_, c, _) = channel_layout(self.value(x), "batch_norm3d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm3d", format!("{c} channels vs gamma {:?}", self.shape(gamma))));
        }
        let eps = T::lit(state.eps);
        let (mean, inv_std) = if self.training {
            let m = batch_moments(self.value(x))?;
            if m.count < 2 {
                return Err(Error::DegenerateVariance("batch_norm3d"));
            }
            let mut running = RunningStats {
                mean: self.store.buffer(state.running_mean).data().to_vec(),
                var: self.store.buffer(state.running_var).data().to_vec(),
            };
            tensor::update_running(&mut running, &m, state.momentum);
            self.stat_updates
                .push((state.running_mean, Tensor::new(&[c], running.mean)?));
            self.stat_updates
                .push((state.running_var, Tensor::new(&[c], running.var)?));
            let inv: Vec<T> = m.var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
            (m.mean, inv)
        } else {
            let mean = self.store.buffer(state.running_mean).data().to_vec();
            let inv = self
                .store
                .buffer(state.running_var)
                .data()
                .iter()
                .map(|&v| (v + eps).sqrt().recip())
                .collect();
            (mean, inv)
        };
        let ones = vec![T::one(); c];
        let zeros = vec![T::zero(); c];
        let xhat = normalize(self.value(x), &mean, &inv_std, &ones, &zeros)?;
        let y = normalize(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let batch_stats = self.training;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = tensor::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = tensor::scale(self.value(x), s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    /// `s * x` for a single-element variable `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scalar_mul", format!("scale must have one element, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).item();
        let y = tensor::scale(self.value(x), sv);
        Ok(self.push(y, Op::ScalarMul { s, x }, &[s, x]))
    }

    /// `x[n, c, ...] * a[n, c]`, one gate per sample and channel.
    pub fn channel_mul(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.value(x), "channel_mul")?;
        if self.shape(a) != [n, c] {
            return Err(Error::shape("channel_mul", format!("{:?} gate for {:?}", self.shape(a), self.shape(x))));
        }
        let mut y = self.value(x).clone();
        let gate = self.value(a).data().to_vec();
        for (i, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= gate[i]);
        }
        Ok(self.push(y, Op::ChannelMul { x, a }, &[x, a]))
    }

    /// `x[n, c, ...] * a[n, 1, ...]`, one map shared by every channel.
    pub fn spatial_mul(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.value(x), "spatial_mul")?;
        let want: Vec<usize> = [n, 1].iter().chain(&self.shape(x)[2..]).copied().collect();
        if self.shape(a) != want.as_slice() {
            return Err(Error::shape("spatial_mul", format!("{:?} map for {:?}", self.shape(a), self.shape(x))));
        }
        let mut y = self.value(x).clone();
        let map = self.value(a).data();
        for b in 0..n {
            let m = &map[b * inner..(b + 1) * inner];
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                y.data_mut()[base..base + inner]
                    .iter_mut()
                    .zip(m)
                    .for_each(|(v, &w)| *v *= w);
            }
        }
        Ok(self.push(y, Op::SpatialMul { x, a }, &[x, a]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        Ok(self.push(y, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn adaptive_pool(&mut self, x: Var, kind: PoolKind, target: &[usize]) -> Result<Var> {
        let (y, argmax) = adaptive_pool_indexed(self.value(x), kind, target)?;
        Ok(self.push(
            y,
            Op::Pool {
                x,
                kind,
                target: target.to_vec(),
                argmax,
            },
            &[x],
        ))
    }

    /// Pools every axis after `[n, c]` to one value, giving `[n, c]`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("global_pool", format!("need [n, c, ...], got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2..].iter().product()])?;
        let pooled = self.adaptive_pool(flat, kind, &[1])?;
        self.reshape(pooled, &[s[0], s[1]])
    }

    /// `y[j] = x[indices[j]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", src.len())));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::Gather { x, indices }, &[x]))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = bilinear_upsample2d(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Upsample(x), &[x]))
    }

    /// Matrix product of `op(a)` and `op(b)`, where `op` optionally transposes
    /// the last two axes. Rank-3 operands are batched; a rank-2 operand is
    /// shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let la = MatLayout::of(self.shape(a), ta)?;
        let lb = MatLayout::of(self.shape(b), tb)?;
        let batch = match (la.batch, lb.batch) {
            (None, None) => None,
            (Some(x), None) | (None, Some(x)) => Some(x),
            (Some(x), Some(y)) if x == y => Some(x),
            (Some(x), Some(y)) => return Err(Error::shape("matmul", format!("batch {x} vs {y}"))),
        };
        if la.cols != lb.rows {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?} (transpose {ta}, {tb})", self.shape(a), self.shape(b)),
            ));
        }
        let (m, n) = (la.rows, lb.cols);
        let nb = batch.unwrap_or(1);
        let mut out = vec![T::zero(); nb * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..nb {
            gemm_strided(la.view(av, i), lb.view(bv, i), &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let shape: Vec<usize> = batch.into_iter().chain([m, n]).collect();
        let y = Tensor::new(&shape, out)?;
        Ok(self.push(y, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// Adds `b[o]` along the last axis of `x[..., o]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let o = *self.shape(x).last().expect("rank >= 1");
        if self.shape(b) != [o] {
            return Err(Error::shape("add_bias", format!("{:?} bias for {:?}", self.shape(b), self.shape(x))));
        }
        let mut y = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in y.data_mut().chunks_mut(o) {
            row.iter_mut().zip(&bias).for_each(|(v, &c)| *v += c);
        }
        Ok(self.push(y, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// Averages consecutive groups of `frames` rows: `[n * frames, f] -> [n, f]`.
    pub fn frame_mean(&mut self, x: Var, frames: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || frames == 0 || s[0] % frames != 0 {
            return Err(Error::shape("frame_mean", format!("{s:?} with {frames} frames")));
        }
        let (n, f) = (s[0] / frames, s[1]);
        let inv = T::one() / T::from_usize_lossy(frames);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * f];
        for (r, row) in src.chunks(f).enumerate() {
            let dst = &mut out[(r / frames) * f..(r / frames + 1) * f];
            dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v * inv);
        }
        let y = Tensor::new(&[n, f], out)?;
        Ok(self.push(y, Op::FrameMean { x, frames }, &[x]))
    }

    /// Mean binary cross-entropy of `[n]` (or `[n, 1]`) logits against soft
    /// targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", format!("{} logits, {} targets", z.len(), targets.len())));
        }
        let mut total = T::zero();
        for (&zi, &yi) in z.iter().zip(targets) {
            // max(z, 0) - z y + ln(1 + e^{-|z|})
            total += zi.max(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let y = Tensor::scalar(total / T::from_usize_lossy(z.len()));
        Ok(self.push(
            y,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut leaves = HashMap::new();
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::Param(id) => {
                    params.push((*id, i));
                    leaves.insert(i, g);
                }
                op => {
                    for (input, gi) in self.op_backward(op, &node.value, g)? {
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&gi)?,
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_backward(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv3d { x, w, b, geom } => {
                let (gx, gw, gb) = conv3d_backward(self.value(*x), self.value(*w), &g, *geom, self.needs(*x))?;
                if let Some(gx) = gx {
                    res.push((*x, gx));
                }
                res.push((*w, gw));
                if let Some(b) = b {
                    res.push((*b, gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, inner) = channel_layout(&g, "batch_norm3d")?;
                let count = T::from_usize_lossy(n * inner);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for k in base..base + inner {
                            sum_g[ch] += g.data()[k];
                            sum_gx[ch] += g.data()[k] * xhat.data()[k];
                        }
                    }
                }
                if self.needs(*x) {
                    let gamma_v = self.value(*gamma).data();
                    let mut gx = g.clone();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let k0 = gamma_v[ch] * inv_std[ch];
                            for k in base..base + inner {
                                gx.data_mut()[k] = if *batch_stats {
                                    k0 * (g.data()[k] - sum_g[ch] / count - xhat.data()[k] * sum_gx[ch] / count)
                                } else {
                                    k0 * g.data()[k]
                                };
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                res.push((*gamma, Tensor::new(&[c], sum_gx)?));
                res.push((*beta, Tensor::new(&[c], sum_g)?));
            }
            Op::Relu(x) => {
                let gx = g.zip_map(out, "relu", |gv, y| if y > T::zero() { gv } else { T::zero() })?;
                res.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(out, "sigmoid", |gv, y| gv * y * (T::one() - y))?;
                res.push((*x, gx));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    res.push((*a, tensor::mul(&g, self.value(*b))?));
                }
                if self.needs(*b) {
                    res.push((*b, tensor::mul(&g, self.value(*a))?));
                }
            }
            Op::Scale(x, s) => res.push((*x, tensor::scale(&g, *s))),
            Op::ScalarMul { s, x } => {
                if self.needs(*s) {
                    let d: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                    res.push((*s, Tensor::new(self.shape(*s), vec![d])?));
                }
                if self.needs(*x) {
                    res.push((*x, tensor::scale(&g, self.value(*s).item())));
                }
            }
            Op::ChannelMul { x, a } => {
                let (_, _, inner) = channel_layout(&g, "channel_mul")?;
                let gate = self.value(*a).data();
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(inner).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= gate[i]);
                    }
                    res.push((*x, gx));
                }
                if self.needs(*a) {
                    let ga: Vec<T> = g
                        .data()
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&p, &q)| p * q).sum())
                        .collect();
                    res.push((*a, Tensor::new(self.shape(*a), ga)?));
                }
            }
            Op::SpatialMul { x, a } => {
                let (n, c, inner) = channel_layout(&g, "spatial_mul")?;
                let map = self.value(*a).data();
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            gx.data_mut()[base..base + inner]
                                .iter_mut()
                                .zip(&map[b * inner..(b + 1) * inner])
                                .for_each(|(v, &w)| *v *= w);
                        }
                    }
                    res.push((*x, gx));
                }
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); n * inner];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for k in 0..inner {
                                ga[b * inner + k] += g.data()[base + k] * xv[base + k];
                            }
                        }
                    }
                    res.push((*a, Tensor::new(self.shape(*a), ga)?));
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[1];
                    if self.needs(p) {
                        res.push((p, g.slice_channels(start, len)?));
                    }
                    start += len;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let len = g.shape()[1];
                let inner: usize = xs[2..].iter().product();
                let mut gx = Tensor::zeros(xs);
                for b in 0..n {
                    let dst = (b * c + start) * inner;
                    let src = b * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                res.push((*x, gx));
            }
            Op::Pool {
                x,
                kind,
                target,
                argmax,
            } => {
                let gx = adaptive_pool_backward(self.shape(*x), *kind, target, &g, argmax.as_deref())?;
                res.push((*x, gx));
            }
            Op::Gather { x, indices } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (&i, &v) in indices.iter().zip(g.data()) {
                    gx.data_mut()[i] += v;
                }
                res.push((*x, gx));
            }
            Op::Upsample(x) => {
                res.push((*x, bilinear_upsample2d_backward(self.shape(*x), &g)?));
            }
            Op::MatMul { a, b, ta, tb } => {
                let la = MatLayout::of(self.shape(*a), *ta)?;
                let lb = MatLayout::of(self.shape(*b), *tb)?;
                let (m, n) = (la.rows, lb.cols);
                let nb = g.numel() / (m * n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(self.shape(*a));
                    let stride = la.stored_rows * la.stored_cols;
                    for i in 0..nb {
                        let gi = MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n, false);
                        let off = if la.batch.is_some() { i * stride } else { 0 };
                        let dst = &mut ga.data_mut()[off..off + stride];
                        if *ta {
                            // dA (stored k x m) = op(B) * g^T
                            gemm_strided(lb.view(bv, i), gi.t(), dst, true);
                        } else {
                            gemm_strided(gi, lb.view(bv, i).t(), dst, true);
                        }
                    }
                    res.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let stride = lb.stored_rows * lb.stored_cols;
                    for i in 0..nb {
                        let gi = MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n, false);
                        let off = if lb.batch.is_some() { i * stride } else { 0 };
                        let dst = &mut gb.data_mut()[off..off + stride];
                        if *tb {
                            // dB (stored n x k) = g^T * op(A)
                            gemm_strided(gi.t(), la.view(av, i), dst, true);
                        } else {
                            gemm_strided(la.view(av, i).t(), gi, dst, true);
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::AddBias { x, b } => {
                let o = self.shape(*b)[0];
                let mut gb = vec![T::zero(); o];
                for row in g.data().chunks(o) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                res.push((*b, Tensor::new(&[o], gb)?));
                res.push((*x, g));
            }
            Op::Reshape(x) => res.push((*x, g.reshape(self.shape(*x))?)),
            Op::FrameMean { x, frames } => {
                let s = self.shape(*x);
                let f = s[1];
                let inv = T::one() / T::from_usize_lossy(*frames);
                let gx = Tensor::from_fn(s, |k| g.data()[(k / f / frames) * f + k % f] * inv);
                res.push((*x, gx));
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.item() / T::from_usize_lossy(targets.len());
                let data = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zi, &yi)| (sigmoid_scalar(zi) - yi) * scale)
                    .collect();
                res.push((*logits, Tensor::new(z.shape(), data)?));
            }
            Op::Sum(x) => res.push((*x, Tensor::full(self.shape(*x), g.item()))),
        }
        Ok(res)
    }
}

struct MatLayout {
    batch: Option<usize>,
    stored_rows: usize,
    stored_cols: usize,
    trans: bool,
    rows: usize,
    cols: usize,
}

impl MatLayout {
    fn of(shape: &[usize], trans: bool) -> Result<Self> {
        let (batch, r, c) = match *shape {
            [r, c] => (None, r, c),
            [b, r, c] => (Some(b), r, c),
            _ => return Err(Error::shape("matmul", format!("operand must be rank 2 or 3, got {shape:?}"))),
        };
        let (rows, cols) = if trans { (c, r) } else { (r, c) };
        Ok(MatLayout {
            batch,
            stored_rows: r,
            stored_cols: c,
            trans,
            rows,
            cols,
        })
    }

    fn view<'a, T>(&self, data: &'a [T], i: usize) -> MatRef<'a, T> {
        let stride = self.stored_rows * self.stored_cols;
        let off = if self.batch.is_some() { i * stride } else { 0 };
        MatRef::new(&data[off..off + stride], self.stored_rows, self.stored_cols, self.trans)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_leaves, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let w = g.leaf(Tensor::full(&[2, 3], 0.7));
        let xv = g.input(x.clone());
        let p = g.mul(w, xv).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &x);
        assert!(grads.wrt(xv).is_none());
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let z = g.leaf(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let c = 3.0;
        let y = g.scale(s, c);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(z).unwrap().item(), 0.25 * c);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let x = g.leaf(Tensor::ones(&[2]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn parameters_off_the_path_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let used = store.add_param("used", Tensor::full(&[2], 2.0)).unwrap();
        let unused = store.add_param("unused", Tensor::full(&[2], 5.0)).unwrap();
        store.param_mut(unused).grad.fill(1.5);
        let mut g = Graph::new(&store, true);
        let u = g.param(used);
        let _ = g.param(unused);
        let loss = g.sum(u);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(unused).is_none());
        store.accumulate(&grads).unwrap();
        assert_eq!(store.param(used).grad.data(), &[1.0, 1.0]);
        assert_eq!(store.param(unused).grad.data(), &[1.5, 1.5]);
    }

    #[test]
    fn elementwise_ops_pass_finite_differences() {
        let mut r = rng(21);
        let a0 = Tensor::<f64>::uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        let b0 = Tensor::<f64>::uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        let s0 = Tensor::<f64>::scalar(0.6);
        let gate0 = Tensor::<f64>::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let map0 = Tensor::<f64>::uniform(&[2, 1, 4], -1.0, 1.0, &mut r);
        let w0 = Tensor::<f64>::uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        let report = check_leaves(
            &[a0, b0, s0, gate0, map0],
            |g, v| {
                let m = g.mul(v[0], v[1])?;
                let s = g.sigmoid(m);
                let r = g.relu(v[1]);
                let t = g.add(s, r)?;
                let t = g.scalar_mul(v[2], t)?;
                let t = g.channel_mul(t, v[3])?;
                let t = g.spatial_mul(t, v[4])?;
                let w = g.input(w0.clone());
                let t = g.mul(t, w)?;
                Ok(g.sum(t))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn structural_ops_pass_finite_differences() {
        let mut r = rng(22);
        let a0 = Tensor::<f64>::uniform(&[2, 2, 3, 5, 4], -1.0, 1.0, &mut r);
        let b0 = Tensor::<f64>::uniform(&[2, 1, 3, 5, 4], -1.0, 1.0, &mut r);
        let w0 = Tensor::<f64>::uniform(&[2, 2, 3, 7, 6], -1.0, 1.0, &mut r);
        let report = check_leaves(
            &[a0, b0],
            |g, v| {
                let c = g.concat(&[v[0], v[1]])?;
                let s = g.slice_channels(c, 1, 2)?;
                let p = g.adaptive_pool(s, PoolKind::Max, &[2, 3, 3])?;
                let q = g.adaptive_pool(s, PoolKind::Avg, &[1, 2, 3])?;
                let q = g.upsample_bilinear(q, 3, 3)?;
                let q = g.reshape(q, &[2, 2, 1, 3, 3])?;
                let pq = g.adaptive_pool(p, PoolKind::Avg, &[1, 3, 3])?;
                let t = g.mul(pq, q)?;
                let u = g.upsample_bilinear(t, 7, 6)?;
                let u = g.reshape(u, &[2, 2, 1, 7, 6])?;
                let u2 = g.concat(&[u, u, u])?;
                let u2 = g.reshape(u2, &[2, 2, 3, 7, 6])?;
                let w = g.input(w0.clone());
                let t = g.mul(u2, w)?;
                Ok(g.sum(t))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn matmul_variants_pass_finite_differences() {
        let mut r = rng(23);
        let a = Tensor::<f64>::uniform(&[3, 4, 5], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::uniform(&[4, 6], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform(&[3, 2, 6], -1.0, 1.0, &mut r);
        let bias = Tensor::<f64>::uniform(&[2], -1.0, 1.0, &mut r);
        let report = check_leaves(
            &[a, w, b, bias],
            |g, v| {
                // [3,5,4] x [4,6] -> [3,5,6]; x [3,6,2] -> [3,5,2]
                let p = g.matmul(v[0], v[1], true, false)?;
                let q = g.matmul(p, v[2], false, true)?;
                let q = g.add_bias(q, v[3])?;
                let q = g.reshape(q, &[15, 2])?;
                let m = g.frame_mean(q, 5)?;
                let s = g.sigmoid(m);
                let m2 = g.mul(s, m)?;
                Ok(g.sum(m2))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn conv_and_norm_pass_finite_differences() {
        let mut r = rng(24);
        let x = Tensor::<f64>::uniform(&[2, 2, 3, 4, 4], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut r);
        let b = Tensor::<f64>::uniform(&[3], -0.5, 0.5, &mut r);
        let gamma = Tensor::<f64>::uniform(&[3], 0.5, 1.5, &mut r);
        let beta = Tensor::<f64>::uniform(&[3], -0.5, 0.5, &mut r);
        let probe = Tensor::<f64>::uniform(&[2, 3, 3, 2, 2], -1.0, 1.0, &mut r);
        for training in [true, false] {
            let mut store = ParamStore::<f64>::new();
            let rm = store.add_buffer("m", Tensor::full(&[3], 0.1)).unwrap();
            let rv = store.add_buffer("v", Tensor::full(&[3], 1.3)).unwrap();
            let state = NormState {
                running_mean: rm,
                running_var: rv,
                eps: 1e-5,
                momentum: 0.1,
            };
            let report = crate::gradcheck::check_leaves_in(
                &store,
                training,
                &[x.clone(), w.clone(), b.clone(), gamma.clone(), beta.clone()],
                |g, v| {
                    let y = g.conv3d(v[0], v[1], Some(v[2]), Conv3dGeometry::new([1, 2, 2], [1; 3]))?;
                    let y = g.batch_norm(y, v[3], v[4], state)?;
                    let p = g.input(probe.clone());
                    let y = g.mul(y, p)?;
                    let y = g.sigmoid(y);
                    Ok(g.sum(y))
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "training={training}: {report:?}");
        }
    }

    #[test]
    fn bce_matches_closed_form() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let z = g.leaf(Tensor::new(&[3], vec![0.0, 2.0, -1.0]).unwrap());
        let t = [0.0, 1.0, 0.5];
        let loss = g.bce_with_logits(z, &t).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want = [(0.0, 0.0), (2.0, 1.0), (-1.0, 0.5)]
            .iter()
            .map(|&(z, y)| -(y * sig(z).ln() + (1.0 - y) * (1.0 - sig(z)).ln()))
            .sum::<f64>()
            / 3.0;
        assert!((g.value(loss).item() - want).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        let gz = grads.wrt(z).unwrap();
        for (k, &(zv, y)) in [(0.0, 0.0), (2.0, 1.0), (-1.0, 0.5)].iter().enumerate() {
            assert!((gz.data()[k] - (sig(zv) - y) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_records_running_stat_updates() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.add_param("g", Tensor::ones(&[1])).unwrap();
        let beta = store.add_param("b", Tensor::zeros(&[1])).unwrap();
        let rm = store.add_buffer("m", Tensor::zeros(&[1])).unwrap();
        let rv = store.add_buffer("v", Tensor::ones(&[1])).unwrap();
        let state = NormState {
            running_mean: rm,
            running_var: rv,
            eps: 1e-5,
            momentum: 0.1,
        };
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::new(&[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let (gv, bv) = (g.param(gamma), g.param(beta));
        g.batch_norm(x, gv, bv, state).unwrap();
        let updates = g.take_stat_updates();
        store.apply_stat_updates(updates);
        assert!((store.buffer(rm).item() - 0.4).abs() < 1e-12);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((store.buffer(rv).item() - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }
}
