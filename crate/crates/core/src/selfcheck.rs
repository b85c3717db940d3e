//! Finite-difference suites over every differentiable module, in `f64` on
//! small shapes. Used by `xdlf grad-check` and the acceptance tests.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NormState, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::fgfe::Fgfe;
use crate::frequency::{band_components, build_band_filters, BandWeights};
use crate::fslr::{region_pool_var, FslrBox, FslrBoxMatrix};
use crate::fusion::{CrossAttention, FeatureEnsemble, FeatureFusion};
use crate::gradcheck::{check_leaves, check_leaves_in, check_params, GradCheckConfig, GradCheckReport};
use crate::model::{BackboneConfig, ClipBatch, ModelConfig, StageConfig, Variant, XdlfModel};
use crate::nn::{BN_EPS, BN_MOMENTUM};
use crate::tensor::{Conv3dGeometry, PoolKind, Tensor};

/// Which suites to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Fgfe,
    Fusion,
    Model,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["all", "tensor", "fgfe", "fusion", "model"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "tensor" => Suite::Tensor,
            "fgfe" => Suite::Fgfe,
            "fusion" => Suite::Fusion,
            "model" => Suite::Model,
            _ => {
                return Err(Error::Config(format!(
                    "unknown module {s:?}; expected one of {}",
                    Suite::NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Suite::All, Suite::Tensor, Suite::Fgfe, Suite::Fusion, Suite::Model]
            .iter()
            .position(|s| s == self)
            .unwrap_or(0);
        f.write_str(Suite::NAMES[i])
    }
}

/// Tolerance for the end-to-end model probe, where many `f64` roundings
/// accumulate through the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, r)
}

/// Sums `probe * y` so every output element carries a distinct weight.
fn probe_sum(g: &mut Graph<'_, f64>, y: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = g.input(probe.clone());
    let z = g.mul(y, p)?;
    Ok(g.sum(z))
}

fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], r: &mut ChaCha8Rng) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        store.param_mut(id).value = uniform(&shape, -0.8, 0.8, r);
    }
}

fn named(mut report: GradCheckReport, name: &str) -> GradCheckReport {
    report.name = name.to_owned();
    report
}

fn bx(h1: usize, h2: usize, w1: usize, w2: usize) -> FslrBox {
    FslrBox { h1, h2, w1, w2 }
}

fn boxes_8x8() -> FslrBoxMatrix {
    FslrBoxMatrix([bx(0, 3, 0, 4), bx(0, 3, 4, 8), bx(2, 6, 3, 5), bx(5, 8, 1, 7)])
}

/// Elementwise, structural, linear-algebra, convolution, normalization,
/// region-pooling and loss operations.
pub fn tensor_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let mut r = rng(101);

    let leaves = [
        uniform(&[2, 3, 4], -1.0, 1.0, &mut r),
        uniform(&[2, 3, 4], -1.0, 1.0, &mut r),
        Tensor::scalar(0.6),
        uniform(&[2, 3], -1.0, 1.0, &mut r),
        uniform(&[2, 1, 4], -1.0, 1.0, &mut r),
    ];
    let w0 = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    let rep = check_leaves(
        &leaves,
        |g, v| {
            let m = g.mul(v[0], v[1])?;
            let s = g.sigmoid(m);
            let rl = g.relu(v[1]);
            let t = g.add(s, rl)?;
            let t = g.scale(t, 1.5);
            let t = g.scalar_mul(v[2], t)?;
            let t = g.channel_mul(t, v[3])?;
            let t = g.spatial_mul(t, v[4])?;
            probe_sum(g, t, &w0)
        },
        cfg,
    )?;
    out.push(named(rep, "tensor/elementwise"));

    let a0 = uniform(&[2, 2, 3, 5, 4], -1.0, 1.0, &mut r);
    let b0 = uniform(&[2, 1, 3, 5, 4], -1.0, 1.0, &mut r);
    let w1 = uniform(&[2, 2, 3, 7, 6], -1.0, 1.0, &mut r);
    let rep = check_leaves(
        &[a0, b0],
        |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let s = g.slice_channels(c, 1, 2)?;
            let p = g.adaptive_pool(s, PoolKind::Max, &[2, 3, 3])?;
            let q = g.adaptive_pool(s, PoolKind::Avg, &[1, 2, 3])?;
            let q = g.upsample_bilinear(q, 3, 3)?;
            let pq = g.adaptive_pool(p, PoolKind::Avg, &[1, 3, 3])?;
            let t = g.mul(pq, q)?;
            let u = g.upsample_bilinear(t, 7, 6)?;
            let u = g.concat(&[u, u, u])?;
            let u = g.reshape(u, &[2, 2, 3, 7, 6])?;
            let gp = g.global_pool(s, PoolKind::Max)?;
            let ga = g.global_pool(s, PoolKind::Avg)?;
            let gs = g.mul(gp, ga)?;
            let u = g.channel_mul(u, gs)?;
            probe_sum(g, u, &w1)
        },
        cfg,
    )?;
    out.push(named(rep, "tensor/structural"));

    let rep = check_leaves(
        &[
            uniform(&[3, 4, 5], -1.0, 1.0, &mut r),
            uniform(&[4, 6], -1.0, 1.0, &mut r),
            uniform(&[3, 2, 6], -1.0, 1.0, &mut r),
            uniform(&[2], -1.0, 1.0, &mut r),
        ],
        |g, v| {
            let p = g.matmul(v[0], v[1], true, false)?;
            let q = g.matmul(p, v[2], false, true)?;
            let q = g.add_bias(q, v[3])?;
            let q = g.reshape(q, &[15, 2])?;
            let m = g.frame_mean(q, 5)?;
            let s = g.sigmoid(m);
            let m2 = g.mul(s, m)?;
            Ok(g.sum(m2))
        },
        cfg,
    )?;
    out.push(named(rep, "tensor/matmul"));

    let x = uniform(&[2, 2, 3, 4, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut r);
    let b = uniform(&[3], -0.5, 0.5, &mut r);
    let gamma = uniform(&[3], 0.5, 1.5, &mut r);
    let beta = uniform(&[3], -0.5, 0.5, &mut r);
    let probe = uniform(&[2, 3, 3, 2, 2], -1.0, 1.0, &mut r);
    for training in [true, false] {
        let mut store = ParamStore::<f64>::new();
        let rm = store.add_buffer("m", Tensor::full(&[3], 0.1))?;
        let rv = store.add_buffer("v", Tensor::full(&[3], 1.3))?;
        let state = NormState {
            running_mean: rm,
            running_var: rv,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        };
        let rep = check_leaves_in(
            &store,
            training,
            &[x.clone(), w.clone(), b.clone(), gamma.clone(), beta.clone()],
            |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), Conv3dGeometry::new([1, 2, 2], [1; 3]))?;
                let y = g.batch_norm(y, v[3], v[4], state)?;
                let y = g.sigmoid(y);
                probe_sum(g, y, &probe)
            },
            cfg,
        )?;
        let mode = if training { "train" } else { "eval" };
        out.push(named(rep, &format!("tensor/conv3d+batch_norm ({mode})")));
    }

    let x = uniform(&[2, 3, 2, 8, 8], -1.0, 1.0, &mut r);
    let probe = uniform(&[2, 4, 3, 2, 3, 3], -1.0, 1.0, &mut r);
    let frames = vec![vec![boxes_8x8(); 2]; 2];
    let rep = check_leaves(
        &[x],
        |g, v| {
            let p = region_pool_var(g, v[0], &frames, 3, 3)?;
            probe_sum(g, p, &probe)
        },
        cfg,
    )?;
    out.push(named(rep, "tensor/region_pool"));

    let targets = [0.0, 1.0, 0.3, 0.8];
    let rep = check_leaves(
        &[uniform(&[4], -3.0, 3.0, &mut r)],
        |g, v| g.bce_with_logits(v[0], &targets),
        cfg,
    )?;
    out.push(named(rep, "tensor/bce_with_logits"));

    let mut store = ParamStore::<f64>::new();
    let bw = BandWeights::new(&mut store, "freq")?;
    randomize(&mut store, &bw.raw, &mut r);
    let filters = build_band_filters(8, 8)?;
    let comps = band_components(&uniform(&[2, 3, 2, 8, 8], -1.0, 1.0, &mut r), &filters)?;
    let probe = uniform(&[2, 9, 2, 8, 8], -1.0, 1.0, &mut r);
    let rep = check_params(
        "frequency/band_weights",
        &store,
        true,
        &[],
        |g| {
            let y = bw.forward(g, comps.clone())?;
            probe_sum(g, y, &probe)
        },
        cfg,
    )?;
    out.push(rep);
    Ok(out)
}

pub fn fgfe_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut r = rng(102);
    let mut store = ParamStore::new();
    let m = Fgfe::new(&mut store, "fgfe", 2, (3, 3), &mut r)?;
    randomize(&mut store, &[m.conv1.weight, m.conv1.bias.expect("fgfe conv has a bias"), m.bn.gamma, m.bn.beta], &mut r);
    let x = uniform(&[2, 2, 2, 8, 8], -1.0, 1.0, &mut r);
    let probe = uniform(&[2, 2, 2, 8, 8], -1.0, 1.0, &mut r);
    let boxes = vec![vec![boxes_8x8(); 2]; 2];
    let loss = |g: &mut Graph<'_, f64>| {
        let xv = g.input(x.clone());
        let t = m.forward(g, xv, &boxes)?;
        probe_sum(g, t.output, &probe)
    };
    // A bias feeding a train-mode norm is cancelled exactly (zero gradient
    // both ways), so biases are probed in eval mode.
    let train_ids = [m.w, m.conv1.weight, m.bn.gamma, m.bn.beta];
    Ok(vec![
        check_params("fgfe (train)", &store, true, &train_ids, loss, cfg)?,
        check_params("fgfe (eval)", &store, false, &[], loss, cfg)?,
    ])
}

pub fn fusion_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut r = rng(103);
    let mut out = Vec::new();
    for temporal in [true, false] {
        let mut store = ParamStore::<f64>::new();
        let ca = if temporal {
            CrossAttention::new(&mut store, "ca", 2, &mut r)?
        } else {
            CrossAttention::new_2d(&mut store, "ca", 2, &mut r)?
        };
        let ff = FeatureFusion::new(&mut store, "ff", 2, 2, true, &mut r)?;
        let plain = FeatureFusion::new(&mut store, "cat", 2, 2, false, &mut r)?;
        let ens = FeatureEnsemble::new(&mut store, "ens")?;
        let all: Vec<ParamId> = store.param_ids().collect();
        randomize(&mut store, &all, &mut r);
        let x = uniform(&[2, 2, 2, 4, 4], -1.0, 1.0, &mut r);
        let xf = uniform(&[2, 2, 2, 4, 4], -1.0, 1.0, &mut r);
        let probe = uniform(&[2, 6, 1, 2, 2], -1.0, 1.0, &mut r);
        let loss = |g: &mut Graph<'_, f64>| {
            let (a, b) = (g.input(x.clone()), g.input(xf.clone()));
            let c = ca.forward(g, a, b)?;
            let f = ff.forward(g, c.x, c.xf)?;
            let f2 = plain.forward(g, c.xf, c.x)?;
            let sum = g.add(f.output, f2.output)?;
            let mid = g.adaptive_pool(sum, PoolKind::Max, &[2, 2, 2])?;
            let high = g.adaptive_pool(sum, PoolKind::Avg, &[1, 2, 2])?;
            let e = ens.forward(g, [sum, mid, high])?;
            probe_sum(g, e, &probe)
        };
        let train_ids: Vec<ParamId> = all.iter().copied().filter(|&id| Some(id) != ca.conv3.bias).collect();
        let kind = if temporal { "3d" } else { "2d" };
        out.push(check_params(&format!("fusion {kind} (train)"), &store, true, &train_ids, loss, cfg)?);
        out.push(check_params(&format!("fusion {kind} (eval)"), &store, false, &[], loss, cfg)?);
    }
    Ok(out)
}

/// Small model used for the end-to-end probe.
pub fn probe_model_config(variant: Variant) -> ModelConfig {
    let stage = |channels, stride| StageConfig {
        channels,
        blocks: 1,
        stride,
    };
    ModelConfig {
        backbone: BackboneConfig {
            stem_channels: 4,
            stem_stride: [1, 2, 2],
            stages: [stage(8, [1, 1, 1]), stage(16, [2, 2, 2]), stage(32, [2, 2, 2])],
        },
        variant,
        input: [4, 32, 32],
        pool: 3,
        reduction: 16,
        seed: 5,
    }
}

/// End-to-end probe of selected parameters in every module of the full and
/// per-frame models, at [`MODEL_TOLERANCE`].
pub fn model_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig {
        tolerance: cfg.tolerance.max(MODEL_TOLERANCE),
        max_entries: 4,
        ..*cfg
    };
    let mut out = Vec::new();
    for variant in [Variant::Full, Variant::NoTime2d] {
        let m = XdlfModel::<f64>::new(probe_model_config(variant))?;
        let [d, h, w] = m.config.input;
        let mut r = rng(104);
        let lm = crate::datagen::canonical_landmarks(h, w, [(0.0, 0.0); 4])?;
        let boxes = crate::fslr::extract_boxes(&lm, h, w)?;
        let batch = ClipBatch {
            rgb: uniform(&[2, 3, d, h, w], 0.0, 1.0, &mut r),
            boxes: vec![vec![boxes; d]; 2],
        };
        let targets = [0.0, 1.0];
        let probes: Vec<ParamId> = [
            "freq.raw_high",
            "stream_a.stem.conv.weight",
            "stream_b.stage3.block0.conv2.bn.gamma",
            "fgfe_a.w",
            "cross1.conv3.weight",
            "fusion0.w1.weight",
            "ensemble.raw_mid",
            "head.weight",
            "head.bias",
        ]
        .iter()
        .map(|n| m.store.find_param(n).ok_or_else(|| Error::Config(format!("missing parameter {n}"))))
        .collect::<Result<_>>()?;
        let loss = |g: &mut Graph<'_, f64>| {
            let t = m.forward(g, &batch)?;
            g.bce_with_logits(t.logits, &targets)
        };
        out.push(check_params(&format!("model {variant}"), &m.store, true, &probes, loss, &cfg)?);
    }
    Ok(out)
}

pub fn run_suite(suite: Suite, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Tensor) {
        out.extend(tensor_suite(cfg)?);
    }
    if matches!(suite, Suite::All | Suite::Fgfe) {
        out.extend(fgfe_suite(cfg)?);
    }
    if matches!(suite, Suite::All | Suite::Fusion) {
        out.extend(fusion_suite(cfg)?);
    }
    if matches!(suite, Suite::All | Suite::Model) {
        out.extend(model_suite(cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        let reports = run_suite(Suite::All, &GradCheckConfig::default()).unwrap();
        assert!(reports.len() >= 14);
        for r in &reports {
            assert!(r.passed(), "{r} {:?}", r.worst);
            assert!(r.checked > 0, "{}", r.name);
        }
    }

    #[test]
    fn suite_names_parse() {
        for name in Suite::NAMES {
            assert_eq!(name.parse::<Suite>().unwrap().to_string(), name);
        }
        assert!("gradients".parse::<Suite>().unwrap_err().is_config());
    }
}
