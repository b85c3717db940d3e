//! The two-stream detector: an RGB stream and a frequency-map stream merged
//! at three levels, followed by the level ensemble and a one-logit head.

mod backbone;
pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backbone::{BackboneConfig, BasicBlock, KernelMode, StageConfig, Stream};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::fgfe::{Fgfe, FgfeTrace};
use crate::frequency::{band_components, build_band_filters, BandFilters, BandWeights};
use crate::fslr::{project_boxes, FslrBoxMatrix, DEFAULT_POOL};
use crate::fusion::{CrossAttention, FeatureEnsemble, FeatureFusion};
use crate::nn::Linear;
use crate::tensor::{sigmoid_scalar, PoolKind, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoFgfe,
    NoCrossAttention,
    ConcatFusion,
    FreqFreq,
    RgbRgb,
    NoTime2d,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoFgfe,
        Variant::NoCrossAttention,
        Variant::ConcatFusion,
        Variant::FreqFreq,
        Variant::RgbRgb,
        Variant::NoTime2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFgfe => "no_fgfe",
            Variant::NoCrossAttention => "no_cross_attention",
            Variant::ConcatFusion => "concat_fusion",
            Variant::FreqFreq => "freq_freq",
            Variant::RgbRgb => "rgb_rgb",
            Variant::NoTime2d => "no_time_2d",
        }
    }

    pub fn uses_fgfe(self) -> bool {
        self != Variant::NoFgfe
    }

    pub fn uses_cross_attention(self) -> bool {
        self != Variant::NoCrossAttention
    }

    pub fn gated_fusion(self) -> bool {
        self != Variant::ConcatFusion
    }

    pub fn temporal(self) -> bool {
        self != Variant::NoTime2d
    }

    /// Input modality of each stream.
    pub fn streams(self) -> [Modality; 2] {
        match self {
            Variant::FreqFreq => [Modality::Freq, Modality::Freq],
            Variant::RgbRgb => [Modality::Rgb, Modality::Rgb],
            _ => [Modality::Rgb, Modality::Freq],
        }
    }

    pub fn needs_frequency(self) -> bool {
        self.streams().contains(&Modality::Freq)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant {s:?}; valid: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Freq,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Freq => 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: Variant,
    /// Clip length, height and width.
    pub input: [usize; 3],
    /// Side of the pooled region features.
    pub pool: usize,
    /// Channel reduction of the fusion gate.
    pub reduction: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            variant: Variant::Full,
            input: [8, 64, 64],
            pool: DEFAULT_POOL,
            reduction: 16,
            seed: 0,
        }
    }
}

/// A batch of clips: `rgb` is `[n, 3, d, h, w]` and `boxes[b][t]` are the
/// region boxes of sample `b`, frame `t`, at input resolution.
#[derive(Clone, Debug)]
pub struct ClipBatch<T> {
    pub rgb: Tensor<T>,
    pub boxes: Vec<Vec<FslrBoxMatrix>>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[n]` logits.
    pub logits: Var,
    pub fgfe: Vec<FgfeTrace>,
    /// Cross-attention maps `[n, 2, ...]` per level.
    pub cross_maps: Vec<Var>,
    pub fused: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct XdlfModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub filters: BandFilters,
    pub band_weights: Option<BandWeights>,
    pub streams: [Stream; 2],
    pub fgfe: Option<[Fgfe; 2]>,
    pub cross: Option<Vec<CrossAttention>>,
    pub fusion: Vec<FeatureFusion>,
    pub ensemble: FeatureEnsemble,
    pub head: Linear,
}

/// `[n, c, d, h, w] -> [n * d, c, 1, h, w]`.
fn fold_time<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(5, "fold_time")?;
    let &[n, c, d, h, w] = x.shape() else { unreachable!() };
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        for t in 0..d {
            for ch in 0..c {
                let start = ((b * c + ch) * d + t) * plane;
                out.extend_from_slice(&x.data()[start..start + plane]);
            }
        }
    }
    Tensor::new(&[n * d, c, 1, h, w], out)
}

impl<T: Scalar> XdlfModel<T> {
    /// Builds and initializes the given variant deterministically from
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.backbone.validate()?;
        let [d, h, w] = config.input;
        if d == 0 {
            return Err(Error::Config("clip length must be positive".into()));
        }
        let variant = config.variant;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let filters = build_band_filters(h, w)?;
        let mode = KernelMode {
            temporal: variant.temporal(),
        };
        let taps = config.backbone.tap_channels();

        let band_weights = if variant.needs_frequency() {
            Some(BandWeights::new(&mut store, "freq")?)
        } else {
            None
        };
        let [ma, mb] = variant.streams();
        let streams = [
            Stream::new(&mut store, "stream_a", ma.channels(), &config.backbone, mode, &mut rng)?,
            Stream::new(&mut store, "stream_b", mb.channels(), &config.backbone, mode, &mut rng)?,
        ];
        let pool = (config.pool, config.pool);
        let fgfe = if variant.uses_fgfe() {
            Some([
                Fgfe::new(&mut store, "fgfe_a", taps[0], pool, &mut rng)?,
                Fgfe::new(&mut store, "fgfe_b", taps[0], pool, &mut rng)?,
            ])
        } else {
            None
        };
        let cross = if variant.uses_cross_attention() {
            let mut v = Vec::with_capacity(3);
            for (l, &c) in taps.iter().enumerate() {
                let name = format!("cross{l}");
                v.push(if mode.temporal {
                    CrossAttention::new(&mut store, &name, c, &mut rng)?
                } else {
                    CrossAttention::new_2d(&mut store, &name, c, &mut rng)?
                });
            }
            Some(v)
        } else {
            None
        };
        let mut fusion = Vec::with_capacity(3);
        for (l, &c) in taps.iter().enumerate() {
            fusion.push(FeatureFusion::new(
                &mut store,
                &format!("fusion{l}"),
                c,
                config.reduction,
                variant.gated_fusion(),
                &mut rng,
            )?);
        }
        let ensemble = FeatureEnsemble::new(&mut store, "ensemble")?;
        let head = Linear::new(&mut store, "head", taps.iter().sum(), 1, true, 0.01, &mut rng)?;
        Ok(XdlfModel {
            config,
            store,
            filters,
            band_weights,
            streams,
            fgfe,
            cross,
            fusion,
            ensemble,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn check_batch(&self, batch: &ClipBatch<T>) -> Result<usize> {
        let [d, h, w] = self.config.input;
        let s = batch.rgb.shape();
        if s.len() != 5 || s[1] != 3 || s[2..] != [d, h, w] {
            return Err(Error::shape(
                "model",
                format!("expected [n, 3, {d}, {h}, {w}] clips, got {s:?}"),
            ));
        }
        if batch.boxes.len() != s[0] {
            return Err(Error::InvalidInput(format!("{} clips but {} box sets", s[0], batch.boxes.len())));
        }
        if let Some(bad) = batch.boxes.iter().position(|b| b.len() != d) {
            return Err(Error::InvalidInput(format!(
                "clip {bad} has {} box matrices for {d} frames",
                batch.boxes[bad].len()
            )));
        }
        Ok(s[0])
    }

    /// Forward pass; `g` must borrow `self.store`.
    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &ClipBatch<T>) -> Result<ForwardTrace> {
        let n = self.check_batch(batch)?;
        let [d, h, w] = self.config.input;
        let temporal = self.variant().temporal();

        // Per-frame 2D processing folds time into the batch axis.
        let (rgb, boxes, frames) = if temporal {
            (batch.rgb.clone(), batch.boxes.clone(), 1)
        } else {
            let boxes = batch.boxes.iter().flat_map(|v| v.iter().map(|m| vec![*m])).collect();
            (fold_time(&batch.rgb)?, boxes, d)
        };

        let freq = match &self.band_weights {
            Some(bw) => Some(bw.forward(g, band_components(&rgb, &self.filters)?)?),
            None => None,
        };
        let rgb_var = g.input(rgb);
        let pick = |m: Modality| match m {
            Modality::Rgb => rgb_var,
            Modality::Freq => freq.expect("frequency weights exist for frequency streams"),
        };
        let [ma, mb] = self.variant().streams();
        let mut a = self.streams[0].stem(g, pick(ma))?;
        let mut b = self.streams[1].stem(g, pick(mb))?;

        let mut trace = ForwardTrace {
            logits: a,
            fgfe: Vec::new(),
            cross_maps: Vec::new(),
            fused: Vec::with_capacity(3),
        };
        for level in 0..3 {
            a = self.streams[0].stage(g, level, a)?;
            b = self.streams[1].stage(g, level, b)?;
            if level == 0 {
                if let Some([fa, fb]) = &self.fgfe {
                    let fs = g.shape(a).to_vec();
                    let projected = boxes
                        .iter()
                        .map(|v| v.iter().map(|m| project_boxes(m, (h, w), (fs[3], fs[4]))).collect())
                        .collect::<Result<Vec<Vec<_>>>>()?;
                    let ta = fa.forward(g, a, &projected)?;
                    let tb = fb.forward(g, b, &projected)?;
                    a = ta.output;
                    b = tb.output;
                    trace.fgfe = vec![ta, tb];
                }
            }
            if let Some(cross) = &self.cross {
                let out = cross[level].forward(g, a, b)?;
                a = out.x;
                b = out.xf;
                trace.cross_maps.push(out.maps);
            }
            trace.fused.push(self.fusion[level].forward(g, a, b)?.output);
        }
        let e = self.ensemble.forward(g, [trace.fused[0], trace.fused[1], trace.fused[2]])?;
        let pooled = g.global_pool(e, PoolKind::Avg)?;
        let mut logits = self.head.forward(g, pooled)?;
        if frames > 1 {
            logits = g.frame_mean(logits, frames)?;
        }
        trace.logits = g.reshape(logits, &[n])?;
        Ok(trace)
    }

    /// Eval-mode logits.
    pub fn logits(&self, batch: &ClipBatch<T>) -> Result<Vec<T>> {
        let mut g = Graph::new(&self.store, false);
        let t = self.forward(&mut g, batch)?;
        Ok(g.value(t.logits).data().to_vec())
    }

    /// Eval-mode fake probabilities, `sigmoid(logit)`.
    pub fn predict_prob(&self, batch: &ClipBatch<T>) -> Result<Vec<T>> {
        Ok(self.logits(batch)?.into_iter().map(sigmoid_scalar).collect())
    }

    /// Band weights `alpha` (low, mid, high), when the variant uses them.
    pub fn alphas(&self) -> Option<[T; 3]> {
        self.band_weights.as_ref().map(|b| b.alphas(&self.store))
    }

    pub fn lambdas(&self) -> [T; 3] {
        self.ensemble.lambdas(&self.store)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.store)
    }

    /// Builds the model for `config` and loads its weights from `path`.
    pub fn load(config: ModelConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut m = Self::new(config)?;
        checkpoint::load_checkpoint(path, &mut m.store)?;
        Ok(m)
    }
}
