//! Training loop and evaluation over an on-disk corpus.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::{accuracy, auc, kind_auc, video_scores, Auc, ClipScore, Confusion, VideoScore};
use super::mixup::mixup_pair;
use super::optim::{AdamW, AdamWConfig};
use super::sampler::build_epoch_plan;
use super::schedule::cosine_lr;
use crate::autograd::Graph;
use crate::config::KeyValues;
use crate::datagen::corpus::{CorpusIndex, IndexRow, Split};
use crate::datagen::{ArtifactKind, Clip};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ClipBatch, ModelConfig, StageConfig, Variant, XdlfModel};
use crate::tensor::{sigmoid_scalar, Tensor};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_acc,val_auc";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
/// Model and training settings saved beside every checkpoint.
pub const CHECKPOINT_CONFIG_FILE: &str = "checkpoint.cfg";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Cosine period in epochs.
    pub t_max: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 means no cap).
    pub max_steps: usize,
    /// `Beta(alpha, alpha)` for Mixup; 0 disables it.
    pub mixup_alpha: f64,
    /// Chance that a fake slot is replaced by a mix with its aligned real.
    pub mixup_prob: f64,
    pub oversample: bool,
    /// Score the train split in eval mode after each epoch.
    pub eval_train: bool,
    pub seed: u64,
    pub variant: Variant,
    /// Clip length, height and width.
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub stage_blocks: [usize; 3],
    pub pool: usize,
    pub reduction: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            lr0: 1e-4,
            lr_min: 0.0,
            weight_decay: 1e-4,
            batch_size: 4,
            t_max: 32,
            epochs: 32,
            max_steps: 0,
            mixup_alpha: 0.5,
            mixup_prob: 0.5,
            oversample: true,
            eval_train: true,
            seed: 0,
            variant: Variant::Full,
            input: m.input,
            stem_channels: m.backbone.stem_channels,
            stage_channels: m.backbone.tap_channels(),
            stage_blocks: m.backbone.stages.clone().map(|s| s.blocks),
            pool: m.pool,
            reduction: m.reduction,
        }
    }
}

impl TrainConfig {
    /// Short-run preset for the overfit sanity check: default model, larger
    /// learning rate, no Mixup, at most 200 optimizer steps.
    pub fn tiny() -> Self {
        TrainConfig {
            lr0: 1e-3,
            t_max: 20,
            epochs: 20,
            max_steps: 200,
            mixup_alpha: 0.0,
            ..TrainConfig::default()
        }
    }

    /// Recipe of the variant ablation: the tiny settings with Mixup on,
    /// more epochs and no train-split evaluation.
    pub fn ablation() -> Self {
        TrainConfig {
            lr0: 1e-3,
            t_max: 8,
            epochs: 8,
            eval_train: false,
            ..TrainConfig::default()
        }
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr0: kv.take("lr0", d.lr0)?,
            lr_min: kv.take("lr_min", d.lr_min)?,
            weight_decay: kv.take("weight_decay", d.weight_decay)?,
            batch_size: kv.take("batch_size", d.batch_size)?,
            t_max: kv.take("t_max", d.t_max)?,
            epochs: kv.take("epochs", d.epochs)?,
            max_steps: kv.take("max_steps", d.max_steps)?,
            mixup_alpha: kv.take("mixup_alpha", d.mixup_alpha)?,
            mixup_prob: kv.take("mixup_prob", d.mixup_prob)?,
            oversample: kv.take("oversample", d.oversample)?,
            eval_train: kv.take("eval_train", d.eval_train)?,
            seed: kv.take("seed", d.seed)?,
            variant: kv.take("variant", d.variant)?,
            input: kv.take_array("input", d.input)?,
            stem_channels: kv.take("stem_channels", d.stem_channels)?,
            stage_channels: kv.take_array("stage_channels", d.stage_channels)?,
            stage_blocks: kv.take_array("stage_blocks", d.stage_blocks)?,
            pool: kv.take("pool", d.pool)?,
            reduction: kv.take("reduction", d.reduction)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }

    /// The same settings in the `key = value` form `from_kv` reads.
    pub fn to_kv_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        format!(
            "lr0 = {}\nlr_min = {}\nweight_decay = {}\nbatch_size = {}\nt_max = {}\nepochs = {}\nmax_steps = {}\n\
             mixup_alpha = {}\nmixup_prob = {}\noversample = {}\neval_train = {}\nseed = {}\nvariant = {}\n\
             input = {}\nstem_channels = {}\nstage_channels = {}\nstage_blocks = {}\npool = {}\nreduction = {}\n",
            self.lr0,
            self.lr_min,
            self.weight_decay,
            self.batch_size,
            self.t_max,
            self.epochs,
            self.max_steps,
            self.mixup_alpha,
            self.mixup_prob,
            self.oversample,
            self.eval_train,
            self.seed,
            self.variant,
            list(&self.input),
            self.stem_channels,
            list(&self.stage_channels),
            list(&self.stage_blocks),
            self.pool,
            self.reduction,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0 && self.weight_decay >= 0.0) {
            return bad(format!(
                "rates must be positive with lr_min <= lr0 (lr0 {}, lr_min {}, weight_decay {})",
                self.lr0, self.lr_min, self.weight_decay
            ));
        }
        if self.batch_size == 0 || self.t_max == 0 || self.epochs == 0 {
            return bad("batch_size, t_max and epochs must be positive".into());
        }
        if !(self.mixup_alpha >= 0.0 && (0.0..=1.0).contains(&self.mixup_prob)) {
            return bad(format!("mixup_alpha {} must be >= 0 and mixup_prob {} in [0, 1]", self.mixup_alpha, self.mixup_prob));
        }
        if self.mixup_enabled() && self.batch_size < 2 {
            return bad("Mixup needs batch_size >= 2".into());
        }
        self.model_config().backbone.validate()
    }

    pub fn mixup_enabled(&self) -> bool {
        self.mixup_alpha > 0.0 && self.mixup_prob > 0.0
    }

    pub fn model_config(&self) -> ModelConfig {
        let stride = |l: usize| if l == 0 { [1, 1, 1] } else { [2, 2, 2] };
        ModelConfig {
            backbone: BackboneConfig {
                stem_channels: self.stem_channels,
                stem_stride: [1, 2, 2],
                stages: std::array::from_fn(|l| StageConfig {
                    channels: self.stage_channels[l],
                    blocks: self.stage_blocks[l],
                    stride: stride(l),
                }),
            },
            variant: self.variant,
            input: self.input,
            pool: self.pool,
            reduction: self.reduction,
            seed: self.seed,
        }
    }
}

/// Clips of one split held in memory, in index order.
#[derive(Clone, Debug)]
pub struct ClipSet {
    pub rows: Vec<IndexRow>,
    pub clips: Vec<Clip>,
}

impl ClipSet {
    pub fn load(index: &CorpusIndex, split: Split) -> Result<Self> {
        let rows: Vec<IndexRow> = index.split(split).into_iter().cloned().collect();
        let clips = rows.par_iter().map(|r| index.load_clip(r)).collect::<Result<Vec<_>>>()?;
        Ok(ClipSet { rows, clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

/// Stacks clips into a batch; every clip must have the model's input dims.
pub fn make_batch<'a>(clips: impl IntoIterator<Item = &'a Clip>) -> Result<ClipBatch<f32>> {
    let mut data = Vec::new();
    let mut boxes = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for c in clips {
        match &shape {
            None => shape = Some(c.frames.shape().to_vec()),
            Some(s) if s.as_slice() != c.frames.shape() => {
                return Err(Error::shape("make_batch", format!("{:?} vs {:?}", s, c.frames.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(c.frames.data());
        boxes.push(c.boxes()?);
    }
    let s = shape.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let rgb = Tensor::new(&[boxes.len(), s[0], s[1], s[2], s[3]], data)?;
    Ok(ClipBatch { rgb, boxes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_auc: Auc,
    pub steps: usize,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_owned(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6e},{:.6},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.train_acc),
            opt(self.val_acc),
            self.val_auc
        )
    }
}

pub struct TrainOutcome {
    pub model: XdlfModel<f32>,
    pub history: Vec<EpochMetrics>,
    /// Loss of the very first batch.
    pub first_loss: f64,
    pub steps: usize,
}

/// Loss of one forward/backward/update step.
fn train_step(model: &mut XdlfModel<f32>, opt: &mut AdamW<f32>, batch: &ClipBatch<f32>, targets: &[f32], lr: f64) -> Result<f64> {
    let mut g = Graph::new(&model.store, true);
    let trace = model.forward(&mut g, batch)?;
    let loss = g.bce_with_logits(trace.logits, targets)?;
    let value = f64::from(g.value(loss).item());
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    let stats = g.take_stat_updates();
    drop(g);
    model.store.zero_grad();
    model.store.accumulate(&grads)?;
    model.store.apply_stat_updates(stats);
    opt.update(&mut model.store, lr);
    Ok(value)
}

/// Trains on the `train` split and validates on `val` after every epoch.
///
/// With `out`, writes `metrics.csv` and overwrites `checkpoint.ckpt` (plus
/// its `checkpoint.cfg`) each epoch. `observer` sees every epoch's metrics.
pub fn train(
    cfg: &TrainConfig,
    corpus: &CorpusIndex,
    out: Option<&Path>,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = ClipSet::load(corpus, Split::Train)?;
    let val_set = ClipSet::load(corpus, Split::Val)?;
    if let Some(c) = train_set.clips.first() {
        let [d, h, w] = cfg.input;
        let (cd, (ch, cw)) = (c.len(), c.hw());
        if [cd, ch, cw] != [d, h, w] {
            return Err(Error::Config(format!("corpus clips are {cd}x{ch}x{cw}, config input is {d}x{h}x{w}")));
        }
    }
    let labels = train_set.labels();
    let aligned: HashMap<(&str, usize), usize> = train_set
        .clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.label == 0.0)
        .map(|(i, c)| ((c.video_id.as_str(), c.frame_start), i))
        .collect();

    let mut model = XdlfModel::<f32>::new(cfg.model_config())?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let paths = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(METRICS_FILE), format!("{METRICS_HEADER}\n"))?;
            Some(dir.to_path_buf())
        }
        None => None,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut first_loss = f64::NAN;
    'epochs: for epoch in 0..cfg.epochs {
        if cfg.max_steps > 0 && steps >= cfg.max_steps {
            break;
        }
        let lr = cosine_lr(epoch, cfg.lr0, cfg.t_max, cfg.lr_min);
        let plan = build_epoch_plan(&labels, cfg.batch_size, cfg.oversample, &mut rng)?;
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, slots) in plan.iter().enumerate() {
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                break;
            }
            let mut clips: Vec<Clip> = Vec::with_capacity(slots.len());
            let mut targets = Vec::with_capacity(slots.len());
            for &i in slots {
                let clip = &train_set.clips[i];
                let partner = aligned.get(&(clip.source_video.as_str(), clip.frame_start));
                match partner {
                    Some(&r) if clip.label == 1.0 && cfg.mixup_enabled() && rng.random_bool(cfg.mixup_prob) => {
                        let (mixed, label) = mixup_pair(&train_set.clips[r], clip, cfg.mixup_alpha, &mut rng)?;
                        clips.push(mixed);
                        targets.push(label);
                    }
                    _ => {
                        clips.push(clip.clone());
                        targets.push(clip.label);
                    }
                }
            }
            let batch = make_batch(&clips)?;
            let loss = train_step(&mut model, &mut opt, &batch, &targets, lr)?;
            if !loss.is_finite() {
                let ids: Vec<String> = slots.iter().map(|&i| train_set.rows[i].clip_path.clone()).collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss}; clips {}", ids.join(" ")),
                });
            }
            if steps == 0 {
                first_loss = loss;
            }
            steps += 1;
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        let train_acc = if cfg.eval_train {
            let scores = score_clips(&model, &train_set, cfg.batch_size)?;
            let probs: Vec<f64> = scores.iter().map(|s| s.prob).collect();
            Some(accuracy(&probs, &labels))
        } else {
            None
        };
        let (val_acc, val_auc) = if val_set.is_empty() {
            (None, Auc(None))
        } else {
            let r = evaluate_set(&model, &val_set, Split::Val, cfg.batch_size)?;
            (Some(r.video_acc), r.video_auc)
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_acc,
            val_acc,
            val_auc,
            steps,
        };
        if let Some(dir) = &paths {
            append_metrics(dir, &m)?;
            save_checkpoint_with_config(&model, cfg, dir)?;
        }
        observer(&m);
        history.push(m);
    }
    Ok(TrainOutcome {
        model,
        history,
        first_loss,
        steps,
    })
}

fn append_metrics(dir: &Path, m: &EpochMetrics) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?;
    writeln!(f, "{}", m.csv_row())?;
    Ok(())
}

pub fn save_checkpoint_with_config(model: &XdlfModel<f32>, cfg: &TrainConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(CHECKPOINT_FILE);
    model.save(&path)?;
    fs::write(dir.join(CHECKPOINT_CONFIG_FILE), cfg.to_kv_string())?;
    Ok(path)
}

/// Loads a checkpoint together with the `checkpoint.cfg` beside it.
pub fn load_checkpoint_with_config(path: &Path) -> Result<(XdlfModel<f32>, TrainConfig)> {
    let cfg_path = path.with_extension("cfg");
    let cfg = TrainConfig::load(&cfg_path)
        .map_err(|e| Error::Config(format!("reading {}: {e}", cfg_path.display())))?;
    let model = XdlfModel::load(cfg.model_config(), path)?;
    Ok((model, cfg))
}

/// Eval-mode fake probability of every clip, in set order.
pub fn score_clips(model: &XdlfModel<f32>, set: &ClipSet, batch_size: usize) -> Result<Vec<ClipScore>> {
    let mut out = Vec::with_capacity(set.len());
    for (rows, clips) in set.rows.chunks(batch_size.max(1)).zip(set.clips.chunks(batch_size.max(1))) {
        let logits = model.logits(&make_batch(clips)?)?;
        for (row, z) in rows.iter().zip(logits) {
            out.push(ClipScore {
                video_id: row.video_id.clone(),
                label: row.label,
                artifact_kind: row.artifact_kind,
                prob: f64::from(sigmoid_scalar(z)),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub clip_acc: f64,
    pub clip_auc: Auc,
    pub video_acc: f64,
    pub video_auc: Auc,
    /// Video-level counts at threshold 0.5.
    pub confusion: Confusion,
    pub clips: Vec<ClipScore>,
    pub videos: Vec<VideoScore>,
}

impl EvalReport {
    pub fn from_clip_scores(split: Split, clips: Vec<ClipScore>) -> Self {
        let cp: Vec<f64> = clips.iter().map(|c| c.prob).collect();
        let cl: Vec<u8> = clips.iter().map(|c| c.label).collect();
        let videos = video_scores(&clips);
        let vp: Vec<f64> = videos.iter().map(|v| v.prob).collect();
        let vl: Vec<u8> = videos.iter().map(|v| v.label).collect();
        let confusion = Confusion::from_scores(&vp, &vl);
        EvalReport {
            split,
            clip_acc: accuracy(&cp, &cl),
            clip_auc: Auc(auc(&cp, &cl)),
            video_acc: confusion.accuracy(),
            video_auc: Auc(auc(&vp, &vl)),
            confusion,
            clips,
            videos,
        }
    }

    /// Video AUC of the real videos against the fakes of `kind`.
    pub fn kind_auc(&self, kind: ArtifactKind) -> Auc {
        Auc(kind_auc(&self.videos, kind))
    }

    /// One summary JSON object followed by one object per video.
    pub fn to_json_lines(&self) -> String {
        let auc_json = |a: Auc| match a.0 {
            Some(v) => serde_json::json!(v),
            None => serde_json::json!("undefined"),
        };
        let kinds: serde_json::Map<String, serde_json::Value> = ArtifactKind::ALL
            .iter()
            .map(|&k| (k.name().to_owned(), auc_json(self.kind_auc(k))))
            .collect();
        let summary = serde_json::json!({
            "record": "summary",
            "split": self.split.name(),
            "clips": self.clips.len(),
            "videos": self.videos.len(),
            "clip_acc": self.clip_acc,
            "clip_auc": auc_json(self.clip_auc),
            "video_acc": self.video_acc,
            "video_auc": auc_json(self.video_auc),
            "video_auc_by_kind": kinds,
            "confusion": {
                "tp": self.confusion.tp,
                "fp": self.confusion.fp,
                "tn": self.confusion.tn,
                "fn": self.confusion.fn_,
            },
        });
        let mut out = format!("{summary}\n");
        for v in &self.videos {
            let line = serde_json::json!({
                "record": "video",
                "video_id": v.video_id,
                "label": v.label,
                "artifact_kind": v.artifact_kind.map_or("none", |k| k.name()),
                "clips": v.clips,
                "prob": v.prob,
            });
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

pub fn evaluate_set(model: &XdlfModel<f32>, set: &ClipSet, split: Split, batch_size: usize) -> Result<EvalReport> {
    Ok(EvalReport::from_clip_scores(split, score_clips(model, set, batch_size)?))
}

/// Scores every clip of `split` in eval mode and aggregates per video.
pub fn evaluate(model: &XdlfModel<f32>, corpus: &CorpusIndex, split: Split, batch_size: usize) -> Result<EvalReport> {
    let set = ClipSet::load(corpus, split)?;
    if set.is_empty() {
        return Err(Error::InvalidInput(format!("split {split} has no clips")));
    }
    evaluate_set(model, &set, split, batch_size)
}
