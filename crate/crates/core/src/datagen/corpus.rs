//! On-disk corpus: `<root>/<split>/<video_id>/clip_<k>.ten` frames
//! (`[3, d, h, w]` f32), `clip_<k>.landmarks.csv` beside each clip, and
//! `<root>/index.csv` with columns
//! `video_id,split,clip_path,label,artifact_kind,region`.
//!
//! Videos come in aligned pairs: fake `fNNNN` is derived frame by frame from
//! real `rNNNN`, and both always land in the same split.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{gen_fake_clip, gen_real_clip, ArtifactKind, ArtifactSpec, Clip, ClipSpec};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::fslr::{read_landmarks_csv, write_landmarks_csv, Region};
use crate::tensor::io::{load_ten, save_ten};

pub const INDEX_HEADER: &str = "video_id,split,clip_path,label,artifact_kind,region";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected train, val or test)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatagenConfig {
    pub n_videos: usize,
    pub clips_per_video: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motion_amplitude: f64,
    pub jitter_amplitude: f64,
    /// Relative weights of blur, checker and flicker fakes.
    pub artifact_mix: [f64; 3],
    pub intensity_min: f64,
    pub intensity_max: f64,
    /// Train, val and test fractions of the video pairs.
    pub splits: [f64; 3],
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            n_videos: 32,
            clips_per_video: 2,
            frames: 8,
            height: 64,
            width: 64,
            motion_amplitude: 1.5,
            jitter_amplitude: 0.75,
            artifact_mix: [1.0, 1.0, 1.0],
            intensity_min: 0.6,
            intensity_max: 1.0,
            splits: [0.625, 0.125, 0.25],
            seed: 0,
        }
    }
}

impl DatagenConfig {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = DatagenConfig::default();
        let cfg = DatagenConfig {
            n_videos: kv.take("n_videos", d.n_videos)?,
            clips_per_video: kv.take("clips_per_video", d.clips_per_video)?,
            frames: kv.take("frames", d.frames)?,
            height: kv.take("height", d.height)?,
            width: kv.take("width", d.width)?,
            motion_amplitude: kv.take("motion_amplitude", d.motion_amplitude)?,
            jitter_amplitude: kv.take("jitter_amplitude", d.jitter_amplitude)?,
            artifact_mix: kv.take_array("artifact_mix", d.artifact_mix)?,
            intensity_min: kv.take("intensity_min", d.intensity_min)?,
            intensity_max: kv.take("intensity_max", d.intensity_max)?,
            splits: kv.take_array("splits", d.splits)?,
            seed: kv.take("seed", d.seed)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_videos < 4 || self.n_videos % 2 != 0 {
            return bad(format!("n_videos must be even and at least 4, got {}", self.n_videos));
        }
        if self.clips_per_video == 0 || self.frames == 0 {
            return bad("clips_per_video and frames must be positive".into());
        }
        if self.artifact_mix.iter().any(|&w| !(w >= 0.0)) || self.artifact_mix.iter().sum::<f64>() <= 0.0 {
            return bad(format!("artifact_mix {:?} needs non-negative weights with a positive sum", self.artifact_mix));
        }
        if !(0.0 < self.intensity_min && self.intensity_min <= self.intensity_max && self.intensity_max <= 1.0) {
            return bad(format!("intensity range [{}, {}] must lie in (0, 1]", self.intensity_min, self.intensity_max));
        }
        if self.splits.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be in [0, 1] and sum to 1", self.splits));
        }
        if !(self.motion_amplitude >= 0.0 && self.jitter_amplitude >= 0.0) {
            return bad("motion amplitudes must be non-negative".into());
        }
        Ok(())
    }

    fn clip_spec(&self, video_id: String) -> ClipSpec {
        ClipSpec {
            video_id,
            frames: self.frames * self.clips_per_video,
            height: self.height,
            width: self.width,
            motion_amplitude: self.motion_amplitude,
            jitter_amplitude: self.jitter_amplitude,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexRow {
    pub video_id: String,
    pub split: Split,
    /// Relative to the corpus root.
    pub clip_path: String,
    pub label: u8,
    pub artifact_kind: Option<ArtifactKind>,
    pub region: Option<Region>,
}

impl IndexRow {
    /// Real video a clip's frames derive from.
    pub fn source_video(&self) -> String {
        source_video(&self.video_id)
    }

    /// Clip number parsed from `clip_<k>.ten`.
    pub fn clip_number(&self) -> Result<usize> {
        Path::new(&self.clip_path)
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("clip_"))
            .and_then(|k| k.parse().ok())
            .ok_or_else(|| Error::format("index", format!("clip path {:?} is not clip_<k>.ten", self.clip_path)))
    }
}

pub fn source_video(video_id: &str) -> String {
    match video_id.strip_prefix('f') {
        Some(n) => format!("r{n}"),
        None => video_id.to_owned(),
    }
}

fn landmarks_path(clip: &Path) -> PathBuf {
    clip.with_extension("landmarks.csv")
}

#[derive(Clone, Debug)]
pub struct CorpusIndex {
    pub root: PathBuf,
    pub rows: Vec<IndexRow>,
}

impl CorpusIndex {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let text = fs::read_to_string(root.join("index.csv"))?;
        let mut lines = text.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(Error::format("index", format!("header must be {INDEX_HEADER:?}")));
        }
        let rows = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                let bad = |m: &str| Error::format("index", format!("line {}: {m}", n + 2));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(bad("expected 6 fields"));
                }
                let label = match f[3] {
                    "0" => 0,
                    "1" => 1,
                    _ => return Err(bad("label must be 0 or 1")),
                };
                let artifact_kind = match f[4] {
                    "none" => None,
                    k => Some(k.parse().map_err(|_| bad("bad artifact kind"))?),
                };
                let region = match f[5] {
                    "none" => None,
                    r => Some(Region::from_name(r).ok_or_else(|| bad("bad region"))?),
                };
                if (label == 1) != artifact_kind.is_some() || artifact_kind.is_some() != region.is_some() {
                    return Err(bad("fakes need artifact metadata and reals must have none"));
                }
                Ok(IndexRow {
                    video_id: f[0].to_owned(),
                    split: f[1].parse().map_err(|_| bad("bad split"))?,
                    clip_path: f[2].to_owned(),
                    label,
                    artifact_kind,
                    region,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CorpusIndex { root, rows })
    }

    pub fn write(&self) -> Result<()> {
        let mut out = String::from(INDEX_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.video_id,
                r.split,
                r.clip_path,
                r.label,
                r.artifact_kind.map_or("none", |k| k.name()),
                r.region.map_or("none", |g| g.name()),
            ));
        }
        fs::write(self.root.join("index.csv"), out)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&IndexRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    /// Distinct video ids of a split in index order.
    pub fn videos(&self, split: Split) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for r in self.split(split) {
            if !seen.contains(&r.video_id.as_str()) {
                seen.push(&r.video_id);
            }
        }
        seen
    }

    pub fn load_clip(&self, row: &IndexRow) -> Result<Clip> {
        let path = self.root.join(&row.clip_path);
        let frames = load_ten(&path)?.into_tensor::<f32>();
        if frames.ndim() != 4 || frames.shape()[0] != 3 {
            return Err(Error::format("clip", format!("{}: shape {:?} is not [3, d, h, w]", path.display(), frames.shape())));
        }
        let (d, h, w) = (frames.shape()[1], frames.shape()[2], frames.shape()[3]);
        let landmarks = read_landmarks_csv(landmarks_path(&path), h, w)?;
        if landmarks.len() != d {
            return Err(Error::format("clip", format!("{}: {} landmark rows for {d} frames", path.display(), landmarks.len())));
        }
        Ok(Clip {
            video_id: row.video_id.clone(),
            source_video: row.source_video(),
            frame_start: row.clip_number()? * d,
            frames,
            landmarks,
            label: f32::from(row.label),
        })
    }
}

/// Smooth weighted round robin: every prefix of the returned sequence holds
/// each kind within one of its proportional share.
fn artifact_sequence(mix: [f64; 3], n: usize) -> Vec<ArtifactKind> {
    let total: f64 = mix.iter().sum();
    let mut current = [0.0; 3];
    (0..n)
        .map(|_| {
            for (c, w) in current.iter_mut().zip(mix) {
                *c += w;
            }
            let best = (0..3)
                .filter(|&k| mix[k] > 0.0)
                .max_by(|&a, &b| current[a].total_cmp(&current[b]).then(b.cmp(&a)))
                .expect("positive mix");
            current[best] -= total;
            ArtifactKind::ALL[best]
        })
        .collect()
}

/// Pair counts per split; every split with a positive fraction gets at least
/// one pair.
fn split_counts(pairs: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let mut counts = [0; 3];
    for k in 1..3 {
        counts[k] = (pairs as f64 * fractions[k]).round() as usize;
        if fractions[k] > 0.0 {
            counts[k] = counts[k].max(1);
        }
    }
    let rest = pairs
        .checked_sub(counts[1] + counts[2])
        .filter(|&r| r > 0 || fractions[0] == 0.0)
        .ok_or_else(|| Error::Config(format!("{pairs} video pairs cannot cover split fractions {fractions:?}")))?;
    counts[0] = rest;
    Ok(counts)
}

struct PairPlan {
    number: usize,
    split: Split,
    artifact: ArtifactSpec,
}

/// Per-video generator: the stream is the pair number, so output does not
/// depend on scheduling.
fn pair_rng(seed: u64, number: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(number as u64 + 1);
    rng
}

fn plan_pairs(cfg: &DatagenConfig) -> Result<Vec<PairPlan>> {
    let pairs = cfg.n_videos / 2;
    let counts = split_counts(pairs, cfg.splits)?;
    let mut order: Vec<usize> = (0..pairs).collect();
    order.shuffle(&mut pair_rng(cfg.seed, usize::MAX - 1));
    let mut split_of = vec![Split::Train; pairs];
    let mut at = 0;
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        for &p in &order[at..at + n] {
            split_of[p] = *split;
        }
        at += n;
    }
    // Kinds are dealt split by split so each split sees the full mix.
    let mut by_split: Vec<usize> = (0..pairs).collect();
    by_split.sort_by_key(|&p| (split_of[p], p));
    let kinds = artifact_sequence(cfg.artifact_mix, pairs);
    let mut plans: Vec<PairPlan> = by_split
        .into_iter()
        .zip(kinds)
        .map(|(number, kind)| {
            let mut rng = pair_rng(cfg.seed ^ 0x5eed, number);
            let region = Region::ALL[rng.random_range(0..4)];
            let intensity = if cfg.intensity_max > cfg.intensity_min {
                rng.random_range(cfg.intensity_min..=cfg.intensity_max)
            } else {
                cfg.intensity_max
            };
            PairPlan {
                number,
                split: split_of[number],
                artifact: ArtifactSpec { kind, region, intensity },
            }
        })
        .collect();
    plans.sort_by_key(|p| p.number);
    Ok(plans)
}

fn write_video(root: &Path, split: Split, clip: &Clip, clip_len: usize) -> Result<Vec<String>> {
    let dir = root.join(split.name()).join(&clip.video_id);
    fs::create_dir_all(&dir)?;
    clip.windows(clip_len)?
        .iter()
        .enumerate()
        .map(|(k, part)| {
            let rel = format!("{split}/{}/clip_{k}.ten", clip.video_id);
            let path = root.join(&rel);
            save_ten(&path, &part.frames)?;
            write_landmarks_csv(landmarks_path(&path), &part.landmarks)?;
            Ok(rel)
        })
        .collect()
}

/// Renders and writes the whole corpus under `root`; generation runs in
/// parallel across video pairs.
pub fn build_corpus(cfg: &DatagenConfig, root: impl AsRef<Path>) -> Result<CorpusIndex> {
    cfg.validate()?;
    let root = root.as_ref().to_path_buf();
    fs::create_dir_all(&root)?;
    let plans = plan_pairs(cfg)?;
    let rows: Vec<Vec<IndexRow>> = plans
        .par_iter()
        .map(|plan| {
            let mut rng = pair_rng(cfg.seed, plan.number);
            let real = gen_real_clip(&cfg.clip_spec(format!("r{:04}", plan.number)), &mut rng)?;
            let fake = gen_fake_clip(&real, plan.artifact, &mut rng)?;
            let mut rows = Vec::with_capacity(2 * cfg.clips_per_video);
            for clip in [&real, &fake] {
                let fake = clip.label > 0.5;
                for path in write_video(&root, plan.split, clip, cfg.frames)? {
                    rows.push(IndexRow {
                        video_id: clip.video_id.clone(),
                        split: plan.split,
                        clip_path: path,
                        label: u8::from(fake),
                        artifact_kind: fake.then_some(plan.artifact.kind),
                        region: fake.then_some(plan.artifact.region),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let index = CorpusIndex {
        root,
        rows: rows.into_iter().flatten().collect(),
    };
    index.write()?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn small() -> DatagenConfig {
        DatagenConfig {
            n_videos: 16,
            clips_per_video: 2,
            frames: 3,
            height: 32,
            width: 32,
            splits: [0.5, 0.25, 0.25],
            seed: 11,
            ..DatagenConfig::default()
        }
    }

    #[test]
    fn corpus_has_the_promised_files_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatagenConfig {
            height: 32,
            width: 32,
            ..DatagenConfig::default()
        };
        let index = build_corpus(&cfg, dir.path()).unwrap();
        assert_eq!(index.rows.len(), 64);
        let mut tens = 0;
        let mut csvs = 0;
        for split in Split::ALL {
            let Ok(videos) = fs::read_dir(dir.path().join(split.name())) else { continue };
            for v in videos {
                for f in fs::read_dir(v.unwrap().path()).unwrap() {
                    let name = f.unwrap().file_name().into_string().unwrap();
                    tens += usize::from(name.ends_with(".ten"));
                    csvs += usize::from(name.ends_with(".landmarks.csv"));
                }
            }
        }
        assert_eq!((tens, csvs), (64, 64));
        let labels: usize = index.rows.iter().map(|r| usize::from(r.label)).sum();
        assert_eq!(labels, 32);
        let reloaded = CorpusIndex::load(dir.path()).unwrap();
        assert_eq!(reloaded.rows, index.rows);
    }

    #[test]
    fn splits_are_disjoint_and_keep_pairs_together() {
        let dir = tempfile::tempdir().unwrap();
        let index = build_corpus(&small(), dir.path()).unwrap();
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &index.rows {
            assert_eq!(*split_of.entry(&r.video_id).or_insert(r.split), r.split, "{} spans splits", r.video_id);
        }
        for (id, split) in &split_of {
            assert_eq!(split_of[source_video(id).as_str()], *split);
        }
        let per_split: Vec<usize> = Split::ALL.iter().map(|&s| index.videos(s).len()).collect();
        assert_eq!(per_split, [8, 4, 4]);
        for s in Split::ALL {
            let labels: BTreeSet<u8> = index.split(s).iter().map(|r| r.label).collect();
            assert_eq!(labels.len(), 2, "{s} is not balanced");
        }
    }

    #[test]
    fn artifact_histogram_matches_the_mix() {
        for (mix, pairs) in [([1.0, 1.0, 1.0], 64), ([2.0, 1.0, 1.0], 30), ([0.0, 1.0, 3.0], 17), ([1.0, 1.0, 1.0], 7)] {
            let seq = artifact_sequence(mix, pairs);
            let total: f64 = mix.iter().sum();
            for (k, kind) in ArtifactKind::ALL.iter().enumerate() {
                let want = pairs as f64 * mix[k] / total;
                let got = seq.iter().filter(|&x| x == kind).count() as f64;
                assert!((got - want).abs() <= 1.0, "{mix:?} {kind}: {got} vs {want}");
            }
        }
        let plans = plan_pairs(&DatagenConfig {
            n_videos: 128,
            ..DatagenConfig::default()
        })
        .unwrap();
        let test: Vec<_> = plans.iter().filter(|p| p.split == Split::Test).collect();
        assert_eq!(test.len(), 16);
        for kind in ArtifactKind::ALL {
            let n = test.iter().filter(|p| p.artifact.kind == kind).count();
            assert!((5..=6).contains(&n), "{kind}: {n}");
        }
    }

    #[test]
    fn corpus_is_reproducible_and_clips_round_trip() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ia = build_corpus(&small(), a.path()).unwrap();
        build_corpus(&small(), b.path()).unwrap();
        assert_eq!(fs::read(a.path().join("index.csv")).unwrap(), fs::read(b.path().join("index.csv")).unwrap());
        for r in &ia.rows {
            assert_eq!(fs::read(a.path().join(&r.clip_path)).unwrap(), fs::read(b.path().join(&r.clip_path)).unwrap());
        }

        // A fake clip matches its aligned real clip outside the declared box.
        let fake = ia.rows.iter().find(|r| r.label == 1 && r.clip_path.ends_with("clip_1.ten")).unwrap();
        let real = ia
            .rows
            .iter()
            .find(|r| r.video_id == fake.source_video() && r.clip_path.ends_with("clip_1.ten"))
            .unwrap();
        let (f, r) = (ia.load_clip(fake).unwrap(), ia.load_clip(real).unwrap());
        assert_eq!((f.frame_start, f.source_video.as_str(), f.label), (3, real.video_id.as_str(), 1.0));
        assert_eq!(f.landmarks, r.landmarks);
        let boxes = r.boxes().unwrap();
        let region = fake.region.unwrap();
        let mut inside_delta: f32 = 0.0;
        for c in 0..3 {
            for t in 0..3 {
                for i in 0..32 {
                    for j in 0..32 {
                        let k = ((c * 3 + t) * 32 + i) * 32 + j;
                        let delta = (f.frames.data()[k] - r.frames.data()[k]).abs();
                        if boxes[t].get(region).contains(i, j) {
                            inside_delta = inside_delta.max(delta);
                        } else {
                            assert_eq!(delta, 0.0);
                        }
                    }
                }
            }
        }
        // The metadata oracle separates every pair.
        assert!(inside_delta > 0.0);
    }

    #[test]
    fn config_keys_are_checked() {
        let kv = KeyValues::parse("n_videos = 8\nartifact_mix = 1, 0, 1\nseed = 3\n", "t").unwrap();
        let cfg = DatagenConfig::from_kv(kv).unwrap();
        assert_eq!((cfg.n_videos, cfg.artifact_mix, cfg.seed), (8, [1.0, 0.0, 1.0], 3));
        assert!(DatagenConfig::from_kv(KeyValues::parse("videos = 8\n", "t").unwrap()).is_err());
        assert!(DatagenConfig::from_kv(KeyValues::parse("n_videos = 3\n", "t").unwrap()).is_err());
        assert!(DatagenConfig::from_kv(KeyValues::parse("splits = 0.5, 0.5, 0.5\n", "t").unwrap()).is_err());
        assert!(split_counts(2, [0.5, 0.25, 0.25]).is_err());
        assert_eq!(split_counts(64, [0.625, 0.125, 0.25]).unwrap(), [40, 8, 16]);
    }
}
