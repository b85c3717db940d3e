//! Implementations behind the `xdlf` subcommands. Every command that writes
//! artifacts also writes one `manifest.json` into its output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::datagen::corpus::{build_corpus, CorpusIndex, DatagenConfig, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckConfig, GradCheckReport};
use crate::inspect::{inspect_clip, write_inspection};
use crate::model::Variant;
use crate::selfcheck::{run_suite, Suite};
use crate::training::trainer::{
    evaluate, load_checkpoint_with_config, EpochMetrics, EvalReport, TrainConfig, CHECKPOINT_CONFIG_FILE, CHECKPOINT_FILE,
    METRICS_FILE,
};
use crate::training::train;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Audit record of one command run.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Effective configuration in `key = value` form.
    pub config: String,
    pub seed: u64,
    /// SHA-256 over the names and contents of every input file.
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format("manifest", e.to_string()))?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Content hash of files and directory trees, independent of where the
/// roots live: each file contributes its path relative to its root and its
/// bytes.
pub fn hash_inputs(roots: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for root in roots {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        for f in files {
            if f.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            let bytes = fs::read(&f)?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn load_kv(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", p.display())),
            other => other,
        }),
        None => Ok(KeyValues::default()),
    }
}

pub fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let start = Instant::now();
    let mut cfg = DatagenConfig::from_kv(load_kv(config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let index = build_corpus(&cfg, out)?;
    let inputs: Vec<&Path> = config.into_iter().collect();
    let manifest = RunManifest {
        command: "gen-data".into(),
        config: format!("{cfg:?}"),
        seed: cfg.seed,
        input_hash: hash_inputs(&inputs)?,
        inputs: inputs.iter().map(|p| display(p)).collect(),
        outputs: vec![display(&out.join("index.csv")), format!("{} clip files", index.rows.len())],
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

pub fn train_cmd(
    config: Option<&Path>,
    corpus: &Path,
    out: &Path,
    variant: Option<&str>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<RunManifest> {
    let start = Instant::now();
    let mut cfg = TrainConfig::from_kv(load_kv(config)?)?;
    if let Some(v) = variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    let index = CorpusIndex::load(corpus)?;
    let outcome = train(&cfg, &index, Some(out), &mut progress)?;
    let mut inputs: Vec<&Path> = config.into_iter().collect();
    inputs.push(corpus);
    let manifest = RunManifest {
        command: "train".into(),
        config: cfg.to_kv_string(),
        seed: cfg.seed,
        input_hash: hash_inputs(&inputs)?,
        inputs: inputs.iter().map(|p| display(p)).collect(),
        outputs: [CHECKPOINT_FILE, CHECKPOINT_CONFIG_FILE, METRICS_FILE]
            .iter()
            .map(|f| display(&out.join(f)))
            .chain([format!("{} optimizer steps", outcome.steps)])
            .collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// Default output directory of `eval`: `eval_<split>` beside the checkpoint.
pub fn default_eval_dir(checkpoint: &Path, split: Split) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(format!("eval_{split}"))
}

pub fn eval_cmd(checkpoint: &Path, corpus: &Path, split: Split, out: Option<&Path>) -> Result<(EvalReport, RunManifest)> {
    let start = Instant::now();
    let (model, cfg) = load_checkpoint_with_config(checkpoint)?;
    let index = CorpusIndex::load(corpus)?;
    let report = evaluate(&model, &index, split, cfg.batch_size)?;
    let dir = out.map_or_else(|| default_eval_dir(checkpoint, split), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    let report_path = dir.join("report.jsonl");
    fs::write(&report_path, report.to_json_lines())?;
    let cfg_path = checkpoint.with_extension("cfg");
    let inputs = [checkpoint, cfg_path.as_path(), corpus];
    let manifest = RunManifest {
        command: "eval".into(),
        config: format!("split = {split}\n{}", cfg.to_kv_string()),
        seed: cfg.seed,
        input_hash: hash_inputs(&inputs)?,
        inputs: inputs.iter().map(|p| display(p)).collect(),
        outputs: vec![display(&report_path)],
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(&dir)?;
    Ok((report, manifest))
}

/// `clip` is a `.ten` clip file with its `.landmarks.csv` beside it.
pub fn inspect_cmd(checkpoint: &Path, clip: &Path, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let (model, cfg) = load_checkpoint_with_config(checkpoint)?;
    let dir = clip.parent().ok_or_else(|| Error::InvalidInput(format!("{} has no parent", clip.display())))?;
    let root = dir.parent().and_then(Path::parent).unwrap_or(dir);
    let rel = clip.strip_prefix(root).unwrap_or(clip).to_string_lossy().into_owned();
    let video_id = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let row = crate::datagen::corpus::IndexRow {
        video_id: video_id.clone(),
        split: Split::Test,
        clip_path: rel,
        label: u8::from(video_id.starts_with('f')),
        artifact_kind: None,
        region: None,
    };
    let index = CorpusIndex {
        root: root.to_path_buf(),
        rows: Vec::new(),
    };
    let loaded = index.load_clip(&row)?;
    let ins = inspect_clip(&model, &loaded)?;
    let written = write_inspection(&ins, out)?;
    let landmarks = clip.with_extension("landmarks.csv");
    let cfg_path = checkpoint.with_extension("cfg");
    let inputs = [checkpoint, cfg_path.as_path(), clip, landmarks.as_path()];
    let manifest = RunManifest {
        command: "inspect".into(),
        config: cfg.to_kv_string(),
        seed: cfg.seed,
        input_hash: hash_inputs(&inputs)?,
        inputs: inputs.iter().map(|p| display(p)).collect(),
        outputs: written.iter().map(|p| display(p)).collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

pub fn grad_check_cmd(module: &str) -> Result<Vec<GradCheckReport>> {
    run_suite(module.parse::<Suite>()?, &GradCheckConfig::default())
}
