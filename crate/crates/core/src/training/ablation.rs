//! Variant-by-seed ablation study on one corpus: train every variant with
//! every seed, evaluate on the test split, and average video AUCs.

use std::time::Instant;

use crate::datagen::corpus::{CorpusIndex, Split};
use crate::datagen::ArtifactKind;
use crate::error::{Error, Result};
use crate::model::Variant;

use super::trainer::{evaluate, train, EvalReport, TrainConfig};

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
    pub secs: f64,
}

impl AblationRun {
    /// Overall video AUC, then one per artifact kind in `ArtifactKind::ALL`
    /// order.
    pub fn aucs(&self) -> [Option<f64>; 4] {
        let k = ArtifactKind::ALL.map(|kind| self.report.kind_auc(kind).0);
        [self.report.video_auc.0, k[0], k[1], k[2]]
    }
}

/// Seed-averaged video AUCs of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub video_auc: f64,
    pub kind_auc: [f64; 3],
}

impl VariantSummary {
    pub fn kind(&self, kind: ArtifactKind) -> f64 {
        self.kind_auc[kind as usize]
    }
}

/// Trains `base` once per `(variant, seed)`; `base.seed` is replaced by each
/// seed. Runs are reported to `on_run` as they finish.
pub fn run_ablation(
    base: &TrainConfig,
    corpus: &CorpusIndex,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            let start = Instant::now();
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let outcome = train(&cfg, corpus, None, |_| {})?;
            let report = evaluate(&outcome.model, corpus, Split::Test, cfg.batch_size)?;
            let run = AblationRun {
                variant,
                seed,
                report,
                secs: start.elapsed().as_secs_f64(),
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Averages each variant's runs; an undefined AUC in any run is an error
/// because the test split must contain both classes and every kind.
pub fn summarize(runs: &[AblationRun]) -> Result<Vec<VariantSummary>> {
    let mut out: Vec<VariantSummary> = Vec::new();
    for run in runs {
        let a = run.aucs();
        let Some(vals) = a.iter().copied().collect::<Option<Vec<f64>>>() else {
            return Err(Error::InvalidInput(format!(
                "{} seed {}: undefined AUC on the test split",
                run.variant, run.seed
            )));
        };
        let s = match out.iter_mut().find(|s| s.variant == run.variant) {
            Some(s) => s,
            None => {
                out.push(VariantSummary {
                    variant: run.variant,
                    runs: 0,
                    video_auc: 0.0,
                    kind_auc: [0.0; 3],
                });
                out.last_mut().expect("just pushed")
            }
        };
        s.runs += 1;
        s.video_auc += vals[0];
        for (k, v) in s.kind_auc.iter_mut().zip(&vals[1..]) {
            *k += v;
        }
    }
    for s in &mut out {
        let n = s.runs as f64;
        s.video_auc /= n;
        s.kind_auc.iter_mut().for_each(|k| *k /= n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::metrics::ClipScore;

    fn run(variant: Variant, seed: u64, fake_probs: [f64; 3]) -> AblationRun {
        let mut clips = vec![
            ClipScore {
                video_id: "r0000".into(),
                label: 0,
                artifact_kind: None,
                prob: 0.5,
            },
            ClipScore {
                video_id: "r0001".into(),
                label: 0,
                artifact_kind: None,
                prob: 0.2,
            },
        ];
        for (i, (kind, p)) in ArtifactKind::ALL.iter().zip(fake_probs).enumerate() {
            clips.push(ClipScore {
                video_id: format!("f000{i}"),
                label: 1,
                artifact_kind: Some(*kind),
                prob: p,
            });
        }
        AblationRun {
            variant,
            seed,
            report: EvalReport::from_clip_scores(Split::Test, clips),
            secs: 0.0,
        }
    }

    #[test]
    fn summary_averages_over_seeds() {
        // Per-kind AUC against reals {0.5, 0.2}: p = 0.9 -> 1, 0.3 -> 0.5,
        // 0.5 -> 0.75 (tie counts half), 0.1 -> 0.
        let runs = [
            run(Variant::Full, 0, [0.9, 0.3, 0.5]),
            run(Variant::Full, 1, [0.9, 0.1, 0.9]),
            run(Variant::NoFgfe, 0, [0.1, 0.1, 0.1]),
        ];
        let s = summarize(&runs).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].runs, 2);
        assert_eq!(s[0].kind_auc, [1.0, 0.25, 0.875]);
        // Overall: seed 0 -> (2 + 1 + 1.5) / 6 = 0.75; seed 1 -> 4 / 6.
        assert!((s[0].video_auc - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert_eq!(s[1].video_auc, 0.0);
        assert_eq!(s[0].kind(ArtifactKind::TemporalFlicker), 0.875);
    }

    #[test]
    fn missing_kind_is_an_error() {
        let mut r = run(Variant::Full, 0, [0.9, 0.9, 0.9]);
        r.report = EvalReport::from_clip_scores(Split::Test, r.report.clips[..3].to_vec());
        assert!(summarize(&[r]).is_err());
    }
}
