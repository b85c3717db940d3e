//! Aggregates clip probabilities into video scores and reports ACC and the
//! rank-statistic AUC, cross-checked against the pairwise definition.
//!
//! cargo run --example video_metrics

use xdlf::datagen::ArtifactKind;
use xdlf::training::metrics::{accuracy, auc, auc_brute_force, kind_auc, video_scores, ClipScore};

fn main() {
    let clip = |id: &str, label: u8, kind: Option<ArtifactKind>, prob: f64| ClipScore {
        video_id: id.into(),
        label,
        artifact_kind: kind,
        prob,
    };
    let clips = [
        clip("r0000", 0, None, 0.10),
        clip("r0000", 0, None, 0.30),
        clip("r0001", 0, None, 0.55),
        clip("r0001", 0, None, 0.45),
        clip("f0000", 1, Some(ArtifactKind::FrequencyChecker), 0.70),
        clip("f0000", 1, Some(ArtifactKind::FrequencyChecker), 0.90),
        clip("f0001", 1, Some(ArtifactKind::TemporalFlicker), 0.40),
        clip("f0001", 1, Some(ArtifactKind::TemporalFlicker), 0.52),
    ];
    let videos = video_scores(&clips);
    for v in &videos {
        println!("{} label {} mean prob {:.3} over {} clips", v.video_id, v.label, v.prob, v.clips);
    }
    let probs: Vec<f64> = videos.iter().map(|v| v.prob).collect();
    let labels: Vec<u8> = videos.iter().map(|v| v.label).collect();
    println!("video ACC  {:.3}", accuracy(&probs, &labels));
    println!("video AUC  {:?} (pairwise {:?})", auc(&probs, &labels), auc_brute_force(&probs, &labels));
    for kind in ArtifactKind::ALL {
        println!("{:>22} AUC {:?}", kind.name(), kind_auc(&videos, kind));
    }
}
