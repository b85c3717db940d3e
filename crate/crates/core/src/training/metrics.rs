//! Clip- and video-level accuracy and ROC AUC.

use std::cmp::Ordering;
use std::fmt;

use crate::datagen::ArtifactKind;

/// Scores at or above this are called fake.
pub const THRESHOLD: f64 = 0.5;

/// AUC as the Mann-Whitney rank statistic with mid-ranks for ties, so a tied
/// real/fake pair counts 1/2. `None` when either class is absent.
///
/// The statistic is accumulated as an integer (twice the U statistic) so it
/// agrees bit for bit with the pairwise count.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_fake = labels.iter().filter(|&&l| l == 1).count();
    let n_real = labels.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the 1-based mid-rank of a tie group [i, j) is i + j + 1.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let fakes = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += fakes * (i + j + 1) as u64;
        i = j;
    }
    let nf = n_fake as u64;
    let twice_u = twice_rank_sum - nf * (nf + 1);
    Some(twice_u as f64 / (2 * nf * n_real as u64) as f64)
}

/// Pairwise definition of AUC, quadratic in the number of scores.
pub fn auc_brute_force(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut twice_wins: u64 = 0;
    let mut pairs: u64 = 0;
    for (f, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (r, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1;
            twice_wins += match f.partial_cmp(r) {
                Some(Ordering::Greater) => 2,
                Some(Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    (pairs > 0).then(|| twice_wins as f64 / (2 * pairs) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    /// Fakes called fake.
    pub tp: usize,
    /// Reals called fake.
    pub fp: usize,
    pub tn: usize,
    /// Fakes called real.
    pub fn_: usize,
}

impl Confusion {
    pub fn from_scores(probs: &[f64], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &l) in probs.iter().zip(labels) {
            match (p >= THRESHOLD, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return f64::NAN;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

pub fn accuracy(probs: &[f64], labels: &[u8]) -> f64 {
    Confusion::from_scores(probs, labels).accuracy()
}

/// AUC for a report: a number, or the explicit marker `undefined`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Auc(pub Option<f64>);

impl fmt::Display for Auc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.6}"),
            None => f.write_str("undefined"),
        }
    }
}

/// One clip's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipScore {
    pub video_id: String,
    pub label: u8,
    pub artifact_kind: Option<ArtifactKind>,
    pub prob: f64,
}

/// A video's prediction: the mean of its clip probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScore {
    pub video_id: String,
    pub label: u8,
    pub artifact_kind: Option<ArtifactKind>,
    pub prob: f64,
    pub clips: usize,
}

/// Averages clip probabilities per video, keeping first-seen video order.
pub fn video_scores(clips: &[ClipScore]) -> Vec<VideoScore> {
    let mut out: Vec<VideoScore> = Vec::new();
    for c in clips {
        match out.iter_mut().find(|v| v.video_id == c.video_id) {
            Some(v) => {
                v.prob += c.prob;
                v.clips += 1;
            }
            None => out.push(VideoScore {
                video_id: c.video_id.clone(),
                label: c.label,
                artifact_kind: c.artifact_kind,
                prob: c.prob,
                clips: 1,
            }),
        }
    }
    for v in &mut out {
        v.prob /= v.clips as f64;
    }
    out
}

/// Video AUC over every real video and the fakes of one artifact kind.
pub fn kind_auc(videos: &[VideoScore], kind: ArtifactKind) -> Option<f64> {
    let subset: Vec<&VideoScore> = videos
        .iter()
        .filter(|v| v.label == 0 || v.artifact_kind == Some(kind))
        .collect();
    let scores: Vec<f64> = subset.iter().map(|v| v.prob).collect();
    let labels: Vec<u8> = subset.iter().map(|v| v.label).collect();
    auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_cases() {
        let labels = [0, 0, 1, 1];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels), Some(0.0));
        assert_eq!(auc(&[0.4; 4], &labels), Some(0.5));
        assert_eq!(auc(&[0.3, 0.7], &[1, 1]), None);
        assert_eq!(Auc(None).to_string(), "undefined");
        let c = Confusion::from_scores(&[0.2, 0.5, 0.9, 0.1], &labels);
        assert_eq!(c, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(c.accuracy(), 0.5);
    }

    #[test]
    fn rank_statistic_equals_pairwise_count_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.random_range(2..40);
            // Coarse scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 7.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            assert_eq!(auc(&scores, &labels), auc_brute_force(&scores, &labels));
        }
    }

    #[test]
    fn video_probability_is_the_clip_mean() {
        let clip = |id: &str, label, prob| ClipScore {
            video_id: id.into(),
            label,
            artifact_kind: None,
            prob,
        };
        let v = video_scores(&[clip("r1", 0, 0.2), clip("f1", 1, 0.9), clip("r1", 0, 0.6), clip("f1", 1, 0.5)]);
        assert_eq!(v.len(), 2);
        assert_eq!((v[0].video_id.as_str(), v[0].clips), ("r1", 2));
        assert!((v[0].prob - 0.4).abs() < 1e-15 && (v[1].prob - 0.7).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_monotone_maps(
            pairs in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..30)
        ) {
            let (scores, labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            prop_assert_eq!(auc(&scores, &labels), auc(&mapped, &labels));
            if let Some(a) = auc(&scores, &labels) {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
