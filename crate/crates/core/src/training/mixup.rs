//! Mixup on aligned real/fake pairs.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::datagen::Clip;
use crate::error::{Error, Result};

/// Checks that `fake` was derived from `real` over the same frames.
pub fn check_aligned(real: &Clip, fake: &Clip) -> Result<()> {
    if real.label != 0.0 || fake.label != 1.0 {
        return Err(Error::InvalidInput(format!(
            "mixup needs a real and a fake clip, got labels {} and {}",
            real.label, fake.label
        )));
    }
    if fake.source_video != real.video_id {
        return Err(Error::InvalidInput(format!(
            "{} derives from {}, not {}",
            fake.video_id, fake.source_video, real.video_id
        )));
    }
    if fake.frame_start != real.frame_start || fake.frames.shape() != real.frames.shape() {
        return Err(Error::InvalidInput(format!(
            "frames of {} (start {}) and {} (start {}) are not aligned",
            real.video_id, real.frame_start, fake.video_id, fake.frame_start
        )));
    }
    Ok(())
}

/// `beta * real + (1 - beta) * fake` with soft label `1 - beta`; landmarks
/// (hence boxes) come from the real clip.
pub fn mix_with_beta(real: &Clip, fake: &Clip, beta: f32) -> Result<(Clip, f32)> {
    check_aligned(real, fake)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidInput(format!("mixup weight {beta} outside [0, 1]")));
    }
    let frames = real
        .frames
        .zip_map(&fake.frames, "mixup", |r, f| beta * r + (1.0 - beta) * f)?;
    let label = 1.0 - beta;
    let mixed = Clip {
        video_id: fake.video_id.clone(),
        source_video: real.video_id.clone(),
        frame_start: real.frame_start,
        frames,
        landmarks: real.landmarks.clone(),
        label,
    };
    Ok((mixed, label))
}

/// Draws `beta ~ Beta(alpha, alpha)` and mixes the pair.
pub fn mixup_pair(real: &Clip, fake: &Clip, alpha: f64, rng: &mut impl Rng) -> Result<(Clip, f32)> {
    let dist = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    mix_with_beta(real, fake, dist.sample(rng) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_fake_clip, gen_real_clip, ArtifactKind, ArtifactSpec, ClipSpec};
    use crate::fslr::Region;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> (Clip, Clip) {
        let spec = ClipSpec {
            video_id: "r0003".into(),
            frames: 4,
            height: 32,
            width: 32,
            motion_amplitude: 1.0,
            jitter_amplitude: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real = gen_real_clip(&spec, &mut rng).unwrap();
        let artifact = ArtifactSpec {
            kind: ArtifactKind::FrequencyChecker,
            region: Region::Nose,
            intensity: 1.0,
        };
        let fake = gen_fake_clip(&real, artifact, &mut rng).unwrap();
        (real, fake)
    }

    #[test]
    fn extreme_and_midpoint_weights() {
        let (real, fake) = pair();
        let (m, label) = mix_with_beta(&real, &fake, 1.0).unwrap();
        assert_eq!((m.frames.data(), label), (real.frames.data(), 0.0));
        assert_eq!(m.landmarks, real.landmarks);
        let (m, label) = mix_with_beta(&real, &fake, 0.5).unwrap();
        assert_eq!(label, 0.5);
        for ((x, r), f) in m.frames.data().iter().zip(real.frames.data()).zip(fake.frames.data()) {
            assert!((x - (r + f) / 2.0).abs() <= 1e-7);
        }
        let (m, label) = mix_with_beta(&real, &fake, 0.0).unwrap();
        assert_eq!((m.frames.data(), label), (fake.frames.data(), 1.0));
    }

    #[test]
    fn unaligned_pairs_are_rejected() {
        let (real, fake) = pair();
        let mut other = fake.clone();
        other.source_video = "r0004".into();
        assert!(mix_with_beta(&real, &other, 0.5).is_err());
        let mut shifted = fake.clone();
        shifted.frame_start = 4;
        assert!(mix_with_beta(&real, &shifted, 0.5).is_err());
        assert!(mix_with_beta(&fake, &real, 0.5).is_err());
        assert!(mixup_pair(&real, &fake, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().is_config());
    }

    #[test]
    fn expected_label_is_one_half() {
        let (real, fake) = pair();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = Beta::new(0.5, 0.5).unwrap();
        let draws: Vec<f64> = (0..10_000).map(|_| 1.0 - dist.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() <= 0.02, "{mean}");
        // The pair-level entry point uses the same draw.
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let (_, label) = mixup_pair(&real, &fake, 0.5, &mut a).unwrap();
        assert_eq!(label, 1.0 - dist.sample(&mut b) as f32);
    }
}
