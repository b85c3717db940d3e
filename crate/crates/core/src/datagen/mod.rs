//! Synthetic face clips with forgery artifacts planted inside region boxes.
//!
//! A real clip is a smooth background with a face-like ellipse whose parts
//! (eyes, nose, mouth) move with a shared sinusoidal head motion plus small
//! per-part sinusoidal jitter. Landmarks are emitted from the same geometry,
//! so they follow the motion exactly. A fake clip copies its real clip and
//! alters pixels only inside one region box of every frame.

pub mod corpus;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fslr::{extract_boxes, FslrBox, FslrBoxMatrix, LandmarkSet, Region, NUM_LANDMARKS};
use crate::tensor::Tensor;

/// One fixed-length window of frames with its per-frame landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub video_id: String,
    /// Real video the frames derive from (the video itself for real clips).
    pub source_video: String,
    pub frame_start: usize,
    /// `[3, d, h, w]` in roughly `[0, 1]`.
    pub frames: Tensor<f32>,
    pub landmarks: Vec<LandmarkSet>,
    /// 0 real, 1 fake.
    pub label: f32,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    pub fn boxes(&self) -> Result<Vec<FslrBoxMatrix>> {
        let (h, w) = self.hw();
        self.landmarks.iter().map(|lm| extract_boxes(lm, h, w)).collect()
    }

    /// Splits into non-overlapping windows of `d` frames.
    pub fn windows(&self, d: usize) -> Result<Vec<Clip>> {
        let total = self.len();
        if d == 0 || total % d != 0 {
            return Err(Error::InvalidInput(format!("{total} frames do not split into clips of {d}")));
        }
        let (h, w) = self.hw();
        let plane = h * w;
        (0..total / d)
            .map(|k| {
                let mut data = Vec::with_capacity(3 * d * plane);
                for c in 0..3 {
                    let base = (c * total + k * d) * plane;
                    data.extend_from_slice(&self.frames.data()[base..base + d * plane]);
                }
                Ok(Clip {
                    video_id: self.video_id.clone(),
                    source_video: self.source_video.clone(),
                    frame_start: self.frame_start + k * d,
                    frames: Tensor::new(&[3, d, h, w], data)?,
                    landmarks: self.landmarks[k * d..(k + 1) * d].to_vec(),
                    label: self.label,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub video_id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Head-motion amplitude in pixels.
    pub motion_amplitude: f64,
    /// Per-part jitter amplitude in pixels.
    pub jitter_amplitude: f64,
}

/// Region centres as fractions of `(width, height)`.
pub const CANONICAL_CENTRES: [(f64, f64); 4] = [(0.33, 0.40), (0.67, 0.40), (0.50, 0.57), (0.50, 0.77)];

/// Landmarks of the frontal layout with every part displaced by `offsets`
/// (pixels, per region).
pub fn canonical_landmarks(h: usize, w: usize, offsets: [(f64, f64); 4]) -> Result<LandmarkSet> {
    let (wf, hf) = (w as f64, h as f64);
    let centre = |r: usize| (CANONICAL_CENTRES[r].0 * wf + offsets[r].0, CANONICAL_CENTRES[r].1 * hf + offsets[r].1);
    let mut pts = vec![(0.0, 0.0); NUM_LANDMARKS];
    // Jaw line along the lower face ellipse.
    let head = (0.5 * wf + (offsets[2].0), 0.55 * hf + (offsets[2].1));
    for (i, p) in pts.iter_mut().enumerate().take(17) {
        let a = PI * (i as f64 / 16.0);
        *p = (head.0 - 0.36 * wf * a.cos(), head.1 + 0.40 * hf * a.sin());
    }
    // Brows above each eye.
    for (k, eye) in [0usize, 1].into_iter().enumerate() {
        let (cx, cy) = centre(eye);
        for j in 0..5 {
            pts[17 + 5 * k + j] = (cx + (j as f64 - 2.0) * 0.03 * wf, cy - 0.08 * hf);
        }
    }
    // Six points on each eye outline; their mean is the eye centre.
    for (eye, start) in [(0usize, 36usize), (1, 42)] {
        let (cx, cy) = centre(eye);
        for j in 0..6 {
            let a = 2.0 * PI * j as f64 / 6.0;
            pts[start + j] = (cx + 0.06 * wf * a.cos(), cy + 0.03 * hf * a.sin());
        }
    }
    // Nose bridge and base, symmetric about the nose centre.
    let (nx, ny) = centre(2);
    for j in 0..4 {
        pts[27 + j] = (nx, ny + (j as f64 - 1.5) * 0.03 * hf - 0.02 * hf);
    }
    for j in 0..5 {
        pts[31 + j] = (nx + (j as f64 - 2.0) * 0.025 * wf, ny + 0.016 * hf);
    }
    // Outer (12) and inner (8) lip contours.
    let (mx, my) = centre(3);
    for j in 0..12 {
        let a = 2.0 * PI * j as f64 / 12.0;
        pts[48 + j] = (mx + 0.12 * wf * a.cos(), my + 0.045 * hf * a.sin());
    }
    for j in 0..8 {
        let a = 2.0 * PI * j as f64 / 8.0;
        pts[60 + j] = (mx + 0.07 * wf * a.cos(), my + 0.02 * hf * a.sin());
    }
    LandmarkSet::new(pts, h, w)
}

/// Per-video appearance and motion parameters.
#[derive(Clone, Debug)]
struct Look {
    background: [[f64; 3]; 2],
    bg_wave: [(f64, f64, f64); 3],
    skin: [f64; 3],
    feature: [f64; 3],
    lips: [f64; 3],
    light: f64,
    period: f64,
    phase: (f64, f64),
    jitter_phase: [(f64, f64); 4],
}

impl Look {
    fn sample(rng: &mut impl Rng) -> Self {
        let mut colour = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let background = [colour(0.2, 0.8), colour(0.2, 0.8)];
        let skin = {
            let base: f64 = rng.random_range(0.45..0.75);
            [base + 0.1, base, base - 0.08]
        };
        let feature = [rng.random_range(0.1..0.25); 3];
        let lips = [rng.random_range(0.45..0.6), rng.random_range(0.2..0.3), rng.random_range(0.2..0.3)];
        let bg_wave = std::array::from_fn(|_| {
            (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..2.0 * PI))
        });
        let jitter_phase = std::array::from_fn(|_| (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)));
        Look {
            background,
            bg_wave,
            skin,
            feature,
            lips,
            light: rng.random_range(-0.1..0.1),
            period: rng.random_range(6.0..12.0),
            phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
            jitter_phase,
        }
    }
}

/// Smooth 0-to-1 ramp as `v` goes from `edge + 1` down to `edge - 1` (in the
/// units of `v`), so shapes have anti-aliased borders of bounded slope.
fn inside(v: f64) -> f64 {
    let t = ((1.0 - v) / 2.0).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Signed pseudo-distance (pixels) of `(x, y)` to an axis-aligned ellipse.
fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let r = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    (r - 1.0) * rx.min(ry)
}

/// Renders a real clip; deterministic given the generator state.
pub fn gen_real_clip(spec: &ClipSpec, rng: &mut impl Rng) -> Result<Clip> {
    let (d, h, w) = (spec.frames, spec.height, spec.width);
    if d == 0 || h < 16 || w < 16 {
        return Err(Error::Config(format!("clip {d}x{h}x{w} is too small to render")));
    }
    let look = Look::sample(rng);
    let (wf, hf) = (w as f64, h as f64);
    let mut data = vec![0f32; 3 * d * h * w];
    let mut landmarks = Vec::with_capacity(d);
    for t in 0..d {
        let tt = 2.0 * PI * t as f64 / look.period;
        let head = (
            spec.motion_amplitude * (tt + look.phase.0).sin(),
            spec.motion_amplitude * 0.6 * (tt + look.phase.1).sin(),
        );
        let offsets: [(f64, f64); 4] = std::array::from_fn(|r| {
            let (px, py) = look.jitter_phase[r];
            (
                head.0 + spec.jitter_amplitude * (tt + px).sin(),
                head.1 + spec.jitter_amplitude * (tt + py).sin(),
            )
        });
        let lm = canonical_landmarks(h, w, offsets)?;
        let c: [(f64, f64); 4] = std::array::from_fn(|r| lm.centroid(Region::ALL[r]));
        let face = (0.5 * wf + offsets[2].0, 0.55 * hf + offsets[2].1);
        for i in 0..h {
            for j in 0..w {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                let (u, v) = (x / wf, y / hf);
                let mut px = [0.0; 3];
                for (ch, p) in px.iter_mut().enumerate() {
                    let (fx, fy, ph) = look.bg_wave[ch];
                    let mix = 0.5 + 0.5 * (2.0 * PI * (fx * u + fy * v) + ph).sin();
                    *p = look.background[0][ch] * (1.0 - mix) + look.background[1][ch] * mix;
                }
                let fm = inside(ellipse(x, y, face.0, face.1, 0.36 * wf, 0.46 * hf));
                let shade = 1.0 + look.light * (x - face.0) / (0.36 * wf);
                let eyes = inside(ellipse(x, y, c[0].0, c[0].1, 0.06 * wf, 0.03 * hf))
                    .max(inside(ellipse(x, y, c[1].0, c[1].1, 0.06 * wf, 0.03 * hf)));
                let nose = 0.35 * inside(ellipse(x, y, c[2].0, c[2].1, 0.035 * wf, 0.07 * hf));
                let mouth = inside(ellipse(x, y, c[3].0, c[3].1, 0.11 * wf, 0.04 * hf));
                for ch in 0..3 {
                    let mut s = look.skin[ch] * shade;
                    s = s * (1.0 - nose) + look.feature[ch] * 1.6 * nose;
                    s = s * (1.0 - eyes) + look.feature[ch] * eyes;
                    s = s * (1.0 - mouth) + look.lips[ch] * mouth;
                    px[ch] = px[ch] * (1.0 - fm) + s * fm;
                    data[((ch * d + t) * h + i) * w + j] = px[ch] as f32;
                }
            }
        }
        landmarks.push(lm);
    }
    Ok(Clip {
        video_id: spec.video_id.clone(),
        source_video: spec.video_id.clone(),
        frame_start: 0,
        frames: Tensor::new(&[3, d, h, w], data)?,
        landmarks,
        label: 0.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArtifactKind {
    SpatialBlurBoundary,
    FrequencyChecker,
    TemporalFlicker,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 3] = [
        ArtifactKind::SpatialBlurBoundary,
        ArtifactKind::FrequencyChecker,
        ArtifactKind::TemporalFlicker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::SpatialBlurBoundary => "spatial_blur_boundary",
            ArtifactKind::FrequencyChecker => "frequency_checker",
            ArtifactKind::TemporalFlicker => "temporal_flicker",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArtifactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown artifact kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub region: Region,
    /// In `(0, 1]`.
    pub intensity: f64,
}

/// Checker amplitude at full intensity.
pub const CHECKER_AMPLITUDE: f64 = 0.25;
/// Flicker offset at full intensity, as a fraction of the `[0, 1]` range.
pub const FLICKER_OFFSET: f64 = 0.3;
/// Blend weight of the blurred copy and brightness of the seam ring at full
/// intensity.
pub const BLUR_BLEND: f64 = 0.9;
pub const SEAM_GAIN: f64 = 0.4;
/// Width in pixels of the seam ring along the box border.
pub const SEAM_WIDTH: usize = 2;

fn box_blur(plane: &[f32], h: usize, w: usize, i: usize, j: usize, r: usize) -> f32 {
    let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(h));
    let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(w));
    let mut acc = 0.0;
    for y in i0..i1 {
        for x in j0..j1 {
            acc += plane[y * w + x];
        }
    }
    acc / ((i1 - i0) * (j1 - j0)) as f32
}

/// Derives a fake clip from `real`; pixels outside the target box of every
/// frame are copied unchanged.
pub fn gen_fake_clip(real: &Clip, artifact: ArtifactSpec, rng: &mut impl Rng) -> Result<Clip> {
    if !(artifact.intensity > 0.0 && artifact.intensity <= 1.0) {
        return Err(Error::Config(format!("artifact intensity {} outside (0, 1]", artifact.intensity)));
    }
    let boxes = real.boxes()?;
    let (d, (h, w)) = (real.len(), real.hw());
    let plane = h * w;
    let s = artifact.intensity;
    let flip: bool = rng.random();
    let mut frames = real.frames.clone();
    let src = real.frames.data();
    let out = frames.data_mut();
    for (t, m) in boxes.iter().enumerate() {
        let FslrBox { h1, h2, w1, w2 } = m.get(artifact.region);
        for ch in 0..3 {
            let base = (ch * d + t) * plane;
            let src_plane = &src[base..base + plane];
            for i in h1..h2 {
                for j in w1..w2 {
                    let k = base + i * w + j;
                    let orig = src[k] as f64;
                    out[k] = match artifact.kind {
                        ArtifactKind::SpatialBlurBoundary => {
                            let blurred = box_blur(src_plane, h, w, i, j, 2) as f64;
                            let ring = i < h1 + SEAM_WIDTH || i + SEAM_WIDTH >= h2 || j < w1 + SEAM_WIDTH || j + SEAM_WIDTH >= w2;
                            let mixed = orig + BLUR_BLEND * s * (blurred - orig);
                            (if ring { mixed + SEAM_GAIN * s } else { mixed }) as f32
                        }
                        ArtifactKind::FrequencyChecker => {
                            let sign = if (i + j) % 2 == usize::from(flip) { 1.0 } else { -1.0 };
                            (orig + CHECKER_AMPLITUDE * s * sign) as f32
                        }
                        ArtifactKind::TemporalFlicker => {
                            let sign = if (t % 2 == 0) ^ flip { 1.0 } else { -1.0 };
                            (orig + FLICKER_OFFSET * s * sign) as f32
                        }
                    };
                }
            }
        }
    }
    Ok(Clip {
        video_id: real.video_id.replacen('r', "f", 1),
        source_video: real.video_id.clone(),
        frame_start: real.frame_start,
        frames,
        landmarks: real.landmarks.clone(),
        label: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frequency::{band_components, build_band_filters};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(frames: usize, motion: f64) -> ClipSpec {
        ClipSpec {
            video_id: "r0001".into(),
            frames,
            height: 64,
            width: 64,
            motion_amplitude: motion,
            jitter_amplitude: 0.5 * motion,
        }
    }

    fn real(seed: u64) -> Clip {
        gen_real_clip(&spec(8, 1.5), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_clips() {
        let (a, b) = (real(3), real(3));
        assert_eq!(a.frames.data(), b.frames.data());
        assert_eq!(a.landmarks, b.landmarks);
        assert_ne!(real(4).frames.data(), a.frames.data());
    }

    #[test]
    fn frame_differences_are_bounded_by_motion() {
        for seed in 0..4 {
            let still = gen_real_clip(&spec(4, 0.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let plane = 64 * 64;
            let f = still.frames.data();
            assert!((0..3).all(|c| f[c * 4 * plane..c * 4 * plane + plane] == f[(c * 4 + 1) * plane..(c * 4 + 2) * plane]));

            // Mean |frame difference| <= largest landmark displacement times
            // the largest spatial gradient of the frame.
            let clip = real(seed);
            let d = clip.len();
            let f = clip.frames.data();
            let mut grad: f64 = 0.0;
            for c in 0..3 {
                for t in 0..d {
                    for i in 0..63 {
                        for j in 0..63 {
                            let k = ((c * d + t) * 64 + i) * 64 + j;
                            grad = grad.max((f[k + 1] - f[k]).abs() as f64).max((f[k + 64] - f[k]).abs() as f64);
                        }
                    }
                }
            }
            for t in 1..d {
                let disp = clip.landmarks[t]
                    .points()
                    .iter()
                    .zip(clip.landmarks[t - 1].points())
                    .map(|(a, b)| (a.0 - b.0).abs() + (a.1 - b.1).abs())
                    .fold(0.0, f64::max);
                let mad: f64 = (0..3)
                    .flat_map(|c| (0..plane).map(move |p| (c, p)))
                    .map(|(c, p)| (f[(c * d + t) * plane + p] - f[(c * d + t - 1) * plane + p]).abs() as f64)
                    .sum::<f64>()
                    / (3 * plane) as f64;
                assert!(mad <= disp * grad + 1e-6, "t={t}: {mad} > {disp} * {grad}");
                assert!(disp <= 2.0 * (1.5 + 0.75) * 2.0 * PI / 6.0 + 1e-9);
            }
        }
    }

    #[test]
    fn landmarks_always_yield_boxes() {
        for seed in 0..1000 {
            let s = ClipSpec {
                motion_amplitude: 3.0,
                jitter_amplitude: 1.5,
                ..spec(2, 0.0)
            };
            let clip = gen_real_clip(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            clip.boxes().unwrap();
        }
    }

    #[test]
    fn canonical_boxes_do_not_overlap() {
        for (h, w) in [(64, 64), (112, 112), (224, 224)] {
            let lm = canonical_landmarks(h, w, [(0.0, 0.0); 4]).unwrap();
            let m = extract_boxes(&lm, h, w).unwrap();
            for a in 0..4 {
                for b in a + 1..4 {
                    assert!(!m.0[a].overlaps(&m.0[b]), "{h}: {:?} {:?}", m.0[a], m.0[b]);
                }
            }
        }
    }

    fn fake(clip: &Clip, kind: ArtifactKind, region: Region, intensity: f64) -> Clip {
        gen_fake_clip(clip, ArtifactSpec { kind, region, intensity }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn fakes_differ_only_inside_the_box() {
        let r = real(5);
        let boxes = r.boxes().unwrap();
        for kind in ArtifactKind::ALL {
            for region in Region::ALL {
                let f = fake(&r, kind, region, 1.0);
                assert_eq!(f.label, 1.0);
                assert_eq!(f.source_video, r.video_id);
                assert_eq!(f.video_id, "f0001");
                let mut changed = 0;
                for c in 0..3 {
                    for t in 0..8 {
                        let b = boxes[t].get(region);
                        for i in 0..64 {
                            for j in 0..64 {
                                let k = ((c * 8 + t) * 64 + i) * 64 + j;
                                if f.frames.data()[k] != r.frames.data()[k] {
                                    assert!(b.contains(i, j), "{kind} leaked outside {region:?}");
                                    changed += 1;
                                }
                            }
                        }
                    }
                }
                assert!(changed > 0);
            }
        }
    }

    #[test]
    fn vanishing_intensity_leaves_the_clip_unchanged() {
        let r = real(6);
        for kind in ArtifactKind::ALL {
            let f = fake(&r, kind, Region::Mouth, 1e-9);
            assert!(f.frames.max_abs_diff(&r.frames) < 1e-7);
        }
        let bad = ArtifactSpec {
            kind: ArtifactKind::TemporalFlicker,
            region: Region::Nose,
            intensity: 1.5,
        };
        assert!(gen_fake_clip(&r, bad, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err().is_config());
    }

    #[test]
    fn checker_energy_is_high_band() {
        let r = real(7);
        let filters = build_band_filters(64, 64).unwrap();
        for region in Region::ALL {
            let f = fake(&r, ArtifactKind::FrequencyChecker, region, 0.7);
            let added = f.frames.cast::<f64>().zip_map(&r.frames.cast::<f64>(), "sub", |a, b| a - b).unwrap();
            let [low, mid, high] = band_components(&added, &filters).unwrap();
            let energy = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
            let total = energy(&low) + energy(&mid) + energy(&high);
            assert!(energy(&high) / total >= 0.9, "{region:?}: {}", energy(&high) / total);
        }
    }

    #[test]
    fn flicker_shifts_box_means_but_not_frame_variance() {
        let r = real(8);
        let boxes = r.boxes().unwrap();
        let intensity = 0.8;
        let f = fake(&r, ArtifactKind::TemporalFlicker, Region::LeftEye, intensity);
        let plane = 64 * 64;
        let box_mean = |clip: &Clip, t: usize| {
            let b = boxes[t].get(Region::LeftEye);
            let mut acc = 0.0;
            for c in 0..3 {
                for i in b.h1..b.h2 {
                    for j in b.w1..b.w2 {
                        acc += clip.frames.data()[(c * 8 + t) * plane + i * 64 + j] as f64;
                    }
                }
            }
            acc / (3 * b.height() * b.width()) as f64
        };
        let variance = |clip: &Clip, t: usize| {
            let v: Vec<f64> = (0..3)
                .flat_map(|c| clip.frames.data()[(c * 8 + t) * plane..(c * 8 + t + 1) * plane].to_vec())
                .map(f64::from)
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        for t in 1..8 {
            assert!((box_mean(&f, t) - box_mean(&f, t - 1)).abs() >= 0.5 * intensity);
        }
        for t in 0..8 {
            let (vr, vf) = (variance(&r, t), variance(&f, t));
            assert!((vf - vr).abs() / vr < 0.1, "t={t}: {vr} -> {vf}");
        }
    }

    #[test]
    fn windows_split_frames_and_landmarks() {
        let clip = gen_real_clip(&spec(6, 1.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let parts = clip.windows(3).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].frame_start, 3);
        assert_eq!(parts[1].landmarks, clip.landmarks[3..].to_vec());
        let plane = 64 * 64;
        assert_eq!(
            parts[1].frames.data()[..plane],
            clip.frames.data()[3 * plane..4 * plane]
        );
        assert!(clip.windows(4).is_err());
    }
}
