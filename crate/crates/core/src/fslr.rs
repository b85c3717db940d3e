//! Forgery-sensitive regions: landmarks to four face boxes, projection onto
//! feature maps, and region pooling.
//!
//! Landmarks follow the iBUG 68-point convention. Box rows are always ordered
//! left eye, right eye, nose, mouth, and each box is the half-open range
//! `[h1, h2) x [w1, w2)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{adaptive_bin, Scalar, Tensor};

pub const NUM_LANDMARKS: usize = 68;
pub const NUM_REGIONS: usize = 4;
/// Side length of the pooled region features.
pub const DEFAULT_POOL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl Region {
    pub const ALL: [Region; NUM_REGIONS] = [Region::LeftEye, Region::RightEye, Region::Nose, Region::Mouth];

    pub fn landmark_range(self) -> std::ops::Range<usize> {
        match self {
            Region::LeftEye => 36..42,
            Region::RightEye => 42..48,
            Region::Nose => 27..36,
            Region::Mouth => 48..68,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
        }
    }

    pub fn from_name(s: &str) -> Option<Region> {
        Region::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// 68 `(x, y)` points, `x` along width and `y` along height, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    /// Clamps every point into `[0, w) x [0, h)`.
    pub fn new(points: Vec<(f64, f64)>, h: usize, w: usize) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidInput(format!("expected {NUM_LANDMARKS} landmarks, got {}", points.len())));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::InvalidInput("non-finite landmark".into()));
        }
        let (xmax, ymax) = (w as f64 - 1e-9, h as f64 - 1e-9);
        let points = points
            .into_iter()
            .map(|(x, y)| (x.clamp(0.0, xmax), y.clamp(0.0, ymax)))
            .collect();
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Mean `(x, y)` of one region's landmark group.
    pub fn centroid(&self, region: Region) -> (f64, f64) {
        let r = region.landmark_range();
        let n = r.len() as f64;
        let (sx, sy) = self.points[r].iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        (sx / n, sy / n)
    }
}

/// Preset square box sides in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxSizes {
    pub eye: usize,
    pub nose: usize,
    pub mouth: usize,
}

impl BoxSizes {
    /// 30 px for eyes and nose, 40 px for the mouth on a 224 crop.
    pub const REFERENCE: BoxSizes = BoxSizes {
        eye: 30,
        nose: 30,
        mouth: 40,
    };
    pub const REFERENCE_SIDE: usize = 224;

    /// Reference sizes scaled by `min(h, w) / 224`, rounded, at least 1.
    pub fn for_resolution(h: usize, w: usize) -> Self {
        let s = h.min(w) as f64 / Self::REFERENCE_SIDE as f64;
        let f = |v: usize| ((v as f64 * s).round() as usize).max(1);
        let r = Self::REFERENCE;
        BoxSizes {
            eye: f(r.eye),
            nose: f(r.nose),
            mouth: f(r.mouth),
        }
    }

    pub fn side(&self, region: Region) -> usize {
        match region {
            Region::LeftEye | Region::RightEye => self.eye,
            Region::Nose => self.nose,
            Region::Mouth => self.mouth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FslrBox {
    pub h1: usize,
    pub h2: usize,
    pub w1: usize,
    pub w2: usize,
}

impl FslrBox {
    pub fn height(&self) -> usize {
        self.h2 - self.h1
    }

    pub fn width(&self) -> usize {
        self.w2 - self.w1
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.h1..self.h2).contains(&i) && (self.w1..self.w2).contains(&j)
    }

    pub fn overlaps(&self, other: &FslrBox) -> bool {
        self.h1 < other.h2 && other.h1 < self.h2 && self.w1 < other.w2 && other.w1 < self.w2
    }
}

/// The four region boxes of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FslrBoxMatrix(pub [FslrBox; NUM_REGIONS]);

impl FslrBoxMatrix {
    pub fn get(&self, region: Region) -> FslrBox {
        self.0[region as usize]
    }

    pub fn rows(&self) -> [[usize; 4]; NUM_REGIONS] {
        self.0.map(|b| [b.h1, b.h2, b.w1, b.w2])
    }

    fn check_within(&self, h: usize, w: usize) -> Result<()> {
        for (b, r) in self.0.iter().zip(Region::ALL) {
            if b.h1 >= b.h2 || b.w1 >= b.w2 || b.h2 > h || b.w2 > w {
                return Err(Error::InvalidInput(format!(
                    "{} box {b:?} is empty or outside a {h}x{w} map",
                    r.name()
                )));
            }
        }
        Ok(())
    }
}

/// Boxes with the preset sizes for an `img_h x img_w` crop.
pub fn extract_boxes(lm: &LandmarkSet, img_h: usize, img_w: usize) -> Result<FslrBoxMatrix> {
    extract_boxes_with(lm, img_h, img_w, BoxSizes::for_resolution(img_h, img_w))
}

/// Centres a box of the preset side on each landmark-group mean, shifting it
/// inward at the image border so its size is kept.
pub fn extract_boxes_with(lm: &LandmarkSet, img_h: usize, img_w: usize, sizes: BoxSizes) -> Result<FslrBoxMatrix> {
    let place = |centre: f64, side: usize, limit: usize| -> usize {
        let start = (centre - side as f64 / 2.0).round().max(0.0) as usize;
        start.min(limit - side)
    };
    let mut out = [FslrBox {
        h1: 0,
        h2: 0,
        w1: 0,
        w2: 0,
    }; NUM_REGIONS];
    for (slot, region) in out.iter_mut().zip(Region::ALL) {
        let side = sizes.side(region);
        if side > img_h || side > img_w || side == 0 {
            return Err(Error::Config(format!(
                "{} box of {side} px does not fit a {img_h}x{img_w} image",
                region.name()
            )));
        }
        let (cx, cy) = lm.centroid(region);
        let h1 = place(cy, side, img_h);
        let w1 = place(cx, side, img_w);
        *slot = FslrBox {
            h1,
            h2: h1 + side,
            w1,
            w2: w1 + side,
        };
    }
    Ok(FslrBoxMatrix(out))
}

/// Rescales boxes from a `from_hw` grid to a smaller `to_hw` grid, flooring
/// starts and ceiling ends so every box keeps a non-empty area.
pub fn project_boxes(boxes: &FslrBoxMatrix, from_hw: (usize, usize), to_hw: (usize, usize)) -> Result<FslrBoxMatrix> {
    let ((fh, fw), (th, tw)) = (from_hw, to_hw);
    if th == 0 || tw == 0 || th > fh || tw > fw {
        return Err(Error::InvalidInput(format!("cannot project boxes from {fh}x{fw} to {th}x{tw}")));
    }
    boxes.check_within(fh, fw)?;
    let lo = |v: usize, to: usize, from: usize| v * to / from;
    let hi = |v: usize, to: usize, from: usize| (v * to).div_ceil(from);
    Ok(FslrBoxMatrix(boxes.0.map(|b| FslrBox {
        h1: lo(b.h1, th, fh),
        h2: hi(b.h2, th, fh),
        w1: lo(b.w1, tw, fw),
        w2: hi(b.w2, tw, fw),
    })))
}

/// Flat source index of every output cell of region max pooling.
///
/// `x` is `[n, c, d, h, w]` and `boxes[b][t]` holds the boxes of sample `b`,
/// frame `t`, already projected to `(h, w)`. The output layout is
/// `[n, 4, c, d, ph, pw]`. Boxes smaller than the pooled size repeat source
/// cells, as in ROI pooling.
pub fn region_pool_argmax<T: Scalar>(
    x: &Tensor<T>,
    boxes: &[Vec<FslrBoxMatrix>],
    ph: usize,
    pw: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    x.expect_rank(5, "region_pool")?;
    let &[n, c, d, h, w] = x.shape() else { unreachable!() };
    if ph == 0 || pw == 0 {
        return Err(Error::shape("region_pool", "pooled size must be positive"));
    }
    if boxes.len() != n || boxes.iter().any(|b| b.len() != d) {
        return Err(Error::shape(
            "region_pool",
            format!("need {d} box matrices for each of {n} samples"),
        ));
    }
    for per_frame in boxes {
        for m in per_frame {
            m.check_within(h, w)?;
        }
    }
    let data = x.data();
    let mut idx = Vec::with_capacity(n * NUM_REGIONS * c * d * ph * pw);
    for (b, per_frame) in boxes.iter().enumerate() {
        for r in 0..NUM_REGIONS {
            for ch in 0..c {
                for (t, m) in per_frame.iter().enumerate() {
                    let bx = m.0[r];
                    let plane = ((b * c + ch) * d + t) * h * w;
                    for i in 0..ph {
                        let (r0, r1) = adaptive_bin(i, bx.height(), ph);
                        for j in 0..pw {
                            let (c0, c1) = adaptive_bin(j, bx.width(), pw);
                            let mut best = plane + (bx.h1 + r0) * w + bx.w1 + c0;
                            for y in bx.h1 + r0..bx.h1 + r1 {
                                for xx in bx.w1 + c0..bx.w1 + c1 {
                                    let k = plane + y * w + xx;
                                    if data[k] > data[best] {
                                        best = k;
                                    }
                                }
                            }
                            idx.push(best);
                        }
                    }
                }
            }
        }
    }
    Ok((idx, vec![n, NUM_REGIONS, c, d, ph, pw]))
}

/// Region max pooling of one clip: `[c, d, h, w] -> [4, c, d, ph, pw]`.
pub fn region_pool<T: Scalar>(x: &Tensor<T>, boxes: &[FslrBoxMatrix], ph: usize, pw: usize) -> Result<Tensor<T>> {
    x.expect_rank(4, "region_pool")?;
    let batched = x.clone().unsqueeze0();
    let (idx, shape) = region_pool_argmax(&batched, &[boxes.to_vec()], ph, pw)?;
    let data = idx.iter().map(|&i| batched.data()[i]).collect();
    Tensor::new(&shape[1..], data)
}

/// Differentiable region pooling on a graph, `[n, c, d, h, w] -> [n, 4, c, d, ph, pw]`.
pub fn region_pool_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    boxes: &[Vec<FslrBoxMatrix>],
    ph: usize,
    pw: usize,
) -> Result<Var> {
    let (idx, shape) = region_pool_argmax(g.value(x), boxes, ph, pw)?;
    g.gather(x, idx, &shape)
}

/// Reads one landmark set per line: `x0,y0,...,x67,y67`.
pub fn read_landmarks_csv(path: impl AsRef<Path>, h: usize, w: usize) -> Result<Vec<LandmarkSet>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("landmarks", format!("{}:{}: {e}", path.display(), line_no + 1)))?;
        if vals.len() != 2 * NUM_LANDMARKS {
            return Err(Error::format(
                "landmarks",
                format!("{}:{}: expected {} values, got {}", path.display(), line_no + 1, 2 * NUM_LANDMARKS, vals.len()),
            ));
        }
        out.push(LandmarkSet::new(vals.chunks(2).map(|p| (p[0], p[1])).collect(), h, w)?);
    }
    Ok(out)
}

pub fn write_landmarks_csv(path: impl AsRef<Path>, frames: &[LandmarkSet]) -> Result<()> {
    let mut s = String::new();
    for lm in frames {
        let row: Vec<String> = lm.points.iter().flat_map(|(x, y)| [format!("{x:.4}"), format!("{y:.4}")]).collect();
        writeln!(s, "{}", row.join(",")).expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}
