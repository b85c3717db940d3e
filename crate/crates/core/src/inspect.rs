//! Attention and band-map dumps for a single clip.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::datagen::Clip;
use crate::error::{Error, Result};
use crate::frequency::{band_components, Band};
use crate::fslr::{project_boxes, Region};
use crate::model::XdlfModel;
use crate::tensor::{sigmoid_scalar, Tensor};
use crate::training::trainer::make_batch;

/// 2D map in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    /// Mean over every leading axis of an `[..., h, w]` tensor.
    pub fn mean_of(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::shape("heatmap", format!("need [..., h, w], got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = t.numel() / (h * w);
        let mut data = vec![0.0; h * w];
        for p in 0..planes {
            for (d, v) in data.iter_mut().zip(&t.data()[p * h * w..(p + 1) * h * w]) {
                *d += f64::from(*v) / planes as f64;
            }
        }
        Ok(Heatmap { h, w, data })
    }

    /// `(row, col)` of the largest value (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let k = self
            .data
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        (k / self.w, k % self.w)
    }

    /// Binary 8-bit PGM (P5), min-max scaled.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.data.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8));
        out
    }
}

/// Everything `inspect` reports for one clip.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub prob: f64,
    pub alphas: Option<[f32; 3]>,
    pub lambdas: [f32; 3],
    /// Enhancement maps `A'` averaged over channels and frames, per stream.
    pub fgfe: Vec<Heatmap>,
    /// `(level, stream, map)` of the cross-attention maps.
    pub cross: Vec<(usize, usize, Heatmap)>,
    /// Per-band components of the first frame, averaged over RGB.
    pub bands: Vec<(Band, Heatmap)>,
}

pub fn inspect_clip(model: &XdlfModel<f32>, clip: &Clip) -> Result<Inspection> {
    let batch = make_batch([clip])?;
    let mut g = Graph::new(&model.store, false);
    let trace = model.forward(&mut g, &batch)?;
    let prob = f64::from(sigmoid_scalar(g.value(trace.logits).data()[0]));
    let fgfe = trace
        .fgfe
        .iter()
        .map(|t| Heatmap::mean_of(g.value(t.enhancement)))
        .collect::<Result<_>>()?;
    let mut cross = Vec::new();
    for (level, &maps) in trace.cross_maps.iter().enumerate() {
        let m = g.value(maps);
        let inner = m.numel() / m.shape()[0] / 2;
        let s = m.shape().to_vec();
        for stream in 0..2 {
            let part = Tensor::new(&s[2..], m.data()[stream * inner..(stream + 1) * inner].to_vec())?;
            cross.push((level, stream, Heatmap::mean_of(&part)?));
        }
    }
    let (h, w) = clip.hw();
    let first = Tensor::new(&[3, h, w], (0..3).flat_map(|c| clip.frames.data()[c * clip.len() * h * w..][..h * w].to_vec()).collect())?;
    let comps = band_components(&first, &model.filters)?;
    let bands = Band::ALL
        .iter()
        .zip(&comps)
        .map(|(&b, t)| Ok((b, Heatmap::mean_of(t)?)))
        .collect::<Result<_>>()?;
    Ok(Inspection {
        prob,
        alphas: model.alphas(),
        lambdas: model.lambdas(),
        fgfe,
        cross,
        bands,
    })
}

/// Whether the peak of the RGB-stream FGFE map falls inside `region`'s box
/// (first frame, projected to the map's resolution). `None` for variants
/// without FGFE.
pub fn attention_peak_in_region(model: &XdlfModel<f32>, clip: &Clip, region: Region) -> Result<Option<bool>> {
    let ins = inspect_clip(model, clip)?;
    let Some(map) = ins.fgfe.first() else { return Ok(None) };
    let boxes = clip.boxes()?;
    let projected = project_boxes(&boxes[0], clip.hw(), (map.h, map.w))?;
    let (i, j) = map.argmax();
    Ok(Some(projected.get(region).contains(i, j)))
}

/// Writes the PGMs and `values.csv`; returns the written paths.
pub fn write_inspection(ins: &Inspection, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    let streams = ["a", "b"];
    for (s, map) in ins.fgfe.iter().enumerate() {
        put(format!("fgfe_level0_stream_{}.pgm", streams[s]), map.to_pgm())?;
    }
    for (level, s, map) in &ins.cross {
        put(format!("cross_level{level}_stream_{}.pgm", streams[*s]), map.to_pgm())?;
    }
    for (band, map) in &ins.bands {
        put(format!("band_{}.pgm", band.name()), map.to_pgm())?;
    }
    let mut csv = String::from("name,value\n");
    csv.push_str(&format!("prob,{:.6}\n", ins.prob));
    if let Some(a) = ins.alphas {
        for (b, v) in Band::ALL.iter().zip(a) {
            csv.push_str(&format!("alpha_{},{v:.6}\n", b.name()));
        }
    }
    for (b, v) in Band::ALL.iter().zip(ins.lambdas) {
        csv.push_str(&format!("lambda_{},{v:.6}\n", b.name()));
    }
    put("values.csv".into(), csv.into_bytes())?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_real_clip, ClipSpec};
    use crate::model::Variant;
    use crate::selfcheck::probe_model_config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip() -> Clip {
        let spec = ClipSpec {
            video_id: "r0000".into(),
            frames: 4,
            height: 32,
            width: 32,
            motion_amplitude: 1.0,
            jitter_amplitude: 0.5,
        };
        gen_real_clip(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn writes_one_map_per_level_and_stream() {
        let model = XdlfModel::<f32>::new(probe_model_config(Variant::Full)).unwrap();
        let ins = inspect_clip(&model, &clip()).unwrap();
        assert!(ins.alphas.unwrap().iter().all(|&a| a > 0.0 && a < 1.0));
        let dir = tempfile::tempdir().unwrap();
        let files = write_inspection(&ins, dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("fgfe_")).count(), 2);
        assert_eq!(names.iter().filter(|n| n.starts_with("cross_")).count(), 6);
        assert_eq!(names.iter().filter(|n| n.starts_with("band_")).count(), 3);
        let values = fs::read_to_string(dir.path().join("values.csv")).unwrap();
        for key in ["alpha_low", "alpha_mid", "alpha_high", "lambda_low", "lambda_mid", "lambda_high"] {
            assert!(values.contains(key), "{key}");
        }
        let pgm = fs::read(dir.path().join("fgfe_level0_stream_a.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 256);
        assert!(attention_peak_in_region(&model, &clip(), Region::Nose).unwrap().is_some());
    }

    #[test]
    fn heatmap_mean_and_argmax() {
        let t = Tensor::new(&[2, 2, 2], vec![0.0f32, 1.0, 2.0, 3.0, 2.0, 1.0, 4.0, 1.0]).unwrap();
        let m = Heatmap::mean_of(&t).unwrap();
        assert_eq!(m.data, [1.0, 1.0, 3.0, 2.0]);
        assert_eq!(m.argmax(), (1, 0));
        let no_fgfe = XdlfModel::<f32>::new(probe_model_config(Variant::NoFgfe)).unwrap();
        assert_eq!(attention_peak_in_region(&no_fgfe, &clip(), Region::Mouth).unwrap(), None);
    }
}
