//! Splits one synthetic face frame into low/mid/high DCT bands, checks that
//! the bands sum back to the frame, and writes each band as a PGM.
//!
//! cargo run --example frequency_bands -- [out_dir]

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xdlf::datagen::{gen_real_clip, ClipSpec};
use xdlf::frequency::{band_components, build_band_filters, Band};
use xdlf::inspect::Heatmap;

fn main() -> xdlf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/frequency_bands".into()));
    let spec = ClipSpec {
        video_id: "r0000".into(),
        frames: 1,
        height: 64,
        width: 64,
        motion_amplitude: 0.0,
        jitter_amplitude: 0.0,
    };
    let clip = gen_real_clip(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let frame = clip.frames.cast::<f64>().reshape(&[3, 64, 64])?;
    let filters = build_band_filters(64, 64)?;
    let bands = band_components(&frame, &filters)?;

    let sum = bands[0].zip_map(&bands[1], "add", |a, b| a + b)?.zip_map(&bands[2], "add", |a, b| a + b)?;
    println!("reconstruction max error: {:.2e}", sum.max_abs_diff(&frame));

    std::fs::create_dir_all(&out)?;
    for (band, t) in Band::ALL.iter().zip(&bands) {
        let energy: f64 = t.data().iter().map(|v| v * v).sum();
        println!("{:>4} band energy {energy:10.3}", band.name());
        let map = Heatmap::mean_of(&t.cast::<f32>())?;
        std::fs::write(out.join(format!("band_{}.pgm", band.name())), map.to_pgm())?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
