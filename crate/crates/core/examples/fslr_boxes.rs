//! Derives the four forgery-sensitive region boxes from a 68-point landmark
//! set and projects them onto a downsampled feature map.
//!
//! cargo run --example fslr_boxes

use xdlf::datagen::canonical_landmarks;
use xdlf::fslr::{extract_boxes, project_boxes, Region};

fn main() -> xdlf::Result<()> {
    let (h, w) = (64, 64);
    let landmarks = canonical_landmarks(h, w, [(0.0, 0.0); 4])?;
    let boxes = extract_boxes(&landmarks, h, w)?;
    let projected = project_boxes(&boxes, (h, w), (16, 16))?;
    println!("{:<10} {:>22} {:>22}", "region", "64x64 [h1,w1,h2,w2]", "16x16 [h1,w1,h2,w2]");
    for region in Region::ALL {
        let (a, b) = (boxes.get(region), projected.get(region));
        println!(
            "{:<10} {:>22} {:>22}",
            region.name(),
            format!("{:?}", [a.h1, a.w1, a.h2, a.w2]),
            format!("{:?}", [b.h1, b.w1, b.h2, b.w2])
        );
    }
    Ok(())
}
