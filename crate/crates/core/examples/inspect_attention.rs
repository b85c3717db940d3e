//! Briefly trains a detector, then dumps its FGFE and cross-attention maps,
//! band components and alpha/lambda values for one fake test clip, and
//! reports whether the FGFE peak lands in the manipulated region.
//!
//! cargo run --example inspect_attention -- [out_dir]

use std::path::PathBuf;

use xdlf::datagen::corpus::{build_corpus, DatagenConfig, Split};
use xdlf::inspect::{attention_peak_in_region, inspect_clip, write_inspection};
use xdlf::training::{train, TrainConfig};

fn main() -> xdlf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/inspect_attention".into()));
    let corpus = build_corpus(
        &DatagenConfig {
            n_videos: 16,
            ..DatagenConfig::default()
        },
        &out.join("corpus"),
    )?;
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::tiny()
    };
    let model = train(&cfg, &corpus, None, |_| {})?.model;
    let row = corpus
        .split(Split::Test)
        .into_iter()
        .find(|r| r.label == 1)
        .expect("test split has fakes")
        .clone();
    let clip = corpus.load_clip(&row)?;
    let ins = inspect_clip(&model, &clip)?;
    println!("{} ({}): fake prob {:.3}", row.video_id, row.artifact_kind.map_or("none", |k| k.name()), ins.prob);
    println!("alphas {:?} lambdas {:?}", ins.alphas, ins.lambdas);
    for p in write_inspection(&ins, &out.join("maps"))? {
        println!("wrote {}", p.display());
    }
    if let Some(region) = row.region {
        let hit = attention_peak_in_region(&model, &clip, region)?;
        println!("FGFE peak inside the {} box: {hit:?}", region.name());
    }
    Ok(())
}
