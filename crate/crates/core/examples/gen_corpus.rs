//! Generates a small synthetic corpus and summarizes its index.
//!
//! cargo run --example gen_corpus -- [out_dir]

use std::path::PathBuf;

use xdlf::datagen::corpus::{build_corpus, DatagenConfig, Split};
use xdlf::datagen::ArtifactKind;

fn main() -> xdlf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/corpus".into()));
    let cfg = DatagenConfig {
        n_videos: 16,
        ..DatagenConfig::default()
    };
    let index = build_corpus(&cfg, &out)?;
    for split in Split::ALL {
        let rows = index.split(split);
        let fakes = rows.iter().filter(|r| r.label == 1).count();
        let kinds: Vec<String> = ArtifactKind::ALL
            .iter()
            .map(|&k| format!("{k}={}", rows.iter().filter(|r| r.artifact_kind == Some(k)).count()))
            .collect();
        println!("{:>5}: {} clips ({} real, {fakes} fake) {}", split.name(), rows.len(), rows.len() - fakes, kinds.join(" "));
    }
    let clip = index.load_clip(&index.rows[0])?;
    println!("first clip {} has shape {:?}", index.rows[0].clip_path, clip.frames.shape());
    Ok(())
}
