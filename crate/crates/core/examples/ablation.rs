//! Trains several detector variants on one corpus and compares their
//! held-out video AUC, overall and per artifact kind.
//!
//! cargo run --example ablation -- [out_dir] [epochs]

use std::path::PathBuf;

use xdlf::datagen::corpus::{build_corpus, DatagenConfig};
use xdlf::model::Variant;
use xdlf::training::ablation::{run_ablation, summarize};
use xdlf::training::TrainConfig;

fn main() -> xdlf::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/ablation".into()));
    let epochs = args.next().and_then(|e| e.parse().ok()).unwrap_or(2);
    let corpus = build_corpus(
        &DatagenConfig {
            n_videos: 32,
            ..DatagenConfig::default()
        },
        &out.join("corpus"),
    )?;
    let base = TrainConfig {
        epochs,
        t_max: epochs,
        ..TrainConfig::ablation()
    };
    let variants = [Variant::Full, Variant::NoFgfe, Variant::RgbRgb, Variant::NoTime2d];
    let runs = run_ablation(&base, &corpus, &variants, &[0], |r| {
        println!("{} seed {} done in {:.0}s", r.variant, r.seed, r.secs)
    })?;
    match summarize(&runs) {
        Ok(summary) => {
            println!("{:>12} {:>7} {:>7} {:>7} {:>7}", "variant", "AUC", "blur", "checker", "flicker");
            for s in summary {
                let [b, c, f] = s.kind_auc;
                println!("{:>12} {:7.3} {:7.3} {:7.3} {:7.3}", s.variant.name(), s.video_auc, b, c, f);
            }
        }
        // A 32-video corpus can leave a kind without fakes in the test split.
        Err(e) => println!("no summary: {e}"),
    }
    Ok(())
}
