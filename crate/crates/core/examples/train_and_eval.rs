//! Generates a small corpus, trains the full detector for a few epochs,
//! and evaluates it on the held-out split at clip and video level.
//!
//! cargo run --example train_and_eval -- [out_dir]

use std::path::PathBuf;

use xdlf::datagen::corpus::{build_corpus, DatagenConfig, Split};
use xdlf::datagen::ArtifactKind;
use xdlf::training::trainer::METRICS_HEADER;
use xdlf::training::{evaluate, train, TrainConfig};

fn main() -> xdlf::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/train_and_eval".into()));
    let corpus = build_corpus(
        &DatagenConfig {
            n_videos: 16,
            ..DatagenConfig::default()
        },
        &out.join("corpus"),
    )?;
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::tiny()
    };
    println!("{METRICS_HEADER}");
    let outcome = train(&cfg, &corpus, Some(&out.join("run")), |m| println!("{}", m.csv_row()))?;
    let report = evaluate(&outcome.model, &corpus, Split::Test, cfg.batch_size)?;
    println!(
        "test: video ACC {:.3} AUC {} | clip ACC {:.3} AUC {}",
        report.video_acc, report.video_auc, report.clip_acc, report.clip_auc
    );
    for kind in ArtifactKind::ALL {
        println!("{:>22} video AUC {}", kind.name(), report.kind_auc(kind));
    }
    Ok(())
}
