//! Stage 1: label-free contrastive training of the rPPG extractor on a small
//! synthetic set, reporting validation IPR per epoch and the final readout.
//!
//! `cargo run --release --example pretrain_extractor -- [epochs]`

use pulseid::cp2d::{extract_rppg, train_stage1, Stage1Config};
use pulseid::dsp::{fundamental_frequency, pos_baseline};
use pulseid::ingest::Split;
use pulseid::pipeline::Dataset;
use pulseid::synth::SynthConfig;

fn main() -> pulseid::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let cfg = SynthConfig { n_subjects: 4, sessions: 1, duration_s: 60.0, external_ids: 2, external_duration_s: 20.0, ..Default::default() };
    let (data, _) = Dataset::synthetic(&cfg)?;
    let out = train_stage1(&data.unlabeled(Split::Train), &data.unlabeled(Split::Val), &Stage1Config { epochs, ..Default::default() })?;
    for e in &out.log {
        println!("epoch {:2} loss {:>8} val IPR {:.4}", e.epoch, e.loss.map_or("-".into(), |l| format!("{l:.4}")), e.val_ipr);
    }
    println!("kept epoch {}", out.best_epoch);
    for v in data.videos.iter().take(2) {
        let Some(map) = v.span(Split::TestIntra) else { continue };
        let f = fundamental_frequency(&extract_rppg(&out.params, &map)?)?;
        let pos = fundamental_frequency(&pos_baseline(&map)?)?;
        println!("{}: extracted HR {:.1} bpm, POS {:.1} bpm", v.name, f * 60.0, pos * 60.0);
    }
    Ok(())
}
