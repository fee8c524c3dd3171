//! Stage 2 on a small synthetic set, then identity claims against held-out
//! test spans: one genuine claim and one impostor claim per video.
//!
//! `cargo run --release --example train_and_authenticate -- [stage1 epochs] [stage2 steps]`

use pulseid::cp2d::{train_stage1, Stage1Config};
use pulseid::ingest::Split;
use pulseid::morph::{authenticate, train_stage2, Stage2Config};
use pulseid::pipeline::Dataset;
use pulseid::synth::SynthConfig;

fn main() -> pulseid::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = SynthConfig { n_subjects: 3, sessions: 1, duration_s: 90.0, external_ids: 4, external_duration_s: 60.0, ..Default::default() };
    let (data, ext) = Dataset::synthetic(&cfg)?;
    let s1 = Stage1Config { epochs: args.first().copied().unwrap_or(8), ..Default::default() };
    let g = train_stage1(&data.unlabeled(Split::Train), &data.unlabeled(Split::Val), &s1)?;
    let s2 = Stage2Config { steps: args.get(1).copied().unwrap_or(300), ..Default::default() };
    let out = train_stage2(&g.params, &data.labeled(Split::Train), &data.labeled(Split::Val), &ext, data.n_subjects, &s2)?;
    println!("stage 2 kept step {} (val EER {:.3})", out.best_step, out.best_val_eer);

    for v in &data.videos {
        let Some(span) = v.span(Split::TestIntra) else { continue };
        let windows = authenticate(&out.params, &span, 5)?;
        let mean = |c: usize| windows.iter().map(|w| w[c]).sum::<f64>() / windows.len() as f64;
        let impostor = (v.subject + 1) % data.n_subjects;
        println!(
            "{}: {} windows, genuine claim {:.3}, impostor claim (subject {impostor}) {:.3}",
            v.name, windows.len(), mean(v.subject), mean(impostor)
        );
    }
    Ok(())
}
