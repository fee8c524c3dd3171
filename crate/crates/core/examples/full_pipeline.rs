//! End-to-end synthetic run: render, de-identify, stage 1, hybrid and
//! rPPG-only stage 2, then evaluation at 5/10/20-beat windows.
//!
//! `cargo run --release --example full_pipeline -- [stage1 epochs] [stage2 steps] [external ids] [out dir]`
//!
//! With an output directory, the three checkpoints and the hybrid report are
//! written there.

use std::time::Instant;

use pulseid::cp2d::{train_stage1, Stage1Config};
use pulseid::ingest::Split;
use pulseid::morph::{train_stage2, train_stage2_rppg_only, Stage2Config};
use pulseid::pipeline::{evaluate, morphology, write_report, Dataset};
use pulseid::tensor::write_checkpoint;
use pulseid::synth::SynthConfig;

fn main() -> pulseid::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let args: Vec<usize> = raw.iter().filter_map(|a| a.parse().ok()).collect();
    let out_dir = raw.iter().find(|a| a.parse::<usize>().is_err()).map(std::path::PathBuf::from);
    let clock = Instant::now();
    let mut cfg = SynthConfig::default();
    let seed: u64 = std::env::var("PULSEID_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    cfg.seed = seed;
    if let Some(&n) = args.get(2) {
        cfg.external_ids = n;
    }
    let (data, ext) = Dataset::synthetic(&cfg)?;
    println!("data ready in {:.1}s", clock.elapsed().as_secs_f64());

    let s1 = Stage1Config { epochs: args.first().copied().unwrap_or(30), seed, ..Default::default() };
    let out1 = train_stage1(&data.unlabeled(Split::Train), &data.unlabeled(Split::Val), &s1)?;
    println!("stage 1 best epoch {} IPR {:.4} at {:.1}s", out1.best_epoch, out1.best_val_ipr, clock.elapsed().as_secs_f64());

    let s2 = Stage2Config { steps: args.get(1).copied().unwrap_or(Stage2Config::default().steps), seed, ..Default::default() };
    let train = data.labeled(Split::Train);
    let val = data.labeled(Split::Val);
    let hybrid = train_stage2(&out1.params, &train, &val, &ext, data.n_subjects, &s2)?;
    println!("hybrid best step {} EER {:.4} at {:.1}s", hybrid.best_step, hybrid.best_val_eer, clock.elapsed().as_secs_f64());
    let ablation = train_stage2_rppg_only(&out1.params, &train, &val, &ext, data.n_subjects, &s2)?;
    println!("ablation best step {} EER {:.4} at {:.1}s", ablation.best_step, ablation.best_val_eer, clock.elapsed().as_secs_f64());

    let report = evaluate(&hybrid.params, &data, &[5, 10, 20], "", 0)?;
    for w in &report.windows {
        let cross = w.cross.as_ref().map(|c| (c.mean_eer, c.mean_auc));
        println!("w={:2} intra EER {:.4} AUC {:.4} cross {:?}", w.window_beats, w.intra.mean_eer, w.intra.mean_auc, cross);
    }
    let (m1, _) = morphology(&out1.params, &data)?;
    let (ma, _) = morphology(&ablation.params, &data)?;
    println!("pearson stage1 {:.4} ablation {:.4} hybrid {:.4}", m1.mean, ma.mean, report.pearson_mean);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        write_checkpoint(&dir.join("stage1.ckpt"), &out1.params)?;
        write_checkpoint(&dir.join("hybrid.ckpt"), &hybrid.params)?;
        write_checkpoint(&dir.join("ablation.ckpt"), &ablation.params)?;
        write_report(&report, &dir)?;
    }
    println!("total {:.1}s", clock.elapsed().as_secs_f64());
    Ok(())
}
