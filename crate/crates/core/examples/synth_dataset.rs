//! Writes a small synthetic dataset (videos, contact traces, manifests) and
//! lists what was produced.
//!
//! `cargo run --release --example synth_dataset -- [out dir]`

use pulseid::synth::{gen_dataset, SynthConfig};

fn main() -> pulseid::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let tmp = tempfile::tempdir()?;
    let dir = out.unwrap_or_else(|| tmp.path().join("synth"));
    let cfg = SynthConfig { n_subjects: 3, duration_s: 60.0, external_ids: 4, external_duration_s: 30.0, ..Default::default() };
    let m = gen_dataset(&cfg, &dir)?;
    for r in &m.records {
        let splits: Vec<String> = r.splits.iter().map(|s| format!("{}[{}..{})", s.split.as_str(), s.start_s, s.end_s)).collect();
        println!("{:<22} subject {} {} {}", r.video_path, r.subject_id, r.session_tag, splits.join(" "));
    }
    println!("{} videos for {} subjects in {}", m.records.len(), m.n_subjects(), dir.display());
    Ok(())
}
