//! Classical heart-rate readout: the POS projection of a de-identified map,
//! its PSD peak, IPR and detected beats.
//!
//! `cargo run --release --example pos_baseline -- [heart rate bpm]`

use pulseid::deid::deidentify;
use pulseid::dsp::{detect_peaks, fundamental_frequency, ipr, pos_baseline};
use pulseid::synth::{gen_subject, render_video, SessionProfile};

fn main() -> pulseid::Result<()> {
    let hr: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(66.0);
    let prof = SessionProfile { base_hr: hr, hrv: 0.0, hr_offset: 0.0, noise: 0.005, alpha_scale: 1.0 };
    let video = render_video(&gen_subject(5), &prof, 30.0, 30.0, 36, 36, 1)?;
    let (_, map) = deidentify(&video, 99)?;
    let s = pos_baseline(&map)?;
    let f = fundamental_frequency(&s)?;
    println!("true HR {hr:.1} bpm, POS estimate {:.1} bpm ({f:.2} Hz)", f * 60.0);
    println!("IPR {:.3}, {} beats detected in {:.0} s", ipr(&s)?, detect_peaks(&s)?.len(), s.duration_s());
    Ok(())
}
