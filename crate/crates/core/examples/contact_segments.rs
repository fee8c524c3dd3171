//! Contact-PPG beat segmentation: clips between systolic peaks resampled to
//! 90 samples, compared against the generator's analytic beat template.
//! The training branch bandpasses first, which trades some waveform detail
//! for robustness; both readouts are shown.
//!
//! `cargo run --release --example contact_segments`

use pulseid::dsp::{detect_peaks, pearson, segment_and_resample, RppgSignal};
use pulseid::morph::cppg_segments;
use pulseid::synth::{gen_cppg, gen_subject, SessionProfile};

fn main() -> pulseid::Result<()> {
    let subject = gen_subject(21);
    let prof = SessionProfile { base_hr: 70.0, hrv: 3.0, hr_offset: 0.0, noise: 0.0, alpha_scale: 1.0 };
    let trace = gen_cppg(&subject, &prof, 30.0, 60.0, 0, 4)?;
    let template = subject.template(90);

    let s = RppgSignal::new(trace.samples.clone(), trace.fs);
    let raw = segment_and_resample(&s, &detect_peaks(&s)?)?;
    println!("raw trace: {} beats, mean beat vs template r = {:.4}", raw.count(), pearson(&raw.mean_segment(), &template)?);

    let band = cppg_segments(&trace.samples, trace.fs)?;
    println!("bandpassed: {} beats, mean beat vs template r = {:.4}", band.count(), pearson(&band.mean_segment(), &template)?);
    Ok(())
}
