//! De-identifies one rendered face video: 6×6 block averaging, a seeded cell
//! permutation, and the resulting 36-row spatiotemporal map.
//!
//! `cargo run --release --example deidentify_video`

use pulseid::deid::{deidentify, invert_permutation, video_seed};
use pulseid::synth::{gen_subject, render_video, SessionProfile};

fn main() -> pulseid::Result<()> {
    let subject = gen_subject(11);
    let prof = SessionProfile { base_hr: 75.0, hrv: 2.0, hr_offset: 0.0, noise: 0.005, alpha_scale: 1.0 };
    let video = render_video(&subject, &prof, 20.0, 30.0, 36, 36, 3)?;
    let seed = video_seed("manifest.json", 0);
    let (vd, map) = deidentify(&video, seed)?;
    println!("video {:?} -> de-identified {:?}", video.data().shape(), vd.data.shape());
    println!("seed {seed:#018x}, permutation head {:?}", &vd.permutation[..8]);
    println!("inverse head {:?}", &invert_permutation(&vd.permutation)[..8]);
    println!("ST map: {} rows × {} frames × {} channels at {} fps", map.rows(), map.frames(), map.channels(), map.fps);
    Ok(())
}
