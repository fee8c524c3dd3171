//! Synthetic ground truth: subjects with distinct two-bump pulse morphology,
//! contact traces, pulse-modulated facial videos and complete datasets on disk.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::split_ranges;
use crate::ingest::{self, format_cppg, CppgTrace, FrameSequence, LandmarkSet, Manifest, ManifestRecord};
use crate::tensor::Tensor;

pub const BASE_COLOR: [f64; 3] = [0.6, 0.45, 0.4];
pub const CHANNEL_WEIGHTS: [f64; 3] = [0.3, 1.0, 0.5];
/// Green peak-to-peak modulation as a fraction of the green base color.
pub const MODULATION_FRACTION: f64 = 0.01;
pub const HR_LIMITS: (f64, f64) = (40.0, 180.0);
/// Frequency of the sinusoidal heart-rate variation.
pub const HRV_FREQ: f64 = 0.1;
pub const GAIN_RANGE: (f64, f64) = (0.5, 1.5);

/// Two wrapped Gaussian bumps over the cardiac phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMorph {
    pub a1: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub a2: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub seed: u64,
}

impl SubjectMorph {
    /// Pulse value at phase `phi` (any real; wrapped to one period).
    pub fn pulse(&self, phi: f64) -> f64 {
        let p = phi.rem_euclid(1.0);
        let bump = |mu: f64, s: f64| -> f64 {
            (-1..=1)
                .map(|k| {
                    let d = p - mu + k as f64;
                    (-d * d / (2.0 * s * s)).exp()
                })
                .sum()
        };
        self.a1 * bump(self.mu1, self.sigma1) + self.a2 * bump(self.mu2, self.sigma2)
    }

    /// Phase of the systolic maximum, to 1e-4.
    pub fn peak_phase(&self) -> f64 {
        (0..10_000)
            .map(|i| i as f64 / 10_000.0)
            .max_by(|a, b| self.pulse(*a).total_cmp(&self.pulse(*b)))
            .unwrap()
    }

    /// One period sampled at `n` points from systolic peak to systolic peak,
    /// both ends included.
    pub fn template(&self, n: usize) -> Vec<f64> {
        let p0 = self.peak_phase();
        (0..n)
            .map(|j| self.pulse(p0 + j as f64 / (n - 1) as f64))
            .collect()
    }

    /// Peak-to-peak amplitude over one period.
    fn span(&self) -> (f64, f64) {
        let v: Vec<f64> = (0..1000).map(|i| self.pulse(i as f64 / 1000.0)).collect();
        let lo = v.iter().copied().fold(f64::MAX, f64::min);
        let hi = v.iter().copied().fold(f64::MIN, f64::max);
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionProfile {
    pub base_hr: f64,
    pub hrv: f64,
    pub hr_offset: f64,
    pub noise: f64,
    /// Multiplier on the default channel modulation; 0 gives a constant video.
    pub alpha_scale: f64,
}

impl SessionProfile {
    pub fn hr_at(&self, t: f64) -> f64 {
        self.base_hr + self.hrv * (2.0 * PI * HRV_FREQ * t).sin() + self.hr_offset
    }

    /// Cardiac phase in cycles at time `t`: integral of `hr/60` from 0.
    pub fn phase_at(&self, t: f64) -> f64 {
        let w = 2.0 * PI * HRV_FREQ;
        ((self.base_hr + self.hr_offset) * t + self.hrv * (1.0 - (w * t).cos()) / w) / 60.0
    }

    fn check(&self) -> Result<()> {
        let lo = self.base_hr + self.hr_offset - self.hrv.abs();
        let hi = self.base_hr + self.hr_offset + self.hrv.abs();
        if lo < HR_LIMITS.0 || hi > HR_LIMITS.1 {
            return Err(Error::Config(format!(
                "heart rate range [{lo}, {hi}] bpm leaves [{}, {}]",
                HR_LIMITS.0, HR_LIMITS.1
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise σ must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn gen_subject(seed: u64) -> SubjectMorph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SubjectMorph {
        a1: rng.random_range(0.8..=1.2),
        mu1: rng.random_range(0.20..=0.30),
        sigma1: rng.random_range(0.05..=0.10),
        a2: rng.random_range(0.25..=0.50),
        mu2: rng.random_range(0.55..=0.75),
        sigma2: rng.random_range(0.08..=0.15),
        seed,
    }
}

/// Noise-free pulse waveform sampled at `fs`.
pub fn pulse_wave(subj: &SubjectMorph, prof: &SessionProfile, duration_s: f64, fs: f64) -> Vec<f64> {
    let n = (duration_s * fs).round() as usize;
    (0..n)
        .map(|i| subj.pulse(prof.phase_at(i as f64 / fs)))
        .collect()
}

pub fn gen_cppg(
    subj: &SubjectMorph,
    prof: &SessionProfile,
    duration_s: f64,
    fs: f64,
    subject_id: usize,
    seed: u64,
) -> Result<CppgTrace> {
    prof.check()?;
    if duration_s < 10.0 {
        return Err(Error::Config(format!("cPPG duration {duration_s} s below 10 s")));
    }
    let mut x = pulse_wave(subj, prof, duration_s, fs);
    if prof.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, prof.noise).unwrap();
        x.iter_mut().for_each(|v| *v += nd.sample(&mut rng));
    }
    CppgTrace::new(x, fs, subject_id)
}

/// Video whose pixels carry the pulse: `B_c + g(h,w)·α_c·s(t) + ε`, where `s`
/// is the pulse rescaled to unit peak-to-peak and zero mid-range.
#[allow(clippy::too_many_arguments)]
pub fn render_video(
    subj: &SubjectMorph,
    prof: &SessionProfile,
    duration_s: f64,
    fps: f64,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<FrameSequence> {
    prof.check()?;
    if height < 6 || width < 6 {
        return Err(Error::Config(format!("frame {height}×{width} below 6×6")));
    }
    let (lo, hi) = subj.span();
    let s: Vec<f64> = pulse_wave(subj, prof, duration_s, fps)
        .iter()
        .map(|v| (v - lo) / (hi - lo) - 0.5)
        .collect();
    let k = MODULATION_FRACTION * BASE_COLOR[1] * prof.alpha_scale;
    let alpha: [f64; 3] = std::array::from_fn(|c| k * CHANNEL_WEIGHTS[c]);
    for c in 0..3 {
        let swing = GAIN_RANGE.1 * alpha[c].abs() * 0.5;
        if BASE_COLOR[c] - swing < 0.0 || BASE_COLOR[c] + swing > 1.0 {
            return Err(Error::Config("modulation exceeds the [0, 1] pixel range".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain: Vec<f64> = (0..height * width)
        .map(|_| rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1))
        .collect();
    let noise = (prof.noise > 0.0).then(|| Normal::new(0.0, prof.noise).unwrap());
    let t = s.len();
    let mut data = Vec::with_capacity(t * height * width * 3);
    for &st in &s {
        for g in &gain {
            for c in 0..3 {
                let mut v = BASE_COLOR[c] + g * alpha[c] * st;
                if let Some(nd) = &noise {
                    v += nd.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    FrameSequence::new(Tensor::new(vec![t, height, width, 3], data)?, fps)
}

/// Everything `gen_dataset` varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub sessions: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub cppg_fs: f64,
    pub window_s: f64,
    pub seed: u64,
    /// Identities in the external contact-PPG set (disjoint from video subjects).
    pub external_ids: usize,
    pub external_duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 8,
            sessions: 2,
            duration_s: 120.0,
            fps: 30.0,
            height: 36,
            width: 36,
            noise: 0.005,
            cppg_fs: 60.0,
            window_s: 10.0,
            seed: 0,
            external_ids: 16,
            external_duration_s: 120.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::Config(format!("need at least 2 subjects, got {}", self.n_subjects)));
        }
        if !(1..=2).contains(&self.sessions) {
            return Err(Error::Config("sessions must be 1 or 2".into()));
        }
        if self.external_ids == 1 {
            return Err(Error::Config("external cPPG set needs at least 2 identities".into()));
        }
        Ok(())
    }
}

/// Session of one synthetic video.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub subject: usize,
    pub session: usize,
    pub morph: SubjectMorph,
    pub profile: SessionProfile,
    pub video_seed: u64,
    pub cppg_seed: u64,
}

impl SynthVideo {
    pub fn session_tag(&self) -> String {
        format!("s{}", self.session + 1)
    }

    pub fn name(&self) -> String {
        format!("sub{:02}_{}", self.subject, self.session_tag())
    }
}

/// Deterministic plan of subjects and sessions; rendering happens separately.
pub fn plan_dataset(cfg: &SynthConfig) -> Result<Vec<SynthVideo>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for subject in 0..cfg.n_subjects {
        let morph = gen_subject(rng.next_u64());
        let base_hr = rng.random_range(60.0..=90.0);
        let hrv = rng.random_range(2.0..=4.0);
        let offset = rng.random_range(15.0..=25.0);
        for session in 0..cfg.sessions {
            out.push(SynthVideo {
                subject,
                session,
                morph: morph.clone(),
                profile: SessionProfile {
                    base_hr,
                    hrv,
                    hr_offset: if session == 0 { 0.0 } else { offset },
                    noise: cfg.noise,
                    alpha_scale: 1.0,
                },
                video_seed: rng.next_u64(),
                cppg_seed: rng.next_u64(),
            });
        }
    }
    Ok(out)
}

/// External contact-PPG identities: subjects drawn from a separate stream,
/// one noise-free-HR-varying trace each.
pub fn gen_external_cppg(cfg: &SynthConfig) -> Result<Vec<CppgTrace>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00C0_FFEE_5EED_0001);
    (0..cfg.external_ids)
        .map(|id| {
            let morph = gen_subject(rng.next_u64());
            let prof = SessionProfile {
                base_hr: rng.random_range(55.0..=100.0),
                hrv: rng.random_range(2.0..=4.0),
                hr_offset: 0.0,
                noise: 0.01,
                alpha_scale: 1.0,
            };
            let seed = rng.next_u64();
            gen_cppg(&morph, &prof, cfg.external_duration_s, cfg.fps, id, seed)
        })
        .collect()
}

/// One external trace as listed in the external-set manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CppgRecord {
    pub cppg_path: String,
    pub subject_id: usize,
    pub fs: f64,
}

/// Writes the video dataset and the external cPPG set under `out_dir`:
/// `manifest.json`, `external/cppg_manifest.json`, raw videos, landmarks and
/// CSV traces.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let plan = plan_dataset(cfg)?;
    fs::create_dir_all(out_dir.join("videos"))?;
    fs::create_dir_all(out_dir.join("cppg"))?;
    fs::create_dir_all(out_dir.join("landmarks"))?;
    fs::create_dir_all(out_dir.join("external"))?;
    let landmarks = LandmarkSet::static_points(vec![
        (0.0, 0.0),
        (cfg.width as f64, cfg.height as f64),
    ]);
    let lm_rel = "landmarks/face.json";
    fs::write(out_dir.join(lm_rel), serde_json::to_string(&landmarks.frames)?)?;
    let mut records = Vec::new();
    for sv in &plan {
        let video = render_video(
            &sv.morph,
            &sv.profile,
            cfg.duration_s,
            cfg.fps,
            cfg.height,
            cfg.width,
            sv.video_seed,
        )?;
        let v_rel = format!("videos/{}.rppg", sv.name());
        ingest::write_frames(&out_dir.join(&v_rel), video.data())?;
        let mut clean = sv.profile.clone();
        clean.noise = 0.0;
        let trace = gen_cppg(&sv.morph, &clean, cfg.duration_s, cfg.cppg_fs, sv.subject, sv.cppg_seed)?;
        let c_rel = format!("cppg/{}.csv", sv.name());
        fs::write(out_dir.join(&c_rel), format_cppg(&trace.samples))?;
        records.push(ManifestRecord {
            video_path: v_rel,
            subject_id: sv.subject as i64,
            session_tag: sv.session_tag(),
            fps: cfg.fps,
            landmarks_path: Some(lm_rel.into()),
            cppg_path: Some(c_rel),
            cppg_fs: Some(cfg.cppg_fs),
            splits: split_ranges(cfg.duration_s, &sv.session_tag(), cfg.window_s)?,
        });
    }
    let manifest = Manifest::from_records(records, out_dir.to_path_buf())?;
    fs::write(out_dir.join("manifest.json"), manifest.to_json()?)?;

    let mut ext = Vec::new();
    for tr in gen_external_cppg(cfg)? {
        let rel = format!("id{:03}.csv", tr.subject_id);
        fs::write(out_dir.join("external").join(&rel), format_cppg(&tr.samples))?;
        ext.push(CppgRecord {
            cppg_path: rel,
            subject_id: tr.subject_id,
            fs: tr.fs,
        });
    }
    fs::write(
        out_dir.join("external").join("cppg_manifest.json"),
        serde_json::to_string_pretty(&ext)?,
    )?;
    Ok(manifest)
}

/// Loads an external contact-PPG set, resampled to `fs`.
pub fn load_cppg_set(path: &Path, fs: f64) -> Result<Vec<CppgTrace>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let recs: Vec<CppgRecord> = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::ingest(format!("cPPG manifest: {e}")))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
    let mut ids: Vec<usize> = recs.iter().map(|r| r.subject_id).collect();
    ids.sort_unstable();
    ids.dedup();
    recs.iter()
        .map(|r| {
            let tr = ingest::load_cppg(&base.join(&r.cppg_path), r.fs, r.subject_id)?;
            let dense = ids.binary_search(&r.subject_id).unwrap();
            CppgTrace::new(ingest::resample(&tr.samples, tr.fs, fs), fs, dense)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{self, RppgSignal};

    fn profile(hr: f64) -> SessionProfile {
        SessionProfile {
            base_hr: hr,
            hrv: 0.0,
            hr_offset: 0.0,
            noise: 0.0,
            alpha_scale: 1.0,
        }
    }

    #[test]
    fn subject_ranges_and_determinism() {
        assert_eq!(gen_subject(7), gen_subject(7));
        for seed in 0..10_000 {
            let s = gen_subject(seed);
            assert!((0.8..=1.2).contains(&s.a1) && (0.25..=0.5).contains(&s.a2));
            assert!((0.2..=0.3).contains(&s.mu1) && (0.55..=0.75).contains(&s.mu2));
            assert!((0.05..=0.1).contains(&s.sigma1) && (0.08..=0.15).contains(&s.sigma2));
            assert!(s.a1 > s.a2 && s.mu1 < s.mu2);
        }
    }

    #[test]
    fn subjects_are_distinct() {
        let t: Vec<Vec<f64>> = (0..100).map(|s| gen_subject(s).template(90)).collect();
        let mut close = 0;
        let mut pairs = 0;
        for i in 0..100 {
            for j in i + 1..100 {
                pairs += 1;
                if dsp::pearson(&t[i], &t[j]).unwrap() >= 0.999 {
                    close += 1;
                }
            }
        }
        assert!(close * 100 <= pairs, "{close}/{pairs}");
    }

    #[test]
    fn steady_trace_is_exactly_periodic() {
        let s = gen_subject(3);
        let tr = gen_cppg(&s, &profile(60.0), 10.0, 30.0, 0, 0).unwrap();
        assert_eq!(tr.samples.len(), 300);
        for k in 1..10 {
            for i in 0..30 {
                assert!((tr.samples[i] - tr.samples[30 * k + i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hr_out_of_range_rejected() {
        let s = gen_subject(3);
        assert!(matches!(gen_cppg(&s, &profile(30.0), 10.0, 30.0, 0, 0), Err(Error::Config(_))));
        let mut p = profile(170.0);
        p.hrv = 15.0;
        assert!(gen_cppg(&s, &p, 10.0, 30.0, 0, 0).is_err());
    }

    #[test]
    fn dominant_frequency_matches_hr() {
        let s = gen_subject(11);
        let tr = gen_cppg(&s, &profile(72.0), 20.0, 30.0, 0, 0).unwrap();
        let f = dsp::fundamental_frequency(&RppgSignal::new(tr.samples, 30.0)).unwrap();
        assert!((f - 1.2).abs() <= 0.1, "{f}");
    }

    #[test]
    fn segments_recover_template() {
        for seed in [1, 2, 3] {
            let s = gen_subject(seed);
            let mut p = profile(70.0);
            p.hrv = 3.0;
            let tr = gen_cppg(&s, &p, 30.0, 60.0, 0, 0).unwrap();
            let sig = RppgSignal::new(tr.samples, 60.0);
            let peaks = dsp::detect_peaks(&sig).unwrap();
            let b = dsp::segment_and_resample(&sig, &peaks).unwrap();
            let r = dsp::pearson(&b.mean_segment(), &s.template(90)).unwrap();
            assert!(r >= 0.99, "{r}");
        }
    }

    #[test]
    fn video_examples() {
        let s = gen_subject(5);
        let p = profile(66.0);
        let v = render_video(&s, &p, 10.0, 30.0, 8, 8, 1).unwrap();
        assert_eq!(v.data().shape(), &[300, 8, 8, 3]);
        let px: Vec<f64> = (0..300).map(|t| v.pixel(t, 3, 4, 1)).collect();
        let f = dsp::fundamental_frequency(&RppgSignal::new(px, 30.0)).unwrap();
        assert!((f - 1.1).abs() <= 0.1, "{f}");

        let mean: Vec<f64> = (0..300)
            .map(|t| (0..8).flat_map(|h| (0..8).map(move |w| (h, w))).map(|(h, w)| v.pixel(t, h, w, 1)).sum::<f64>())
            .collect();
        let truth = pulse_wave(&s, &p, 10.0, 30.0);
        assert!(dsp::pearson(&mean, &truth).unwrap() >= 0.99);

        let mut flat = p.clone();
        flat.alpha_scale = 0.0;
        let v = render_video(&s, &flat, 10.0, 30.0, 6, 6, 1).unwrap();
        assert!(v.data().data().chunks(3).all(|c| c == BASE_COLOR));

        let mut loud = p;
        loud.alpha_scale = 200.0;
        assert!(matches!(render_video(&s, &loud, 10.0, 30.0, 6, 6, 1), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_on_disk_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_subjects: 2,
            duration_s: 50.0,
            height: 8,
            width: 8,
            external_ids: 2,
            external_duration_s: 10.0,
            ..SynthConfig::default()
        };
        let m = gen_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.records.len(), 4);
        let back = ingest::load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.records, m.records);
        let ext = load_cppg_set(&dir.path().join("external/cppg_manifest.json"), 30.0).unwrap();
        assert_eq!(ext.len(), 2);
        assert_eq!(ext[1].subject_id, 1);

        let dir2 = tempfile::tempdir().unwrap();
        gen_dataset(&cfg, dir2.path()).unwrap();
        for rel in ["manifest.json", "videos/sub01_s2.rppg", "cppg/sub00_s1.csv", "external/id001.csv"] {
            assert_eq!(fs::read(dir.path().join(rel)).unwrap(), fs::read(dir2.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn single_subject_rejected() {
        let cfg = SynthConfig {
            n_subjects: 1,
            ..SynthConfig::default()
        };
        assert!(matches!(plan_dataset(&cfg), Err(Error::Config(_))));
    }
}
