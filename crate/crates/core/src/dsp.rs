//! Pulse signal processing: FFT bandpass, band-limited periodogram, dominant
//! frequency, irrelevant power ratio, systolic peaks, beat segmentation,
//! Pearson correlation and the POS projection baseline.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::deid::StMap;
use crate::error::{Error, Result};
use crate::ingest::resample_len;
use crate::tensor::{band_bins, hann, zscore_in_place, Tensor};

/// Heart-rate band in Hz (40–250 bpm).
pub const HR_BAND: (f64, f64) = (0.66, 4.16);
/// Denominator band of the irrelevant power ratio.
pub const IPR_BAND: (f64, f64) = (0.5, 5.0);
/// Half-width of the dominant-peak window counted as relevant power.
pub const IPR_HALF_WIDTH: f64 = 0.1;
/// Coarsest PSD bin spacing; shorter signals are zero-padded to reach it.
pub const PSD_RESOLUTION: f64 = 0.1;
pub const SEGMENT_LEN: usize = 90;
/// Rate at which a 90-sample clip corresponds to the slowest accepted beat.
pub const SEGMENT_REF_FS: f64 = 60.0;
pub const PEAK_PERCENTILE: f64 = 0.6;
/// Minimum peak spacing as a fraction of the beat period.
pub const PEAK_MIN_DISTANCE: f64 = 0.5;
pub const POS_WINDOW_S: f64 = 1.6;
/// Harmonics summed when scoring a candidate fundamental.
pub const HARMONICS: usize = 3;
/// Power a candidate fundamental needs relative to the strongest in-band bin.
pub const FUNDAMENTAL_MIN_POWER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct RppgSignal {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl RppgSignal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Self {
        RppgSignal { samples, fs }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub band: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    /// `K×90`, each row z-scored.
    pub segments: Tensor,
    /// Starting peak of each kept clip.
    pub source_peaks: Vec<usize>,
    pub fs: f64,
    pub dropped: usize,
}

impl SegmentBatch {
    pub fn count(&self) -> usize {
        self.segments.shape()[0]
    }

    /// Mean over segments, a 90-sample template.
    pub fn mean_segment(&self) -> Vec<f64> {
        let k = self.count();
        let mut m = vec![0.0; SEGMENT_LEN];
        for i in 0..k {
            for (a, b) in m.iter_mut().zip(self.segments.row(i)) {
                *a += b / k as f64;
            }
        }
        m
    }
}

/// Zero-phase bandpass: forward FFT, zero every bin whose frequency lies
/// outside `[lo, hi]`, inverse FFT.
pub fn bandpass(x: &RppgSignal, lo: f64, hi: f64) -> Result<RppgSignal> {
    Ok(RppgSignal::new(bandpass_samples(&x.samples, x.fs, lo, hi)?, x.fs))
}

pub fn bandpass_samples(x: &[f64], fs: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(0.0 < lo && lo < hi && hi < fs / 2.0) {
        return Err(Error::Config(format!(
            "band [{lo}, {hi}] Hz invalid for sampling rate {fs} Hz"
        )));
    }
    let n = x.len();
    if n == 0 {
        return Ok(vec![]);
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        if f < lo || f > hi {
            *b = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    Ok(buf.iter().map(|c| c.re / n as f64).collect())
}

/// DFT length giving at most [`PSD_RESOLUTION`] Hz bin spacing.
pub fn psd_nfft(n: usize, fs: f64) -> usize {
    n.max((fs / PSD_RESOLUTION).ceil() as usize)
}

/// Unnormalized Hann-windowed periodogram of the zero-meaned signal on the
/// DFT bins inside `band`.
pub fn band_periodogram(x: &[f64], fs: f64, band: (f64, f64), nfft: usize) -> (Vec<f64>, Vec<f64>) {
    let l = x.len();
    let mean = x.iter().sum::<f64>() / l as f64;
    let w = hann(l);
    let y: Vec<f64> = x.iter().zip(&w).map(|(v, w)| (v - mean) * w).collect();
    let bins = band_bins(fs, band, nfft);
    let mut freqs = Vec::with_capacity(bins.len());
    let mut power = Vec::with_capacity(bins.len());
    for k in bins {
        let omega = 2.0 * std::f64::consts::PI * k as f64 / nfft as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, v) in y.iter().enumerate() {
            let (s, c) = (omega * n as f64).sin_cos();
            re += v * c;
            im -= v * s;
        }
        freqs.push(k as f64 * fs / nfft as f64);
        power.push(re * re + im * im);
    }
    (freqs, power)
}

pub fn psd(x: &RppgSignal, band: (f64, f64)) -> Result<Psd> {
    if (x.len() as f64) < x.fs {
        return Err(Error::Dsp(format!(
            "PSD needs at least 1 s of signal, got {:.2} s",
            x.duration_s()
        )));
    }
    let (freqs, mut power) = band_periodogram(&x.samples, x.fs, band, psd_nfft(x.len(), x.fs));
    if freqs.is_empty() {
        return Err(Error::Dsp("no frequency bins inside the band".into()));
    }
    let total: f64 = power.iter().sum();
    if total > f64::MIN_POSITIVE {
        power.iter_mut().for_each(|p| *p /= total);
    } else {
        let u = 1.0 / power.len() as f64;
        power.iter_mut().for_each(|p| *p = u);
    }
    Ok(Psd { freqs, power, band })
}

/// Frequency of maximum power; the lowest frequency wins ties.
pub fn dominant_frequency(p: &Psd) -> f64 {
    let mut best = 0;
    for (i, &v) in p.power.iter().enumerate() {
        if v > p.power[best] {
            best = i;
        }
    }
    p.freqs[best]
}

/// Heart rate in Hz by harmonic summation: each candidate bin in the
/// heart-rate band holding at least [`FUNDAMENTAL_MIN_POWER`] of the strongest
/// in-band bin scores its own power plus the strongest bin within ±1 of each
/// of its 2nd and 3rd multiples; the best score wins, lowest frequency on
/// ties. Unlike [`dominant_frequency`] this does not lock onto the second
/// harmonic of pulses whose two waves partly cancel the fundamental.
pub fn fundamental_frequency(x: &RppgSignal) -> Result<f64> {
    if (x.len() as f64) < x.fs {
        return Err(Error::Dsp(format!(
            "heart-rate readout needs at least 1 s of signal, got {:.2} s",
            x.duration_s()
        )));
    }
    let nfft = psd_nfft(x.len(), x.fs);
    let top = (HARMONICS as f64 * HR_BAND.1 + 0.5).min(0.5 * x.fs);
    let (freqs, power) = band_periodogram(&x.samples, x.fs, (0.0, top), nfft);
    let df = x.fs / nfft as f64;
    let at = |k: usize| power.get(k).copied().unwrap_or(0.0);
    let in_band = |f: f64| f >= HR_BAND.0 - 1e-9 && f <= HR_BAND.1 + 1e-9;
    let peak = freqs
        .iter()
        .zip(&power)
        .filter(|(f, _)| in_band(**f))
        .map(|(_, p)| *p)
        .fold(0.0, f64::max);
    let mut best: Option<(f64, f64)> = None;
    for (k, &f) in freqs.iter().enumerate() {
        if !in_band(f) || at(k) < FUNDAMENTAL_MIN_POWER * peak {
            continue;
        }
        let mut score = at(k);
        for h in 2..=HARMONICS {
            score += (h * k - 1..=h * k + 1).map(at).fold(0.0, f64::max);
        }
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, f));
        }
    }
    debug_assert!(freqs.first().is_none_or(|f0| f0.abs() < df * 0.5));
    best.map(|(_, f)| f)
        .ok_or_else(|| Error::Dsp("no frequency bins inside the band".into()))
}

/// Irrelevant power ratio: one minus the fraction of 0.5–5 Hz power lying
/// within ±0.1 Hz of the dominant heart-rate frequency.
pub fn ipr(x: &RppgSignal) -> Result<f64> {
    if x.duration_s() < 5.0 {
        return Err(Error::Dsp(format!(
            "IPR needs at least 5 s of signal, got {:.2} s",
            x.duration_s()
        )));
    }
    let f_dom = dominant_frequency(&psd(x, HR_BAND)?);
    let (freqs, power) = band_periodogram(&x.samples, x.fs, IPR_BAND, psd_nfft(x.len(), x.fs));
    let total: f64 = power.iter().sum();
    if total <= f64::MIN_POSITIVE {
        return Ok(1.0);
    }
    let near: f64 = freqs
        .iter()
        .zip(&power)
        .filter(|(f, _)| (**f - f_dom).abs() <= IPR_HALF_WIDTH + 1e-9)
        .map(|(_, p)| p)
        .sum();
    Ok((1.0 - near / total).clamp(0.0, 1.0))
}

/// Value at fraction `q` of the sorted samples (nearest-rank on `q·(n−1)`).
fn quantile(x: &[f64], q: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < s.len() {
        s[i] * (1.0 - frac) + s[i + 1] * frac
    } else {
        s[i]
    }
}

/// Systolic peaks: local maxima above the 60th percentile, at least
/// `0.5·fs/f_hr` apart, chosen greedily by height. Sorted ascending. `f_hr` is
/// the [`fundamental_frequency`].
pub fn detect_peaks(x: &RppgSignal) -> Result<Vec<usize>> {
    if x.len() < 3 {
        return Err(Error::Dsp("insufficient beats".into()));
    }
    let f_hr = if (x.len() as f64) >= x.fs {
        fundamental_frequency(x)?
    } else {
        HR_BAND.1
    };
    detect_peaks_at(x, f_hr, PEAK_MIN_DISTANCE)
}

/// [`detect_peaks`] with the beat rate `f_hr` supplied by the caller and the
/// minimum distance `factor·fs/f_hr`.
pub fn detect_peaks_at(x: &RppgSignal, f_hr: f64, factor: f64) -> Result<Vec<usize>> {
    let s = &x.samples;
    if s.len() < 3 {
        return Err(Error::Dsp("insufficient beats".into()));
    }
    if !(f_hr > 0.0) {
        return Err(Error::Dsp(format!("beat rate {f_hr} Hz is not positive")));
    }
    let min_dist = factor * x.fs / f_hr;
    let thr = quantile(s, PEAK_PERCENTILE);
    let mut cand: Vec<usize> = (1..s.len() - 1)
        .filter(|&i| s[i] > s[i - 1] && s[i] >= s[i + 1] && s[i] > thr)
        .collect();
    cand.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in cand {
        if kept.iter().all(|&j| (i.abs_diff(j) as f64) >= min_dist) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    if kept.len() < 2 {
        return Err(Error::Dsp("insufficient beats".into()));
    }
    Ok(kept)
}

/// Interpolation weights mapping a signal to its 90-sample peak-to-peak clips
/// (before z-scoring), plus the starting peak of each kept clip and the number
/// of clips dropped for exceeding the slowest accepted beat.
pub fn segment_weights(
    peaks: &[usize],
    fs: f64,
) -> (Vec<Vec<(usize, f64)>>, Vec<usize>, usize) {
    let max_len = SEGMENT_LEN as f64 * fs / SEGMENT_REF_FS;
    let mut rows = Vec::new();
    let mut starts = Vec::new();
    let mut dropped = 0;
    for w in peaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let span = b - a;
        if span == 0 || span as f64 > max_len {
            dropped += 1;
            continue;
        }
        starts.push(a);
        let step = span as f64 / (SEGMENT_LEN - 1) as f64;
        for j in 0..SEGMENT_LEN {
            let pos = j as f64 * step;
            let i = (pos.floor() as usize).min(span - 1);
            let frac = pos - i as f64;
            let mut row = vec![(a + i, 1.0 - frac)];
            if frac > 0.0 {
                row.push((a + i + 1, frac));
            }
            rows.push(row);
        }
    }
    (rows, starts, dropped)
}

/// Cuts peak-to-peak clips (both peaks included), resamples each to 90
/// samples and z-scores it. Clips slower than 40 bpm are dropped.
pub fn segment_and_resample(x: &RppgSignal, peaks: &[usize]) -> Result<SegmentBatch> {
    if peaks.len() < 2 {
        return Err(Error::Dsp("insufficient beats".into()));
    }
    if peaks.iter().any(|&p| p >= x.len()) || peaks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Dsp("peaks must be increasing indices into the signal".into()));
    }
    let max_len = SEGMENT_LEN as f64 * x.fs / SEGMENT_REF_FS;
    let mut data = Vec::new();
    let mut starts = Vec::new();
    let mut dropped = 0;
    for w in peaks.windows(2) {
        if (w[1] - w[0]) as f64 > max_len {
            log::debug!("dropping {}-sample clip at {}", w[1] - w[0], w[0]);
            dropped += 1;
            continue;
        }
        let mut clip = resample_len(&x.samples[w[0]..=w[1]], SEGMENT_LEN);
        zscore_in_place(&mut clip);
        data.extend(clip);
        starts.push(w[0]);
    }
    if starts.is_empty() {
        return Err(Error::Dsp("insufficient beats".into()));
    }
    Ok(SegmentBatch {
        segments: Tensor::new(vec![starts.len(), SEGMENT_LEN], data)?,
        source_peaks: starts,
        fs: x.fs,
        dropped,
    })
}

/// Bandpass, peak detection and segmentation in one call.
pub fn segments_of(x: &RppgSignal) -> Result<SegmentBatch> {
    let bp = bandpass(x, HR_BAND.0, HR_BAND.1)?;
    let peaks = detect_peaks(&bp)?;
    segment_and_resample(&bp, &peaks)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Dsp(format!(
            "pearson needs equal lengths ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 1e-300 || sbb <= 1e-300 {
        return Err(Error::Dsp("pearson of a zero-variance sequence".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// POS projection on the raw RGB traces of every row with 1.6-s overlap-add
/// windows, averaged over rows and bandpassed.
pub fn pos_baseline(m: &StMap) -> Result<RppgSignal> {
    let (rows, t) = (m.rows(), m.frames());
    if m.channels() != 3 {
        return Err(Error::Dsp("POS needs RGB channels".into()));
    }
    let l = (POS_WINDOW_S * m.fps).round() as usize;
    if t < l || l < 2 {
        return Err(Error::Dsp(format!(
            "POS needs at least {POS_WINDOW_S} s of data, got {t} frames"
        )));
    }
    let mut acc = vec![0.0; t];
    for r in 0..rows {
        let rgb: Vec<[f64; 3]> = (0..t)
            .map(|ti| [m.at(r, ti, 0), m.at(r, ti, 1), m.at(r, ti, 2)])
            .collect();
        let mut h = vec![0.0; t];
        for start in 0..=t - l {
            let win = &rgb[start..start + l];
            let mut mean = [0.0; 3];
            for px in win {
                for c in 0..3 {
                    mean[c] += px[c] / l as f64;
                }
            }
            if mean.iter().any(|&v| v <= 1e-12) {
                continue;
            }
            let mut s1 = Vec::with_capacity(l);
            let mut s2 = Vec::with_capacity(l);
            for px in win {
                let n = [px[0] / mean[0], px[1] / mean[1], px[2] / mean[2]];
                s1.push(n[1] - n[2]);
                s2.push(-2.0 * n[0] + n[1] + n[2]);
            }
            let sd = |v: &[f64]| {
                let mu = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
            };
            let (d1, d2) = (sd(&s1), sd(&s2));
            let alpha = if d2 > 1e-12 { d1 / d2 } else { 0.0 };
            let p: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
            let mu = p.iter().sum::<f64>() / l as f64;
            for (i, v) in p.iter().enumerate() {
                h[start + i] += v - mu;
            }
        }
        for (a, v) in acc.iter_mut().zip(&h) {
            *a += v / rows as f64;
        }
    }
    bandpass(&RppgSignal::new(acc, m.fps), HR_BAND.0, HR_BAND.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(f: f64, fs: f64, secs: f64, amp: f64) -> Vec<f64> {
        let n = (fs * secs).round() as usize;
        (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    fn amplitude(x: &[f64]) -> f64 {
        x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn bandpass_examples() {
        let x = sine(1.2, 30.0, 10.0, 1.0);
        let y = bandpass_samples(&x, 30.0, 0.66, 4.16).unwrap();
        assert!((amplitude(&y) - 1.0).abs() < 0.01);

        let y = bandpass_samples(&vec![5.0; 300], 30.0, 0.66, 4.16).unwrap();
        assert!((y.iter().sum::<f64>() / 300.0).abs() < 1e-6);

        let slow = sine(0.2, 30.0, 10.0, 1.0);
        let mix: Vec<f64> = slow.iter().zip(&x).map(|(a, b)| a + b).collect();
        let y = bandpass_samples(&mix, 30.0, 0.66, 4.16).unwrap();
        let resid: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let db = 20.0 * (amplitude(&resid) / amplitude(&slow)).log10();
        assert!(db < -40.0, "{db}");

        assert!(matches!(bandpass_samples(&x, 30.0, 0.66, 16.0), Err(Error::Config(_))));
    }

    #[test]
    fn psd_examples() {
        let x = RppgSignal::new(sine(1.2, 30.0, 10.0, 1.0), 30.0);
        let p = psd(&x, HR_BAND).unwrap();
        assert!((dominant_frequency(&p) - 1.2).abs() <= 0.1 + 1e-9);

        let a = sine(1.0, 30.0, 10.0, 1.0);
        let b = sine(2.0, 30.0, 10.0, 1.0);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a + b).collect();
        let p = psd(&RppgSignal::new(mix, 30.0), HR_BAND).unwrap();
        let mass = |f0: f64| -> f64 {
            p.freqs
                .iter()
                .zip(&p.power)
                .filter(|(f, _)| (**f - f0).abs() <= 0.25)
                .map(|(_, v)| v)
                .sum()
        };
        assert!((mass(1.0) - 0.5).abs() < 0.05);
        assert!((mass(2.0) - 0.5).abs() < 0.05);
        assert!((p.power.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.freqs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn psd_rejects_short_signal() {
        assert!(psd(&RppgSignal::new(vec![0.0; 29], 30.0), HR_BAND).is_err());
    }

    #[test]
    fn dominant_frequency_ties_go_low() {
        let p = Psd {
            freqs: vec![0.7, 0.8, 1.5, 1.6],
            power: vec![0.0, 0.0, 1.0, 0.0],
            band: HR_BAND,
        };
        assert_eq!(dominant_frequency(&p), 1.5);
        let flat = Psd {
            power: vec![0.25; 4],
            ..p
        };
        assert_eq!(dominant_frequency(&flat), 0.7);
    }

    #[test]
    fn ipr_examples() {
        let x = RppgSignal::new(sine(1.2, 30.0, 10.0, 1.0), 30.0);
        assert!(ipr(&x).unwrap() < 0.05);
        let out_band = sine(4.6, 30.0, 10.0, 1.0);
        let mix: Vec<f64> = x.samples.iter().zip(&out_band).map(|(a, b)| a + b).collect();
        let v = ipr(&RppgSignal::new(mix, 30.0)).unwrap();
        assert!((v - 0.5).abs() < 0.05, "{v}");
        assert!(ipr(&RppgSignal::new(vec![0.0; 120], 30.0)).is_err());
    }

    #[test]
    fn fundamental_survives_weak_first_harmonic() {
        let fs = 30.0;
        let x: Vec<f64> = (0..300)
            .map(|i| {
                let t = i as f64 / fs;
                0.3 * (2.0 * PI * 1.2 * t).sin() + (2.0 * PI * 2.4 * t).sin() + 0.3 * (2.0 * PI * 3.6 * t).sin()
            })
            .collect();
        let sig = RppgSignal::new(x, fs);
        assert!((dominant_frequency(&psd(&sig, HR_BAND).unwrap()) - 2.4).abs() < 1e-9);
        assert!((fundamental_frequency(&sig).unwrap() - 1.2).abs() < 1e-9);
        let pure = RppgSignal::new(sine(2.0, fs, 10.0, 1.0), fs);
        assert!((fundamental_frequency(&pure).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn peaks_of_one_hertz_sine() {
        let x = RppgSignal::new(sine(1.0, 30.0, 10.0, 1.0), 30.0);
        let p = detect_peaks(&x).unwrap();
        assert_eq!(p.len(), 10);
        for (k, &i) in p.iter().enumerate() {
            assert!((i as i64 - (7 + 30 * k as i64)).abs() <= 1, "{p:?}");
        }
        assert!(detect_peaks(&RppgSignal::new(vec![1.0; 300], 30.0)).is_err());
    }

    #[test]
    fn segmentation_examples() {
        let x = RppgSignal::new(sine(1.0, 30.0, 10.0, 1.0), 30.0);
        let peaks: Vec<usize> = (0..9).map(|k| 7 + 30 * k).collect();
        let b = segment_and_resample(&x, &peaks).unwrap();
        assert_eq!(b.segments.shape(), &[8, 90]);

        let clip = RppgSignal::new(vec![0.0, 2.0, 0.0], 30.0);
        let b = segment_and_resample(&clip, &[0, 2]).unwrap();
        let row = b.segments.row(0);
        let argmax = (0..90).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        assert!((argmax as i64 - 45).abs() <= 1);
        let mean = row.iter().sum::<f64>() / 90.0;
        assert!(mean.abs() < 1e-12);

        let slow = RppgSignal::new(vec![0.0; 200], 30.0);
        let b = segment_and_resample(&slow, &[0, 30, 80, 110]).unwrap();
        assert_eq!((b.count(), b.dropped), (2, 1));
    }

    #[test]
    fn weights_match_direct_segmentation() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 23) as f64 / 7.0).collect();
        let peaks = [3, 31, 64, 150, 170];
        let (rows, starts, dropped) = segment_weights(&peaks, 30.0);
        let direct = segment_and_resample(&RppgSignal::new(x.clone(), 30.0), &peaks).unwrap();
        assert_eq!(starts, direct.source_peaks);
        assert_eq!(dropped, direct.dropped);
        for (k, chunk) in rows.chunks(90).enumerate() {
            let mut clip: Vec<f64> = chunk
                .iter()
                .map(|r| r.iter().map(|&(j, w)| w * x[j]).sum())
                .collect();
            zscore_in_place(&mut clip);
            for (a, b) in clip.iter().zip(direct.segments.row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.981_980_506).abs() < 1e-6);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pos_on_constant_video_is_silent() {
        let m = StMap::new(Tensor::full(&[36, 90, 3], 0.5), 30.0).unwrap();
        let s = pos_baseline(&m).unwrap();
        assert_eq!(s.len(), 90);
        assert!(s.samples.iter().all(|v| v.abs() < 1e-9));
    }
}
