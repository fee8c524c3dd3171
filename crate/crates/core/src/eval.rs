//! Evaluation: temporal splits, one-vs-rest EER/AUC per subject and the
//! Pearson correlation between rPPG and contact-PPG mean beats.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dsp::{pearson, SegmentBatch};
use crate::error::{Error, Result};
use crate::ingest::{Manifest, Split, SplitRange, ENROLL_SESSION};

pub const TRAIN_FRACTION: f64 = 0.6;
pub const VAL_FRACTION: f64 = 0.2;
/// A video must span this many analysis windows to be split.
pub const MIN_WINDOWS_PER_VIDEO: f64 = 5.0;

/// Split ranges for one video: 60/20/20 in time for the enrollment session,
/// the whole video for any other session. Boundaries are floored to seconds.
pub fn split_ranges(duration_s: f64, session_tag: &str, window_s: f64) -> Result<Vec<SplitRange>> {
    if duration_s < MIN_WINDOWS_PER_VIDEO * window_s {
        return Err(Error::Eval(format!(
            "video of {duration_s} s is shorter than {MIN_WINDOWS_PER_VIDEO}× the {window_s}-s window"
        )));
    }
    let end = duration_s.floor();
    if session_tag != ENROLL_SESSION {
        return Ok(vec![SplitRange {
            split: Split::TestCross,
            start_s: 0.0,
            end_s: end,
        }]);
    }
    let a = (TRAIN_FRACTION * duration_s).floor();
    let b = ((TRAIN_FRACTION + VAL_FRACTION) * duration_s).floor();
    Ok(vec![
        SplitRange { split: Split::Train, start_s: 0.0, end_s: a },
        SplitRange { split: Split::Val, start_s: a, end_s: b },
        SplitRange { split: Split::TestIntra, start_s: b, end_s: end },
    ])
}

/// Fills in split ranges for every record of `manifest` from its duration.
/// `durations_s[i]` is the length of record `i`'s video.
pub fn split_dataset(manifest: &Manifest, durations_s: &[f64], window_s: f64) -> Result<Manifest> {
    let mut out = manifest.clone();
    if !out
        .records
        .iter()
        .any(|r| r.is_enrollment())
    {
        return Err(Error::Eval("no enrollment-session video".into()));
    }
    for (r, &d) in out.records.iter_mut().zip(durations_s) {
        r.splits = split_ranges(d, &r.session_tag, window_s)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub eer: f64,
    pub auc: f64,
}

/// AUC as `P(pos > neg) + ½·P(pos = neg)`; EER where FPR meets FNR on the
/// ROC polyline through every distinct threshold.
pub fn roc_eer_auc(pos: &[f64], neg: &[f64]) -> Result<RocSummary> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Eval("ROC needs at least one positive and one negative score".into()));
    }
    let mut sn = neg.to_vec();
    sn.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos {
        let below = sn.partition_point(|&n| n < p);
        let not_above = sn.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    let auc = wins / (pos.len() * neg.len()) as f64;

    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let thr = all[i].0;
        while i < all.len() && all[i].0 == thr {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / nn, 1.0 - tp as f64 / np));
    }
    let mut eer = f64::NAN;
    for w in points.windows(2) {
        let ((fa, ma), (fb, mb)) = (w[0], w[1]);
        let (da, db) = (fa - ma, fb - mb);
        if da <= 0.0 && db >= 0.0 {
            eer = if da == db { fa } else { fa + (fb - fa) * da / (da - db) };
            break;
        }
    }
    Ok(RocSummary { eer, auc })
}

/// One scored window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub true_subject: usize,
    pub window_idx: usize,
    pub session: String,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetric {
    pub subject: usize,
    pub eer: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subject: Vec<SubjectMetric>,
    /// Subjects without any positive window.
    pub skipped: Vec<usize>,
    pub mean_eer: f64,
    pub mean_auc: f64,
}

/// Subject `s` is scored one-vs-rest on column `s` of every window; metrics
/// are macro-averaged over subjects with at least one positive window.
pub fn per_subject_eval(rows: &[ScoreRow]) -> Result<EvalReport> {
    let n = rows.first().map_or(0, |r| r.scores.len());
    if rows.iter().any(|r| r.scores.len() != n) {
        return Err(Error::Eval("score vectors differ in length".into()));
    }
    let mut per_subject = Vec::new();
    let mut skipped = Vec::new();
    for s in 0..n {
        let pos: Vec<f64> = rows.iter().filter(|r| r.true_subject == s).map(|r| r.scores[s]).collect();
        let neg: Vec<f64> = rows.iter().filter(|r| r.true_subject != s).map(|r| r.scores[s]).collect();
        if pos.is_empty() || neg.is_empty() {
            skipped.push(s);
            continue;
        }
        let m = roc_eer_auc(&pos, &neg)?;
        per_subject.push(SubjectMetric { subject: s, eer: m.eer, auc: m.auc });
    }
    if per_subject.is_empty() {
        return Err(Error::Eval("no subject has both positive and negative windows".into()));
    }
    let k = per_subject.len() as f64;
    Ok(EvalReport {
        mean_eer: per_subject.iter().map(|m| m.eer).sum::<f64>() / k,
        mean_auc: per_subject.iter().map(|m| m.auc).sum::<f64>() / k,
        per_subject,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphologyReport {
    /// `(subject, r)` for every subject with both batches.
    pub per_subject: Vec<(usize, f64)>,
    pub skipped: Vec<usize>,
    pub mean: f64,
}

/// Pearson correlation of the mean rPPG beat against the mean contact beat,
/// per subject, macro-averaged.
pub fn morphology_report(
    rppg: &[Option<SegmentBatch>],
    cppg: &[Option<SegmentBatch>],
) -> Result<MorphologyReport> {
    let mut per_subject = Vec::new();
    let mut skipped = Vec::new();
    for (s, (a, b)) in rppg.iter().zip(cppg).enumerate() {
        match (a, b) {
            (Some(a), Some(b)) if a.count() > 0 && b.count() > 0 => {
                per_subject.push((s, pearson(&a.mean_segment(), &b.mean_segment())?));
            }
            _ => skipped.push(s),
        }
    }
    if per_subject.is_empty() {
        return Err(Error::Eval("no subject has both rPPG and contact segments".into()));
    }
    let mean = per_subject.iter().map(|p| p.1).sum::<f64>() / per_subject.len() as f64;
    Ok(MorphologyReport { per_subject, skipped, mean })
}

/// `subject,window_idx,session,score_0..score_{N−1}`.
pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let n = rows.first().map_or(0, |r| r.scores.len());
    let mut s = String::from("subject,window_idx,session");
    for i in 0..n {
        write!(s, ",score_{i}").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{}", r.true_subject, r.window_idx, r.session).unwrap();
        for v in &r.scores {
            write!(s, ",{v:.9}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Two-column CSV of mean beats: `idx,rppg,cppg`.
pub fn mean_segment_csv(rppg: &[f64], cppg: &[f64]) -> String {
    let mut s = String::from("idx,rppg,cppg\n");
    for (i, (a, b)) in rppg.iter().zip(cppg).enumerate() {
        writeln!(s, "{i},{a:.9},{b:.9}").unwrap();
    }
    s
}
