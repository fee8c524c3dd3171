//! Dataset assembly and the evaluation protocol shared by the CLI, the
//! examples and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deid::{self, build_st_map, deidentify, read_deid, write_deid, StMap};
use crate::dsp::SegmentBatch;
use crate::error::{Error, Result};
use crate::eval::{morphology_report, per_subject_eval, EvalReport, MorphologyReport, SubjectMetric};
use crate::ingest::{self, CppgTrace, LandmarkSet, Manifest, Split};
use crate::morph::{cppg_segments, rppg_segments, score_maps, LabeledMap};
use crate::synth::{self, SynthConfig};
use crate::tensor::ParamStore;

/// One de-identified video with its protocol metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoItem {
    pub name: String,
    pub subject: usize,
    pub session: String,
    /// Raw (unnormalized) de-identified ST map.
    pub map: StMap,
    pub splits: Vec<ingest::SplitRange>,
    /// Ground-truth contact trace at the map's frame rate, when available.
    pub cppg: Option<Vec<f64>>,
}

impl VideoItem {
    fn frame_range(&self, split: Split) -> Option<(usize, usize)> {
        let r = self.splits.iter().find(|r| r.split == split)?;
        let fps = self.map.fps;
        let a = ((r.start_s * fps).round() as usize).min(self.map.frames());
        let b = ((r.end_s * fps).round() as usize).min(self.map.frames());
        (b > a).then_some((a, b))
    }

    /// ST map restricted to `split`.
    pub fn span(&self, split: Split) -> Option<StMap> {
        let (a, b) = self.frame_range(split)?;
        self.map.slice_time(a, b - a).ok()
    }

    /// Ground-truth trace restricted to `split`.
    pub fn cppg_span(&self, split: Split) -> Option<&[f64]> {
        let (a, b) = self.frame_range(split)?;
        let c = self.cppg.as_ref()?;
        (b <= c.len()).then(|| &c[a..b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoItem>,
    pub n_subjects: usize,
    /// Manifest subject id of each dense label.
    pub original_ids: Vec<i64>,
}

impl Dataset {
    /// Label-free maps of one split, one per video that has it.
    pub fn unlabeled(&self, split: Split) -> Vec<StMap> {
        self.videos.iter().filter_map(|v| v.span(split)).collect()
    }

    pub fn labeled(&self, split: Split) -> Vec<LabeledMap> {
        self.videos
            .iter()
            .filter_map(|v| {
                v.span(split).map(|map| LabeledMap { map, label: v.subject, session: v.session.clone() })
            })
            .collect()
    }

    /// Renders a synthetic dataset straight to de-identified maps, skipping
    /// frame files. Permutation seeds match [`deid_manifest`] on the same
    /// dataset written by [`synth::gen_dataset`].
    pub fn synthetic(cfg: &SynthConfig) -> Result<(Dataset, Vec<CppgTrace>)> {
        let plan = synth::plan_dataset(cfg)?;
        let mut videos = Vec::with_capacity(plan.len());
        for (i, sv) in plan.iter().enumerate() {
            let frames = synth::render_video(
                &sv.morph, &sv.profile, cfg.duration_s, cfg.fps, cfg.height, cfg.width, sv.video_seed,
            )?;
            let (_, map) = deidentify(&frames, deid::video_seed(MANIFEST_NAME, i))?;
            let mut clean = sv.profile.clone();
            clean.noise = 0.0;
            let trace = synth::gen_cppg(&sv.morph, &clean, cfg.duration_s, cfg.cppg_fs, sv.subject, sv.cppg_seed)?;
            videos.push(VideoItem {
                name: sv.name(),
                subject: sv.subject,
                session: sv.session_tag(),
                cppg: Some(ingest::resample(&trace.samples, trace.fs, cfg.fps)),
                splits: crate::eval::split_ranges(cfg.duration_s, &sv.session_tag(), cfg.window_s)?,
                map,
            });
        }
        let ext = synth::gen_external_cppg(cfg)?;
        Ok((Dataset { videos, n_subjects: cfg.n_subjects, original_ids: (0..cfg.n_subjects as i64).collect() }, ext))
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";
pub const EXTERNAL_MANIFEST: &str = "external/cppg_manifest.json";

/// Seed of record `i`: derived from the manifest's file name, so the result
/// does not depend on where the dataset lives.
fn record_seed(manifest_path: &Path, i: usize) -> u64 {
    let name = manifest_path.file_name().and_then(|n| n.to_str()).unwrap_or(MANIFEST_NAME);
    deid::video_seed(name, i)
}

/// De-identifies every video of a raw manifest into `out_dir`, copying contact
/// traces alongside, and writes `out_dir/manifest.json` pointing at the
/// de-identified files. Videos are processed on up to `threads` threads;
/// outputs do not depend on the thread count.
pub fn deid_manifest(manifest_path: &Path, out_dir: &Path, threads: usize) -> Result<Manifest> {
    let m = ingest::load_manifest(manifest_path)?;
    fs::create_dir_all(out_dir)?;
    let one = |i: usize| -> Result<ingest::ManifestRecord> {
        let r = &m.records[i];
        let frames = ingest::load_frames(&m.resolve(&r.video_path), r.fps)?;
        let frames = match &r.landmarks_path {
            Some(p) => ingest::crop_face(&frames, &LandmarkSet::load(&m.resolve(p))?)?,
            None => frames,
        };
        let (dv, _) = deidentify(&frames, record_seed(manifest_path, i))?;
        let stem = format!("v{i:03}");
        write_deid(&out_dir.join(format!("{stem}.rppg")), &dv)?;
        let mut rec = r.clone();
        rec.subject_id = m.original_ids[r.subject_id as usize];
        rec.video_path = format!("{stem}.rppg");
        rec.landmarks_path = None;
        if let Some(c) = &r.cppg_path {
            let src = m.resolve(c);
            if !src.exists() {
                return Err(Error::Missing(src));
            }
            let dst = format!("{stem}_cppg.csv");
            fs::copy(&src, out_dir.join(&dst))?;
            rec.cppg_path = Some(dst);
        }
        Ok(rec)
    };
    let n = m.records.len();
    let threads = threads.clamp(1, n.max(1));
    let mut slots: Vec<Option<Result<ingest::ManifestRecord>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|sc| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                let one = &one;
                sc.spawn(move || (k..n).step_by(threads).map(|i| (i, one(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("deid worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let records = slots.into_iter().map(|r| r.expect("every record visited")).collect::<Result<Vec<_>>>()?;
    let out = Manifest::from_records(records, out_dir.to_path_buf())?;
    fs::write(out_dir.join(MANIFEST_NAME), out.to_json()?)?;
    Ok(out)
}

/// Loads a de-identified manifest written by [`deid_manifest`].
pub fn load_deid_dataset(manifest_path: &Path) -> Result<Dataset> {
    let m = ingest::load_manifest(manifest_path)?;
    let mut videos = Vec::with_capacity(m.records.len());
    for (i, r) in m.records.iter().enumerate() {
        let dv = read_deid(&m.resolve(&r.video_path))?;
        let map = build_st_map(&dv)?;
        let cppg = match (&r.cppg_path, r.cppg_fs) {
            (Some(p), Some(fs)) => {
                let tr = ingest::load_cppg(&m.resolve(p), fs, r.subject_id as usize)?;
                Some(ingest::resample(&tr.samples, tr.fs, map.fps))
            }
            (Some(_), None) => return Err(Error::ingest_at(i, "field `cppg_fs` missing for cppg_path")),
            _ => None,
        };
        let stem = Path::new(&r.video_path).file_stem().and_then(|s| s.to_str()).unwrap_or("video");
        videos.push(VideoItem {
            name: stem.to_string(),
            subject: r.subject_id as usize,
            session: r.session_tag.clone(),
            map,
            splits: r.splits.clone(),
            cppg,
        });
    }
    Ok(Dataset { videos, n_subjects: m.n_subjects(), original_ids: m.original_ids })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window_beats: usize,
    pub intra: EvalReport,
    pub cross: Option<EvalReport>,
}

/// Mean beats of one subject over its test-intra spans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanBeats {
    pub subject: usize,
    pub rppg: Vec<f64>,
    pub cppg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub config_hash: String,
    pub seed: u64,
    /// Headline protocol: intra-session at the longest window.
    pub per_subject: Vec<SubjectMetric>,
    pub mean_eer: f64,
    pub mean_auc: f64,
    pub pearson_mean: f64,
    pub windows: Vec<WindowReport>,
    pub morphology: MorphologyReport,
    #[serde(skip)]
    pub mean_beats: Vec<MeanBeats>,
    #[serde(skip)]
    pub scores: Vec<(usize, Vec<crate::eval::ScoreRow>)>,
}

fn concat_batches(batches: Vec<SegmentBatch>) -> Option<SegmentBatch> {
    let first = batches.first()?.clone();
    let mut data = Vec::new();
    let mut peaks = Vec::new();
    let mut dropped = 0;
    for b in &batches {
        data.extend_from_slice(b.segments.data());
        peaks.extend_from_slice(&b.source_peaks);
        dropped += b.dropped;
    }
    let k = peaks.len();
    Some(SegmentBatch {
        segments: crate::tensor::Tensor::new(vec![k, crate::dsp::SEGMENT_LEN], data).ok()?,
        source_peaks: peaks,
        fs: first.fs,
        dropped,
    })
}

/// Mean-beat correlation between rPPG extracted with `params` and the ground
/// truth contact trace, over the test-intra spans of every subject.
pub fn morphology(params: &ParamStore, data: &Dataset) -> Result<(MorphologyReport, Vec<MeanBeats>)> {
    let mut rppg = vec![Vec::new(); data.n_subjects];
    let mut cppg = vec![Vec::new(); data.n_subjects];
    for v in &data.videos {
        let (Some(map), Some(trace)) = (v.span(Split::TestIntra), v.cppg_span(Split::TestIntra)) else {
            continue;
        };
        match (rppg_segments(params, &map), cppg_segments(trace, map.fps)) {
            (Ok(a), Ok(b)) => {
                rppg[v.subject].push(a);
                cppg[v.subject].push(b);
            }
            (Err(e), _) | (_, Err(e)) => log::warn!("{}: {e}", v.name),
        }
    }
    let rppg: Vec<Option<SegmentBatch>> = rppg.into_iter().map(concat_batches).collect();
    let cppg: Vec<Option<SegmentBatch>> = cppg.into_iter().map(concat_batches).collect();
    let report = morphology_report(&rppg, &cppg)?;
    let beats = rppg
        .iter()
        .zip(&cppg)
        .enumerate()
        .filter_map(|(s, (a, b))| {
            Some(MeanBeats { subject: s, rppg: a.as_ref()?.mean_segment(), cppg: b.as_ref()?.mean_segment() })
        })
        .collect();
    Ok((report, beats))
}

/// Intra- and cross-session authentication at each window length plus the
/// morphology correlation.
pub fn evaluate(
    params: &ParamStore,
    data: &Dataset,
    window_beats: &[usize],
    config_hash: &str,
    seed: u64,
) -> Result<FullReport> {
    if window_beats.is_empty() {
        return Err(Error::Config("no window lengths requested".into()));
    }
    let intra = data.labeled(Split::TestIntra);
    let cross = data.labeled(Split::TestCross);
    let mut windows = Vec::new();
    let mut scores = Vec::new();
    for &w in window_beats {
        let rows_i = score_maps(params, &intra, w);
        let rows_c = score_maps(params, &cross, w);
        let ri = per_subject_eval(&rows_i)?;
        let rc = if rows_c.is_empty() { None } else { Some(per_subject_eval(&rows_c)?) };
        let mut all = rows_i;
        all.extend(rows_c);
        scores.push((w, all));
        windows.push(WindowReport { window_beats: w, intra: ri, cross: rc });
    }
    let (morph, mean_beats) = morphology(params, data)?;
    let head = windows.iter().max_by_key(|w| w.window_beats).unwrap();
    Ok(FullReport {
        config_hash: config_hash.to_string(),
        seed,
        per_subject: head.intra.per_subject.clone(),
        mean_eer: head.intra.mean_eer,
        mean_auc: head.intra.mean_auc,
        pearson_mean: morph.mean,
        morphology: morph,
        windows,
        mean_beats,
        scores,
    })
}

/// Writes `report.json`, `scores.csv` (all window lengths, keyed by a leading
/// `window_beats` column) and `mean_beats_subject{S}.csv` per subject.
pub fn write_report(report: &FullReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let p = out_dir.join("report.json");
    fs::write(&p, serde_json::to_string_pretty(report)?)?;
    written.push(p);
    let mut csv = String::new();
    for (i, (w, rows)) in report.scores.iter().enumerate() {
        for (j, line) in crate::eval::scores_csv(rows).lines().enumerate() {
            match (i, j) {
                (0, 0) => csv.push_str(&format!("window_beats,{line}\n")),
                (_, 0) => {}
                _ => csv.push_str(&format!("{w},{line}\n")),
            }
        }
    }
    let p = out_dir.join("scores.csv");
    fs::write(&p, csv)?;
    written.push(p);
    for b in &report.mean_beats {
        let p = out_dir.join(format!("mean_beats_subject{}.csv", b.subject));
        fs::write(&p, crate::eval::mean_segment_csv(&b.rppg, &b.cppg))?;
        written.push(p);
    }
    Ok(written)
}
