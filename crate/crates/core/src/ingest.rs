//! Dataset manifests, raw frame files, landmark files, contact-PPG traces,
//! face cropping and resampling.
//!
//! Raw frame file layout (little-endian): magic `RPPG`, u32 version (1),
//! u32 T, H, W, C, then T·H·W·C f32 values in (t, h, w, c) row-major order.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAME_MAGIC: &[u8; 4] = b"RPPG";
pub const FRAME_VERSION: u32 = 1;
/// Fractional margin added on each side of the landmark bounding box.
pub const CROP_MARGIN: f64 = 0.1;
/// Session whose videos are split into train/val/test-intra.
pub const ENROLL_SESSION: &str = "s1";

/// Video frames `T×H×W×C` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    data: Tensor,
    fps: f64,
}

impl FrameSequence {
    pub fn new(data: Tensor, fps: f64) -> Result<Self> {
        if data.rank() != 4 || data.shape()[0] == 0 {
            return Err(Error::ingest(format!(
                "frames must be T×H×W×C with T ≥ 1, got {:?}",
                data.shape()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::ingest(format!("fps must be positive, got {fps}")));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ingest("pixel values must lie in [0, 1]"));
        }
        Ok(FrameSequence { data, fps })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn pixel(&self, t: usize, h: usize, w: usize, c: usize) -> f64 {
        let s = self.data.shape();
        self.data.data()[((t * s[1] + h) * s[2] + w) * s[3] + c]
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.fps
    }
}

/// Facial boundary landmarks in pixel coordinates, either one set per frame
/// or a single static set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub frames: Vec<Vec<(f64, f64)>>,
}

impl LandmarkSet {
    pub fn static_points(points: Vec<(f64, f64)>) -> Self {
        LandmarkSet {
            frames: vec![points],
        }
    }

    /// Reads a JSON array of frames, each an array of `[x, y]` points.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_existing(path)?;
        let frames: Vec<Vec<(f64, f64)>> = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(LandmarkSet { frames })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CppgTrace {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub subject_id: usize,
}

impl CppgTrace {
    pub fn new(samples: Vec<f64>, fs: f64, subject_id: usize) -> Result<Self> {
        if !(fs > 0.0) {
            return Err(Error::ingest(format!("cPPG rate must be positive, got {fs}")));
        }
        if (samples.len() as f64) < 2.0 * fs {
            return Err(Error::ingest("trace shorter than 2 s"));
        }
        Ok(CppgTrace {
            samples,
            fs,
            subject_id,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test-intra")]
    TestIntra,
    #[serde(rename = "test-cross")]
    TestCross,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestIntra => "test-intra",
            Split::TestCross => "test-cross",
        }
    }
}

/// A time range of one video assigned to a split, in whole seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRange {
    pub split: Split,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_path: String,
    pub subject_id: i64,
    pub session_tag: String,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cppg_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cppg_fs: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<SplitRange>,
}

impl ManifestRecord {
    pub fn is_enrollment(&self) -> bool {
        self.session_tag == ENROLL_SESSION
    }
}

/// Validated manifest. Subject ids are dense `0..n_subjects`; the original ids
/// are kept in `original_ids[dense]`. Relative paths resolve against `base_dir`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub original_ids: Vec<i64>,
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Validates records and relabels subject ids densely in sorted order.
    pub fn from_records(mut records: Vec<ManifestRecord>, base_dir: PathBuf) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::ingest("empty manifest"));
        }
        for (i, r) in records.iter().enumerate() {
            if !(r.fps > 0.0) {
                return Err(Error::ingest_at(i, format!("field `fps` must be positive, got {}", r.fps)));
            }
            if r.video_path.is_empty() {
                return Err(Error::ingest_at(i, "field `video_path` is empty"));
            }
            if let Some(fs) = r.cppg_fs {
                if !(fs > 0.0) {
                    return Err(Error::ingest_at(i, "field `cppg_fs` must be positive"));
                }
            }
            validate_splits(i, r)?;
        }
        let mut seen = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.video_path.clone()) {
                return Err(Error::ingest_at(i, format!("video {} listed twice", r.video_path)));
            }
        }
        let original_ids: Vec<i64> = records
            .iter()
            .map(|r| r.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for r in &mut records {
            r.subject_id = original_ids.binary_search(&r.subject_id).unwrap() as i64;
        }
        let manifest = Manifest {
            records,
            original_ids,
            base_dir,
        };
        manifest.check_split_coverage()?;
        Ok(manifest)
    }

    pub fn n_subjects(&self) -> usize {
        self.original_ids.len()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every subject with a train range must also have val and test-intra ranges.
    fn check_split_coverage(&self) -> Result<()> {
        for s in 0..self.n_subjects() {
            let has = |split: Split| {
                self.records.iter().any(|r| {
                    r.subject_id as usize == s && r.splits.iter().any(|x| x.split == split)
                })
            };
            if has(Split::Train) && !(has(Split::Val) && has(Split::TestIntra)) {
                return Err(Error::ingest(format!(
                    "subject {} has training data but no val/test-intra range",
                    self.original_ids[s]
                )));
            }
        }
        Ok(())
    }

    /// Serializes to the on-disk JSON array, writing the dense subject ids.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records)?)
    }
}

fn validate_splits(i: usize, r: &ManifestRecord) -> Result<()> {
    let mut ranges: Vec<&SplitRange> = r.splits.iter().collect();
    ranges.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for w in ranges.windows(2) {
        if w[1].start_s < w[0].end_s {
            return Err(Error::ingest_at(i, "split ranges overlap"));
        }
    }
    if ranges.iter().any(|s| s.end_s <= s.start_s || s.start_s < 0.0) {
        return Err(Error::ingest_at(i, "empty or negative split range"));
    }
    Ok(())
}

fn read_existing(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = read_existing(path)?;
    let values: Vec<serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| Error::ingest(format!("manifest is not a JSON array: {e}")))?;
    let records = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value::<ManifestRecord>(v).map_err(|e| Error::ingest_at(i, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::from_records(records, base)
}

/// Encodes frames in the raw tensor format (values stored as f32).
pub fn encode_frames(data: &Tensor) -> Result<Vec<u8>> {
    if data.rank() != 4 {
        return Err(Error::Dimension(format!(
            "raw frame tensors are rank 4, got {:?}",
            data.shape()
        )));
    }
    let mut out = Vec::with_capacity(24 + data.len() * 4);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    for &d in data.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_frames(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 24 {
        return Err(Error::Format("frame header truncated".into()));
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err(Error::Format("bad frame file magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported frame version {}", word(0))));
    }
    let shape: Vec<usize> = (1..5).map(|i| word(i) as usize).collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[24..];
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "header promises {} values, payload holds {} bytes",
            n,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_frames(path: &Path, data: &Tensor) -> Result<()> {
    fs::write(path, encode_frames(data)?)?;
    Ok(())
}

/// Reads a raw frame file; `fps` comes from the manifest.
pub fn load_frames(path: &Path, fps: f64) -> Result<FrameSequence> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    FrameSequence::new(decode_frames(&fs::read(path)?)?, fps)
}

/// Crops every frame to the union bounding box of the landmarks, widened by
/// [`CROP_MARGIN`] of the box extent on each side and clamped to the frame.
pub fn crop_face(v: &FrameSequence, lm: &LandmarkSet) -> Result<FrameSequence> {
    let points: Vec<(f64, f64)> = lm.frames.iter().flatten().copied().collect();
    if points.is_empty() {
        return Err(Error::ingest("no landmarks"));
    }
    if lm.frames.len() != 1 && lm.frames.len() != v.frames() {
        return Err(Error::ingest(format!(
            "{} landmark frames for a {}-frame video",
            lm.frames.len(),
            v.frames()
        )));
    }
    let (w, h) = (v.width() as f64, v.height() as f64);
    if points
        .iter()
        .any(|&(x, y)| !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y))
    {
        return Err(Error::ingest("landmark outside the frame"));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (bw, bh) = (x1 - x0, y1 - y0);
    if bw <= 0.0 || bh <= 0.0 {
        return Err(Error::ingest("degenerate box"));
    }
    let c0 = (x0 - CROP_MARGIN * bw).floor().max(0.0) as usize;
    let c1 = ((x1 + CROP_MARGIN * bw).ceil() as usize).min(v.width());
    let r0 = (y0 - CROP_MARGIN * bh).floor().max(0.0) as usize;
    let r1 = ((y1 + CROP_MARGIN * bh).ceil() as usize).min(v.height());
    let (t, ch) = (v.frames(), v.channels());
    let mut out = Vec::with_capacity(t * (r1 - r0) * (c1 - c0) * ch);
    let src = v.data().data();
    for ti in 0..t {
        for r in r0..r1 {
            let start = ((ti * v.height() + r) * v.width() + c0) * ch;
            out.extend_from_slice(&src[start..start + (c1 - c0) * ch]);
        }
    }
    FrameSequence::new(Tensor::new(vec![t, r1 - r0, c1 - c0, ch], out)?, v.fps())
}

/// Reads a single-column CSV of samples.
pub fn load_cppg(path: &Path, fs: f64, subject_id: usize) -> Result<CppgTrace> {
    let text = read_existing(path)?;
    let samples = parse_cppg(&text)?;
    CppgTrace::new(samples, fs, subject_id)
}

pub fn parse_cppg(text: &str) -> Result<Vec<f64>> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Error::Format(format!("line {}: not a number: {line:?}", i + 1)))?;
        if !v.is_finite() {
            return Err(Error::Format(format!("line {}: non-finite sample", i + 1)));
        }
        samples.push(v);
    }
    Ok(samples)
}

pub fn format_cppg(samples: &[f64]) -> String {
    let mut s = String::with_capacity(samples.len() * 12);
    for v in samples {
        s.push_str(&format!("{v:.9}\n"));
    }
    s
}

/// Linear interpolation onto `n_out` evenly spaced points spanning the input;
/// the first and last samples are kept exactly.
pub fn resample_len(x: &[f64], n_out: usize) -> Vec<f64> {
    match (x.len(), n_out) {
        (_, 0) => vec![],
        (0, _) => vec![0.0; n_out],
        (1, _) => vec![x[0]; n_out],
        (_, 1) => vec![x[0]],
        _ => {
            let step = (x.len() - 1) as f64 / (n_out - 1) as f64;
            (0..n_out)
                .map(|j| {
                    if j == n_out - 1 {
                        return x[x.len() - 1];
                    }
                    let pos = j as f64 * step;
                    let i = pos.floor() as usize;
                    let frac = pos - i as f64;
                    if i + 1 >= x.len() {
                        x[x.len() - 1]
                    } else {
                        x[i] * (1.0 - frac) + x[i + 1] * frac
                    }
                })
                .collect()
        }
    }
}

/// Resamples a uniformly sampled signal from `fs_in` to `fs_out` Hz by linear
/// interpolation over the same time span.
pub fn resample(x: &[f64], fs_in: f64, fs_out: f64) -> Vec<f64> {
    if x.len() < 2 || fs_in == fs_out {
        return x.to_vec();
    }
    let n_out = ((x.len() - 1) as f64 * fs_out / fs_in).round() as usize + 1;
    resample_len(x, n_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(path: &str, id: i64) -> ManifestRecord {
        ManifestRecord {
            video_path: path.into(),
            subject_id: id,
            session_tag: "s1".into(),
            fps: 30.0,
            landmarks_path: None,
            cppg_path: None,
            cppg_fs: None,
            splits: vec![],
        }
    }

    #[test]
    fn empty_manifest_rejected() {
        let e = Manifest::from_records(vec![], PathBuf::new()).unwrap_err();
        assert!(e.to_string().contains("empty manifest"));
    }

    #[test]
    fn ids_relabelled_densely() {
        let m = Manifest::from_records(vec![record("a", 9), record("b", 5), record("c", 9)], PathBuf::new())
            .unwrap();
        let ids: Vec<i64> = m.records.iter().map(|r| r.subject_id).collect();
        assert_eq!(ids, vec![1, 0, 1]);
        assert_eq!(m.original_ids, vec![5, 9]);
    }

    #[test]
    fn missing_fps_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(
            &p,
            r#"[{"video_path":"a.rppg","subject_id":1,"session_tag":"s1","fps":30},
               {"video_path":"b.rppg","subject_id":2,"session_tag":"s1"}]"#,
        )
        .unwrap();
        let e = load_manifest(&p).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("fps") && msg.contains("record 1"), "{msg}");
    }

    #[test]
    fn overlapping_split_ranges_rejected() {
        let mut r = record("a", 0);
        r.splits = vec![
            SplitRange { split: Split::Train, start_s: 0.0, end_s: 60.0 },
            SplitRange { split: Split::Val, start_s: 50.0, end_s: 80.0 },
        ];
        assert!(Manifest::from_records(vec![r], PathBuf::new()).is_err());
    }

    #[test]
    fn frames_shape_and_truncation() {
        let t = Tensor::new(vec![2, 4, 4, 3], (0..96).map(|i| i as f64 / 96.0).collect()).unwrap();
        let bytes = encode_frames(&t).unwrap();
        let back = decode_frames(&bytes).unwrap();
        assert_eq!(back.shape(), &[2, 4, 4, 3]);
        assert!(decode_frames(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(decode_frames(&bad), Err(Error::Format(_))));
    }

    fn ramp_video(h: usize, w: usize) -> FrameSequence {
        let n = 2 * h * w * 3;
        let data = (0..n).map(|i| (i % 97) as f64 / 97.0).collect();
        FrameSequence::new(Tensor::new(vec![2, h, w, 3], data).unwrap(), 30.0).unwrap()
    }

    #[test]
    fn crop_examples() {
        let v = ramp_video(36, 36);
        let full = LandmarkSet::static_points(vec![(0.0, 0.0), (35.0, 35.0)]);
        assert_eq!(crop_face(&v, &full).unwrap(), v);

        let single = LandmarkSet::static_points(vec![(18.0, 18.0)]);
        assert!(crop_face(&v, &single).unwrap_err().to_string().contains("degenerate box"));

        let boxed = LandmarkSet::static_points(vec![(10.0, 10.0), (20.0, 20.0)]);
        let c = crop_face(&v, &boxed).unwrap();
        assert_eq!((c.height(), c.width()), (12, 12));
        assert_eq!(c.pixel(1, 0, 0, 2), v.pixel(1, 9, 9, 2));
    }

    #[test]
    fn crop_uses_union_over_frames() {
        let v = ramp_video(20, 20);
        let lm = LandmarkSet {
            frames: vec![vec![(5.0, 5.0), (10.0, 10.0)], vec![(8.0, 8.0), (15.0, 15.0)]],
        };
        let c = crop_face(&v, &lm).unwrap();
        // union box 5..15, margin 1 → 4..16
        assert_eq!((c.height(), c.width()), (12, 12));
    }

    #[test]
    fn cppg_parsing() {
        let text: String = (0..300).map(|i| format!("{}\n", i as f64 * 0.01)).collect();
        let s = parse_cppg(&text).unwrap();
        let tr = CppgTrace::new(s, 30.0, 0).unwrap();
        assert!((tr.duration_s() - 10.0).abs() < 1e-12);

        let mut lines: Vec<String> = (0..40).map(|i| i.to_string()).collect();
        lines[6] = "abc".into();
        let e = parse_cppg(&lines.join("\n")).unwrap_err();
        assert!(e.to_string().contains("line 7"), "{e}");

        let short = parse_cppg(&"1\n".repeat(30)).unwrap();
        let e = CppgTrace::new(short, 30.0, 0).unwrap_err();
        assert!(e.to_string().contains("shorter than 2 s"));
    }

    #[test]
    fn resample_examples() {
        let x = vec![0.3, -1.0, 2.0, 4.0];
        assert_eq!(resample(&x, 30.0, 30.0), x);
        assert_eq!(resample_len(&[0.0, 2.0, 0.0], 5), vec![0.0, 1.0, 2.0, 1.0, 0.0]);
        assert_eq!(resample(&[0.0, 2.0, 0.0], 2.0, 4.0), vec![0.0, 1.0, 2.0, 1.0, 0.0]);
    }
}
