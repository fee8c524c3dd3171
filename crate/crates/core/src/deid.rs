//! De-identification: 6×6 block averaging, a per-video permutation of the 36
//! cells, and reshaping into a 36×T×3 spatiotemporal map.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{self, FrameSequence};
use crate::tensor::Tensor;

pub const GRID: usize = 6;
pub const CELLS: usize = GRID * GRID;

/// Downsampled, permuted video. Cell `j` of every frame holds original cell
/// `permutation[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeidVideo {
    pub data: Tensor,
    pub permutation: Vec<usize>,
    pub seed: u64,
    pub fps: f64,
}

/// Spatiotemporal map `36×T×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct StMap {
    pub data: Tensor,
    pub fps: f64,
}

impl StMap {
    pub fn new(data: Tensor, fps: f64) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Dimension(format!("ST map must be R×T×C, got {:?}", data.shape())));
        }
        Ok(StMap { data, fps })
    }

    pub fn rows(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn at(&self, r: usize, t: usize, c: usize) -> f64 {
        let s = self.data.shape();
        self.data.data()[(r * s[1] + t) * s[2] + c]
    }

    /// Time series of one row and channel.
    pub fn series(&self, r: usize, c: usize) -> Vec<f64> {
        (0..self.frames()).map(|t| self.at(r, t, c)).collect()
    }

    /// Frames `[t0, t0 + len)`.
    pub fn slice_time(&self, t0: usize, len: usize) -> Result<StMap> {
        let (r, t, c) = (self.rows(), self.frames(), self.channels());
        if t0 + len > t {
            return Err(Error::Dimension(format!("time slice {t0}+{len} beyond {t} frames")));
        }
        let mut out = Vec::with_capacity(r * len * c);
        for ri in 0..r {
            let start = (ri * t + t0) * c;
            out.extend_from_slice(&self.data.data()[start..start + len * c]);
        }
        StMap::new(Tensor::new(vec![r, len, c], out)?, self.fps)
    }
}

/// `[start, end)` ranges of the 6 blocks along an axis of length `n`; the last
/// block absorbs the remainder.
fn block_edges(n: usize) -> [(usize, usize); GRID] {
    let b = n / GRID;
    std::array::from_fn(|i| (i * b, if i == GRID - 1 { n } else { (i + 1) * b }))
}

/// Averages each frame over a 6×6 grid of blocks, giving `T×6×6×C`.
pub fn downsample(v: &FrameSequence) -> Result<Tensor> {
    let (t, h, w, c) = (v.frames(), v.height(), v.width(), v.channels());
    if h < GRID || w < GRID {
        return Err(Error::Deid(format!("frame {h}×{w} smaller than {GRID}×{GRID}")));
    }
    let rows = block_edges(h);
    let cols = block_edges(w);
    let src = v.data().data();
    let mut out = vec![0.0; t * CELLS * c];
    for ti in 0..t {
        for (bi, &(r0, r1)) in rows.iter().enumerate() {
            for (bj, &(c0, c1)) in cols.iter().enumerate() {
                let cell = &mut out[((ti * GRID + bi) * GRID + bj) * c..][..c];
                for r in r0..r1 {
                    let base = ((ti * h + r) * w) * c;
                    for x in c0..c1 {
                        for (ch, acc) in cell.iter_mut().enumerate() {
                            *acc += src[base + x * c + ch];
                        }
                    }
                }
                let n = ((r1 - r0) * (c1 - c0)) as f64;
                cell.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    Tensor::new(vec![t, GRID, GRID, c], out)
}

/// Fisher–Yates permutation of `0..36` drawn from `seed`.
pub fn permutation(seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..CELLS).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (j, &i) in p.iter().enumerate() {
        inv[i] = j;
    }
    inv
}

/// Rearranges the 36 cells of every frame: output cell `j` = input cell `perm[j]`.
pub fn apply_permutation(vd: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let s = vd.shape();
    if s.len() != 4 || s[1] * s[2] != perm.len() {
        return Err(Error::Deid(format!(
            "permutation of {} cells on {:?}",
            perm.len(),
            s
        )));
    }
    let (t, c) = (s[0], s[3]);
    let cells = perm.len();
    let src = vd.data();
    let mut out = vec![0.0; src.len()];
    for ti in 0..t {
        for (j, &i) in perm.iter().enumerate() {
            let dst = (ti * cells + j) * c;
            let from = (ti * cells + i) * c;
            out[dst..dst + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

pub fn permute(vd: &Tensor, video_seed: u64, fps: f64) -> Result<DeidVideo> {
    let perm = permutation(video_seed);
    Ok(DeidVideo {
        data: apply_permutation(vd, &perm)?,
        permutation: perm,
        seed: video_seed,
        fps,
    })
}

/// Seed derived from the manifest location and the record index.
pub fn video_seed(manifest_path: &str, record: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(manifest_path.as_bytes());
    h.update((record as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn build_st_map(vd: &DeidVideo) -> Result<StMap> {
    let s = vd.data.shape();
    let (t, c) = (s[0], s[3]);
    if (t as f64) < 2.0 * vd.fps {
        return Err(Error::Deid(format!(
            "video of {t} frames is shorter than 2 s at {} fps",
            vd.fps
        )));
    }
    let cells = s[1] * s[2];
    let src = vd.data.data();
    let mut out = vec![0.0; src.len()];
    for ti in 0..t {
        for r in 0..cells {
            let from = (ti * cells + r) * c;
            let dst = (r * t + ti) * c;
            out[dst..dst + c].copy_from_slice(&src[from..from + c]);
        }
    }
    StMap::new(Tensor::new(vec![cells, t, c], out)?, vd.fps)
}

/// Z-scores every (row, channel) series over time; constant series become zeros.
pub fn normalize_st_map(m: &StMap) -> StMap {
    let (r, t, c) = (m.rows(), m.frames(), m.channels());
    let mut out = m.data.clone();
    let d = out.data_mut();
    for ri in 0..r {
        for ch in 0..c {
            let idx = |ti: usize| (ri * t + ti) * c + ch;
            let mean = (0..t).map(|ti| d[idx(ti)]).sum::<f64>() / t as f64;
            let var = (0..t).map(|ti| (d[idx(ti)] - mean).powi(2)).sum::<f64>() / t as f64;
            let std = var.sqrt();
            for ti in 0..t {
                let i = idx(ti);
                d[i] = if std > 1e-12 { (d[i] - mean) / std } else { 0.0 };
            }
        }
    }
    StMap {
        data: out,
        fps: m.fps,
    }
}

/// Full de-identification of one cropped video.
pub fn deidentify(v: &FrameSequence, video_seed: u64) -> Result<(DeidVideo, StMap)> {
    let vd = permute(&downsample(v)?, video_seed, v.fps())?;
    let m = build_st_map(&vd)?;
    Ok((vd, m))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    permutation: Vec<usize>,
    seed: u64,
    fps: f64,
}

/// Writes the de-identified frames plus a `.json` sidecar next to them.
pub fn write_deid(path: &Path, vd: &DeidVideo) -> Result<()> {
    ingest::write_frames(path, &vd.data)?;
    let side = Sidecar {
        permutation: vd.permutation.clone(),
        seed: vd.seed,
        fps: vd.fps,
    };
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_deid(path: &Path) -> Result<DeidVideo> {
    let side_path = path.with_extension("json");
    if !side_path.exists() {
        return Err(Error::Missing(side_path));
    }
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(&side_path)?)?;
    let frames = ingest::load_frames(path, side.fps)?;
    let mut sorted = side.permutation.clone();
    sorted.sort_unstable();
    if sorted != (0..CELLS).collect::<Vec<_>>() {
        return Err(Error::Deid("sidecar permutation is not a bijection".into()));
    }
    Ok(DeidVideo {
        data: frames.data().clone(),
        permutation: side.permutation,
        seed: side.seed,
        fps: side.fps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(t: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> FrameSequence {
        let mut d = Vec::with_capacity(t * h * w * 3);
        for ti in 0..t {
            for r in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        d.push(f(ti, r, x, c));
                    }
                }
            }
        }
        FrameSequence::new(Tensor::new(vec![t, h, w, 3], d).unwrap(), 30.0).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let v = video(2, 13, 17, |_, _, _, _| 0.3);
        assert!(downsample(&v).unwrap().data().iter().all(|&x| (x - 0.3).abs() < 1e-15));

        let v = video(2, 6, 6, |t, r, x, c| ((t * 36 + r * 6 + x) * 3 + c) as f64 / 216.0);
        assert_eq!(downsample(&v).unwrap().data(), v.data().data());

        let v = video(1, 12, 12, |_, r, x, _| if (4..6).contains(&r) && (8..10).contains(&x) { 1.0 } else { 0.0 });
        let d = downsample(&v).unwrap();
        let ones: Vec<usize> = (0..36).filter(|&i| d.data()[i * 3] == 1.0).collect();
        assert_eq!(ones, vec![2 * 6 + 4]);
        assert_eq!(d.data().iter().filter(|&&x| x != 0.0).count(), 3);
    }

    #[test]
    fn remainder_goes_to_last_block() {
        assert_eq!(block_edges(13)[5], (10, 13));
        assert_eq!(block_edges(13)[0], (0, 2));
    }

    #[test]
    fn small_frames_rejected() {
        let v = video(1, 5, 8, |_, _, _, _| 0.0);
        assert!(matches!(downsample(&v), Err(Error::Deid(_))));
    }

    #[test]
    fn permutation_roundtrip_and_stats() {
        let v = video(3, 12, 12, |t, r, x, c| ((t * 7 + r * 3 + x * 5 + c) % 11) as f64 / 11.0);
        let d = downsample(&v).unwrap();
        let dv = permute(&d, 42, 30.0).unwrap();
        let back = apply_permutation(&dv.data, &invert_permutation(&dv.permutation)).unwrap();
        assert_eq!(back, d);
        for t in 0..3 {
            let frame = |x: &Tensor| {
                let mut f = x.data()[t * 108..(t + 1) * 108].to_vec();
                f.sort_by(f64::total_cmp);
                f
            };
            assert_eq!(frame(&d), frame(&dv.data));
        }
    }

    #[test]
    fn st_map_rows_are_cell_series() {
        let v = video(60, 6, 6, |t, r, x, c| {
            if r == 0 && x == 0 {
                0.5 + 0.1 * (t as f64 * 0.3).sin()
            } else {
                0.2 + 0.01 * c as f64
            }
        });
        let d = downsample(&v).unwrap();
        let dv = permute(&d, 0, 30.0).unwrap();
        let m = build_st_map(&dv).unwrap();
        assert_eq!(m.data.shape(), &[36, 60, 3]);
        let row = dv.permutation.iter().position(|&i| i == 0).unwrap();
        for t in 0..60 {
            assert_eq!(m.at(row, t, 1), v.pixel(t, 0, 0, 1));
        }
    }

    #[test]
    fn short_video_rejected() {
        let v = video(59, 6, 6, |_, _, _, _| 0.1);
        let dv = permute(&downsample(&v).unwrap(), 0, 30.0).unwrap();
        assert!(matches!(build_st_map(&dv), Err(Error::Deid(_))));
    }

    #[test]
    fn normalize_examples() {
        let data: Vec<f64> = (0..4).map(|t| if t % 2 == 0 { 6.0 } else { 4.0 }).collect();
        let m = StMap::new(Tensor::new(vec![1, 4, 1], data).unwrap(), 2.0).unwrap();
        let n = normalize_st_map(&m);
        assert_eq!(n.data.data(), &[1.0, -1.0, 1.0, -1.0]);
        let c = StMap::new(Tensor::full(&[2, 5, 3], 0.7), 2.0).unwrap();
        assert!(normalize_st_map(&c).data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = video(60, 12, 12, |t, _, x, _| ((t + x) % 5) as f64 / 5.0);
        let (dv, _) = deidentify(&v, 9).unwrap();
        let p = dir.path().join("v.rppg");
        write_deid(&p, &dv).unwrap();
        let back = read_deid(&p).unwrap();
        assert_eq!(back.permutation, dv.permutation);
        assert_eq!(back.seed, 9);
    }

    #[test]
    fn video_seed_depends_on_record() {
        assert_ne!(video_seed("m.json", 0), video_seed("m.json", 1));
        assert_eq!(video_seed("m.json", 3), video_seed("m.json", 3));
    }
}
