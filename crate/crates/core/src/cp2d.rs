//! Stage 1: unsupervised rPPG extraction. A small 2-D CNN `G` maps a
//! normalized ST map to a 4×T rPPG map; random half-length patches of two
//! videos are compared through their band-limited PSDs with a contrastive
//! loss. Model selection uses the irrelevant power ratio on validation data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deid::{normalize_st_map, StMap};
use crate::dsp::{self, Psd, RppgSignal, HR_BAND};
use crate::error::{Error, Result};
use crate::tensor::{adam_step, grad, AdamState, ParamStore, Tape, Tensor, Var};

/// Output rows of `G`.
pub const S_ROWS: usize = 4;
pub const G_CHANNELS: [usize; 3] = [16, 32, 32];
pub const G_KERNEL: usize = 3;
/// Row pooling after the first two blocks: 36 → 12 → 4.
pub const G_POOL: usize = 3;
pub const N_PATCHES: usize = 16;

pub const G_PARAMS: [&str; 8] = [
    "g.conv1.w", "g.conv1.b", "g.conv2.w", "g.conv2.b", "g.conv3.w", "g.conv3.b", "g.out.w", "g.out.b",
];

/// Adds freshly initialized `g.*` parameters: Glorot-uniform kernels, zero biases.
pub fn init_g(params: &mut ParamStore, in_channels: usize) -> Result<()> {
    let k2 = G_KERNEL * G_KERNEL;
    let mut c_in = in_channels;
    for (i, &c_out) in G_CHANNELS.iter().enumerate() {
        let name = format!("g.conv{}", i + 1);
        params.init_glorot(&format!("{name}.w"), &[c_out, c_in, G_KERNEL, G_KERNEL], c_in * k2, c_out * k2)?;
        params.init_const(&format!("{name}.b"), &[c_out], 0.0)?;
        c_in = c_out;
    }
    params.init_glorot("g.out.w", &[1, c_in, 1, 1], c_in, 1)?;
    params.init_const("g.out.b", &[1], 0.0)?;
    Ok(())
}

/// The rPPG model on its own, as trained in stage 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelG {
    pub params: ParamStore,
}

impl ModelG {
    pub fn new(seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        init_g(&mut params, 3)?;
        Ok(ModelG { params })
    }
}

/// `[R×T×C]` map to the `[1×C×R×T]` network input.
fn map_input(m: &StMap) -> Result<Tensor> {
    let (r, t, c) = (m.rows(), m.frames(), m.channels());
    let src = m.data.data();
    let mut out = vec![0.0; src.len()];
    for ri in 0..r {
        for ti in 0..t {
            for ci in 0..c {
                out[(ci * r + ri) * t + ti] = src[(ri * t + ti) * c + ci];
            }
        }
    }
    Tensor::new(vec![1, c, r, t], out)
}

/// `G` on a normalized map, recorded on `tape`; returns the `[4×T]` rPPG map.
pub fn forward_g(tape: &mut Tape, params: &ParamStore, m: &StMap) -> Result<Var> {
    let rows = S_ROWS * G_POOL * G_POOL;
    if m.rows() != rows {
        return Err(Error::Model(format!("G expects {rows} map rows, got {}", m.rows())));
    }
    let t = m.frames();
    let mut x = tape.constant(map_input(m)?)?;
    for i in 1..=3 {
        let w = tape.param(params, &format!("g.conv{i}.w"))?;
        let b = tape.param(params, &format!("g.conv{i}.b"))?;
        x = tape.conv2d(x, w)?;
        x = tape.channel_bias(x, b)?;
        x = tape.tanh(x)?;
        if i < 3 {
            x = tape.row_pool(x, G_POOL)?;
        }
    }
    let w = tape.param(params, "g.out.w")?;
    let b = tape.param(params, "g.out.b")?;
    x = tape.conv2d(x, w)?;
    x = tape.channel_bias(x, b)?;
    tape.reshape(x, &[S_ROWS, t])
}

/// Spatial mean of `G`'s output, bandpassed to the heart-rate band.
pub fn extract_rppg(params: &ParamStore, m: &StMap) -> Result<RppgSignal> {
    let mut tape = Tape::new();
    let out = forward_g(&mut tape, params, &normalize_st_map(m))?;
    let v = tape.value(out);
    let t = m.frames();
    let mean: Vec<f64> = (0..t)
        .map(|ti| (0..S_ROWS).map(|r| v.data()[r * t + ti]).sum::<f64>() / S_ROWS as f64)
        .collect();
    dsp::bandpass(&RppgSignal::new(mean, m.fps), HR_BAND.0, HR_BAND.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub row: usize,
    pub t0: usize,
    pub len: usize,
    pub values: Vec<f64>,
}

/// `n` patches of one row and half the (even-truncated) length, with row and
/// start drawn uniformly.
pub fn sample_patches(mr: &Tensor, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PatchSample>> {
    if mr.rank() != 2 || mr.shape()[1] < 2 {
        return Err(Error::Dimension(format!("patches need an S×T map, got {:?}", mr.shape())));
    }
    let (s, t) = (mr.shape()[0], mr.shape()[1] & !1);
    let len = t / 2;
    Ok((0..n)
        .map(|_| {
            let row = rng.random_range(0..s);
            let t0 = rng.random_range(0..=t - len);
            PatchSample { row, t0, len, values: mr.row(row)[t0..t0 + len].to_vec() }
        })
        .collect())
}

/// Band-normalized PSD of a patch, at 0.1 Hz resolution.
pub fn patch_to_psd(p: &PatchSample, fs: f64) -> Result<Psd> {
    dsp::psd(&RppgSignal::new(p.values.clone(), fs), HR_BAND)
}

/// The same PSD recorded on a tape for differentiation.
pub fn patch_to_psd_var(tape: &mut Tape, mr: Var, p: &PatchSample, fs: f64) -> Result<Var> {
    if (p.len as f64) < fs {
        return Err(Error::Dsp(format!("patch of {} samples is shorter than 1 s", p.len)));
    }
    let w = tape.window(mr, p.row, p.t0, p.len)?;
    tape.band_power(w, fs, HR_BAND, dsp::psd_nfft(p.len, fs))
}

/// Contrastive loss over `n` PSDs from each of two videos: mean within-video
/// squared distance minus mean cross-video squared distance.
pub fn contrastive_loss(f: &[Vec<f64>], fp: &[Vec<f64>]) -> Result<f64> {
    if f.len() < 2 || f.len() != fp.len() {
        return Err(Error::Contract(format!(
            "contrastive loss needs n ≥ 2 PSDs per video, got {} and {}",
            f.len(),
            fp.len()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(f)?)?;
    let b = tape.constant(Tensor::from_rows(fp)?)?;
    let l = tape.contrastive(a, b)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub window_s: f64,
    pub n_patches: usize,
    /// Video pairs per epoch; `None` means one per training video.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 30,
            lr: 1e-3,
            window_s: 10.0,
            n_patches: N_PATCHES,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1LogEntry {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the initialization entry.
    pub loss: Option<f64>,
    pub val_ipr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Outcome {
    pub params: ParamStore,
    pub log: Vec<Stage1LogEntry>,
    pub best_epoch: usize,
    pub best_val_ipr: f64,
    /// Loss of every step, in order.
    pub step_losses: Vec<f64>,
}

fn window_frames(window_s: f64, fps: f64) -> usize {
    (window_s * fps).round() as usize
}

/// Mean IPR of extracted rPPG over non-overlapping windows of every map.
pub fn mean_val_ipr(params: &ParamStore, val: &[StMap], window_s: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for m in val {
        let w = window_frames(window_s, m.fps);
        for k in 0..m.frames() / w.max(1) {
            let s = extract_rppg(params, &m.slice_time(k * w, w)?)?;
            total += dsp::ipr(&s)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("validation data shorter than one window".into()));
    }
    Ok(total / n as f64)
}

/// One contrastive step on a window pair; returns the loss.
fn stage1_step(
    params: &mut ParamStore,
    adam: &mut AdamState,
    a: &StMap,
    b: &StMap,
    cfg: &Stage1Config,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ma = forward_g(&mut tape, params, &normalize_st_map(a))?;
    let mb = forward_g(&mut tape, params, &normalize_st_map(b))?;
    let mut psds = Vec::with_capacity(2);
    for m in [ma, mb] {
        let patches = sample_patches(tape.value(m), cfg.n_patches, rng)?;
        let rows = patches
            .iter()
            .map(|p| patch_to_psd_var(&mut tape, m, p, a.fps))
            .collect::<Result<Vec<_>>>()?;
        psds.push(tape.stack(&rows)?);
    }
    let loss = tape.contrastive(psds[0], psds[1])?;
    let g = grad(&tape, loss, params)?;
    adam_step(params, &g, cfg.lr, adam)?;
    Ok(tape.value(loss).item())
}

/// Trains `G` on label-free training maps (one per video, already restricted
/// to the training span). Each step draws two distinct videos and a random
/// window from each. After every epoch the validation IPR is measured; the
/// parameters with the lowest IPR (earliest on ties) are returned.
pub fn train_stage1(train: &[StMap], val: &[StMap], cfg: &Stage1Config) -> Result<Stage1Outcome> {
    if train.len() < 2 {
        return Err(Error::Config(format!(
            "stage 1 needs at least 2 training videos, got {}",
            train.len()
        )));
    }
    let fps = train[0].fps;
    let w = window_frames(cfg.window_s, fps);
    if let Some(short) = train.iter().find(|m| m.frames() < w) {
        return Err(Error::Config(format!(
            "training span of {} frames is shorter than the {w}-frame window",
            short.frames()
        )));
    }
    let mut params = ModelG::new(cfg.seed)?.params;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let init_ipr = mean_val_ipr(&params, val, cfg.window_s)?;
    let mut log = vec![Stage1LogEntry { epoch: 0, loss: None, val_ipr: init_ipr }];
    let mut best = (params.clone(), 0, init_ipr);
    let mut step_losses = Vec::new();
    let steps = cfg.steps_per_epoch.unwrap_or(train.len());
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let i = rng.random_range(0..train.len());
            let j = (i + rng.random_range(1..train.len())) % train.len();
            let ta = rng.random_range(0..=train[i].frames() - w);
            let tb = rng.random_range(0..=train[j].frames() - w);
            let (a, b) = (train[i].slice_time(ta, w)?, train[j].slice_time(tb, w)?);
            let l = stage1_step(&mut params, &mut adam, &a, &b, cfg, &mut rng)?;
            step_losses.push(l);
            sum += l;
        }
        let val_ipr = mean_val_ipr(&params, val, cfg.window_s)?;
        log::info!("stage1 epoch {epoch}: loss {:.5} val IPR {val_ipr:.4}", sum / steps as f64);
        log.push(Stage1LogEntry { epoch, loss: Some(sum / steps as f64), val_ipr });
        if val_ipr < best.2 {
            best = (params.clone(), epoch, val_ipr);
        }
    }
    Ok(Stage1Outcome {
        params: best.0,
        log,
        best_epoch: best.1,
        best_val_ipr: best.2,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_output_shape_and_zero_input() {
        let g = ModelG::new(1).unwrap();
        let m = StMap::new(Tensor::zeros(&[36, 60, 3]), 30.0).unwrap();
        let mut tape = Tape::new();
        let out = forward_g(&mut tape, &g.params, &m).unwrap();
        assert_eq!(tape.shape(out), &[4, 60]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let bad = StMap::new(Tensor::zeros(&[35, 60, 3]), 30.0).unwrap();
        assert!(matches!(forward_g(&mut Tape::new(), &g.params, &bad), Err(Error::Model(_))));
    }

    #[test]
    fn patches_shape_and_determinism() {
        let mr = Tensor::new(vec![4, 301], (0..1204).map(|i| i as f64).collect()).unwrap();
        let a = sample_patches(&mr, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_patches(&mr, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|p| p.len == 150 && p.t0 + 150 <= 300 && p.values.len() == 150));
    }

    #[test]
    fn contrastive_hand_cases() {
        let same = vec![vec![0.5, 0.5]; 3];
        assert_eq!(contrastive_loss(&same, &same).unwrap(), 0.0);
        let f = vec![vec![1.0, 0.0]; 2];
        let fp = vec![vec![0.0, 1.0]; 2];
        assert_eq!(contrastive_loss(&f, &fp).unwrap(), -2.0);
        assert!(matches!(contrastive_loss(&f[..1], &fp[..1]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_video_rejected() {
        let m = StMap::new(Tensor::zeros(&[36, 300, 3]), 30.0).unwrap();
        let cfg = Stage1Config::default();
        assert!(matches!(train_stage1(&[m.clone()], &[m], &cfg), Err(Error::Config(_))));
    }
}
