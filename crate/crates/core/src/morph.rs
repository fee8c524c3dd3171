//! Stage 2: identity training on periodic pulse segments. A shared encoder
//! `H` (1-D CNN followed by two transformer encoder layers) maps each 90-sample
//! beat to a 64-dim feature; `h_rppg` and `h_cppg` classify video subjects and
//! external contact-PPG identities. Training alternates an rPPG step, which
//! updates `G`, `H` and `h_rppg`, with a contact-PPG step, which updates `H` and
//! `h_cppg`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cp2d::{extract_rppg, forward_g, G_PARAMS, S_ROWS};
use crate::deid::{normalize_st_map, StMap};
use crate::dsp::{self, RppgSignal, SegmentBatch, HR_BAND, SEGMENT_LEN};
use crate::error::{Error, Result};
use crate::eval::{per_subject_eval, ScoreRow};
use crate::ingest::CppgTrace;
use crate::tensor::{adam_step, grad, group_of, AdamState, ParamStore, Tape, Tensor, Var};

pub const FEATURE_DIM: usize = 64;
pub const H_CHANNELS: [usize; 2] = [16, 32];
pub const H_KERNEL: usize = 5;
pub const MODEL_DIM: usize = 32;
pub const HEADS: usize = 2;
pub const FF_DIM: usize = 64;
pub const ENCODER_LAYERS: usize = 2;
/// Tokens after two width-2 max pools of a 90-sample beat.
pub const TOKENS: usize = SEGMENT_LEN / 2 / 2;

pub const RPPG_HEAD: &str = "h_rppg";
pub const CPPG_HEAD: &str = "h_cppg";
/// Groups updated by each branch.
pub const RPPG_GROUPS: [&str; 3] = ["g", "h", RPPG_HEAD];
pub const CPPG_GROUPS: [&str; 2] = ["h", CPPG_HEAD];

/// Adds freshly initialized `h.*` parameters.
pub fn init_h(params: &mut ParamStore) -> Result<()> {
    let mut c_in = 1;
    for (i, &c_out) in H_CHANNELS.iter().enumerate() {
        let name = format!("h.conv{}", i + 1);
        params.init_glorot(&format!("{name}.w"), &[c_out, c_in, H_KERNEL], c_in * H_KERNEL, c_out * H_KERNEL)?;
        params.init_const(&format!("{name}.b"), &[c_out], 0.0)?;
        c_in = c_out;
    }
    params.init_const("h.pos", &[TOKENS, MODEL_DIM], 0.0)?;
    let d = MODEL_DIM;
    for l in 0..ENCODER_LAYERS {
        let p = format!("h.enc{l}");
        for w in ["wq", "wk", "wv"] {
            params.init_glorot(&format!("{p}.{w}"), &[d, d], d, d)?;
        }
        params.init_const(&format!("{p}.ln1.g"), &[d], 1.0)?;
        params.init_const(&format!("{p}.ln1.b"), &[d], 0.0)?;
        params.init_glorot(&format!("{p}.ff1.w"), &[d, FF_DIM], d, FF_DIM)?;
        params.init_const(&format!("{p}.ff1.b"), &[FF_DIM], 0.0)?;
        params.init_glorot(&format!("{p}.ff2.w"), &[FF_DIM, d], FF_DIM, d)?;
        params.init_const(&format!("{p}.ff2.b"), &[d], 0.0)?;
        params.init_const(&format!("{p}.ln2.g"), &[d], 1.0)?;
        params.init_const(&format!("{p}.ln2.b"), &[d], 0.0)?;
    }
    params.init_glorot("h.feat.w", &[d, FEATURE_DIM], d, FEATURE_DIM)?;
    params.init_const("h.feat.b", &[FEATURE_DIM], 0.0)
}

/// Adds a dense 64→`classes` head named `group`.
pub fn init_head(params: &mut ParamStore, group: &str, classes: usize) -> Result<()> {
    params.init_glorot(&format!("{group}.w"), &[FEATURE_DIM, classes], FEATURE_DIM, classes)?;
    params.init_const(&format!("{group}.b"), &[classes], 0.0)
}

/// The morphology encoder on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelH {
    pub params: ParamStore,
}

impl ModelH {
    pub fn new(seed: u64) -> Result<Self> {
        let mut params = ParamStore::new(seed);
        init_h(&mut params)?;
        Ok(ModelH { params })
    }
}

/// `H` on `[K×90]` segments; returns `[K×64]` features.
pub fn forward_h(tape: &mut Tape, params: &ParamStore, segments: Var) -> Result<Var> {
    let s = tape.shape(segments).to_vec();
    if s.len() != 2 || s[1] != SEGMENT_LEN {
        return Err(Error::Model(format!("H expects K×{SEGMENT_LEN} segments, got {s:?}")));
    }
    let k = s[0];
    let mut x = tape.reshape(segments, &[k, 1, SEGMENT_LEN])?;
    for i in 1..=H_CHANNELS.len() {
        let w = tape.param(params, &format!("h.conv{i}.w"))?;
        let b = tape.param(params, &format!("h.conv{i}.b"))?;
        x = tape.conv1d(x, w)?;
        x = tape.channel_bias(x, b)?;
        x = tape.relu(x)?;
        x = tape.max_pool1d(x)?;
    }
    x = tape.transpose12(x)?;
    let pos = tape.param(params, "h.pos")?;
    x = tape.add(x, pos)?;
    for l in 0..ENCODER_LAYERS {
        let p = |n: &str| format!("h.enc{l}.{n}");
        let (wq, wk, wv) = (
            tape.param(params, &p("wq"))?,
            tape.param(params, &p("wk"))?,
            tape.param(params, &p("wv"))?,
        );
        let a = tape.attention(x, wq, wk, wv, HEADS)?;
        let r = tape.add(x, a)?;
        let (g1, b1) = (tape.param(params, &p("ln1.g"))?, tape.param(params, &p("ln1.b"))?);
        x = tape.layer_norm(r, g1, b1)?;
        let (w1, c1) = (tape.param(params, &p("ff1.w"))?, tape.param(params, &p("ff1.b"))?);
        let (w2, c2) = (tape.param(params, &p("ff2.w"))?, tape.param(params, &p("ff2.b"))?);
        let f = tape.dense(x, w1, c1)?;
        let f = tape.relu(f)?;
        let f = tape.dense(f, w2, c2)?;
        let r = tape.add(x, f)?;
        let (g2, b2) = (tape.param(params, &p("ln2.g"))?, tape.param(params, &p("ln2.b"))?);
        x = tape.layer_norm(r, g2, b2)?;
    }
    let pooled = tape.mean_axis(x, 1)?;
    let (w, b) = (tape.param(params, "h.feat.w")?, tape.param(params, "h.feat.b")?);
    tape.dense(pooled, w, b)
}

/// Head `group` followed by softmax: `[K×64]` → `[K×N]` probabilities.
pub fn head(tape: &mut Tape, params: &ParamStore, group: &str, features: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{group}.w"))?;
    let b = tape.param(params, &format!("{group}.b"))?;
    let logits = tape.dense(features, w, b)?;
    tape.softmax(logits)
}

/// Mean negative log probability of `label` over the rows of `y`.
pub fn ce_loss(y: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(y.clone())?;
    let l = tape.cross_entropy(v, label)?;
    Ok(tape.value(l).item())
}

/// Per-segment identity probabilities `[K×N]` from head `group`.
pub fn segment_probs(params: &ParamStore, batch: &SegmentBatch, group: &str) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.segments.clone())?;
    let f = forward_h(&mut tape, params, x)?;
    let y = head(&mut tape, params, group, f)?;
    Ok(tape.value(y).clone())
}

/// Averages consecutive non-overlapping groups of `window_beats` rows; a
/// trailing partial group is dropped.
pub fn window_scores(probs: &Tensor, window_beats: usize) -> Result<Vec<Vec<f64>>> {
    let (k, n) = (probs.shape()[0], probs.shape()[1]);
    if window_beats == 0 || k < window_beats {
        return Err(Error::Dsp("insufficient beats".into()));
    }
    Ok((0..k / window_beats)
        .map(|w| {
            let mut acc = vec![0.0; n];
            for r in w * window_beats..(w + 1) * window_beats {
                for (a, p) in acc.iter_mut().zip(probs.row(r)) {
                    *a += p / window_beats as f64;
                }
            }
            acc
        })
        .collect())
}

/// Beat rate of a raw map span: the fundamental of its POS trace. The learned
/// extractor is free to favour a harmonic (nothing in either training loss
/// fixes the fundamental), so peak spacing comes from the classical readout.
pub fn beat_rate(m: &StMap) -> Result<f64> {
    dsp::fundamental_frequency(&dsp::pos_baseline(m)?)
}

/// rPPG beats of a raw map span under the `g.*` parameters in `params`.
pub fn rppg_segments(params: &ParamStore, m: &StMap) -> Result<SegmentBatch> {
    let s = extract_rppg(params, m)?;
    let peaks = dsp::detect_peaks_at(&s, beat_rate(m)?, dsp::PEAK_MIN_DISTANCE)?;
    dsp::segment_and_resample(&s, &peaks)
}

/// Contact-PPG beats: bandpass, peaks, segments.
pub fn cppg_segments(samples: &[f64], fs: f64) -> Result<SegmentBatch> {
    dsp::segments_of(&RppgSignal::new(samples.to_vec(), fs))
}

/// Identity score vectors for windows of `window_beats` consecutive beats.
pub fn authenticate(params: &ParamStore, m: &StMap, window_beats: usize) -> Result<Vec<Vec<f64>>> {
    let batch = rppg_segments(params, m)?;
    window_scores(&segment_probs(params, &batch, RPPG_HEAD)?, window_beats)
}

/// A map span with its subject label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMap {
    pub map: StMap,
    pub label: usize,
    pub session: String,
}

/// Windows of every map scored against all subjects; maps with too few beats
/// contribute no rows.
pub fn score_maps(params: &ParamStore, maps: &[LabeledMap], window_beats: usize) -> Vec<ScoreRow> {
    let mut rows = Vec::new();
    for lm in maps {
        match authenticate(params, &lm.map, window_beats) {
            Ok(windows) => rows.extend(windows.into_iter().enumerate().map(|(i, scores)| ScoreRow {
                true_subject: lm.label,
                window_idx: i,
                session: lm.session.clone(),
                scores,
            })),
            Err(e) => log::warn!("subject {} {}: {e}", lm.label, lm.session),
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Alternation units (one rPPG step plus, when hybrid, one cPPG step).
    pub steps: usize,
    pub lr: f64,
    pub window_s: f64,
    pub val_every: usize,
    pub val_window_beats: usize,
    pub seed: u64,
    pub hybrid: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 1500,
            lr: 1e-3,
            window_s: 10.0,
            val_every: 50,
            val_window_beats: 5,
            seed: 0,
            hybrid: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Rppg,
    Cppg,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogEntry {
    pub step: usize,
    pub branch: Branch,
    pub loss: Option<f64>,
    pub val_eer: Option<f64>,
}

/// Parameters restricted to the named groups.
fn filter_groups(g: BTreeMap<String, Tensor>, groups: &[&str]) -> BTreeMap<String, Tensor> {
    g.into_iter().filter(|(n, _)| groups.contains(&group_of(n))).collect()
}

/// Step-level driver of the alternating scheme.
pub struct Stage2Trainer<'a> {
    pub params: ParamStore,
    adam: AdamState,
    rng_rppg: ChaCha8Rng,
    rng_cppg: ChaCha8Rng,
    train: &'a [LabeledMap],
    cppg: &'a [CppgTrace],
    n_cppg: usize,
    cfg: Stage2Config,
}

impl<'a> Stage2Trainer<'a> {
    /// Combines the stage-1 `g.*` parameters with fresh `H` and heads.
    pub fn new(
        g: &ParamStore,
        train: &'a [LabeledMap],
        cppg: &'a [CppgTrace],
        n_rppg: usize,
        cfg: &Stage2Config,
    ) -> Result<Self> {
        if let Some(missing) = G_PARAMS.iter().find(|n| !g.contains(n)) {
            return Err(Error::Config(format!("stage-1 checkpoint lacks {missing}")));
        }
        if n_rppg < 2 || train.iter().map(|m| m.label).collect::<std::collections::BTreeSet<_>>().len() < 2 {
            return Err(Error::Config("rPPG branch needs at least 2 identities".into()));
        }
        if let Some(bad) = train.iter().find(|m| m.label >= n_rppg) {
            return Err(Error::Contract(format!("label {} outside {n_rppg} classes", bad.label)));
        }
        let n_cppg = cppg.iter().map(|t| t.subject_id + 1).max().unwrap_or(0);
        if n_cppg < 2 {
            return Err(Error::Config("cPPG branch needs at least 2 identities".into()));
        }
        let mut params = ParamStore::new(cfg.seed);
        init_h(&mut params)?;
        init_head(&mut params, RPPG_HEAD, n_rppg)?;
        init_head(&mut params, CPPG_HEAD, n_cppg)?;
        params.merge(&g.group("g"))?;
        Ok(Stage2Trainer {
            params,
            adam: AdamState::new(),
            rng_rppg: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
            rng_cppg: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3)),
            train,
            cppg,
            n_cppg,
            cfg: cfg.clone(),
        })
    }

    pub fn n_cppg(&self) -> usize {
        self.n_cppg
    }

    /// One rPPG step: random training window → G → bandpass → peaks →
    /// segments → H → `h_rppg` → cross-entropy; updates `g`, `h`, `h_rppg`.
    /// Returns `None` when the window yields fewer than 2 peaks.
    pub fn rppg_step(&mut self) -> Result<Option<f64>> {
        let item = &self.train[self.rng_rppg.random_range(0..self.train.len())];
        let fs = item.map.fps;
        let w = ((self.cfg.window_s * fs).round() as usize).min(item.map.frames());
        let t0 = self.rng_rppg.random_range(0..=item.map.frames() - w);
        let raw = item.map.slice_time(t0, w)?;
        let f_hr = beat_rate(&raw)?;
        let window = normalize_st_map(&raw);

        let mut tape = Tape::new();
        let mr = forward_g(&mut tape, &self.params, &window)?;
        debug_assert_eq!(tape.shape(mr)[0], S_ROWS);
        let mean = tape.mean_axis(mr, 0)?;
        dsp::bandpass_samples(&[0.0; 8], fs, HR_BAND.0, HR_BAND.1)?;
        let bp = tape.self_adjoint(
            mean,
            Box::new(move |x| dsp::bandpass_samples(x, fs, HR_BAND.0, HR_BAND.1).expect("validated band")),
        )?;
        let signal = RppgSignal::new(tape.value(bp).data().to_vec(), fs);
        let peaks = match dsp::detect_peaks_at(&signal, f_hr, dsp::PEAK_MIN_DISTANCE) {
            Ok(p) => p,
            Err(e) => {
                log::info!("rPPG window skipped: {e}");
                return Ok(None);
            }
        };
        let (rows, starts, _) = dsp::segment_weights(&peaks, fs);
        if starts.is_empty() {
            log::info!("rPPG window skipped: no usable beats");
            return Ok(None);
        }
        let seg = tape.sparse_linear(bp, rows, &[starts.len(), SEGMENT_LEN])?;
        let seg = tape.zscore_rows(seg)?;
        let f = forward_h(&mut tape, &self.params, seg)?;
        let y = head(&mut tape, &self.params, RPPG_HEAD, f)?;
        let loss = tape.cross_entropy(y, item.label)?;
        let g = filter_groups(grad(&tape, loss, &self.params)?, &RPPG_GROUPS);
        adam_step(&mut self.params, &g, self.cfg.lr, &mut self.adam)?;
        Ok(Some(tape.value(loss).item()))
    }

    /// One contact-PPG step: random identity and window → bandpass → peaks →
    /// segments → H → `h_cppg` → cross-entropy; updates `h`, `h_cppg`.
    pub fn cppg_step(&mut self) -> Result<Option<f64>> {
        let tr = &self.cppg[self.rng_cppg.random_range(0..self.cppg.len())];
        let w = ((self.cfg.window_s * tr.fs).round() as usize).min(tr.samples.len());
        let t0 = self.rng_cppg.random_range(0..=tr.samples.len() - w);
        let batch = match cppg_segments(&tr.samples[t0..t0 + w], tr.fs) {
            Ok(b) => b,
            Err(e) => {
                log::info!("cPPG window skipped: {e}");
                return Ok(None);
            }
        };
        let mut tape = Tape::new();
        let x = tape.constant(batch.segments)?;
        let f = forward_h(&mut tape, &self.params, x)?;
        let y = head(&mut tape, &self.params, CPPG_HEAD, f)?;
        let loss = tape.cross_entropy(y, tr.subject_id)?;
        let g = filter_groups(grad(&tape, loss, &self.params)?, &CPPG_GROUPS);
        adam_step(&mut self.params, &g, self.cfg.lr, &mut self.adam)?;
        Ok(Some(tape.value(loss).item()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Outcome {
    pub params: ParamStore,
    pub log: Vec<Stage2LogEntry>,
    pub best_step: usize,
    pub best_val_eer: f64,
    pub best_val_auc: f64,
}

/// Mean EER and AUC over validation maps at `window_beats`.
pub fn validation_eer(params: &ParamStore, val: &[LabeledMap], window_beats: usize) -> Result<(f64, f64)> {
    let rows = score_maps(params, val, window_beats);
    let r = per_subject_eval(&rows)?;
    Ok((r.mean_eer, r.mean_auc))
}

/// Alternating training from a stage-1 checkpoint. Validation EER is measured
/// at step 0, every `val_every` steps and at the end; the checkpoint with the
/// lowest EER (then highest AUC, then latest) is returned.
pub fn train_stage2(
    g: &ParamStore,
    train: &[LabeledMap],
    val: &[LabeledMap],
    cppg: &[CppgTrace],
    n_rppg: usize,
    cfg: &Stage2Config,
) -> Result<Stage2Outcome> {
    let mut t = Stage2Trainer::new(g, train, cppg, n_rppg, cfg)?;
    let mut log = Vec::new();
    let validate = |t: &Stage2Trainer, step: usize, log: &mut Vec<Stage2LogEntry>| -> Result<(f64, f64)> {
        let (eer, auc) = validation_eer(&t.params, val, cfg.val_window_beats)?;
        log::info!("stage2 step {step}: val EER {eer:.4} AUC {auc:.4}");
        log.push(Stage2LogEntry { step, branch: Branch::Val, loss: None, val_eer: Some(eer) });
        Ok((eer, auc))
    };
    let (eer, auc) = validate(&t, 0, &mut log)?;
    let mut best = (t.params.clone(), 0, eer, auc);
    for step in 1..=cfg.steps {
        let l = t.rppg_step()?;
        log.push(Stage2LogEntry { step, branch: Branch::Rppg, loss: l, val_eer: None });
        if cfg.hybrid {
            let l = t.cppg_step()?;
            log.push(Stage2LogEntry { step, branch: Branch::Cppg, loss: l, val_eer: None });
        }
        if step % cfg.val_every.max(1) == 0 || step == cfg.steps {
            let (eer, auc) = validate(&t, step, &mut log)?;
            if eer < best.2 || (eer == best.2 && auc >= best.3) {
                best = (t.params.clone(), step, eer, auc);
            }
        }
    }
    Ok(Stage2Outcome {
        params: best.0,
        log,
        best_step: best.1,
        best_val_eer: best.2,
        best_val_auc: best.3,
    })
}

/// The ablation without the contact-PPG branch.
pub fn train_stage2_rppg_only(
    g: &ParamStore,
    train: &[LabeledMap],
    val: &[LabeledMap],
    cppg: &[CppgTrace],
    n_rppg: usize,
    cfg: &Stage2Config,
) -> Result<Stage2Outcome> {
    let cfg = Stage2Config { hybrid: false, ..cfg.clone() };
    train_stage2(g, train, val, cppg, n_rppg, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h_shapes() {
        let h = ModelH::new(0).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![3, 90], (0..270).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap())
            .unwrap();
        let f = forward_h(&mut tape, &h.params, x).unwrap();
        assert_eq!(tape.shape(f), &[3, FEATURE_DIM]);
        let bad = tape.constant(Tensor::zeros(&[2, 89])).unwrap();
        assert!(matches!(forward_h(&mut tape, &h.params, bad), Err(Error::Model(_))));
    }

    #[test]
    fn duplicated_rows_give_identical_features() {
        let h = ModelH::new(4).unwrap();
        let row: Vec<f64> = (0..90).map(|i| (i as f64 * 0.2).cos()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[row.clone(), row]).unwrap()).unwrap();
        let f = forward_h(&mut tape, &h.params, x).unwrap();
        let v = tape.value(f);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn ce_examples() {
        let y = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!((ce_loss(&y, 0).unwrap() - 0.693_147_18).abs() < 1e-8);
        let one_hot = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(ce_loss(&one_hot, 1).unwrap(), 0.0);
        let y = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.75, 0.25]]).unwrap();
        assert!((ce_loss(&y, 1).unwrap() - 1.039_720_77).abs() < 1e-8);
        assert!(matches!(ce_loss(&y, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn window_score_examples() {
        let probs = Tensor::from_rows(&vec![vec![0.2, 0.8]; 10]).unwrap();
        let w = window_scores(&probs, 5).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|s| (s[0] - 0.2).abs() < 1e-15 && (s[1] - 0.8).abs() < 1e-15));
        assert_eq!(window_scores(&probs, 3).unwrap().len(), 3);
        assert!(window_scores(&probs, 20).unwrap_err().to_string().contains("insufficient beats"));
    }
}
