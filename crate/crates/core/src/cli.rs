//! Command-line surface: `synth`, `deid`, `pretrain`, `train`, `eval` and
//! `authenticate`. Every command writes a `run_manifest.json` recording the
//! command, effective configuration, its hash, the seed and input hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cp2d::{train_stage1, Stage1Config};
use crate::deid::{build_st_map, deidentify, read_deid, video_seed};
use crate::error::{Error, Result};
use crate::ingest::{self, LandmarkSet, Split};
use crate::morph::{self, train_stage2, Stage2Config};
use crate::pipeline::{self, MANIFEST_NAME};
use crate::synth::{self, SynthConfig};
use crate::tensor::{read_checkpoint, write_checkpoint};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const SUBJECTS_FILE: &str = "subjects.json";

/// Everything a run can be configured with; loaded from `--config` and
/// overridden by flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub window_beats: Vec<usize>,
}

impl RunConfig {
    /// Applies the global seed to every RNG-bearing section.
    fn seeded(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        if self.window_beats.is_empty() {
            self.window_beats = vec![5, 10, 20];
        }
        self
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "pulseid", version, about = "rPPG morphology authentication from de-identified facial video")]
pub struct Cli {
    /// Seed for every RNG stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with a (partial) RunConfig.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker cap for parallel-safe stages (deid).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (videos, contact traces, manifests).
    Synth(SynthArgs),
    /// De-identify every video of a manifest.
    Deid(DeidArgs),
    /// Stage 1: label-free training of the rPPG extractor.
    Pretrain(PretrainArgs),
    /// Stage 2: identity training of extractor, morphology model and heads.
    Train(TrainArgs),
    /// Authentication metrics and morphology correlation on the test splits.
    Eval(EvalArgs),
    /// Score one video against a claimed identity.
    Authenticate(AuthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub sessions: Option<usize>,
    /// Seconds per video.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DeidArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Directory written by `deid`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-1 checkpoint.
    #[arg(long)]
    pub stage1: PathBuf,
    /// External contact-PPG manifest.
    #[arg(long)]
    pub cppg: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Alternate rPPG and contact-PPG steps (default).
    #[arg(long, conflicts_with = "rppg_only")]
    pub hybrid: bool,
    /// Ablation: skip every contact-PPG step.
    #[arg(long)]
    pub rppg_only: bool,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub window_beats: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct AuthArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw frame file, or a de-identified one when its `.json` sidecar exists.
    #[arg(long)]
    pub video: PathBuf,
    /// Claimed subject id as written in the training manifest.
    #[arg(long)]
    pub claim: i64,
    /// Frame rate of a raw video.
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub window_beats: usize,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

/// SHA-256 of a file; absent files are missing dependencies.
pub fn file_hash(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), file_hash(p)?))).collect()
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(path.to_path_buf()))
    }
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: &[PathBuf],
) -> Result<()> {
    let m = RunManifest {
        command,
        config: cfg,
        config_hash: cfg.hash(),
        seed,
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

/// Training logs carry the config hash and seed alongside the entries.
#[derive(Serialize)]
struct Log<'a, T: Serialize> {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    extra: BTreeMap<&'a str, serde_json::Value>,
    entries: &'a [T],
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => {
            require(p)?;
            serde_json::from_str::<RunConfig>(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    Ok(cfg.seeded(cli.seed))
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let seed = cli.seed;
    match &cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.subjects {
                cfg.synth.n_subjects = n;
            }
            if let Some(n) = a.sessions {
                cfg.synth.sessions = n;
            }
            if let Some(d) = a.duration {
                cfg.synth.duration_s = d;
            }
            if let Some(f) = a.fps {
                cfg.synth.fps = f;
            }
            cfg.synth.validate()?;
            let m = synth::gen_dataset(&cfg.synth, &a.out)?;
            let outputs = vec![a.out.join(MANIFEST_NAME), a.out.join(pipeline::EXTERNAL_MANIFEST)];
            write_run_manifest(&a.out, "synth", &cfg, seed, BTreeMap::new(), &outputs)?;
            println!("wrote {} videos to {}", m.records.len(), a.out.display());
        }
        Command::Deid(a) => {
            let inputs = hash_inputs(&[&a.manifest])?;
            let m = pipeline::deid_manifest(&a.manifest, &a.out, cli.threads)?;
            write_run_manifest(&a.out, "deid", &cfg, seed, inputs, &[a.out.join(MANIFEST_NAME)])?;
            println!("de-identified {} videos into {}", m.records.len(), a.out.display());
        }
        Command::Pretrain(a) => {
            if let Some(e) = a.epochs {
                cfg.stage1.epochs = e;
            }
            let manifest = a.data.join(MANIFEST_NAME);
            let inputs = hash_inputs(&[&manifest])?;
            let data = pipeline::load_deid_dataset(&manifest)?;
            let out = train_stage1(&data.unlabeled(Split::Train), &data.unlabeled(Split::Val), &cfg.stage1)?;
            fs::create_dir_all(&a.out)?;
            let ckpt = a.out.join(STAGE1_CHECKPOINT);
            write_checkpoint(&ckpt, &out.params)?;
            let log_path = a.out.join("stage1_log.json");
            let extra = BTreeMap::from([
                ("best_epoch", serde_json::json!(out.best_epoch)),
                ("best_val_ipr", serde_json::json!(out.best_val_ipr)),
            ]);
            let log = Log { config_hash: cfg.hash(), seed, extra, entries: &out.log };
            fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
            write_run_manifest(&a.out, "pretrain", &cfg, seed, inputs, &[ckpt.clone(), log_path])?;
            println!("stage 1: best epoch {} (val IPR {:.4}) -> {}", out.best_epoch, out.best_val_ipr, ckpt.display());
        }
        Command::Train(a) => {
            if let Some(s) = a.steps {
                cfg.stage2.steps = s;
            }
            cfg.stage2.hybrid = !a.rppg_only;
            let manifest = a.data.join(MANIFEST_NAME);
            let inputs = hash_inputs(&[&manifest, &a.stage1, &a.cppg])?;
            let data = pipeline::load_deid_dataset(&manifest)?;
            let g = read_checkpoint(&a.stage1)?;
            let fps = data.videos.first().map_or(cfg.synth.fps, |v| v.map.fps);
            let ext = synth::load_cppg_set(&a.cppg, fps)?;
            let out = train_stage2(
                &g,
                &data.labeled(Split::Train),
                &data.labeled(Split::Val),
                &ext,
                data.n_subjects,
                &cfg.stage2,
            )?;
            fs::create_dir_all(&a.out)?;
            let ckpt = a.out.join(MODEL_CHECKPOINT);
            write_checkpoint(&ckpt, &out.params)?;
            let log_path = a.out.join("stage2_log.json");
            let extra = BTreeMap::from([
                ("best_step", serde_json::json!(out.best_step)),
                ("best_val_eer", serde_json::json!(out.best_val_eer)),
                ("best_val_auc", serde_json::json!(out.best_val_auc)),
            ]);
            let log = Log { config_hash: cfg.hash(), seed, extra, entries: &out.log };
            fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
            let subjects = a.out.join(SUBJECTS_FILE);
            fs::write(&subjects, serde_json::to_string_pretty(&data.original_ids)?)?;
            write_run_manifest(&a.out, "train", &cfg, seed, inputs, &[ckpt.clone(), log_path, subjects])?;
            println!("stage 2: best step {} (val EER {:.4}) -> {}", out.best_step, out.best_val_eer, ckpt.display());
        }
        Command::Eval(a) => {
            if let Some(w) = &a.window_beats {
                cfg.window_beats = w.clone();
            }
            if cfg.window_beats.contains(&0) {
                return Err(Error::Config("window lengths must be positive".into()));
            }
            let manifest = a.data.join(MANIFEST_NAME);
            let inputs = hash_inputs(&[&manifest, &a.model])?;
            let data = pipeline::load_deid_dataset(&manifest)?;
            let params = read_checkpoint(&a.model)?;
            let report = pipeline::evaluate(&params, &data, &cfg.window_beats, &cfg.hash(), seed)?;
            let written = pipeline::write_report(&report, &a.out)?;
            write_run_manifest(&a.out, "eval", &cfg, seed, inputs, &written)?;
            for w in &report.windows {
                print!("{:>2} beats: intra EER {:.4} AUC {:.4}", w.window_beats, w.intra.mean_eer, w.intra.mean_auc);
                match &w.cross {
                    Some(c) => println!("  cross EER {:.4} AUC {:.4}", c.mean_eer, c.mean_auc),
                    None => println!(),
                }
            }
            println!("morphology pearson {:.4}", report.pearson_mean);
        }
        Command::Authenticate(a) => authenticate(a)?,
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AuthResult {
    claim: i64,
    predicted: i64,
    accepted: bool,
    windows: usize,
    /// Mean over windows of the claimed identity's score.
    claim_score: f64,
    claim_scores: Vec<f64>,
}

fn authenticate(a: &AuthArgs) -> Result<()> {
    let params = read_checkpoint(&a.model)?;
    let ids_path = a.model.with_file_name(SUBJECTS_FILE);
    let ids: Vec<i64> = if ids_path.exists() {
        serde_json::from_str(&fs::read_to_string(&ids_path)?)?
    } else {
        let n = params.get(&format!("{}.b", morph::RPPG_HEAD)).map_or(0, |b| b.len());
        (0..n as i64).collect()
    };
    let dense = ids
        .iter()
        .position(|&i| i == a.claim)
        .ok_or_else(|| Error::Config(format!("claimed id {} is not an enrolled subject", a.claim)))?;
    require(&a.video)?;
    let map = if a.video.with_extension("json").exists() {
        build_st_map(&read_deid(&a.video)?)?
    } else {
        let frames = ingest::load_frames(&a.video, a.fps)?;
        let frames = match &a.landmarks {
            Some(p) => ingest::crop_face(&frames, &LandmarkSet::load(p)?)?,
            None => frames,
        };
        let name = a.video.file_name().and_then(|n| n.to_str()).unwrap_or("video");
        deidentify(&frames, video_seed(name, 0))?.1
    };
    let windows = morph::authenticate(&params, &map, a.window_beats)?;
    let n = ids.len();
    let mut mean = vec![0.0; n];
    for w in &windows {
        for (m, v) in mean.iter_mut().zip(w) {
            *m += v / windows.len() as f64;
        }
    }
    let best = (0..n).fold(0, |b, i| if mean[i] > mean[b] { i } else { b });
    let res = AuthResult {
        claim: a.claim,
        predicted: ids[best],
        accepted: best == dense,
        windows: windows.len(),
        claim_score: mean[dense],
        claim_scores: windows.iter().map(|w| w[dense]).collect(),
    };
    println!("{}", serde_json::to_string_pretty(&res)?);
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
