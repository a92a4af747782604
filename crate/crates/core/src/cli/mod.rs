//! Command-line front end. Every command that writes files also writes a
//! run manifest, and `rerun` replays a manifest and checks its data outputs.

pub mod manifest;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::dataio::formats::save_descriptors;
use crate::dataio::{
    self, detect_format, generate_synthetic, identity_dir_name, load_dataset, make_split, subset,
    synth, DataFormat, DatasetMeta, DatasetSplit, SynthKind, SyntheticSpec, CAMERAS,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, compare_architectures, cmc_csv, curves_csv, diff_csv, extract_descriptors, history_csv,
    mean_history, parse_curves_csv, track_convergence, CmcCurve, ConvergenceHistory,
};
use crate::seqstage::Arch;
use crate::tensorcore::RngStream;
use crate::trainer::{self, parse_kv_text, parse_size, transplant_checkpoint_bytes, Model, TrainConfig};
use manifest::{hashed, output, OutputEntry, OutputKind, RunManifest, MANIFEST_FILE};

pub const SEED_ENV: &str = "SEQPOOL_SEED";

#[derive(Parser, Debug)]
#[command(name = "seqpool", version, about = "Video re-identification with recurrent or feed-forward temporal pooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
pub enum Command {
    /// Generate a synthetic two-camera dataset
    Synth(SynthArgs),
    /// Compute Lucas-Kanade flow channels for an RGB dataset
    Flow(FlowArgs),
    /// Train one model per trial split
    Train(TrainArgs),
    /// Flip checkpoints between the recurrent and feed-forward stage
    Transplant(TransplantArgs),
    /// Rank camera A probes against the camera B gallery
    Eval(EvalArgs),
    /// Paired per-rank comparison of two evaluation runs
    Compare(CompareArgs),
    /// Replay a run manifest and verify its data outputs
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub ids: u32,
    /// Frames per track (minimum when --frames-max is given)
    #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u32).range(1..))]
    pub frames: u32,
    #[arg(long)]
    pub frames_max: Option<u32>,
    /// Feature dimension; feature mode is the default
    #[arg(long, conflicts_with = "image")]
    pub dim: Option<usize>,
    /// Image size HxW; writes RGB frames
    #[arg(long)]
    pub image: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub nuisance: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_corr: f64,
    #[arg(long, default_value_t = 0)]
    pub signal_rank: usize,
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Replace a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct FlowArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = dataio::flow::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = dataio::flow::DEFAULT_CLAMP)]
    pub clamp: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// images or features; detected when omitted
    #[arg(long)]
    pub format: Option<String>,
    /// Flat key=value file; flags override its keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Absolute iteration budget, overrides --epochs
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub subseq_len: Option<usize>,
    /// Descriptor dimension
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub id_weight: Option<f64>,
    /// Random crop HxW for image data
    #[arg(long)]
    pub crop: Option<String>,
    #[arg(long)]
    pub mirror: Option<f64>,
    /// Conv encoder output size
    #[arg(long)]
    pub frame_dim: Option<usize>,
    /// Extra key=value settings, applied after the config file
    #[arg(long = "set")]
    pub set: Vec<String>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
    /// Seed of the train/test splits; defaults to the training seed
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Evaluate on the test split every N iterations and write history.csv
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long, default_value = "1,5,10,20")]
    pub ranks: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Print the resolved configuration and stop
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TransplantArgs {
    /// Checkpoint file or directory of checkpoints
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Checkpoint file or a training output directory
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub format: Option<String>,
    /// Evaluate under this stage instead of the checkpoint's own
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CompareArgs {
    /// Evaluation directory (or curves.csv) of the first system
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

/// Entry point for the binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let argv: Vec<String> = args[1..].iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, argv, false) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}

struct Recorder {
    command: &'static str,
    argv: Vec<String>,
    started: Instant,
    started_unix: u64,
    inputs: Vec<manifest::HashedPath>,
    outputs: Vec<OutputEntry>,
}

impl Recorder {
    fn new(command: &'static str, argv: Vec<String>) -> Self {
        Self {
            command,
            argv,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        self.inputs.push(hashed(p)?);
        Ok(())
    }

    fn data(&mut self, p: &Path) -> Result<()> {
        self.outputs.push(output(p, OutputKind::Data)?);
        Ok(())
    }

    fn log(&mut self, p: &Path) -> Result<()> {
        self.outputs.push(output(p, OutputKind::Log)?);
        Ok(())
    }

    fn write_text(&mut self, p: &Path, text: &str) -> Result<()> {
        fs::write(p, text)?;
        self.data(p)
    }

    fn finish(self, path: &Path, config: serde_json::Value, seed: Option<u64>) -> Result<()> {
        let m = RunManifest {
            command: self.command.into(),
            argv: self.argv,
            cwd: std::env::current_dir()?,
            config,
            seed,
            code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            rng: RngStream::ALGORITHM.into(),
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_secs: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        m.save(path)?;
        info!("manifest written to {}", path.display());
        Ok(())
    }
}

/// Runs one parsed command. `replay` lets `rerun` overwrite outputs.
pub fn run(command: Command, argv: Vec<String>, replay: bool) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, argv, replay),
        Command::Flow(a) => cmd_flow(a, argv, replay),
        Command::Train(a) => cmd_train(a, argv),
        Command::Transplant(a) => cmd_transplant(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Compare(a) => cmd_compare(a, argv),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

fn config_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("arguments serialize")
}

fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Records every file under `dir` except the manifest as a data output.
fn record_tree(rec: &mut Recorder, dir: &Path) -> Result<()> {
    for rel in manifest::tree_files(dir, &[MANIFEST_FILE])? {
        rec.data(&dir.join(rel))?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs, argv: Vec<String>, replay: bool) -> Result<()> {
    let kind = match &a.image {
        Some(s) => {
            let (height, width) = parse_size(s)?;
            SynthKind::Images { height, width }
        }
        None => SynthKind::Features {
            dim: a.dim.unwrap_or(32),
        },
    };
    let spec = SyntheticSpec {
        identities: a.ids as usize,
        frames_min: a.frames as usize,
        frames_max: a.frames_max.map_or(a.frames as usize, |m| m as usize),
        kind,
        signal: a.signal,
        noise: a.noise,
        nuisance: a.nuisance,
        noise_correlation: a.noise_corr,
        signal_rank: a.signal_rank,
        camera_shift: a.shift,
        seed: a.seed,
    };
    spec.validate()?;
    let mut rec = Recorder::new("synth", argv);
    prepare_output_dir(&a.out, a.force || replay)?;
    let meta = match kind {
        SynthKind::Features { .. } => {
            dataio::save_dataset(&a.out, &generate_synthetic(&spec)?)?;
            DatasetMeta {
                format: Some(DataFormat::Features),
                synthetic: Some(spec.clone()),
                ..Default::default()
            }
        }
        SynthKind::Images { .. } => {
            for (id, tracks) in synth::generate_rgb_tracks(&spec)? {
                for (cam, frames) in CAMERAS.iter().zip(&tracks) {
                    dataio::save_stored_track(&a.out.join(identity_dir_name(id)).join(cam), frames)?;
                }
            }
            DatasetMeta {
                format: Some(DataFormat::Images),
                channels: Some(3),
                synthetic: Some(spec.clone()),
                ..Default::default()
            }
        }
    };
    meta.save(&a.out)?;
    record_tree(&mut rec, &a.out)?;
    println!("wrote {} identities x 2 tracks to {}", spec.identities, a.out.display());
    let seed = a.seed;
    rec.finish(&a.out.join(MANIFEST_FILE), config_value(&a), Some(seed))
}

fn cmd_flow(a: FlowArgs, argv: Vec<String>, replay: bool) -> Result<()> {
    let mut rec = Recorder::new("flow", argv);
    rec.input(&a.input)?;
    prepare_output_dir(&a.out, a.force || replay)?;
    let n = dataio::flow_tree(&a.input, &a.out, a.window, a.clamp)?;
    record_tree(&mut rec, &a.out)?;
    println!("computed flow for {n} identities into {}", a.out.display());
    rec.finish(&a.out.join(MANIFEST_FILE), config_value(&a), None)
}

fn parse_format(s: &Option<String>, data: &Path) -> Result<DataFormat> {
    match s {
        Some(f) => f.parse(),
        None => detect_format(data),
    }
}

fn parse_ranks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|r| match r.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k),
            _ => Err(Error::Config(format!("bad rank `{r}`"))),
        })
        .collect()
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        b = b.num_threads(j);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

fn trial_file(prefix: &str, t: u64, ext: &str) -> String {
    format!("{prefix}{t:02}.{ext}")
}

/// Config file pairs, then `--set` pairs, then explicit flags.
fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut pairs = Vec::new();
    if let Some(p) = &a.config {
        pairs.extend(parse_kv_text(&fs::read_to_string(p)?)?);
    }
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.into(), v));
        }
    };
    flag("mode", a.mode.clone());
    flag("arch", a.arch.clone());
    flag("epochs", a.epochs.map(|v| v.to_string()));
    flag("iterations", a.iterations.map(|v| v.to_string()));
    flag("learning_rate", a.lr.map(|v| v.to_string()));
    flag("batch_size", a.batch.map(|v| v.to_string()));
    flag("subseq_len", a.subseq_len.map(|v| v.to_string()));
    flag("feature_dim", a.dim.map(|v| v.to_string()));
    flag("margin", a.margin.map(|v| v.to_string()));
    flag("dropout_p", a.dropout.map(|v| v.to_string()));
    flag("id_loss_weight", a.id_weight.map(|v| v.to_string()));
    flag("crop", a.crop.clone());
    flag("mirror_prob", a.mirror.map(|v| v.to_string()));
    flag("frame_dim", a.frame_dim.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    let cfg = TrainConfig::from_pairs(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(c: &TrainConfig) -> String {
    format!(
        "mode={} arch={} B={} L={} lr={} epochs={} iterations={} dim={} margin={} dropout={} id_weight={} seed={}",
        c.mode,
        c.arch,
        c.batch_size,
        c.subseq_len,
        c.learning_rate,
        c.epochs,
        c.iterations.map_or("auto".into(), |i| i.to_string()),
        c.feature_dim,
        c.margin,
        c.dropout_p,
        c.id_loss_weight,
        c.seed
    )
}

fn cmd_train(a: TrainArgs, argv: Vec<String>) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let split_seed = a.split_seed.unwrap_or(cfg.seed);
    println!("{}", echo_config(&cfg));
    if a.dry_run {
        return Ok(());
    }
    if a.trials == 0 {
        return Err(Error::Config("--trials must be positive".into()));
    }
    let ranks = parse_ranks(&a.ranks)?;
    let format = parse_format(&a.format, &a.data)?;
    let mut rec = Recorder::new("train", argv);
    rec.input(&a.data)?;
    let data = load_dataset(&a.data, format, &BTreeSet::new())?;
    let splits = (0..a.trials)
        .map(|t| make_split(data.len(), t, split_seed))
        .collect::<Result<Vec<DatasetSplit>>>()?;
    fs::create_dir_all(&a.out_dir)?;
    let results = pool(a.jobs)?.install(|| {
        splits
            .par_iter()
            .map(|split| -> Result<(trainer::TrainOutcome, Option<ConvergenceHistory>)> {
                let tcfg = TrainConfig {
                    seed: cfg.seed ^ split.trial,
                    ..cfg.clone()
                };
                let train_set = subset(&data, &split.train);
                match a.eval_every {
                    Some(c) => {
                        let test_set = subset(&data, &split.test);
                        let (o, h) = track_convergence(&train_set, &test_set, &tcfg, c)?;
                        Ok((o, Some(h)))
                    }
                    None => Ok((trainer::train(&train_set, &tcfg)?, None)),
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut histories = Vec::new();
    for (t, (outcome, hist)) in results.into_iter().enumerate() {
        let t = t as u64;
        let ckpt = a.out_dir.join(trial_file("trial", t, "ckpt"));
        outcome.model.save(&ckpt)?;
        rec.data(&ckpt)?;
        let log = a.out_dir.join(trial_file("trial", t, "log"));
        fs::write(&log, outcome.log.to_text())?;
        rec.log(&log)?;
        if let Some(last) = outcome.log.records.last() {
            info!("trial {t}: final loss {:.6}", last.total);
        }
        histories.extend(hist);
    }
    let splits_path = a.out_dir.join("splits.json");
    rec.write_text(
        &splits_path,
        &(serde_json::to_string_pretty(&splits).expect("splits serialize") + "\n"),
    )?;
    if !histories.is_empty() {
        let mean = mean_history(&histories)?;
        rec.write_text(&a.out_dir.join("history.csv"), &history_csv(&mean, &ranks))?;
    }
    println!("trained {} trial(s) into {}", a.trials, a.out_dir.display());
    let config = json!({
        "train": cfg,
        "trials": a.trials,
        "split_seed": split_seed,
        "data": a.data,
        "format": format,
        "eval_every": a.eval_every,
        "ranks": ranks,
    });
    rec.finish(&a.out_dir.join(MANIFEST_FILE), config, Some(cfg.seed))
}

fn checkpoint_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Config(format!("no .ckpt files under {}", path.display())));
    }
    Ok(v)
}

fn cmd_transplant(a: TransplantArgs, argv: Vec<String>) -> Result<()> {
    let mut rec = Recorder::new("transplant", argv);
    rec.input(&a.input)?;
    let manifest_path = if a.input.is_dir() {
        fs::create_dir_all(&a.out)?;
        for src in checkpoint_files(&a.input)? {
            let dst = a.out.join(src.file_name().expect("checkpoint has a file name"));
            fs::write(&dst, transplant_checkpoint_bytes(&fs::read(&src)?)?)?;
            rec.data(&dst)?;
        }
        a.out.join(MANIFEST_FILE)
    } else {
        let bytes = transplant_checkpoint_bytes(&fs::read(&a.input)?)?;
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(&a.out, bytes)?;
        rec.data(&a.out)?;
        PathBuf::from(format!("{}.manifest.json", a.out.display()))
    };
    println!("transplanted {} -> {}", a.input.display(), a.out.display());
    rec.finish(&manifest_path, config_value(&a), None)
}

/// Split seed of the training run behind `checkpoints`, following one
/// transplant hop.
fn training_split_seed(checkpoints: &Path) -> Option<u64> {
    let dir = if checkpoints.is_dir() {
        checkpoints.to_path_buf()
    } else {
        checkpoints.parent()?.to_path_buf()
    };
    let m = RunManifest::load(&dir.join(MANIFEST_FILE)).ok()?;
    match m.command.as_str() {
        "train" => m.config.get("split_seed")?.as_u64(),
        "transplant" => {
            let src = m.cwd.join(&m.inputs.first()?.path);
            training_split_seed(&src)
        }
        _ => None,
    }
}

fn cmd_eval(a: EvalArgs, argv: Vec<String>) -> Result<()> {
    let ckpts = checkpoint_files(&a.checkpoints)?;
    let trained_seed = training_split_seed(&a.checkpoints);
    let split_seed = match (a.split_seed, trained_seed) {
        (Some(s), Some(t)) if s != t => {
            warn!(
                "split seed {s} differs from the training run's split seed {t}; \
                 test identities may overlap the training set"
            );
            s
        }
        (Some(s), _) => s,
        (None, Some(t)) => t,
        (None, None) => 0,
    };
    let trials = a.trials.unwrap_or(ckpts.len() as u64);
    if trials == 0 {
        return Err(Error::Config("--trials must be positive".into()));
    }
    if ckpts.len() > 1 && (ckpts.len() as u64) < trials {
        return Err(Error::Config(format!(
            "{} checkpoints for {trials} trials",
            ckpts.len()
        )));
    }
    let arch: Option<Arch> = a.arch.as_deref().map(str::parse).transpose()?;
    let format = parse_format(&a.format, &a.data)?;
    let mut rec = Recorder::new("eval", argv);
    rec.input(&a.data)?;
    for c in &ckpts {
        rec.input(c)?;
    }
    let data = load_dataset(&a.data, format, &BTreeSet::new())?;
    let models = ckpts.iter().map(|p| Model::load(p)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out)?;
    let per_trial = pool(a.jobs)?.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|t| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, CmcCurve)> {
                let model = &models[if models.len() == 1 { 0 } else { t as usize }];
                let split = make_split(data.len(), t, split_seed)?;
                let test = subset(&data, &split.test);
                let (p, g) = extract_descriptors(&test, model, arch.unwrap_or(model.arch))?;
                let truth: Vec<usize> = (0..p.len()).collect();
                let curve = evaluation::cmc(&p, &g, &truth)?;
                Ok((p, g, curve))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut curves = Vec::new();
    for (t, (p, g, curve)) in per_trial.into_iter().enumerate() {
        let t = t as u64;
        for (name, rows) in [("probe", &p), ("gallery", &g)] {
            let path = a.out.join(trial_file(name, t, "bin"));
            save_descriptors(&path, rows)?;
            rec.data(&path)?;
        }
        curves.push(curve);
    }
    rec.write_text(&a.out.join("cmc.csv"), &cmc_csv(&curves)?)?;
    rec.write_text(&a.out.join("curves.csv"), &curves_csv(&curves))?;
    let r1 = curves.iter().map(|c| c.at(1)).sum::<f64>() / curves.len() as f64;
    println!(
        "evaluated {trials} trial(s), probe={} gallery={}, mean rank-1 {:.4}",
        CAMERAS[0], CAMERAS[1], r1
    );
    let config = json!({
        "args": a,
        "split_seed": split_seed,
        "trials": trials,
        "probe": CAMERAS[0],
        "gallery": CAMERAS[1],
        "format": format,
    });
    rec.finish(&a.out.join(MANIFEST_FILE), config, Some(split_seed))
}

fn read_curves(p: &Path) -> Result<Vec<CmcCurve>> {
    let file = if p.is_dir() { p.join("curves.csv") } else { p.to_path_buf() };
    parse_curves_csv(&fs::read_to_string(file)?)
}

fn cmd_compare(a: CompareArgs, argv: Vec<String>) -> Result<()> {
    let mut rec = Recorder::new("compare", argv);
    rec.input(&a.a)?;
    rec.input(&a.b)?;
    let cmp = compare_architectures(&read_curves(&a.a)?, &read_curves(&a.b)?)?;
    fs::create_dir_all(&a.out)?;
    rec.write_text(&a.out.join("diff.csv"), &diff_csv(&cmp))?;
    println!(
        "zero inside the 95% interval at {}/{} ranks",
        cmp.ranks_containing_zero(),
        cmp.mean.len()
    );
    rec.finish(&a.out.join(MANIFEST_FILE), config_value(&a), None)
}

fn cmd_rerun(a: RerunArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    if m.command == "rerun" {
        return Err(Error::Config("cannot replay a rerun".into()));
    }
    std::env::set_current_dir(&m.cwd)?;
    if let Some(seed) = m.seed {
        std::env::set_var(SEED_ENV, seed.to_string());
    }
    let mut full = vec!["seqpool".to_string()];
    full.extend(m.argv.iter().cloned());
    let cli = Cli::try_parse_from(&full).map_err(|e| Error::Config(e.to_string()))?;
    run(cli.command, m.argv.clone(), true)?;
    let mut mismatched = Vec::new();
    let mut checked = 0;
    for o in m.data_outputs() {
        checked += 1;
        let now = manifest::hash_file(&m.cwd.join(&o.path)).unwrap_or_default();
        if now != o.sha256 {
            mismatched.push(o.path.display().to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Format(format!(
            "{} data output(s) differ from the manifest: {}",
            mismatched.len(),
            mismatched.join(", ")
        )));
    }
    println!("reproduced {checked} data output(s) bit-exactly");
    Ok(())
}
