//! Command-line entry point: `datagen`, `train`, `infer` and `eval`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{benchmark_report, prediction_dir};
use crate::inference::{propagate, InferenceConfig, PropagateOptions};
use crate::io::{
    manifest_path, read_frames, read_json, read_mask_frame, sequence_length, write_alpha, write_json, write_rgb,
    DatasetManifest,
};
use crate::network::MattingModel;
use crate::synthdata::{generate_corpus, CorpusConfig};
use crate::training::{run_stage, TrainConfig, TrainState, TrainingData, LOSS_CSV_HEADER};
use crate::types::{AlphaSequence, Split, VideoClip};

pub const SEED_ENV: &str = "MEMPROP_MATTE_SEED";

#[derive(Debug, Parser)]
#[command(name = "memprop-matte", version, about = "Memory-propagation video matting")]
pub struct Cli {
    /// JSON settings file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Worker threads for per-clip parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Run every parallel section on a single worker.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus and its manifest.
    Datagen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        /// Dataset manifest, or the directory holding it.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stage: u8,
        /// Checkpoint to continue from; required for stages 2 and 3.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to the checkpoint path with a `.losses.csv` extension.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Stop after this many iterations of the stage.
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Propagate a first-frame mask through one clip or every clip of a manifest.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of RGB frames.
        #[arg(long, requires = "mask", conflicts_with = "manifest")]
        clip: Option<PathBuf>,
        /// Binary PNG guidance mask for the first frame.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Dataset manifest; each clip is guided by its first mask frame.
        #[arg(long, required_unless_present = "clip")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        warmup_iters: Option<usize>,
        #[arg(long)]
        memory_interval: Option<usize>,
        /// Also write green-screen composites.
        #[arg(long)]
        preview: bool,
    },
    /// Score predictions against a manifest and write a CSV report.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        core_kernel: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings file. Every command-line flag has a field here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub deterministic: bool,
    pub datagen: CorpusConfig,
    pub train: TrainConfig,
    pub max_iterations: Option<usize>,
    pub inference: InferenceConfig,
    pub core_kernel: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: None,
            jobs: None,
            deterministic: false,
            datagen: CorpusConfig::default(),
            train: TrainConfig::default(),
            max_iterations: None,
            inference: InferenceConfig::default(),
            core_kernel: 7,
        }
    }
}

impl Settings {
    /// Settings file (or defaults) with the command-line flags applied on top.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut s: Settings = match &cli.config {
            Some(p) => read_json(p)?,
            None => Settings::default(),
        };
        if cli.seed.is_some() {
            s.seed = cli.seed;
        }
        if let Some(seed) = s.seed {
            s.datagen.seed = seed;
            s.train.seed = seed;
        }
        if cli.jobs.is_some() {
            s.jobs = cli.jobs;
        }
        s.deterministic |= cli.deterministic;
        match &cli.command {
            Command::Train { max_iterations, .. } if max_iterations.is_some() => s.max_iterations = *max_iterations,
            Command::Infer {
                warmup_iters,
                memory_interval,
                ..
            } => {
                if let Some(n) = warmup_iters {
                    s.inference.warmup_iters = *n;
                }
                if let Some(r) = memory_interval {
                    s.inference.memory.interval = *r;
                }
            }
            Command::Eval {
                core_kernel: Some(k), ..
            } => s.core_kernel = *k,
            _ => {}
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == Some(0) {
            return Err(Error::config("jobs", "must be ≥ 1"));
        }
        if self.inference.warmup_iters == 0 {
            return Err(Error::config("inference.warmup_iters", "must be ≥ 1"));
        }
        if self.inference.memory.interval == 0 {
            return Err(Error::config("inference.memory.interval", "must be ≥ 1"));
        }
        if self.inference.memory.capacity < 2 {
            return Err(Error::config("inference.memory.capacity", "must be ≥ 2"));
        }
        if self.core_kernel % 2 == 0 {
            return Err(Error::config("core_kernel", "must be odd"));
        }
        self.train.validate()
    }

    fn threads(&self) -> Option<usize> {
        if self.deterministic {
            Some(1)
        } else {
            self.jobs
        }
    }
}

fn resolve_manifest(p: &Path) -> (PathBuf, PathBuf) {
    if p.is_dir() {
        (manifest_path(p), p.to_path_buf())
    } else {
        let root = p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (p.to_path_buf(), root)
    }
}

fn default_loss_csv(out: &Path) -> PathBuf {
    out.with_extension("losses.csv")
}

/// Parses arguments, runs the command and maps the outcome to an exit status:
/// 0 on success, 1 on user errors, 2 on internal failures.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(2),
    }
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let settings = Settings::resolve(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = settings.threads() {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    pool.install(|| dispatch(cli, &settings))
}

fn dispatch(cli: &Cli, s: &Settings) -> Result<ExitCode> {
    match &cli.command {
        Command::Datagen { out } => {
            let m = generate_corpus(&s.datagen, out)?;
            info!("wrote {} clips (seed {}) to {}", m.clips.len(), m.seed, out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            manifest,
            stage,
            init,
            out,
            loss_csv,
            ..
        } => {
            train(s, manifest, *stage, init.as_deref(), out, loss_csv.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer {
            checkpoint,
            clip,
            mask,
            manifest,
            split,
            out,
            preview,
            ..
        } => {
            let model = Checkpoint::load(checkpoint)?.model;
            match (clip, mask, manifest) {
                (Some(c), Some(m), _) => infer_dir(&model, s, c, m, out, *preview)?,
                (None, _, Some(m)) => infer_manifest(&model, s, m, split.map(Split::from), out, *preview)?,
                _ => return Err(Error::InvalidInput("pass --clip with --mask, or --manifest".into())),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            manifest,
            predictions,
            split,
            out,
            ..
        } => {
            let (path, root) = resolve_manifest(manifest);
            let mut m = DatasetManifest::load(&path)?;
            if let Some(sp) = split {
                let sp = Split::from(*sp);
                m.clips.retain(|c| c.split == sp);
            }
            let report = benchmark_report(&m, &root, predictions, s.core_kernel);
            crate::io::write_bytes(out, report.to_csv().as_bytes())?;
            for r in &report.rows {
                if let Err(e) = &r.result {
                    eprintln!("error: clip {}: {e}", r.clip_id);
                }
            }
            Ok(if report.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn train(
    s: &Settings,
    manifest: &Path,
    stage: u8,
    init: Option<&Path>,
    out: &Path,
    loss_csv: Option<&Path>,
) -> Result<()> {
    let cfg = &s.train;
    let stage_cfg = cfg.stage(stage)?.clone();
    let (model, state) = match init {
        None if stage == 1 => {
            let model = MattingModel::new(cfg.model.clone())?;
            let state = TrainState::new(1, &model, cfg.seed);
            (model, state)
        }
        None => {
            return Err(Error::InvalidInput(format!(
                "stage {stage} continues from a stage-{} checkpoint; pass it with --init",
                stage - 1
            )))
        }
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let prior = ck.state.as_ref().map(|st| st.stage);
            match prior {
                Some(ps) if ps == stage => {
                    info!("resuming stage {stage} at iteration {}", ck.state.as_ref().map_or(0, |st| st.iteration));
                    (ck.model, ck.state.expect("checked"))
                }
                Some(ps) if ps + 1 == stage => {
                    let state = TrainState::new(stage, &ck.model, cfg.seed);
                    (ck.model, state)
                }
                None if stage == 1 => {
                    let state = TrainState::new(1, &ck.model, cfg.seed);
                    (ck.model, state)
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{} holds {}; stage {stage} needs a stage-{} checkpoint",
                        p.display(),
                        prior.map_or("untrained weights".to_string(), |ps| format!("a stage-{ps} state")),
                        stage - 1
                    )))
                }
            }
        }
    };
    let (path, root) = resolve_manifest(manifest);
    let dataset = DatasetManifest::load(&path)?;
    let data = TrainingData::load(&dataset, &root)?;
    let csv_path = loss_csv.map_or_else(|| default_loss_csv(out), Path::to_path_buf);
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    let (mut model, mut state) = (model, state);
    let until = s.max_iterations.map(|n| state.iteration + n);
    run_stage(&mut model, &mut state, &data, cfg, &stage_cfg, until, |r| {
        writeln!(csv, "{}", r.csv_row()).map_err(|e| Error::io(&csv_path, e))
    })?;
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    Checkpoint {
        model,
        state: Some(state),
        train_config: Some(cfg.clone()),
    }
    .save(out)?;
    info!("saved {} and {}", out.display(), csv_path.display());
    Ok(())
}

fn write_outputs(out: &Path, clip: &VideoClip, alpha: &AlphaSequence, preview: bool) -> Result<()> {
    write_alpha(&out.join("alpha"), alpha)?;
    if preview {
        let dir = out.join("preview");
        for t in 0..clip.len() {
            let a = alpha.frame(t);
            let f = clip.frame(t);
            let [h, w] = alpha.frame_shape();
            let comp = memprop_autograd::Tensor::from_fn(&[3, h, w], |i| {
                let (c, p) = (i / (h * w), i % (h * w));
                let green = if c == 1 { 1.0 } else { 0.0 };
                let al = a.data()[p];
                al * f.data()[i] + (1.0 - al) * green
            });
            write_rgb(&dir.join(crate::io::frame_file_name(t)), &comp)?;
        }
    }
    Ok(())
}

fn infer_dir(model: &MattingModel, s: &Settings, clip_dir: &Path, mask: &Path, out: &Path, preview: bool) -> Result<()> {
    let clip = read_frames(clip_dir, sequence_length(clip_dir)?)?;
    let mask = read_mask_frame(mask)?;
    let p = propagate(model, &clip, &mask, &s.inference, &PropagateOptions::default())?;
    write_outputs(out, &clip, &p.alpha, preview)?;
    write_json(&out.join("inference.json"), &s.inference)
}

fn infer_manifest(
    model: &MattingModel,
    s: &Settings,
    manifest: &Path,
    split: Option<Split>,
    out: &Path,
    preview: bool,
) -> Result<()> {
    let (path, root) = resolve_manifest(manifest);
    let m = DatasetManifest::load(&path)?;
    let clips: Vec<_> = m.clips.iter().filter(|c| split.is_none_or(|sp| c.split == sp)).collect();
    clips.par_iter().try_for_each(|c| -> Result<()> {
        let loaded = c.load(&root)?;
        let mask = loaded
            .mask
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("clip {} has no mask stream for guidance", c.clip_id)))?
            .frame(0);
        let p = propagate(model, &loaded.clip, &mask, &s.inference, &PropagateOptions::default())?;
        let dir = prediction_dir(out, &c.clip_id);
        let clip_root = dir.parent().expect("prediction dir has a parent");
        write_outputs(clip_root, &loaded.clip, &p.alpha, preview)
    })?;
    write_json(&out.join("inference.json"), &s.inference)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("memprop-matte").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_settings_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("s.json");
        std::fs::write(
            &cfg,
            r#"{"seed": 3, "jobs": 2, "inference": {"warmup_iters": 4, "memory": {"interval": 2}}, "core_kernel": 9, "max_iterations": 5}"#,
        )
        .unwrap();
        let c = cfg.to_str().unwrap();
        let from_file = Settings::resolve(&parse(&["--config", c, "eval", "--manifest", "m", "--predictions", "p", "--out", "o"])).unwrap();
        assert_eq!((from_file.seed, from_file.jobs, from_file.core_kernel), (Some(3), Some(2), 9));
        assert_eq!(from_file.train.seed, 3);
        assert_eq!(from_file.datagen.seed, 3);

        let s = Settings::resolve(&parse(&[
            "--config", c, "--seed", "11", "--jobs", "1", "eval", "--manifest", "m", "--predictions", "p", "--out",
            "o", "--core-kernel", "21",
        ]))
        .unwrap();
        assert_eq!((s.seed, s.jobs, s.core_kernel, s.train.seed), (Some(11), Some(1), 21, 11));

        let s = Settings::resolve(&parse(&[
            "--config", c, "infer", "--checkpoint", "k", "--manifest", "m", "--out", "o", "--warmup-iters", "10",
            "--memory-interval", "5",
        ]))
        .unwrap();
        assert_eq!((s.inference.warmup_iters, s.inference.memory.interval), (10, 5));

        let s = Settings::resolve(&parse(&[
            "--config", c, "--deterministic", "train", "--manifest", "m", "--stage", "1", "--out", "o",
            "--max-iterations", "7",
        ]))
        .unwrap();
        assert_eq!(s.max_iterations, Some(7));
        assert!(s.deterministic);
        assert_eq!(s.threads(), Some(1));
    }

    #[test]
    fn bad_settings_report_field_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("s.json");
        std::fs::write(&cfg, r#"{"datagen": {"frames": "many"}}"#).unwrap();
        let err = Settings::resolve(&parse(&["--config", cfg.to_str().unwrap(), "datagen", "--out", "x"]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("datagen.frames"), "{err}");
    }
}
