//! Staged training: data routing, loss composition and the optimizer loop.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use memprop_autograd::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Propagator;
use crate::io::{DatasetManifest, LoadedClip};
use crate::losses::{
    change_mask_var, core_supervision_var, l1_var, laplacian_var, segmentation_var, temporal_coherence_var,
    DdcConfig, LossWeights,
};
use crate::memory::{default_change_delta, ground_truth_change_mask, MemoryBankConfig};
use crate::network::{MattingModel, ModelConfig};
use crate::synthdata::{augment_given_mask, motion_sequence, sample_training_sequence, AugmentationSpec};
use crate::types::{binarize_alpha, trimap_from_segmask, DataKind, Split};

/// Source of matting sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MattingSource {
    /// Windows of matting video clips.
    Video,
    /// Single matting frames turned into sequences by motion augmentation.
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationSources {
    pub image: bool,
    pub video: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnabledLosses {
    pub matting: bool,
    pub segmentation: bool,
    pub core_supervision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sequence_length: usize,
    /// Iteration from which `long_sequence_length` is used.
    pub long_from: usize,
    pub long_sequence_length: usize,
    pub max_interval: usize,
    pub long_max_interval: usize,
    pub matting_source: MattingSource,
    pub segmentation_sources: SegmentationSources,
    pub losses: EnabledLosses,
}

/// Paper budgets per stage, in iterations.
const PAPER_ITERATIONS: [usize; 3] = [85_000, 40_000, 5_000];
const PAPER_SHORT_PHASE: usize = 80_000;
const PAPER_LR: [f64; 3] = [1e-4, 1e-5, 1e-6];

impl StageConfig {
    /// The stage with its iteration budgets multiplied by `scale`.
    pub fn scaled(stage: u8, scale: f64) -> Result<Self> {
        if !(1..=3).contains(&stage) {
            return Err(Error::config("stage", format!("must be 1, 2 or 3, got {stage}")));
        }
        let i = usize::from(stage - 1);
        let iterations = (PAPER_ITERATIONS[i] as f64 * scale).round() as usize;
        let long_from = if stage == 1 {
            (PAPER_SHORT_PHASE as f64 * scale).round() as usize
        } else {
            0
        };
        Ok(Self {
            stage,
            iterations,
            lr: PAPER_LR[i],
            weight_decay: 0.001,
            sequence_length: 3,
            long_from,
            long_sequence_length: 8,
            max_interval: 2,
            long_max_interval: 3,
            matting_source: if stage == 3 {
                MattingSource::Image
            } else {
                MattingSource::Video
            },
            segmentation_sources: SegmentationSources {
                image: true,
                video: true,
            },
            losses: EnabledLosses {
                matting: true,
                segmentation: true,
                core_supervision: stage >= 2,
            },
        })
    }

    /// Desk-scale stage: paper budgets ×1/100.
    pub fn desk(stage: u8) -> Result<Self> {
        Self::scaled(stage, 0.01)
    }

    pub fn validate(&self) -> Result<()> {
        let p = |f: &str| format!("stages[{}].{f}", self.stage);
        if !(1..=3).contains(&self.stage) {
            return Err(Error::config(p("stage"), "must be 1, 2 or 3"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(p("lr"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(p("weight_decay"), "must be ≥ 0"));
        }
        for (name, len) in [
            ("sequence_length", self.sequence_length),
            ("long_sequence_length", self.long_sequence_length),
        ] {
            if !(1..=8).contains(&len) {
                return Err(Error::config(p(name), "must be in 1..=8"));
            }
        }
        if self.max_interval == 0 || self.long_max_interval == 0 {
            return Err(Error::config(p("max_interval"), "must be ≥ 1"));
        }
        if self.stage >= 2 && !self.losses.core_supervision {
            return Err(Error::config(p("losses.core_supervision"), "stages 2 and 3 use core supervision"));
        }
        if self.stage == 1 && self.losses.core_supervision {
            return Err(Error::config(p("losses.core_supervision"), "stage 1 has no core supervision"));
        }
        if self.stage == 3 && self.matting_source != MattingSource::Image {
            return Err(Error::config(p("matting_source"), "stage 3 trains on image matting data"));
        }
        Ok(())
    }

    /// Sequence length and maximum frame gap at a given iteration.
    pub fn window_at(&self, iteration: usize) -> (usize, usize) {
        if iteration >= self.long_from {
            (self.long_sequence_length, self.long_max_interval)
        } else {
            (self.sequence_length, self.max_interval)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Matting batches per segmentation batch.
    pub matting_per_segmentation: usize,
    pub model: ModelConfig,
    pub memory: MemoryBankConfig,
    pub loss_weights: LossWeights,
    pub ddc: DdcConfig,
    pub augmentation: AugmentationSpec,
    /// Trimap kernel separating core from boundary for core supervision.
    pub core_kernel: usize,
    /// Threshold (0–255) turning matting GT into the first-frame guidance.
    pub guidance_threshold: u32,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            matting_per_segmentation: 1,
            model: ModelConfig::default(),
            memory: MemoryBankConfig::default(),
            loss_weights: LossWeights::default(),
            ddc: DdcConfig::default(),
            augmentation: AugmentationSpec::default(),
            core_kernel: 5,
            guidance_threshold: 50,
            stages: (1..=3).map(|s| StageConfig::desk(s).expect("valid stage")).collect(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be ≥ 1"));
        }
        if self.matting_per_segmentation == 0 {
            return Err(Error::config("matting_per_segmentation", "must be ≥ 1"));
        }
        if self.core_kernel % 2 == 0 {
            return Err(Error::config("core_kernel", "must be odd"));
        }
        if self.guidance_threshold > 255 {
            return Err(Error::config("guidance_threshold", "must be in 0..=255"));
        }
        self.model.validate()?;
        self.loss_weights.validate()?;
        self.ddc.validate()?;
        self.augmentation.validate()?;
        for s in &self.stages {
            s.validate()?;
        }
        Ok(())
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| Error::config("stages", format!("no configuration for stage {stage}")))
    }
}

/// Losses applied to one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSet {
    pub matting: bool,
    pub segmentation: bool,
    pub core_supervision: bool,
    pub change_mask: bool,
}

/// Which losses a batch of `kind` receives in `stage`.
pub fn route_batch(kind: DataKind, stage: &StageConfig) -> LossSet {
    match kind {
        DataKind::Matting => LossSet {
            matting: stage.losses.matting,
            segmentation: false,
            core_supervision: false,
            change_mask: true,
        },
        DataKind::Segmentation => LossSet {
            matting: false,
            segmentation: stage.losses.segmentation,
            core_supervision: stage.losses.core_supervision,
            change_mask: true,
        },
    }
}

/// One training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub kind: DataKind,
    pub frames: Vec<Tensor>,
    /// GT alpha per frame (matting samples).
    pub alpha: Option<Vec<Tensor>>,
    /// Binary masks per frame (segmentation samples).
    pub masks: Option<Vec<Tensor>>,
    pub guidance: Tensor,
}

/// Training clips grouped by data kind.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub matting: Vec<LoadedClip>,
    pub segmentation: Vec<LoadedClip>,
}

impl TrainingData {
    pub fn load(manifest: &DatasetManifest, root: &Path) -> Result<Self> {
        let mut matting = Vec::new();
        let mut segmentation = Vec::new();
        for c in manifest.split(Split::Train) {
            let loaded = c.load(root)?;
            match c.data_kind {
                DataKind::Matting => matting.push(loaded),
                DataKind::Segmentation => segmentation.push(loaded),
            }
        }
        Ok(Self { matting, segmentation })
    }

    fn check_for(&self, stage: &StageConfig) -> Result<()> {
        if stage.losses.matting && self.matting.is_empty() {
            return Err(Error::InvalidInput(format!("stage {} needs matting clips", stage.stage)));
        }
        let wants_seg = stage.losses.segmentation || stage.losses.core_supervision;
        if wants_seg && self.segmentation.is_empty() {
            return Err(Error::InvalidInput(format!("stage {} needs segmentation clips", stage.stage)));
        }
        if !stage.losses.matting && !wants_seg {
            return Err(Error::InvalidInput(format!("stage {} has an empty data mix", stage.stage)));
        }
        Ok(())
    }
}

fn binarize_half(t: &Tensor) -> Tensor {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

fn draw_sample(
    data: &TrainingData,
    kind: DataKind,
    stage: &StageConfig,
    iteration: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let (len, max_gap) = stage.window_at(iteration);
    let pool = match kind {
        DataKind::Matting => &data.matting,
        DataKind::Segmentation => &data.segmentation,
    };
    let clip = &pool[rng.random_range(0..pool.len())];
    let from_image = match kind {
        DataKind::Matting => stage.matting_source == MattingSource::Image,
        DataKind::Segmentation => match (stage.segmentation_sources.image, stage.segmentation_sources.video) {
            (true, true) => rng.random_bool(0.5),
            (image, _) => image,
        },
    };
    let target = |t: usize| -> Result<Tensor> {
        match kind {
            DataKind::Matting => clip
                .alpha
                .as_ref()
                .map(|a| a.frame(t))
                .ok_or_else(|| Error::InvalidInput(format!("{} has no alpha", clip.manifest.clip_id))),
            DataKind::Segmentation => clip
                .mask
                .as_ref()
                .map(|m| m.frame(t))
                .ok_or_else(|| Error::InvalidInput(format!("{} has no mask", clip.manifest.clip_id))),
        }
    };
    let (frames, targets) = if from_image {
        let t = rng.random_range(0..clip.clip.len());
        let (c, a) = motion_sequence(&clip.clip.frame(t), &target(t)?, len, &cfg.augmentation.motion, rng)?;
        let targets = a.frames();
        let targets = match kind {
            DataKind::Matting => targets,
            DataKind::Segmentation => targets.iter().map(binarize_half).collect(),
        };
        ((0..len).map(|i| c.frame(i)).collect::<Vec<_>>(), targets)
    } else {
        let mut idx = sample_training_sequence(clip.clip.len(), len, max_gap, rng)?;
        if rng.random_bool(cfg.augmentation.temporal.reverse_prob) {
            idx.reverse();
        }
        let frames = idx.iter().map(|&t| clip.clip.frame(t)).collect();
        let targets = idx.iter().map(|&t| target(t)).collect::<Result<Vec<_>>>()?;
        (frames, targets)
    };
    let raw_guidance = match kind {
        DataKind::Matting => binarize_alpha(&targets[0], cfg.guidance_threshold)?,
        DataKind::Segmentation => targets[0].clone(),
    };
    let (mut guidance, _) = augment_given_mask(&raw_guidance, &cfg.augmentation.morphology, rng)?;
    if guidance.sum() == 0.0 {
        guidance = raw_guidance;
    }
    if guidance.sum() == 0.0 {
        // target not visible on the first frame: fall back to its soft footprint
        guidance = binarize_half(&targets[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    }
    Ok(match kind {
        DataKind::Matting => Sample {
            kind,
            frames,
            alpha: Some(targets),
            masks: None,
            guidance,
        },
        DataKind::Segmentation => Sample {
            kind,
            frames,
            alpha: None,
            masks: Some(targets),
            guidance,
        },
    })
}

/// Per-term loss values of one batch (zero where a term is not routed).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub laplacian: f64,
    pub temporal: f64,
    pub segmentation: f64,
    pub core: f64,
    pub boundary: f64,
    pub change: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += s * o.total;
        self.l1 += s * o.l1;
        self.laplacian += s * o.laplacian;
        self.temporal += s * o.temporal;
        self.segmentation += s * o.segmentation;
        self.core += s * o.core;
        self.boundary += s * o.boundary;
        self.change += s * o.change;
    }
}

fn mean_of(p: &mut Propagator, vars: &[Var]) -> Option<Var> {
    let g = p.graph_mut();
    let (&first, rest) = vars.split_first()?;
    let mut acc = first;
    for &v in rest {
        acc = g.add(acc, v);
    }
    Some(g.scale(acc, 1.0 / vars.len() as f64))
}

/// Runs one sample through the model and returns its losses and parameter gradients.
pub fn sequence_loss(
    model: &MattingModel,
    sample: &Sample,
    losses: LossSet,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut p = Propagator::new(model, cfg.memory, true)?;
    let first = p.start(&sample.frames[0], &sample.guidance, 1)?.pop().expect("one step");
    let mut steps = vec![first];
    for f in &sample.frames[1..] {
        steps.push(p.advance(f)?);
    }
    let alphas: Vec<Var> = steps.iter().map(|s| s.decoded.alpha).collect();
    let w = cfg.loss_weights;
    let mut out = LossBreakdown::default();
    let mut terms: Vec<Var> = Vec::new();
    let targets: &[Tensor] = match sample.kind {
        DataKind::Matting => sample.alpha.as_deref().ok_or(Error::InvalidInput("matting sample without alpha".into()))?,
        DataKind::Segmentation => sample.masks.as_deref().ok_or(Error::InvalidInput("segmentation sample without masks".into()))?,
    };
    if losses.matting {
        let mut l1s = Vec::new();
        let mut laps = Vec::new();
        for (a, gt) in alphas.iter().zip(targets) {
            l1s.push(l1_var(p.graph_mut(), *a, gt)?);
            laps.push(laplacian_var(p.graph_mut(), *a, gt)?);
        }
        let l1 = mean_of(&mut p, &l1s).expect("frames");
        let lap = mean_of(&mut p, &laps).expect("frames");
        out.l1 = p.graph().value(l1).item();
        out.laplacian = p.graph().value(lap).item();
        terms.push(l1);
        terms.push(p.graph_mut().scale(lap, w.w_lap));
        if alphas.len() >= 2 {
            let tc = temporal_coherence_var(p.graph_mut(), &alphas, targets)?;
            out.temporal = p.graph().value(tc).item();
            terms.push(p.graph_mut().scale(tc, w.w_tc));
        }
    }
    if losses.segmentation {
        let mut segs = Vec::new();
        for (s, gt) in steps.iter().zip(targets) {
            segs.push(segmentation_var(p.graph_mut(), s.decoded.seg_logits, gt)?);
        }
        let seg = mean_of(&mut p, &segs).expect("frames");
        out.segmentation = p.graph().value(seg).item();
        terms.push(seg);
    }
    if losses.core_supervision {
        let (mut cores, mut bounds, mut totals) = (Vec::new(), Vec::new(), Vec::new());
        for ((a, gt), frame) in alphas.iter().zip(targets).zip(&sample.frames) {
            let part = trimap_from_segmask(gt, cfg.core_kernel)?;
            if part.core_count() == 0 {
                debug!("skipping core supervision on a frame without core pixels");
                continue;
            }
            let cs = core_supervision_var(p.graph_mut(), *a, gt, frame, &part, &cfg.ddc, &w)?;
            cores.push(cs.core);
            bounds.push(cs.boundary);
            totals.push(cs.total);
        }
        if let Some(total) = mean_of(&mut p, &totals) {
            let core = mean_of(&mut p, &cores).expect("same length");
            let boundary = mean_of(&mut p, &bounds).expect("same length");
            out.core = p.graph().value(core).item();
            out.boundary = p.graph().value(boundary).item();
            terms.push(total);
        }
    }
    if losses.change_mask && steps.len() >= 2 {
        let delta = default_change_delta(sample.kind);
        let mut changes = Vec::new();
        for t in 1..steps.len() {
            let logits = steps[t].change_logits.expect("predicted change on frames ≥ 1");
            let gt = ground_truth_change_mask(&targets[t - 1], &targets[t], delta, sample.kind)?;
            changes.push(change_mask_var(p.graph_mut(), logits, &gt)?);
        }
        let change = mean_of(&mut p, &changes).expect("frames");
        out.change = p.graph().value(change).item();
        terms.push(change);
    }
    let total = match mean_of(&mut p, &terms) {
        Some(m) => p.graph_mut().scale(m, terms.len() as f64),
        None => return Err(Error::InvalidInput("no losses routed to this batch".into())),
    };
    out.total = p.graph().value(total).item();
    let mut grads = p.graph().backward(total);
    let params: Vec<Tensor> = p
        .bound()
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((out, params))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g) = (p.data_mut(), g.data());
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + self.eps) + weight_decay * p[i]);
            }
        }
    }
}

pub const RUNNING_WINDOW: usize = 100;

/// Optimizer, RNG and progress within a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: u8,
    pub iteration: usize,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub recent_totals: VecDeque<f64>,
}

impl TrainState {
    /// Fresh state for a stage: zeroed moments and a stage-specific RNG stream.
    pub fn new(stage: u8, model: &MattingModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(stage));
        Self {
            stage,
            iteration: 0,
            optimizer: AdamW::new(model.params().tensors()),
            rng,
            recent_totals: VecDeque::new(),
        }
    }

    pub fn running_mean(&self) -> Option<f64> {
        (!self.recent_totals.is_empty())
            .then(|| self.recent_totals.iter().sum::<f64>() / self.recent_totals.len() as f64)
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub stage: u8,
    pub iteration: usize,
    pub kind: DataKind,
    pub sequence_length: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "stage,iteration,data_kind,sequence_length,total,l1,laplacian,temporal,segmentation,core,boundary,change,lr";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let kind = match self.kind {
            DataKind::Matting => "matting",
            DataKind::Segmentation => "segmentation",
        };
        let mut s = format!("{},{},{kind},{}", self.stage, self.iteration, self.sequence_length);
        for v in [
            l.total,
            l.l1,
            l.laplacian,
            l.temporal,
            l.segmentation,
            l.core,
            l.boundary,
            l.change,
            self.lr,
        ] {
            let _ = write!(s, ",{v:e}");
        }
        s
    }
}

/// Data kind of the batch at `iteration`.
pub fn batch_kind(iteration: usize, stage: &StageConfig, cfg: &TrainConfig) -> DataKind {
    let has_seg = stage.losses.segmentation || stage.losses.core_supervision;
    if !stage.losses.matting {
        return DataKind::Segmentation;
    }
    if !has_seg {
        return DataKind::Matting;
    }
    if iteration % (cfg.matting_per_segmentation + 1) < cfg.matting_per_segmentation {
        DataKind::Matting
    } else {
        DataKind::Segmentation
    }
}

/// Runs a stage from `state.iteration` up to its budget (or `until`, if smaller),
/// calling `on_record` after every iteration.
pub fn run_stage(
    model: &mut MattingModel,
    state: &mut TrainState,
    data: &TrainingData,
    cfg: &TrainConfig,
    stage: &StageConfig,
    until: Option<usize>,
    mut on_record: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<()> {
    stage.validate()?;
    if state.stage != stage.stage {
        return Err(Error::Checkpoint(format!(
            "training state belongs to stage {}, not stage {}",
            state.stage, stage.stage
        )));
    }
    if model.config() != &cfg.model {
        return Err(Error::config("model", "model configuration differs from the training configuration"));
    }
    data.check_for(stage)?;
    let end = until.map_or(stage.iterations, |u| u.min(stage.iterations));
    while state.iteration < end {
        let it = state.iteration;
        let kind = batch_kind(it, stage, cfg);
        let routed = route_batch(kind, stage);
        let (len, _) = stage.window_at(it);
        let mut batch = LossBreakdown::default();
        let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let sample = draw_sample(data, kind, stage, it, cfg, &mut state.rng)?;
            let (l, g) = sequence_loss(model, &sample, routed, cfg)?;
            batch.add_scaled(&l, scale);
            for (acc, g) in grads.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
        if !batch.total.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss at stage {} iteration {it}", stage.stage)));
        }
        state
            .optimizer
            .update(model.params_mut().tensors_mut(), &grads, stage.lr, stage.weight_decay);
        state.iteration += 1;
        state.recent_totals.push_back(batch.total);
        if state.recent_totals.len() > RUNNING_WINDOW {
            state.recent_totals.pop_front();
        }
        let record = LossRecord {
            stage: stage.stage,
            iteration: it,
            kind,
            sequence_length: len,
            losses: batch,
            lr: stage.lr,
        };
        if it % 50 == 0 {
            info!(
                "stage {} iter {it}: {:?} loss {:.5} (running {:.5})",
                stage.stage,
                kind,
                batch.total,
                state.running_mean().unwrap_or(f64::NAN)
            );
        }
        on_record(&record)?;
    }
    Ok(())
}
