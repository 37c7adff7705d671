//! Frame-by-frame propagation with the alpha memory bank.
//!
//! [`Propagator`] runs the per-frame loop on an autograd tape. Training keeps
//! the whole sequence on one tape; inference moves the carried state onto a
//! fresh tape after every frame so memory use stays flat.

use memprop_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{affinity_var, fuse_var, tokens_var, MemoryBank, MemoryBankConfig, TokenVar};
use crate::network::{BoundParams, DecodedFrame, EncodedFrame, MattingModel};
use crate::types::{check_binary, AlphaSequence, VideoClip};

pub const DEFAULT_WARMUP_ITERS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub memory: MemoryBankConfig,
    pub warmup_iters: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            memory: MemoryBankConfig::default(),
            warmup_iters: DEFAULT_WARMUP_ITERS,
        }
    }
}

/// Previous-frame state: key map, value tokens and matte.
#[derive(Clone, Copy, Debug)]
pub struct LastFrameVars {
    pub key: Var,
    pub value: Var,
    pub alpha: Var,
}

/// Everything one propagation step put on the tape.
#[derive(Clone, Debug)]
pub struct StepVars {
    pub encoded: EncodedFrame,
    pub key_tokens: Var,
    /// `None` when the frame has no predecessor or the change map was forced.
    pub change_logits: Option<Var>,
    /// `N×1` change probabilities used for fusion.
    pub change: Var,
    pub queried: Var,
    pub fused: Var,
    pub decoded: DecodedFrame,
    /// Value tokens encoded from the (detached) predicted matte.
    pub value_tokens: Var,
}

pub struct Propagator<'m> {
    model: &'m MattingModel,
    graph: Graph,
    bound: BoundParams,
    trainable: bool,
    bank: MemoryBank<TokenVar>,
    last: Option<LastFrameVars>,
    object: Option<Var>,
    force_change: Option<f64>,
    next_frame: usize,
}

impl<'m> Propagator<'m> {
    /// `trainable` places parameters on the tape as leaves that receive gradients.
    pub fn new(model: &'m MattingModel, memory: MemoryBankConfig, trainable: bool) -> Result<Self> {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph, trainable);
        Ok(Self {
            model,
            graph,
            bound,
            trainable,
            bank: MemoryBank::new(memory)?,
            last: None,
            object: None,
            force_change: None,
            next_frame: 0,
        })
    }

    /// Replaces the predicted change map with a constant on frames after the first.
    pub fn force_change(&mut self, value: Option<f64>) {
        self.force_change = value;
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn bound(&self) -> &BoundParams {
        &self.bound
    }

    pub fn bank(&self) -> &MemoryBank<TokenVar> {
        &self.bank
    }

    fn step(&mut self, enc: &EncodedFrame, keys: Var, values: Var, force: Option<f64>) -> Result<StepVars> {
        let m = self.model;
        let g = &mut self.graph;
        let b = &self.bound;
        let key_tokens = tokens_var(g, enc.key);
        let n = g.shape(key_tokens)[0];
        let affinity = affinity_var(g, key_tokens, keys, m.config().affinity_scale());
        let queried = g.matmul(affinity, values);
        let (change_logits, change, last_value) = match (self.last, force) {
            (None, _) => (None, g.constant(Tensor::ones(&[n, 1])), queried),
            (Some(last), Some(u)) => (None, g.constant(Tensor::full(&[n, 1], u)), last.value),
            (Some(last), None) => {
                let logits = m.change_logits_var(g, b, enc.key, last.key, last.alpha)?;
                let col = g.reshape(logits, &[n, 1]);
                (Some(logits), g.sigmoid(col), last.value)
            }
        };
        let fused = fuse_var(g, queried, last_value, change);
        let object = self.object.ok_or(Error::EmptyMemory)?;
        let (refined, _) = m.object_fusion_var(g, b, fused, object)?;
        let decoded = m.decode_var(g, b, refined, &enc.pyramid)?;
        let alpha = g.detach(decoded.alpha);
        let value = m.encode_value_var(g, b, enc.pyramid.f16, alpha)?;
        let value_tokens = tokens_var(g, value);
        Ok(StepVars {
            encoded: *enc,
            key_tokens,
            change_logits,
            change,
            queried,
            fused,
            decoded,
            value_tokens,
        })
    }

    fn stacked(&mut self) -> Result<(Var, Var)> {
        if self.bank.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let keys: Vec<Var> = self.bank.frames().iter().map(|f| f.key.var).collect();
        let values: Vec<Var> = self.bank.frames().iter().map(|f| f.value.var).collect();
        let k = self.graph.concat(&keys);
        let v = self.graph.concat(&values);
        Ok((k, v))
    }

    /// Seeds memory from the guidance mask and refines frame 0 over `warmup`
    /// repetitions. Returns the step of every repetition; the last one is the
    /// frame-0 prediction.
    pub fn start(&mut self, frame: &Tensor, guidance: &Tensor, warmup: usize) -> Result<Vec<StepVars>> {
        if warmup == 0 {
            return Err(Error::InvalidInput("warm-up needs at least one iteration".into()));
        }
        if self.next_frame != 0 {
            return Err(Error::InvalidInput("propagation already started".into()));
        }
        check_binary(guidance, "guidance mask")?;
        let fs = frame.shape();
        if guidance.shape() != [1, fs[1], fs[2]] {
            return Err(Error::shape("guidance mask", guidance.shape(), &[1, fs[1], fs[2]]));
        }
        if guidance.sum() == 0.0 {
            return Err(Error::InvalidInput("guidance mask selects no target".into()));
        }
        let m = self.model;
        let x = self.graph.constant(frame.clone());
        let enc = m.encode_frame_var(&mut self.graph, &self.bound, x)?;
        let mask = self.graph.constant(guidance.clone());
        let v0 = m.encode_value_var(&mut self.graph, &self.bound, enc.pyramid.f16, mask)?;
        let v0 = tokens_var(&mut self.graph, v0);
        self.object = Some(m.object_token_var(&mut self.graph, v0, guidance)?);
        let k0 = tokens_var(&mut self.graph, enc.key);
        let mut memory_value = v0;
        let mut steps = Vec::with_capacity(warmup);
        for _ in 0..warmup {
            let s = self.step(&enc, k0, memory_value, None)?;
            memory_value = s.value_tokens;
            let alpha = self.graph.detach(s.decoded.alpha);
            self.last = Some(LastFrameVars {
                key: enc.key,
                value: s.value_tokens,
                alpha,
            });
            steps.push(s);
        }
        let tokens = self.graph.shape(k0)[0];
        self.bank.push(
            TokenVar { var: k0, tokens },
            TokenVar {
                var: memory_value,
                tokens,
            },
            0,
        );
        self.next_frame = 1;
        Ok(steps)
    }

    /// Propagates to the next frame.
    pub fn advance(&mut self, frame: &Tensor) -> Result<StepVars> {
        if self.next_frame == 0 {
            return Err(Error::EmptyMemory);
        }
        let t = self.next_frame;
        let x = self.graph.constant(frame.clone());
        let enc = self.model.encode_frame_var(&mut self.graph, &self.bound, x)?;
        let (keys, values) = self.stacked()?;
        let s = self.step(&enc, keys, values, self.force_change)?;
        let tokens = self.graph.shape(s.key_tokens)[0];
        self.bank.update(
            TokenVar {
                var: s.key_tokens,
                tokens,
            },
            TokenVar {
                var: s.value_tokens,
                tokens,
            },
            t,
        )?;
        let alpha = self.graph.detach(s.decoded.alpha);
        self.last = Some(LastFrameVars {
            key: enc.key,
            value: s.value_tokens,
            alpha,
        });
        self.next_frame += 1;
        Ok(s)
    }

    /// Moves the carried state onto a fresh tape, dropping everything else.
    pub fn compact(&mut self) {
        let old = std::mem::take(&mut self.graph);
        let mut g = Graph::new();
        self.bound = self.model.bind(&mut g, self.trainable);
        let mut carry = |v: Var| g.constant(old.value(v).clone());
        let frames: Vec<_> = self.bank.frames().to_vec();
        let mut bank = MemoryBank::new(self.bank.config()).expect("validated config");
        for f in frames {
            bank.push(
                TokenVar {
                    var: carry(f.key.var),
                    tokens: f.key.tokens,
                },
                TokenVar {
                    var: carry(f.value.var),
                    tokens: f.value.tokens,
                },
                f.frame_index,
            );
        }
        self.bank = bank;
        self.last = self.last.map(|l| LastFrameVars {
            key: carry(l.key),
            value: carry(l.value),
            alpha: carry(l.alpha),
        });
        self.object = self.object.map(&mut carry);
        self.graph = g;
    }
}

/// Per-frame values exposed for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTrace {
    /// `N×1` change probabilities used for fusion.
    pub change: Tensor,
    pub queried: Tensor,
    pub fused: Tensor,
    /// Value tokens of the previous frame (equal to `queried` on frame 0).
    pub last_value: Tensor,
    pub value_tokens: Tensor,
    pub memory_frames: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PropagateOptions {
    /// Constant change probability on frames ≥ 1 instead of the predicted one.
    pub force_change: Option<f64>,
    pub trace: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    pub alpha: AlphaSequence,
    /// Matte after every warm-up repetition on frame 0.
    pub warmup_alphas: Vec<Tensor>,
    pub trace: Vec<FrameTrace>,
}

fn trace_of(p: &Propagator, s: &StepVars, last_value: Option<Var>) -> FrameTrace {
    let g = p.graph();
    FrameTrace {
        change: g.value(s.change).clone(),
        queried: g.value(s.queried).clone(),
        fused: g.value(s.fused).clone(),
        last_value: g.value(last_value.unwrap_or(s.queried)).clone(),
        value_tokens: g.value(s.value_tokens).clone(),
        memory_frames: p.bank().frame_indices(),
    }
}

/// Propagates a guidance mask through a clip.
pub fn propagate(
    model: &MattingModel,
    clip: &VideoClip,
    first_mask: &Tensor,
    cfg: &InferenceConfig,
    opts: &PropagateOptions,
) -> Result<Propagation> {
    let mut p = Propagator::new(model, cfg.memory, false)?;
    p.force_change(opts.force_change);
    let steps = p.start(&clip.frame(0), first_mask, cfg.warmup_iters)?;
    let warmup_alphas: Vec<Tensor> = steps
        .iter()
        .map(|s| p.graph().value(s.decoded.alpha).clone())
        .collect();
    let mut alphas = vec![warmup_alphas.last().expect("warm-up ran").clone()];
    let mut trace = Vec::new();
    if opts.trace {
        let prev = (steps.len() > 1).then(|| steps[steps.len() - 2].value_tokens);
        trace.push(trace_of(&p, steps.last().expect("warm-up ran"), prev));
    }
    p.compact();
    for t in 1..clip.len() {
        let prev = p.last.map(|l| l.value);
        let s = p.advance(&clip.frame(t))?;
        alphas.push(p.graph().value(s.decoded.alpha).clone());
        if opts.trace {
            trace.push(trace_of(&p, &s, prev));
        }
        p.compact();
    }
    Ok(Propagation {
        alpha: AlphaSequence::from_frames(&alphas)?,
        warmup_alphas,
        trace,
    })
}

/// Runs only the frame-0 warm-up and returns its final matte.
pub fn warmup_first_frame(model: &MattingModel, frame: &Tensor, first_mask: &Tensor, n: usize) -> Result<Tensor> {
    Ok(warmup_trajectory(model, frame, first_mask, n)?
        .pop()
        .expect("at least one iteration"))
}

/// Mattes after each of the `n` warm-up repetitions.
pub fn warmup_trajectory(model: &MattingModel, frame: &Tensor, first_mask: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let mut p = Propagator::new(model, MemoryBankConfig::default(), false)?;
    let steps = p.start(frame, first_mask, n)?;
    Ok(steps.iter().map(|s| p.graph().value(s.decoded.alpha).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::synthdata::{render_clip, SceneSpec};

    fn fixture(t: usize) -> (MattingModel, VideoClip, Tensor) {
        let model = MattingModel::new(ModelConfig::tiny()).unwrap();
        let r = render_clip(&SceneSpec::random(1, 32, 32, t), t).unwrap();
        (model, r.clip, r.mask.frame(0))
    }

    #[test]
    fn output_shape_and_range() {
        let (model, clip, mask) = fixture(4);
        let cfg = InferenceConfig {
            warmup_iters: 2,
            ..Default::default()
        };
        let out = propagate(&model, &clip, &mask, &cfg, &PropagateOptions::default()).unwrap();
        assert!(out.alpha.matches_clip(&clip));
        assert!(out.alpha.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.warmup_alphas.len(), 2);
    }

    #[test]
    fn single_frame_is_the_warmed_matte() {
        let (model, clip, mask) = fixture(1);
        let cfg = InferenceConfig {
            warmup_iters: 3,
            ..Default::default()
        };
        let out = propagate(&model, &clip, &mask, &cfg, &PropagateOptions::default()).unwrap();
        assert_eq!(out.alpha.len(), 1);
        let w = warmup_first_frame(&model, &clip.frame(0), &mask, 3).unwrap();
        assert_eq!(out.alpha.frame(0), w);
    }

    #[test]
    fn rejects_bad_masks() {
        let (model, clip, mask) = fixture(2);
        let cfg = InferenceConfig::default();
        let o = PropagateOptions::default();
        assert!(propagate(&model, &clip, &Tensor::zeros(mask.shape()), &cfg, &o).is_err());
        assert!(propagate(&model, &clip, &Tensor::ones(&[1, 16, 32]), &cfg, &o).is_err());
        assert!(warmup_first_frame(&model, &clip.frame(0), &mask, 0).is_err());
    }

    #[test]
    fn forced_zero_change_carries_last_value() {
        let (model, clip, mask) = fixture(4);
        let cfg = InferenceConfig {
            warmup_iters: 1,
            ..Default::default()
        };
        let opts = PropagateOptions {
            force_change: Some(0.0),
            trace: true,
        };
        let out = propagate(&model, &clip, &mask, &cfg, &opts).unwrap();
        for t in 1..4 {
            let tr = &out.trace[t];
            assert_eq!(tr.fused, tr.last_value);
            assert_eq!(tr.last_value, out.trace[t - 1].value_tokens);
        }
    }

    #[test]
    fn streaming_matches_single_tape() {
        let (model, clip, mask) = fixture(6);
        let cfg = InferenceConfig {
            memory: MemoryBankConfig {
                interval: 2,
                capacity: 2,
            },
            warmup_iters: 2,
        };
        let out = propagate(&model, &clip, &mask, &cfg, &PropagateOptions::default()).unwrap();
        let mut p = Propagator::new(&model, cfg.memory, true).unwrap();
        let steps = p.start(&clip.frame(0), &mask, 2).unwrap();
        let mut alphas = vec![p.graph().value(steps[1].decoded.alpha).clone()];
        for t in 1..6 {
            let s = p.advance(&clip.frame(t)).unwrap();
            alphas.push(p.graph().value(s.decoded.alpha).clone());
        }
        assert_eq!(p.bank().frame_indices(), vec![0, 4]);
        for (t, a) in alphas.iter().enumerate() {
            assert_eq!(a, &out.alpha.frame(t), "frame {t}");
        }
    }
}
