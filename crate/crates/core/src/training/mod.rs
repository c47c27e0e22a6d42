//! Model assembly, the optimization loop with staged backend freezing,
//! evaluation, and checkpoints.

pub mod checkpoint;
pub mod optim;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::backend::{best_permutation_errors, Backend, BackendConfig, Hypothesis, LossTerms};
use crate::dsp::{ComplexSpectrogram, GlobalStats, MelFilterbank};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, FrontendConfig};
use crate::numerics::{Graph, ParamGroup, ParamId, ParamStore, Var};

pub use checkpoint::{config_digest, read_checkpoint, save_checkpoint, Checkpoint, ConfigDigest};
pub use optim::{adam_step, clip_grad_norm, noam_lr, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Present for multi-channel models.
    #[serde(default)]
    pub frontend: Option<FrontendConfig>,
    pub backend: BackendConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    /// Backend-only epochs on clean single-speaker references, run before
    /// `epochs`.
    pub pretrain_epochs: usize,
    /// Noam scale `k` during pretraining.
    pub pretrain_lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub freeze_backend_epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub dropout: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            pretrain_epochs: 0,
            pretrain_lr_scale: 1.0,
            epochs: 30,
            batch_size: 8,
            warmup: 800,
            lr_scale: 1.0,
            freeze_backend_epochs: 15,
            seed: 0,
            clip_norm: 5.0,
            dropout: 0.0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 || self.batch_size == 0 {
            return Err(Error::Config("warmup and batch size must be at least 1".into()));
        }
        if self.freeze_backend_epochs > self.epochs {
            return Err(Error::Config(format!("freeze_backend_epochs {} exceeds epochs {}", self.freeze_backend_epochs, self.epochs)));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.lr_scale < 0.0 || self.pretrain_lr_scale < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("dropout must be in [0, 1), lr scale ≥ 0, clip norm > 0".into()));
        }
        Ok(())
    }
}

/// What the model consumes for one utterance.
#[derive(Clone, Debug)]
pub enum ModelInput {
    /// `T × n_mels` normalized log-mel features of one channel.
    Features { frames: usize, values: Vec<f64> },
    /// Multi-channel STFT for the beamforming frontend.
    Spectrogram(Arc<ComplexSpectrogram<f64>>),
}

#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub input: ModelInput,
    /// One reference per speaker.
    pub refs: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore<f64>,
    pub frontend: Option<Frontend<f64>>,
    pub backend: Backend,
}

impl Model {
    pub fn new(cfg: ModelConfig, bins: usize, mel: MelFilterbank<f64>, stats: GlobalStats, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let frontend = match &cfg.frontend {
            Some(f) => Some(Frontend::new(&mut store, f.clone(), cfg.backend.speakers, bins, mel, stats, &mut rng)?),
            None => None,
        };
        let backend = Backend::new(&mut store, cfg.backend.clone(), &mut rng)?;
        Ok(Self { cfg, store, frontend, backend })
    }

    pub fn digest(&self) -> ConfigDigest {
        config_digest(&serde_json::to_string(&self.cfg).expect("config serializes"))
    }

    /// Encoded streams: one per reference for single-stream features, one
    /// per speaker otherwise.
    pub fn streams(&self, g: &mut Graph<f64>, input: &ModelInput, refs: usize, drop: &mut Dropout) -> Result<Vec<Var>> {
        let store = &self.store;
        match input {
            ModelInput::Spectrogram(x) => {
                let fe = self.frontend.as_ref().ok_or_else(|| Error::Config("multi-channel input needs a frontend".into()))?;
                let out = fe.forward(g, store, x, drop)?;
                out.features.iter().map(|&f| self.backend.encode_stream(g, store, f, drop)).collect()
            }
            ModelInput::Features { frames, values } => {
                let o = g.constant(&[*frames, self.cfg.backend.n_mels], values.clone());
                if refs == 1 {
                    Ok(vec![self.backend.encode_stream(g, store, o, drop)?])
                } else {
                    self.backend.encode_single_channel(g, store, o, drop)
                }
            }
        }
    }

    pub fn loss(&self, g: &mut Graph<f64>, ex: &Example, drop: &mut Dropout) -> Result<(Var, LossTerms)> {
        let streams = self.streams(g, &ex.input, ex.refs.len(), drop)?;
        self.backend.pit_joint_loss(g, &self.store, &streams, &ex.refs, drop)
    }

    /// One hypothesis per stream.
    pub fn recognize(&self, input: &ModelInput, streams: usize, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
        let mut g = Graph::new();
        let enc = self.streams(&mut g, input, streams, &mut Dropout::off())?;
        enc.into_iter().map(|m| self.backend.decode(&mut g, &self.store, m, beam, max_len)).collect()
    }

    fn active(&self, frozen: bool) -> Vec<bool> {
        self.store.iter().map(|(_, p)| !(frozen && p.group == ParamGroup::Backend)).collect()
    }
}

/// Averages over one epoch plus held-out token error rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_ctc: f64,
    pub loss_att: f64,
    pub loss_joint: f64,
    pub ter: f64,
    pub backend_frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { beam: 4, max_len: 12 }
    }
}

type Grads = Vec<(ParamId, Vec<f64>)>;

fn example_gradients(model: &Model, ex: &Example, drop: &mut Dropout) -> Result<(Grads, LossTerms)> {
    let mut g = Graph::new();
    let (loss, terms) = model.loss(&mut g, ex, drop)?;
    g.backward(loss)?;
    let grads = g.param_grads().map(|(id, v)| (id, v.to_vec())).collect();
    Ok((grads, terms))
}

/// One pass over `train` in a seeded shuffled order, then greedy decoding
/// of `heldout`. `epoch` is 0-based; while it is below
/// `freeze_backend_epochs` backend parameters are not updated.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    train: &[Example],
    heldout: &[Example],
    plan: &TrainPlan,
    epoch: usize,
    decode: DecodeParams,
) -> Result<EpochMetrics> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let frozen = epoch < plan.freeze_backend_epochs;
    let active = model.active(frozen);
    let d_att = model.cfg.backend.attention.d_att;
    let (mut sum_ctc, mut sum_att, mut sum_joint) = (0.0, 0.0, 0.0);
    for (b, batch) in order.chunks(plan.batch_size).enumerate() {
        let results: Vec<Result<(Grads, LossTerms)>> = batch
            .par_iter()
            .map(|&i| {
                let seed = plan.seed ^ ((epoch as u64) << 32) ^ i as u64;
                let mut drop = if plan.dropout > 0.0 { Dropout::new(plan.dropout, seed) } else { Dropout::off() };
                example_gradients(model, &train[i], &mut drop)
            })
            .collect();
        let mut grads: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        for (&i, r) in batch.iter().zip(results) {
            let (eg, terms) = r?;
            if !terms.joint.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch} batch {b} utterance {}: ctc {:?} att {:?}", train[i].id, terms.ctc, terms.att)));
            }
            sum_ctc += terms.ctc.iter().filter(|c| c.is_finite()).sum::<f64>();
            sum_att += terms.att.iter().sum::<f64>();
            sum_joint += terms.joint;
            for (id, g) in eg {
                grads[id.0].iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for (gr, &on) in grads.iter_mut().zip(&active) {
            if on {
                gr.iter_mut().for_each(|v| *v *= scale);
            } else {
                gr.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let norm = clip_grad_norm(&mut grads, plan.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} batch {b}: gradient norm {norm}")));
        }
        let lr = noam_lr(opt.step + 1, d_att, plan.warmup, plan.lr_scale)?;
        adam_step(&mut model.store, &grads, opt, lr, &active)?;
    }
    let n = train.len() as f64;
    let ter = if heldout.is_empty() { f64::NAN } else { evaluate(model, heldout, DecodeParams { beam: 1, ..decode })?.ter };
    Ok(EpochMetrics { epoch: epoch + 1, loss_ctc: sum_ctc / n, loss_att: sum_att / n, loss_joint: sum_joint / n, ter, backend_frozen: frozen })
}

/// Mean losses on `data` without updating anything.
pub fn evaluate_loss(model: &Model, data: &[Example]) -> Result<(f64, f64, f64)> {
    let terms: Vec<LossTerms> = data
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            model.loss(&mut g, ex, &mut Dropout::off()).map(|(_, t)| t)
        })
        .collect::<Result<_>>()?;
    let n = data.len().max(1) as f64;
    let c = terms.iter().flat_map(|t| t.ctc.iter().filter(|c| c.is_finite())).sum::<f64>() / n;
    let a = terms.iter().flat_map(|t| t.att.iter()).sum::<f64>() / n;
    let j = terms.iter().map(|t| t.joint).sum::<f64>() / n;
    Ok((c, a, j))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub stream: usize,
    pub reference_index: usize,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub errors: usize,
    pub reference_tokens: usize,
    pub ter: f64,
}

/// Decodes every utterance and scores the best hypothesis-to-reference
/// assignment per utterance.
pub fn evaluate(model: &Model, data: &[Example], decode: DecodeParams) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let eos = model.cfg.backend.vocab.eos();
    let per: Vec<Vec<EvalRow>> = data
        .par_iter()
        .map(|ex| {
            let hyps = model.recognize(&ex.input, ex.refs.len(), decode.beam, decode.max_len)?;
            let tokens: Vec<Vec<usize>> = hyps.iter().map(|h| h.content(eos)).collect();
            let best = best_permutation_errors(&tokens, &ex.refs)?;
            Ok(tokens
                .into_iter()
                .enumerate()
                .map(|(j, hypothesis)| EvalRow {
                    id: ex.id.clone(),
                    stream: j,
                    reference_index: best.permutation[j],
                    reference: ex.refs[best.permutation[j]].clone(),
                    hypothesis,
                    errors: best.errors[j],
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<EvalRow> = per.into_iter().flatten().collect();
    let errors = rows.iter().map(|r| r.errors).sum();
    let reference_tokens = rows.iter().map(|r| r.reference.len()).sum::<usize>();
    Ok(EvalReport { ter: errors as f64 / reference_tokens as f64, rows, errors, reference_tokens })
}
