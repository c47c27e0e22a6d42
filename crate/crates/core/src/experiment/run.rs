//! Training and evaluation runs over a generated dataset. A training
//! directory holds the experiment config, feature statistics, metrics and
//! checkpoints; evaluation and separation load models from it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{Dataset, Featurizer, Split};
use crate::dsp::{GlobalStats, WpeParams};
use crate::error::{Error, Result};
use crate::training::{
    evaluate, read_checkpoint, save_checkpoint, train_epoch, Checkpoint, DecodeParams, EpochMetrics, EvalReport, Example, Model, OptimizerState,
    TrainPlan,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const STATS_FILE: &str = "stats.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Train,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: Stage,
    #[serde(flatten)]
    pub metrics: EpochMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    /// Main-stage epoch (1-based) with the lowest held-out TER.
    pub best_epoch: Option<usize>,
    pub best_ter: Option<f64>,
    pub final_ter: Option<f64>,
    pub steps: u64,
}

impl TrainSummary {
    pub fn csv(&self) -> String {
        let mut s = String::from("epoch,split,loss_ctc,loss_att,loss_joint,ter\n");
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.6}", m.epoch, r.split.name(), m.loss_ctc, m.loss_att, m.loss_joint, m.ter).expect("string write");
        }
        s
    }

    fn best(rows: &[MetricsRow]) -> Option<(usize, f64)> {
        rows.iter().filter(|r| r.split == Stage::Train && r.metrics.ter.is_finite()).fold(None, |best: Option<(usize, f64)>, r| match best {
            Some((_, t)) if t <= r.metrics.ter => best,
            _ => Some((r.metrics.epoch, r.metrics.ter)),
        })
    }
}

/// A trained model together with the feature pipeline it expects.
pub struct LoadedModel {
    pub config: ExperimentConfig,
    pub featurizer: Featurizer,
    pub model: Model,
    pub step: u64,
}

fn build_model(cfg: &ExperimentConfig, stats: &GlobalStats) -> Result<(Featurizer, Model)> {
    let mc = cfg.model_config();
    let featurizer = Featurizer::new(mc.backend.n_mels, stats.clone());
    let model = Model::new(mc, featurizer.stft.bins(), featurizer.mel.clone(), stats.clone(), cfg.train.seed)?;
    Ok((featurizer, model))
}

/// Loads a checkpoint; the config and statistics come from the same
/// directory unless given explicitly.
pub fn load_model(checkpoint: &Path, config: Option<&Path>, allow_mismatch: bool) -> Result<LoadedModel> {
    let dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg_path = config.map(Path::to_path_buf).unwrap_or_else(|| dir.join(CONFIG_FILE));
    let config = ExperimentConfig::load(&cfg_path)?;
    let stats: GlobalStats = read_json(&dir.join(STATS_FILE))?;
    stats.validate()?;
    let (featurizer, mut model) = build_model(&config, &stats)?;
    let ck = read_checkpoint(checkpoint)?;
    let digest = model.digest();
    ck.apply(&mut model.store, digest, allow_mismatch)?;
    Ok(LoadedModel { config, featurizer, model, step: ck.step })
}

fn batches(n: usize, plan: &TrainPlan) -> u64 {
    n.div_ceil(plan.batch_size) as u64
}

pub struct TrainOptions<'a> {
    pub data_dir: &'a Path,
    pub out_dir: &'a Path,
    /// Continue from `last.ckpt` and `metrics.json` in `out_dir`.
    pub resume: bool,
    pub allow_digest_mismatch: bool,
}

/// Optional clean-reference pretraining of the backend, then the main
/// schedule with staged freezing. Writes metrics after every epoch, the
/// best checkpoint by held-out TER and the last checkpoint.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let plan = &cfg.train;
    let data = Dataset::load(opts.data_dir)?;
    let train_entries = data.split(Split::Train);
    let heldout_entries = data.split(Split::Heldout);
    if train_entries.is_empty() {
        return Err(Error::Data(format!("{}: no training utterances", opts.data_dir.display())));
    }
    let out = opts.out_dir;
    create_dir(out)?;
    let n_mels = cfg.model.n_mels;
    let stats = if opts.resume { read_json(&out.join(STATS_FILE))? } else { Featurizer::estimate_stats(&data, &train_entries, n_mels)? };
    write_file(&out.join(CONFIG_FILE), cfg.to_toml())?;
    write_file(&out.join(STATS_FILE), serde_json::to_string_pretty(&stats).expect("stats serialize"))?;
    let (featurizer, mut model) = build_model(cfg, &stats)?;
    let multi = cfg.multi_channel();
    let train_set = featurizer.examples(&data, &train_entries, multi)?;
    let heldout_set = featurizer.examples(&data, &heldout_entries, multi)?;
    let pretrain_set: Vec<Example> = if plan.pretrain_epochs > 0 {
        let per: Vec<Vec<Example>> = train_entries.iter().map(|e| featurizer.reference_examples(&data, e)).collect::<Result<_>>()?;
        per.into_iter().flatten().collect()
    } else {
        Vec::new()
    };

    let mut opt = OptimizerState::new(&model.store);
    let mut rows: Vec<MetricsRow> = Vec::new();
    if opts.resume {
        let ck = read_checkpoint(out.join(LAST_CHECKPOINT))?;
        let digest = model.digest();
        opt = ck
            .apply(&mut model.store, digest, opts.allow_digest_mismatch)?
            .ok_or_else(|| Error::Checkpoint("last checkpoint has no optimizer state".into()))?;
        let previous: TrainSummary = read_json(&out.join(METRICS_JSON))?;
        rows = previous.rows;
        let expected = rows
            .iter()
            .map(|r| match r.split {
                Stage::Pretrain => batches(pretrain_set.len(), plan),
                Stage::Train => batches(train_set.len(), plan),
            })
            .sum::<u64>();
        if expected != opt.step {
            return Err(Error::Checkpoint(format!("checkpoint is at step {} but the metrics record {} steps", opt.step, expected)));
        }
    }

    let done = |stage: Stage, rows: &[MetricsRow]| rows.iter().filter(|r| r.split == stage).count();
    let decode = cfg.eval;
    let pretrain_plan = TrainPlan { freeze_backend_epochs: 0, epochs: plan.pretrain_epochs, lr_scale: plan.pretrain_lr_scale, ..plan.clone() };
    for epoch in done(Stage::Pretrain, &rows)..plan.pretrain_epochs {
        let m = train_epoch(&mut model, &mut opt, &pretrain_set, &heldout_set, &pretrain_plan, epoch, decode)?;
        log::info!("pretrain epoch {}: joint {:.4} ter {:.4}", m.epoch, m.loss_joint, m.ter);
        rows.push(MetricsRow { split: Stage::Pretrain, metrics: m });
        checkpoint_epoch(out, &model, &opt, &rows, false)?;
    }
    for epoch in done(Stage::Train, &rows)..plan.epochs {
        let m = train_epoch(&mut model, &mut opt, &train_set, &heldout_set, plan, epoch, decode)?;
        log::info!(
            "epoch {}: ctc {:.4} att {:.4} joint {:.4} ter {:.4}{}",
            m.epoch,
            m.loss_ctc,
            m.loss_att,
            m.loss_joint,
            m.ter,
            if m.backend_frozen { " (backend frozen)" } else { "" }
        );
        let improved = m.ter.is_finite() && TrainSummary::best(&rows).is_none_or(|(_, t)| m.ter < t);
        rows.push(MetricsRow { split: Stage::Train, metrics: m });
        checkpoint_epoch(out, &model, &opt, &rows, improved || heldout_set.is_empty())?;
    }
    let summary = summarize(rows, opt.step);
    write_metrics(out, &summary)?;
    Ok(summary)
}

fn summarize(rows: Vec<MetricsRow>, steps: u64) -> TrainSummary {
    let best = TrainSummary::best(&rows);
    let final_ter = rows.iter().rev().find(|r| r.split == Stage::Train).map(|r| r.metrics.ter);
    TrainSummary { best_epoch: best.map(|b| b.0), best_ter: best.map(|b| b.1), final_ter, rows, steps }
}

fn write_metrics(out: &Path, s: &TrainSummary) -> Result<()> {
    write_file(&out.join(METRICS_CSV), s.csv())?;
    write_file(&out.join(METRICS_JSON), serde_json::to_string_pretty(s).expect("metrics serialize"))
}

fn checkpoint_epoch(out: &Path, model: &Model, opt: &OptimizerState, rows: &[MetricsRow], best: bool) -> Result<()> {
    let ck = Checkpoint::capture(&model.store, Some(opt), opt.step, model.digest());
    save_checkpoint(out.join(LAST_CHECKPOINT), &ck)?;
    if best {
        save_checkpoint(out.join(BEST_CHECKPOINT), &ck)?;
    }
    write_metrics(out, &summarize(rows.to_vec(), opt.step))
}

pub struct EvalOptions<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub data_dir: &'a Path,
    pub out_dir: &'a Path,
    /// Restrict to one split; all utterances otherwise.
    pub split: Option<Split>,
    pub wpe: Option<WpeParams>,
    pub decode: Option<DecodeParams>,
    pub allow_digest_mismatch: bool,
}

pub fn eval_csv(report: &EvalReport) -> String {
    let join = |t: &[usize]| t.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut s = String::from("id,stream,reference_index,reference,hypothesis,errors\n");
    for r in &report.rows {
        writeln!(s, "{},{},{},{},{},{}", r.id, r.stream, r.reference_index, join(&r.reference), join(&r.hypothesis), r.errors).expect("string write");
    }
    writeln!(s, "mean,,,,,{:.6}", report.ter).expect("string write");
    s
}

/// Decodes every selected utterance, scoring the best assignment of
/// hypotheses to references, and writes the CSV and JSON reports.
pub fn eval(opts: &EvalOptions) -> Result<EvalReport> {
    let mut loaded = load_model(opts.checkpoint, opts.config, opts.allow_digest_mismatch)?;
    loaded.featurizer.wpe = opts.wpe;
    let data = Dataset::load(opts.data_dir)?;
    let entries: Vec<_> = data.entries.iter().filter(|e| opts.split.is_none_or(|s| e.split == s)).collect();
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: no utterances to evaluate", opts.data_dir.display())));
    }
    let examples = loaded.featurizer.examples(&data, &entries, loaded.config.multi_channel())?;
    let report = evaluate(&loaded.model, &examples, opts.decode.unwrap_or(loaded.config.eval))?;
    create_dir(opts.out_dir)?;
    write_file(&opts.out_dir.join(EVAL_CSV), eval_csv(&report))?;
    write_file(&opts.out_dir.join(EVAL_JSON), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

/// Directory that `train` writes into for `out`.
pub fn checkpoint_path(out: &Path, best: bool) -> PathBuf {
    out.join(if best { BEST_CHECKPOINT } else { LAST_CHECKPOINT })
}
