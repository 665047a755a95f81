//! Training, evaluation and ablation drivers.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::checkpoint::Checkpoint;
use crate::data::config::RunConfig;
use crate::data::format::read_features;
use crate::data::manifest::Manifest;
use crate::decode::{align, ErrorCounts};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::model::{Example, ModelConfig, StreamMode, Tstrm};
use crate::nn::{ForwardCtx, Module};
use crate::optim::{Adam, WarmupSchedule};
use crate::rng::Rng;
use crate::tensor::no_grad;

pub const METRICS_HEADER: &str = "epoch,step,ctc,att,joint,dev_cer";

/// Loads every utterance of `manifest`, checking its tokens against `cfg`.
pub fn load_examples(manifest: &Manifest, cfg: &ModelConfig) -> Result<Vec<Example>> {
    let vocab = cfg.vocab();
    manifest
        .utterances
        .iter()
        .map(|u| {
            if let Some(&k) = u.transcript.iter().find(|&&k| !vocab.is_token(k)) {
                return Err(Error::Config(format!(
                    "utterance {}: token {k} outside the model vocabulary 1..={}",
                    u.id, cfg.n_tokens
                )));
            }
            let features = read_features(&u.path)?;
            if features.dims() != cfg.feat_dim {
                return Err(Error::Config(format!(
                    "utterance {}: {} feature dims, model expects {}",
                    u.id,
                    features.dims(),
                    cfg.feat_dim
                )));
            }
            Ok(Example {
                id: u.id.clone(),
                features,
                tokens: u.transcript.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub counts: ErrorCounts,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScore>,
    pub total: ErrorCounts,
}

impl EvalReport {
    /// Micro-averaged rate: total edits over total reference length.
    pub fn cer(&self) -> Result<f64> {
        self.total.rate()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let ids = |v: &[usize]| v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ");
        let mut write = || -> csv::Result<()> {
            w.write_record(["utt_id", "ref_len", "substitutions", "insertions", "deletions", "cer", "reference", "hypothesis"])?;
            for u in &self.utterances {
                let rate = u.counts.distance() as f64 / u.counts.reference_len.max(1) as f64;
                w.write_record([
                    u.id.clone(),
                    u.counts.reference_len.to_string(),
                    u.counts.substitutions.to_string(),
                    u.counts.insertions.to_string(),
                    u.counts.deletions.to_string(),
                    rate.to_string(),
                    ids(&u.reference),
                    ids(&u.hypothesis),
                ])?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| csv_error(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

/// Greedy-decodes every example and scores it against its transcript.
pub fn evaluate(model: &Tstrm, examples: &[Example], max_len: usize) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for ex in examples {
        let hyp = model.greedy(&ex.features, max_len)?;
        let hypothesis = hyp.transcript().to_vec();
        let counts = align(&hypothesis, &ex.tokens);
        report.total.merge(counts);
        report.utterances.push(UtteranceScore {
            id: ex.id.clone(),
            reference: ex.tokens.clone(),
            hypothesis,
            counts,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out: PathBuf,
    pub force: bool,
    /// Disables dropout.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub ctc: f64,
    pub att: f64,
    pub joint: f64,
    pub dev_cer: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.ctc, self.att, self.joint, self.dev_cer
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest dev CER.
    pub best: Tstrm,
    pub best_dev_cer: f64,
    pub history: Vec<EpochMetrics>,
    pub param_count: usize,
}

/// Splits shuffled indices into batches of `size`, folding a trailing
/// single-utterance batch into its predecessor (batch norm needs two).
pub fn batch_indices(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

pub(crate) fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() && !force {
        return Err(Error::Exists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Configuration text stored inside checkpoints; paths stay as given.
pub fn config_snapshot(cfg: &RunConfig) -> String {
    cfg.to_text(Path::new(""))
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Tstrm)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config, Path::new(""))
        .map_err(|e| Error::format(path, format!("embedded configuration: {e}")))?;
    let mut model = Tstrm::new(cfg.model.clone(), 0)?;
    ckpt.restore(&mut model)?;
    Ok((cfg, model))
}

/// Trains on in-memory examples, writing `metrics.csv`, `best.ckpt` and
/// `last.ckpt` into `opts.out`.
///
/// Each epoch shuffles the training set, steps Adam once per batch and then
/// greedy-decodes the dev set. A non-finite loss aborts with
/// [`Error::Numeric`] naming the batch.
pub fn train_examples(cfg: &RunConfig, train: &[Example], dev: &[Example], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.len() < 2 || dev.is_empty() {
        return Err(Error::Input(format!(
            "need at least 2 training and 1 dev utterance, got {} and {}",
            train.len(),
            dev.len()
        )));
    }
    let mut cfg = cfg.clone();
    if opts.deterministic {
        cfg.model.transformer.dropout = 0.0;
    }
    let t = cfg.train.clone();
    prepare_out(&opts.out, opts.force)?;
    let metrics_path = opts.out.join("metrics.csv");
    File::create(&metrics_path)
        .and_then(|mut f| writeln!(f, "{METRICS_HEADER}"))
        .map_err(|e| Error::io(&metrics_path, e))?;
    let snapshot = config_snapshot(&cfg);

    let mut model = Tstrm::new(cfg.model.clone(), t.seed)?;
    let param_count = model.param_count();
    let mut adam = Adam::default();
    let schedule = WarmupSchedule {
        factor: t.lr_factor,
        d_model: cfg.model.transformer.d_model,
        warmup: t.warmup_steps,
    };
    let mut shuffle_rng = Rng::new(t.seed ^ 0x5eed0fba7c4);
    let mut ctx = ForwardCtx::train(t.seed.wrapping_add(1));
    let mut step = 0u64;
    let mut history = Vec::with_capacity(t.epochs);
    let mut best: Option<(f64, Tstrm)> = None;

    for epoch in 1..=t.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let (mut ctc, mut att, mut joint) = (0.0, 0.0, 0.0);
        let batches = batch_indices(&order, t.batch_size);
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            let (loss, parts) = model.loss(&batch, &mut ctx)?;
            let blame = |what: String| {
                let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
                Error::Numeric(format!("{what} at epoch {epoch}, batch {b} ({})", ids.join(", ")))
            };
            if !parts.joint.is_finite() {
                return Err(blame(format!("loss {}", parts.joint)));
            }
            loss.backward()?;
            drop(loss);
            step += 1;
            adam.step(&mut model, schedule.lr(step), t.clip_norm).map_err(|e| match e {
                Error::Numeric(m) => blame(m),
                other => other,
            })?;
            ctc += parts.ctc;
            att += parts.att;
            joint += parts.joint;
        }
        let n = batches.len() as f64;
        let dev_cer = no_grad(|| evaluate(&model, dev, t.max_decode_len))?.cer()?;
        let row = EpochMetrics {
            epoch,
            step,
            ctc: ctc / n,
            att: att / n,
            joint: joint / n,
            dev_cer,
        };
        OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .and_then(|mut f| writeln!(f, "{}", row.csv_row()))
            .map_err(|e| Error::io(&metrics_path, e))?;
        history.push(row);

        let ckpt = Checkpoint::capture(&model, snapshot.clone(), step, Some(adam.state.clone()));
        ckpt.save(&opts.out.join("last.ckpt"))?;
        if best.as_ref().is_none_or(|(cer, _)| dev_cer < *cer) {
            ckpt.save(&opts.out.join("best.ckpt"))?;
            best = Some((dev_cer, model.clone()));
        }
    }
    let (best_dev_cer, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_dev_cer,
        history,
        param_count,
    })
}

/// Trains from the manifests named in `cfg`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let manifest = |p: &Option<PathBuf>, key: &str| -> Result<Manifest> {
        let p = p.as_ref().ok_or_else(|| Error::Config(format!("{key} is not set")))?;
        Manifest::read(p)
    };
    let train = load_examples(&manifest(&cfg.train_manifest, "data.train")?, &cfg.model)?;
    let dev = load_examples(&manifest(&cfg.dev_manifest, "data.dev")?, &cfg.model)?;
    train_examples(cfg, &train, &dev, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Streams,
    Fusion,
    Blocks,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "streams" => Ok(Self::Streams),
            "fusion" => Ok(Self::Fusion),
            "blocks" => Ok(Self::Blocks),
            _ => Err(Error::Config(format!("unknown ablation '{s}' (streams, fusion, blocks)"))),
        }
    }
}

/// The three variants of an ablation, named, applied to `base`.
pub fn ablation_variants(kind: AblationKind, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c.model);
        c
    };
    match kind {
        AblationKind::Streams => [StreamMode::ShallowOnly, StreamMode::DeepOnly, StreamMode::Both]
            .into_iter()
            .map(|m| (m.to_string(), with(&|c| c.stream_mode = m)))
            .collect(),
        AblationKind::Fusion => [FusionKind::Concat, FusionKind::Add, FusionKind::Fcf]
            .into_iter()
            .map(|k| {
                (
                    k.to_string(),
                    with(&|c| {
                        c.stream_mode = StreamMode::Both;
                        c.fusion = k;
                    }),
                )
            })
            .collect(),
        AblationKind::Blocks => [4, 5, 6]
            .into_iter()
            .map(|g| (format!("groups{g}"), with(&|c| c.streams.n_deep_groups = g)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub dev_cer: f64,
}

/// Trains every variant with the same seed and data, each into its own
/// subdirectory of `opts.out`, and writes `ablation.csv` there.
pub fn run_ablation(
    kind: AblationKind,
    base: &RunConfig,
    train: &[Example],
    dev: &[Example],
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    prepare_out(&opts.out, opts.force)?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(kind, base) {
        let sub = TrainOptions {
            out: opts.out.join(&name),
            force: true,
            ..opts.clone()
        };
        let outcome = train_examples(&cfg, train, dev, &sub)?;
        rows.push(AblationRow {
            variant: name,
            params: outcome.param_count,
            dev_cer: outcome.best_dev_cer,
        });
    }
    let path = opts.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut write = || -> csv::Result<()> {
        w.write_record(["variant", "params", "dev_cer"])?;
        for r in &rows {
            w.write_record([r.variant.clone(), r.params.to_string(), r.dev_cer.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| csv_error(&path, e))?;
    Ok(rows)
}
