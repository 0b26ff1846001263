//! End-to-end commands: synthesize a corpus, sample support/dev/test splits,
//! train, evaluate and gradient-check.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RunConfig, StopMetric};
use crate::data::{self, Checkpoint, DataError, SupportManifest};
use crate::encoding::{tokenize, wrap_template, EncodeError, ToyEncoderParams, Vocab};
use crate::gradcheck::{self, GradcheckReport};
use crate::hierarchy::{Hierarchy, HierarchyError};
use crate::metrics::{evaluate, EvalReport, MetricError, PredictionRecord};
use crate::model::{Example, LossBreakdown, Model, ModelError};
use crate::optim::{linear_schedule, Adam};
use crate::sampler::{remainder, sample_support, Document, SampleError, SupportSet};
use crate::synth::{self, SynthError};
use crate::verbalizer::{HeadError, VerbalizerHead};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("support set is empty")]
    EmptySupport,
    #[error("invalid run config: {0}")]
    Config(String),
}

pub fn load_hierarchy(cfg: &RunConfig) -> Result<Hierarchy, PipelineError> {
    Ok(Hierarchy::load(&cfg.hierarchy)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub paths: usize,
    pub documents: usize,
    pub layer_sizes: Vec<usize>,
}

/// Writes the generated hierarchy and dataset to the configured paths.
/// The corpus seed is the run seed.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary, PipelineError> {
    let spec = synth::SyntheticSpec {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let (h, docs) = synth::generate(&spec)?;
    data::write_text(&cfg.hierarchy, &(h.to_json() + "\n"))?;
    data::write_text(&cfg.dataset, &data::dataset_jsonl(&docs, &h))?;
    Ok(SynthSummary {
        paths: h.leaf_paths().len(),
        documents: docs.len(),
        layer_sizes: h.layer_sizes(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub support: SupportSet,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

/// Support sample, then a disjoint dev sample drawn with `seed + 1` from the
/// remainder, then everything else as test. The dev set is empty when the
/// remainder cannot supply `dev_k` documents per path.
pub fn split(dataset: &[Document], h: &Hierarchy, cfg: &RunConfig) -> Result<Splits, PipelineError> {
    let support = sample_support(dataset, cfg.k, cfg.seed, cfg.order, h)?;
    let rest = remainder(dataset, &support);
    let dev_k = cfg.dev_k.unwrap_or(cfg.k);
    let dev = match sample_support(&rest, dev_k, cfg.seed.wrapping_add(1), cfg.order, h) {
        Ok(s) => s.documents,
        Err(e @ (SampleError::EmptyAfterFilter { .. } | SampleError::Exhausted { .. })) => {
            warn!("no dev set: {e}");
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };
    let dev_ids: HashSet<&str> = dev.iter().map(|d| d.id.as_str()).collect();
    let test = rest.iter().filter(|d| !dev_ids.contains(d.id.as_str())).cloned().collect();
    Ok(Splits { support, dev, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub manifest: SupportManifest,
    pub dev_documents: usize,
    pub test_documents: usize,
}

/// Writes support JSONL plus manifest, dev JSONL and test JSONL.
pub fn cmd_sample(cfg: &RunConfig) -> Result<SampleSummary, PipelineError> {
    let h = load_hierarchy(cfg)?;
    let dataset = data::read_dataset(&cfg.dataset, &h)?;
    let s = split(&dataset, &h, cfg)?;
    let manifest = SupportManifest::new(&s.support, &h);
    data::write_text(&cfg.support_path(), &data::dataset_jsonl(&s.support.documents, &h))?;
    data::write_text(&cfg.out("support_manifest.json"), &pretty(&manifest))?;
    data::write_text(&cfg.dev_path(), &data::dataset_jsonl(&s.dev, &h))?;
    data::write_text(&cfg.test_path(), &data::dataset_jsonl(&s.test, &h))?;
    Ok(SampleSummary {
        manifest,
        dev_documents: s.dev.len(),
        test_documents: s.test.len(),
    })
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize") + "\n"
}

/// Vocabulary over the support texts plus every label name.
pub fn build_vocab(h: &Hierarchy, docs: &[Document]) -> Vocab {
    let texts = docs
        .iter()
        .map(|d| d.text.as_str())
        .chain(h.nodes().iter().map(|n| n.name.as_str()));
    Vocab::build(texts, h.depth())
}

pub fn to_examples(
    docs: &[Document],
    vocab: &Vocab,
    h: &Hierarchy,
    truncate_length: usize,
) -> Result<Vec<Example>, PipelineError> {
    docs.iter()
        .map(|d| {
            Ok(Example {
                input: tokenize(vocab, &wrap_template(&d.text, h.depth()), truncate_length)?,
                targets: h.layer_targets(&d.labels),
            })
        })
        .collect()
}

pub fn init_model(cfg: &RunConfig, h: &Hierarchy, vocab: &Vocab) -> Result<Model, PipelineError> {
    let encoder = ToyEncoderParams::init(vocab.len(), cfg.encoder.r, h.depth(), cfg.encoder.dropout, cfg.seed);
    let head = VerbalizerHead::init(h, &encoder.embeddings, vocab, cfg.loss.mode)?;
    Ok(Model { encoder, head })
}

pub fn predict_documents(
    model: &Model,
    vocab: &Vocab,
    h: &Hierarchy,
    docs: &[Document],
    cfg: &RunConfig,
) -> Result<Vec<PredictionRecord>, PipelineError> {
    // Inference never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    docs.iter()
        .map(|d| {
            let input = tokenize(vocab, &wrap_template(&d.text, h.depth()), cfg.truncate_length)?;
            Ok(PredictionRecord {
                id: d.id.clone(),
                gold: d.labels.clone(),
                pred: model.predict(&input, cfg.threshold, h, &mut rng)?,
            })
        })
        .collect()
}

pub fn evaluate_documents(
    model: &Model,
    vocab: &Vocab,
    h: &Hierarchy,
    docs: &[Document],
    cfg: &RunConfig,
) -> Result<(EvalReport, Vec<PredictionRecord>), PipelineError> {
    let records = predict_documents(model, vocab, h, docs, cfg)?;
    Ok((evaluate(&records, h)?, records))
}

fn signal(report: &EvalReport, metric: StopMetric) -> f64 {
    match metric {
        StopMetric::MicroF1 => report.micro_f1,
        StopMetric::MacroF1 => report.macro_f1,
        StopMetric::CmicroF1 => report.cmicro_f1,
        StopMetric::PmicroF1 => report.pmicro_f1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub lr_encoder: f64,
    pub lr_verbalizer: f64,
    /// Batch means of each term.
    pub loss: LossBreakdown,
    pub dev: Option<EvalReport>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_dev_signal: Option<f64>,
    pub stopped_early: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: Model,
    pub vocab: Vocab,
    pub log: TrainLog,
}

/// Mini-batch training with Adam and linear decay. With a dev set the
/// parameters of the best epoch (strictly improving signal) are kept and
/// training stops after `patience` epochs without improvement; `patience`
/// 0 disables stopping. Without a dev set the final epoch is kept.
pub fn train(cfg: &RunConfig, h: &Hierarchy, support: &[Document], dev: &[Document]) -> Result<Trained, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    if support.is_empty() {
        return Err(PipelineError::EmptySupport);
    }
    let vocab = build_vocab(h, support);
    let examples = to_examples(support, &vocab, h, cfg.truncate_length)?;
    let mut model = init_model(cfg, h, &vocab)?;
    let mut adam = Adam::new(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_signal: None,
        stopped_early: false,
        steps: 0,
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let (mut lr_e, mut lr_v) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = model
                .loss_and_grad(&batch, h, &cfg.loss, &mut rng)
                .map_err(|source| PipelineError::Batch { epoch, batch: b, source })?;
            lr_e = linear_schedule(cfg.lr, step, cfg.warmup_steps, total_steps);
            lr_v = linear_schedule(cfg.verbalizer_lr, step, cfg.warmup_steps, total_steps);
            adam.step(&mut model, &grads, lr_e, lr_v);
            step += 1;
            sum.classification += loss.classification;
            sum.hcc += loss.hcc;
            sum.fhc += loss.fhc;
            sum.total += loss.total;
        }
        let nb = batches_per_epoch as f64;
        let mean = LossBreakdown {
            classification: sum.classification / nb,
            hcc: sum.hcc / nb,
            fhc: sum.fhc / nb,
            total: sum.total / nb,
        };

        let mut improved = false;
        let dev_report = if dev.is_empty() {
            None
        } else {
            let (report, _) = evaluate_documents(&model, &vocab, h, dev, cfg)?;
            let s = signal(&report, cfg.stop_metric);
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, epoch, model.clone()));
                improved = true;
                stale = 0;
            } else {
                stale += 1;
            }
            Some(report)
        };
        info!(
            "epoch {epoch}: loss {:.6} (cls {:.6}, hcc {:.6}, fhc {:.6}){}",
            mean.total,
            mean.classification,
            mean.hcc,
            mean.fhc,
            dev_report
                .as_ref()
                .map(|r| format!(", dev micro-F1 {:.4}", r.micro_f1))
                .unwrap_or_default()
        );
        log.epochs.push(EpochLog {
            epoch,
            batches: batches_per_epoch,
            lr_encoder: lr_e,
            lr_verbalizer: lr_v,
            loss: mean,
            dev: dev_report,
            improved,
        });
        if cfg.patience > 0 && stale >= cfg.patience {
            log.stopped_early = true;
            break;
        }
    }
    log.steps = step;
    let model = match best {
        Some((s, epoch, m)) => {
            log.best_epoch = epoch;
            log.best_dev_signal = Some(s);
            m
        }
        None => {
            log.best_epoch = log.epochs.len();
            model
        }
    };
    Ok(Trained { model, vocab, log })
}

fn read_split(path: &Path, h: &Hierarchy) -> Result<Vec<Document>, PipelineError> {
    Ok(data::read_dataset(path, h)?)
}

/// Trains on the support file, early-stops on the dev file, and writes the
/// kept checkpoint, the vocabulary and the per-epoch log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainLog, PipelineError> {
    let h = load_hierarchy(cfg)?;
    let support = read_split(&cfg.support_path(), &h)?;
    let dev = read_split(&cfg.dev_path(), &h)?;
    let trained = train(cfg, &h, &support, &dev)?;
    data::write_text(&cfg.checkpoint_path(), &Checkpoint::new(&trained.model, &trained.vocab).to_json())?;
    data::write_text(&cfg.out("vocab.json"), &(trained.vocab.to_json() + "\n"))?;
    data::write_text(&cfg.out("train_log.json"), &pretty(&trained.log))?;
    Ok(trained.log)
}

/// Decodes the test file with the checkpoint; writes the report and the
/// per-document predictions.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, PipelineError> {
    let h = load_hierarchy(cfg)?;
    let (model, vocab) = Checkpoint::load(&cfg.checkpoint_path())?.into_model(&h)?;
    let docs = read_split(&cfg.test_path(), &h)?;
    let (report, records) = evaluate_documents(&model, &vocab, &h, &docs, cfg)?;
    data::write_text(&cfg.out("report.json"), &pretty(&report))?;
    data::write_text(&cfg.out("predictions.jsonl"), &data::predictions_jsonl(&records, &h))?;
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport, PipelineError> {
    let report = gradcheck::run(&cfg.gradcheck)?;
    data::write_text(&cfg.out("gradcheck.json"), &pretty(&report))?;
    Ok(report)
}

/// Per-path counts of a manifest, one `leaf<TAB>count` line each.
pub fn format_counts(counts: &BTreeMap<String, usize>) -> String {
    counts.iter().map(|(p, c)| format!("{p}\t{c}\n")).collect()
}
