//! Training loop, validation-based model selection and evaluation.

use std::fmt::Write as _;

use ipagnn_autodiff::{seeded_rng, sgd_step, Graph, ParamStore};
use ipagnn_core::corpus::{balanced_batches, CorpusError, CorpusManifest, Split};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::metrics::{MetricsReport, Outcome};
use crate::model::{Model, Prepared};
use crate::vocab::Vocabulary;
use crate::{ModelError, Result, TrainConfig};

/// Examples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub val_accuracy: f64,
    pub val_weighted_f1: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("step,loss,val_accuracy,val_weighted_f1\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.val_accuracy, r.val_weighted_f1);
    }
    s
}

pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,loss,val_accuracy,val_weighted_f1") {
        return Err(ModelError::InvalidArgument("bad history header".into()));
    }
    lines
        .map(|l| {
            let bad = || ModelError::InvalidArgument(format!("bad history row `{l}`"));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(HistoryRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: num(f[1])?,
                val_accuracy: num(f[2])?,
                val_weighted_f1: num(f[3])?,
            })
        })
        .collect()
}

/// What the callback sees after every update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Holds the parameters with the best validation weighted F1.
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub final_params: ParamStore,
}

pub fn train(config: &TrainConfig, manifest: &CorpusManifest) -> Result<TrainOutcome> {
    train_with_callback(config, manifest, |_| {})
}

pub fn build_vocab(config: &TrainConfig, manifest: &CorpusManifest) -> Result<Vocabulary> {
    let programs = manifest
        .split(Split::Train)
        .map(|e| Ok((e.program()?, e.description.as_str())))
        .collect::<Result<Vec<_>>>()?;
    Vocabulary::from_corpus(programs.iter().map(|(p, d)| (p, *d)), config.vocab_cap)
}

pub fn prepare_split(model: &Model, manifest: &CorpusManifest, split: Split) -> Result<Vec<Prepared>> {
    manifest.split(split).map(|e| model.prepare_example(e)).collect()
}

enum Sampler {
    Balanced(ipagnn_core::corpus::BalancedBatches),
    /// Only one stratum exists; draw uniformly.
    Uniform(usize, usize, ChaCha8Rng),
}

impl Sampler {
    fn next(&mut self, positions: &[usize]) -> Vec<usize> {
        match self {
            Sampler::Balanced(b) => b.next().unwrap_or_default().into_iter().map(|i| positions[i]).collect(),
            Sampler::Uniform(n, size, rng) => (0..*size).map(|_| rng.gen_range(0..*n)).collect(),
        }
    }
}

pub fn train_with_callback(
    config: &TrainConfig,
    manifest: &CorpusManifest,
    mut callback: impl FnMut(&StepInfo),
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = build_vocab(config, manifest)?;
    let model = Model::new(config.clone(), vocab)?;
    let train = prepare_split(&model, manifest, Split::Train)?;
    if train.is_empty() {
        return Err(ModelError::InvalidArgument("the train split is empty".into()));
    }
    let valid = prepare_split(&model, manifest, Split::Valid)?;
    // manifest index -> position in `train`
    let mut positions = vec![usize::MAX; manifest.examples.len()];
    for (k, (i, _)) in manifest.examples.iter().enumerate().filter(|(_, e)| e.split == Split::Train).enumerate() {
        positions[i] = k;
    }
    let mut sampler = match balanced_batches(manifest, Split::Train, config.batch_size, config.seed) {
        Ok(b) => Sampler::Balanced(b),
        Err(CorpusError::EmptyStratum { .. }) => {
            Sampler::Uniform(train.len(), config.batch_size, ChaCha8Rng::seed_from_u64(config.seed))
        }
        Err(e) => return Err(e.into()),
    };

    let mut params = model.init_params();
    let mut dropout_rng = seeded_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut window = 0.0;
    let mut window_len = 0usize;
    for step in 1..=config.max_steps {
        let idx = sampler.next(&positions);
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
        let targets: Vec<usize> = batch.iter().map(|p| p.target).collect();
        let (loss, grads) = {
            let mut g = Graph::new(&params);
            let out = model.forward(&mut g, &batch, Some(&mut dropout_rng))?;
            let (loss, per) = model.loss(&mut g, out.log_probs, &targets)?;
            if let Some(k) = per.iter().position(|l| !l.is_finite()) {
                return Err(ModelError::NonFiniteLoss {
                    example_id: batch[k].id,
                });
            }
            (g.value(loss).data()[0], g.backward(loss)?)
        };
        let mut grads = grads;
        let grad_norm = grads.clip_global_norm(config.clip_norm);
        let clipped_norm = grads.global_norm();
        sgd_step(&mut params, &grads, config.learning_rate);
        callback(&StepInfo {
            step,
            loss,
            grad_norm,
            clipped_norm,
        });
        window += loss;
        window_len += 1;
        if step % config.validate_every == 0 || step == config.max_steps {
            let (acc, f1) = if valid.is_empty() {
                (0.0, 0.0)
            } else {
                let r = evaluate_prepared(&model, &params, &valid)?;
                (r.accuracy, r.weighted_f1)
            };
            history.push(HistoryRow {
                step,
                loss: window / window_len as f64,
                val_accuracy: acc,
                val_weighted_f1: f1,
            });
            window = 0.0;
            window_len = 0;
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, params.clone()));
            }
        }
    }
    let best_params = match best {
        Some((_, p)) if !valid.is_empty() => p,
        _ => params.clone(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            params: best_params,
        },
        history,
        final_params: params,
    })
}

pub fn outcomes(model: &Model, params: &ParamStore, items: &[Prepared]) -> Result<Vec<Outcome>> {
    let preds = model.predict_all(params, items, EVAL_BATCH)?;
    Ok(items
        .iter()
        .zip(preds)
        .map(|(item, pred)| Outcome {
            target: item.target,
            predicted: pred.predicted_class(),
            target_line: item.error_line,
            predicted_line: pred.predicted_line,
        })
        .collect())
}

pub fn evaluate_prepared(model: &Model, params: &ParamStore, items: &[Prepared]) -> Result<MetricsReport> {
    Ok(MetricsReport::compute(&outcomes(model, params, items)?, model.localizes()))
}

pub fn evaluate(checkpoint: &Checkpoint, manifest: &CorpusManifest, split: Split) -> Result<MetricsReport> {
    let model = checkpoint.model()?;
    let items = prepare_split(&model, manifest, split)?;
    if items.is_empty() {
        return Err(ModelError::InvalidArgument(format!("the {split} split is empty")));
    }
    evaluate_prepared(&model, &checkpoint.params, &items)
}
