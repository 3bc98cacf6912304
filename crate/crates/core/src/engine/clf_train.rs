use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lm_train::{restore, snapshot};
use super::{Checkpoint, CheckpointMeta, EngineError, MetricsRow, ModelKind, ModelSpec, RunMetrics, StageConfig};
use crate::classifier::{bpt3c_forward, ensemble_predict, probabilities, update_running_stats, Classifier};
use crate::finetune::{assign_discriminative_lrs, unfreeze_step, LayerGroups, Optimizer, DISCR_DECAY};
use crate::lm::{Direction, LmConfig, LmModel};
use crate::tensor::{Tape, Tensor};
use crate::text::{tokenize, DocChunks, LabeledDoc, TokenizeMode, Vocab};

/// Numericalised documents with label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClfData {
    pub docs: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl ClfData {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Sorted distinct labels; fewer than two is an error.
pub fn label_set(docs: &[LabeledDoc]) -> Result<Vec<String>, EngineError> {
    let mut labels: Vec<String> = docs.iter().map(|d| d.label.clone()).collect();
    labels.sort();
    labels.dedup();
    match labels.len() {
        0 => Err(EngineError::Data("no labeled examples".into())),
        1 => Err(EngineError::SingleClass(labels[0].clone())),
        _ => Ok(labels),
    }
}

/// Tokenises and numericalises `docs`, reversing them for a backward model.
/// Empty documents become a single `xxunk`.
pub fn encode_docs(
    docs: &[LabeledDoc],
    vocab: &Vocab,
    mode: TokenizeMode,
    direction: Direction,
    labels: &[String],
) -> Result<ClfData, EngineError> {
    let mut out = ClfData {
        docs: Vec::with_capacity(docs.len()),
        labels: Vec::with_capacity(docs.len()),
    };
    for d in docs {
        let label = labels
            .iter()
            .position(|l| *l == d.label)
            .ok_or_else(|| EngineError::ClassMismatch {
                model: labels.len(),
                label: d.label.clone(),
            })?;
        let mut ids = vocab.encode(&tokenize(&d.text, mode));
        if ids.is_empty() {
            ids.push(crate::text::UNK_ID);
        }
        if direction == Direction::Backward {
            ids.reverse();
        }
        out.docs.push(ids);
        out.labels.push(label);
    }
    Ok(out)
}

pub fn error_rate(probs: &Tensor<f64>, labels: &[usize]) -> f64 {
    let c = probs.shape()[1];
    let wrong = probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count();
    wrong as f64 / labels.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

fn mean_nll(probs: &Tensor<f64>, labels: &[usize]) -> f64 {
    let c = probs.shape()[1];
    let total: f64 = probs
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| -row[y].max(1e-300).ln())
        .sum();
    total / labels.len().max(1) as f64
}

/// Class probabilities `[n_docs, n_classes]` in evaluation mode.
pub fn predict(
    model: &Classifier<f32>,
    docs: &[Vec<usize>],
    batch_size: usize,
    chunk_len: usize,
) -> Result<Tensor<f64>, EngineError> {
    let c = model.head.config.n_classes;
    let mut data = Vec::with_capacity(docs.len() * c);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for group in docs.chunks(batch_size.max(1)) {
        let chunks = DocChunks::from_docs(group, chunk_len)?;
        let mut tape = Tape::new();
        let vars = model.params().register(&mut tape, |_| false);
        let out = bpt3c_forward(model, &mut tape, &vars, &chunks, 1, false, &mut rng)?;
        data.extend_from_slice(probabilities(&tape, out.logits).data());
    }
    Ok(Tensor::new([docs.len(), c], data)?)
}

/// Groups of document indices for one epoch; a trailing singleton joins
/// the previous batch so batch statistics are always defined.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn clf_groups(model: &Classifier<f32>, cfg: &StageConfig) -> Result<LayerGroups, EngineError> {
    let mut groups = LayerGroups::new(model.layer_groups(), cfg.base_lr)?;
    if cfg.discriminative {
        groups = assign_discriminative_lrs(groups, cfg.base_lr, DISCR_DECAY)?;
    } else if let Some(lower) = cfg.lower_lr {
        let top = groups.len() - 1;
        groups.set_lrs((0..groups.len()).map(|g| if g == top { cfg.base_lr } else { lower }).collect());
    }
    Ok(groups)
}

fn classifier_checkpoint(model: &Classifier<f32>, base: &CheckpointMeta, labels: &[String]) -> Checkpoint {
    Checkpoint::from_params(
        CheckpointMeta {
            kind: ModelKind::Classifier,
            lm: model.lm.config.clone(),
            head: Some(model.head.config),
            tokenize: base.tokenize,
            vocab: base.vocab.clone(),
            labels: labels.to_vec(),
        },
        model.params(),
    )
}

/// An untrained language model over `vocab`, for from-scratch baselines.
pub fn random_lm_checkpoint(spec: &ModelSpec, vocab: &Vocab, direction: Direction, seed: u64) -> Result<Checkpoint, EngineError> {
    let config = LmConfig {
        vocab_size: vocab.len(),
        embed_dim: spec.embed_dim,
        hidden_dim: spec.hidden_dim,
        n_layers: spec.n_layers,
        dropouts: spec.dropouts,
        tie_weights: spec.tie_weights,
        direction,
    };
    let model = LmModel::<f32>::new(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(Checkpoint::from_params(
        CheckpointMeta {
            kind: ModelKind::Lm,
            lm: model.config.clone(),
            head: None,
            tokenize: spec.tokenize,
            vocab: vocab.tokens().to_vec(),
            labels: Vec::new(),
        },
        &model.params,
    ))
}

/// Trains a fresh head on top of the language model in `lm`, under the
/// configured unfreezing policy, schedule and learning rates.
pub fn run_clf_finetune(
    cfg: &StageConfig,
    lm: &Checkpoint,
    train: &[LabeledDoc],
    val: &[LabeledDoc],
) -> Result<(Checkpoint, RunMetrics), EngineError> {
    cfg.validate()?;
    let labels = label_set(train)?;
    let vocab = lm.vocab()?;
    let direction = lm.meta.lm.direction;
    let train_data = encode_docs(train, &vocab, lm.meta.tokenize, direction, &labels)?;
    let val_data = encode_docs(val, &vocab, lm.meta.tokenize, direction, &labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trunk = lm.lm_model()?;
    trunk.config.dropouts = trunk.config.dropouts.scaled(cfg.dropout_scale);
    let mut model = Classifier::new(trunk, cfg.head.config(labels.len()), &mut rng)?;
    let metrics = train_clf(&mut model, &train_data, &val_data, cfg, &mut rng)?;
    model.lm.config.dropouts = lm.meta.lm.dropouts;
    Ok((classifier_checkpoint(&model, &lm.meta, &labels), metrics))
}

fn train_clf(
    model: &mut Classifier<f32>,
    train: &ClfData,
    val: &ClfData,
    cfg: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RunMetrics, EngineError> {
    let stage = cfg.stage.name();
    let start = Instant::now();
    let grad_window = cfg.grad_window.unwrap_or(usize::MAX);
    let per_epoch = epoch_batches(train.len(), cfg.batch_size, &mut rng.clone()).len();
    let total = per_epoch * cfg.epochs;
    let mut groups = clf_groups(model, cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut metrics = RunMetrics::default();
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    let mut since_best = 0;
    let mut t = 0usize;
    for epoch in 1..=cfg.epochs {
        groups = unfreeze_step(&cfg.unfreeze, groups, epoch);
        let trainable = groups.trainable_mask(model.params().len());
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in epoch_batches(train.len(), cfg.batch_size, rng) {
            let docs: Vec<&[usize]> = batch.iter().map(|&i| train.docs[i].as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let chunks = DocChunks::from_docs(&docs, cfg.bptt)?;
            let mut tape = Tape::new();
            let vars = model.params().register(&mut tape, |id| trainable[id.0]);
            let out = bpt3c_forward(model, &mut tape, &vars, &chunks, grad_window, true, rng)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(EngineError::NonFinite {
                    stage: stage.into(),
                    iteration: t,
                });
            }
            loss_sum += value as f64 * labels.len() as f64;
            seen += labels.len();
            update_running_stats(&model.head, &mut model.lm.params, &tape, &out.head);
            let mut grads = tape.backward(loss)?;
            if let Some(c) = cfg.clip {
                grads.clip_global_norm(c);
            }
            let factor = cfg.schedule.factor(t.min(total), total)?;
            opt.apply_update(&mut model.lm.params, &groups, factor, &grads)?;
            t += 1;
        }
        let (val_loss, val_error) = if val.is_empty() {
            (None, None)
        } else {
            let probs = predict(model, &val.docs, cfg.batch_size, cfg.bptt)?;
            (Some(mean_nll(&probs, &val.labels)), Some(error_rate(&probs, &val.labels)))
        };
        metrics.push(MetricsRow {
            stage: stage.into(),
            epoch,
            iterations: t,
            train_loss: Some(loss_sum / seen.max(1) as f64),
            val_loss,
            val_error,
            perplexity: None,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if let (Some(patience), Some(vl)) = (cfg.early_stopping, val_loss) {
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, snapshot(model.params())));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snap)) = best {
        restore(&mut model.lm.params, snap);
    }
    Ok(metrics)
}

/// Error rate and loss of a classifier checkpoint on labeled data,
/// optionally averaging probabilities with a second (backward) model.
pub fn evaluate(
    model: &Checkpoint,
    data: &[LabeledDoc],
    ensemble_with: Option<&Checkpoint>,
    batch_size: usize,
    chunk_len: usize,
) -> Result<MetricsRow, EngineError> {
    let start = Instant::now();
    let run = |ckpt: &Checkpoint| -> Result<(Tensor<f64>, Vec<usize>), EngineError> {
        let clf = ckpt.classifier()?;
        let enc = encode_docs(data, &ckpt.vocab()?, ckpt.meta.tokenize, ckpt.meta.lm.direction, &ckpt.meta.labels)?;
        Ok((predict(&clf, &enc.docs, batch_size, chunk_len)?, enc.labels))
    };
    let (mut probs, labels) = run(model)?;
    if let Some(other) = ensemble_with {
        if other.meta.labels != model.meta.labels {
            return Err(EngineError::Config(format!(
                "ensemble members disagree on classes: {:?} vs {:?}",
                model.meta.labels, other.meta.labels
            )));
        }
        let (p2, _) = run(other)?;
        probs = ensemble_predict(&probs, &p2)?;
    }
    Ok(MetricsRow {
        stage: "eval".into(),
        epoch: 0,
        iterations: 0,
        train_loss: None,
        val_loss: Some(mean_nll(&probs, &labels)),
        val_error: Some(error_rate(&probs, &labels)),
        perplexity: None,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}
