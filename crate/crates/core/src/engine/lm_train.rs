use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, CheckpointMeta, EngineError, MetricsRow, ModelKind, RunMetrics, StageConfig};
use crate::finetune::{assign_discriminative_lrs, unfreeze_step, LayerGroups, Optimizer, DISCR_DECAY};
use crate::lm::{lm_forward, reverse_stream, Direction, LmConfig, LmModel, LstmState};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::text::{build_vocab, lm_batches, tokenize, LengthJitter, TokenizeMode, Vocab, RESERVED};

/// Seed for the batch layout of `epoch`, independent of everything else
/// drawn during training so iteration counts can be computed up front.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

fn encode_stream(text: &str, vocab: &Vocab, mode: TokenizeMode, direction: Direction) -> Vec<usize> {
    let ids = vocab.encode(&tokenize(text, mode));
    match direction {
        Direction::Forward => ids,
        Direction::Backward => reverse_stream(&ids),
    }
}

/// Splits off the last `val_frac` of the stream for validation.
fn split_stream(ids: Vec<usize>, val_frac: f64, batch_size: usize) -> Result<(Vec<usize>, Vec<usize>), EngineError> {
    let n_val = (ids.len() as f64 * val_frac).round() as usize;
    let n_train = ids.len() - n_val;
    if n_train < 2 * batch_size {
        return Err(EngineError::Data(format!(
            "{} training tokens is too few for batch size {batch_size}",
            n_train
        )));
    }
    let mut train = ids;
    let val = train.split_off(n_train);
    Ok((train, val))
}

/// Perplexity of `model` on `ids` in evaluation mode, with state carried
/// across windows of `bptt` tokens.
pub fn lm_perplexity(model: &LmModel<f32>, ids: &[usize], batch_size: usize, bptt: usize) -> Result<f64, EngineError> {
    let batch_size = batch_size.min(ids.len() / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = lm_batches(ids, batch_size, bptt, None, &mut rng)?;
    let mut state = LstmState::zeros(&model.config, batch_size);
    let (mut total, mut count) = (0.0, 0usize);
    for b in &batches {
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, |_| false);
        let out = lm_forward(model, &mut tape, &vars, b, &state, false, &mut rng)?;
        total += tape.value(out.loss).item() as f64 * b.targets.len() as f64;
        count += b.targets.len();
        state = out.state;
    }
    Ok((total / count.max(1) as f64).exp())
}

fn lm_groups(model: &LmModel<f32>, cfg: &StageConfig) -> Result<LayerGroups, EngineError> {
    let mut groups = LayerGroups::new(model.layer_groups(), cfg.base_lr)?;
    if cfg.discriminative {
        groups = assign_discriminative_lrs(groups, cfg.base_lr, DISCR_DECAY)?;
    } else if let Some(lower) = cfg.lower_lr {
        let top = groups.len() - 1;
        groups.set_lrs((0..groups.len()).map(|g| if g == top { cfg.base_lr } else { lower }).collect());
    }
    Ok(groups)
}

fn train_lm(
    model: &mut LmModel<f32>,
    train: &[usize],
    val: &[usize],
    cfg: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RunMetrics, EngineError> {
    let stage = cfg.stage.name();
    let start = Instant::now();
    let jitter = Some(LengthJitter::default());
    let counts: Vec<usize> = (1..=cfg.epochs)
        .map(|e| {
            let mut r = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, e));
            lm_batches(train, cfg.batch_size, cfg.bptt, jitter, &mut r).map(|b| b.len())
        })
        .collect::<Result<_, _>>()?;
    let total: usize = counts.iter().sum();

    let mut metrics = RunMetrics::default();
    let eval = |m: &LmModel<f32>| -> Result<Option<f64>, EngineError> {
        if val.len() < 2 {
            return Ok(None);
        }
        lm_perplexity(m, val, cfg.batch_size, cfg.bptt).map(Some)
    };
    let ppl0 = eval(model)?;
    metrics.push(MetricsRow {
        stage: stage.into(),
        epoch: 0,
        iterations: 0,
        train_loss: None,
        val_loss: ppl0.map(f64::ln),
        val_error: None,
        perplexity: ppl0,
        wall_secs: start.elapsed().as_secs_f64(),
    });

    let mut groups = lm_groups(model, cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut t = 0usize;
    for epoch in 1..=cfg.epochs {
        groups = unfreeze_step(&cfg.unfreeze, groups, epoch);
        let trainable = groups.trainable_mask(model.params.len());
        let mut r = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        let batches = lm_batches(train, cfg.batch_size, cfg.bptt, jitter, &mut r)?;
        let mut state = LstmState::zeros(&model.config, cfg.batch_size);
        let (mut loss_sum, mut tok) = (0.0, 0usize);
        for b in &batches {
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape, |id| trainable[id.0]);
            let out = lm_forward(model, &mut tape, &vars, b, &state, true, rng)?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(EngineError::NonFinite {
                    stage: stage.into(),
                    iteration: t,
                });
            }
            loss_sum += loss as f64 * b.targets.len() as f64;
            tok += b.targets.len();
            state = out.state;
            let mut grads = tape.backward(out.loss)?;
            if let Some(c) = cfg.clip {
                grads.clip_global_norm(c);
            }
            let factor = cfg.schedule.factor(t.min(total), total)?;
            opt.apply_update(&mut model.params, &groups, factor, &grads)?;
            t += 1;
        }
        let ppl = eval(model)?;
        metrics.push(MetricsRow {
            stage: stage.into(),
            epoch,
            iterations: t,
            train_loss: Some(loss_sum / tok.max(1) as f64),
            val_loss: ppl.map(f64::ln),
            val_error: None,
            perplexity: ppl,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(metrics)
}

fn lm_checkpoint(model: &LmModel<f32>, vocab: &Vocab, tokenize: TokenizeMode) -> Checkpoint {
    Checkpoint::from_params(
        CheckpointMeta {
            kind: ModelKind::Lm,
            lm: model.config.clone(),
            head: None,
            tokenize,
            vocab: vocab.tokens().to_vec(),
            labels: Vec::new(),
        },
        &model.params,
    )
}

/// Trains a language model from scratch on `corpus`.
pub fn run_pretrain(cfg: &StageConfig, corpus: &str) -> Result<(Checkpoint, RunMetrics), EngineError> {
    cfg.validate()?;
    let spec = &cfg.model;
    let tokens = tokenize(corpus, spec.tokenize);
    if tokens.is_empty() {
        return Err(EngineError::Data("pretraining corpus has no tokens".into()));
    }
    let vocab = build_vocab(&[tokens], spec.max_vocab, spec.min_freq)?;
    let ids = encode_stream(corpus, &vocab, spec.tokenize, cfg.direction);
    let (train, val) = split_stream(ids, cfg.val_frac, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let config = LmConfig {
        vocab_size: vocab.len(),
        embed_dim: spec.embed_dim,
        hidden_dim: spec.hidden_dim,
        n_layers: spec.n_layers,
        dropouts: spec.dropouts,
        tie_weights: spec.tie_weights,
        direction: cfg.direction,
    };
    let mut model = LmModel::new(config, &mut rng)?;
    let metrics = train_lm(&mut model, &train, &val, cfg, &mut rng)?;
    Ok((lm_checkpoint(&model, &vocab, spec.tokenize), metrics))
}

/// Extends `vocab` with the tokens of `text` it lacks (most frequent first)
/// and builds a matching model: rows of known tokens are copied, new rows
/// start at the mean embedding (and mean decoder bias).
pub fn transfer_vocab(
    pretrained: &Checkpoint,
    text: &str,
) -> Result<(LmModel<f32>, Vocab), EngineError> {
    let old = pretrained.lm_model()?;
    let old_vocab = pretrained.vocab()?;
    let mode = pretrained.meta.tokenize;
    let tokens = tokenize(text, mode);
    let target = build_vocab(&[tokens], usize::MAX, 1)?;
    let novel: Vec<String> = target.tokens()[RESERVED.len()..]
        .iter()
        .filter(|t| old_vocab.id(t).is_none())
        .cloned()
        .collect();
    if target.len() > RESERVED.len() && novel.len() == target.len() - RESERVED.len() {
        return Err(EngineError::VocabMismatch);
    }
    if novel.is_empty() {
        return Ok((old, old_vocab));
    }
    let vocab = Vocab::from_tokens(old_vocab.tokens().iter().cloned().chain(novel))?;
    let config = LmConfig {
        vocab_size: vocab.len(),
        ..old.config.clone()
    };
    let mut model = LmModel::<f32>::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (id, p) in old.params.iter() {
        let name = &p.name;
        let src = &p.tensor;
        let dst_id = model.params.id(name).expect("same architecture");
        let grown = if id == old.embedding {
            grow_rows(src, vocab.len())
        } else if id == old.decoder_bias {
            grow_vector(src, vocab.len())
        } else if Some(id) == old.decoder_weight {
            grow_cols(src, vocab.len())
        } else {
            src.clone()
        };
        *model.params.get_mut(dst_id) = grown.with_requires_grad(true);
    }
    Ok((model, vocab))
}

fn grow_rows(t: &Tensor<f32>, rows: usize) -> Tensor<f32> {
    let (n, d) = t.dims2().expect("rank-2 embedding");
    let mut mean = vec![0.0f32; d];
    for row in t.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f32);
    }
    let mut data = t.data().to_vec();
    for _ in n..rows {
        data.extend_from_slice(&mean);
    }
    Tensor::new([rows, d], data).expect("consistent shape")
}

fn grow_vector(t: &Tensor<f32>, len: usize) -> Tensor<f32> {
    let mean = t.data().iter().sum::<f32>() / t.numel() as f32;
    let mut data = t.data().to_vec();
    data.resize(len, mean);
    Tensor::new([len], data).expect("consistent shape")
}

fn grow_cols(t: &Tensor<f32>, cols: usize) -> Tensor<f32> {
    let (r, c) = t.dims2().expect("rank-2 decoder");
    let mut data = Vec::with_capacity(r * cols);
    for row in t.data().chunks(c) {
        let mean = row.iter().sum::<f32>() / c as f32;
        data.extend_from_slice(row);
        data.extend(std::iter::repeat_n(mean, cols - c));
    }
    Tensor::new([r, cols], data).expect("consistent shape")
}

/// Fine-tunes a pretrained language model on target-task text.
pub fn run_lm_finetune(
    cfg: &StageConfig,
    pretrained: &Checkpoint,
    task_text: &str,
) -> Result<(Checkpoint, RunMetrics), EngineError> {
    cfg.validate()?;
    let (mut model, vocab) = transfer_vocab(pretrained, task_text)?;
    let mode = pretrained.meta.tokenize;
    let ids = encode_stream(task_text, &vocab, mode, model.config.direction);
    let (train, val) = split_stream(ids, cfg.val_frac, cfg.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dropouts = model.config.dropouts;
    model.config.dropouts = dropouts.scaled(cfg.dropout_scale);
    let metrics = train_lm(&mut model, &train, &val, cfg, &mut rng)?;
    model.config.dropouts = dropouts;
    Ok((lm_checkpoint(&model, &vocab, mode), metrics))
}

/// Copies of every parameter tensor, for restoring an earlier epoch.
pub(super) fn snapshot(params: &ParamStore<f32>) -> Vec<Tensor<f32>> {
    params.iter().map(|(_, p)| p.tensor.clone()).collect()
}

pub(super) fn restore(params: &mut ParamStore<f32>, snap: Vec<Tensor<f32>>) {
    for (i, t) in snap.into_iter().enumerate() {
        *params.get_mut(crate::tensor::ParamId(i)) = t;
    }
}
