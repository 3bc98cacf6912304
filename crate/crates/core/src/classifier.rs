//! Concat-pooling classifier stacked on the language-model trunk, and the
//! chunked document forward pass that feeds it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{DropoutMasks, LmError, LmModel, LstmState};
use crate::tensor::{
    dropout_mask, softmax_rows, BatchNormMode, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var,
};
use crate::text::DocChunks;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ClfError {
    #[error("invalid head config: {0}")]
    Config(String),
    #[error("document {0} has no content tokens to pool")]
    EmptyDocument(usize),
    #[error("prediction shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub n_classes: usize,
    /// Dropout before the first and second linear layer.
    pub drops: (f64, f64),
    pub use_batch_norm: bool,
}

impl HeadConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            hidden: 50,
            n_classes,
            drops: (0.2, 0.1),
            use_batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<(), ClfError> {
        if self.hidden == 0 {
            return Err(ClfError::Config("hidden size must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(ClfError::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        for p in [self.drops.0, self.drops.1] {
            if !(0.0..1.0).contains(&p) {
                return Err(ClfError::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One batch-norm, dropout, linear block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadBlock {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Running statistics; stored with the parameters but never trained.
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
    pub drop: f64,
}

impl HeadBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        drop: f64,
        rng: &mut R,
    ) -> Self {
        let k = 1.0 / (in_dim as f64).sqrt();
        Self {
            gamma: params.add(format!("{prefix}.bn.weight"), Tensor::full([in_dim], T::one())),
            beta: params.add(format!("{prefix}.bn.bias"), Tensor::zeros([in_dim])),
            running_mean: params.add(format!("{prefix}.bn.running_mean"), Tensor::zeros([in_dim])),
            running_var: params.add(format!("{prefix}.bn.running_var"), Tensor::full([in_dim], T::one())),
            weight: params.add(format!("{prefix}.linear.weight"), Tensor::uniform([in_dim, out_dim], -k, k, rng)),
            bias: params.add(format!("{prefix}.linear.bias"), Tensor::zeros([out_dim])),
            drop,
        }
    }

    fn trainable(&self) -> [ParamId; 4] {
        [self.gamma, self.beta, self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub blocks: [HeadBlock; 2],
}

impl Head {
    /// Adds freshly initialised head parameters for `in_dim` pooled features.
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: HeadConfig,
        in_dim: usize,
        params: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, ClfError> {
        config.validate()?;
        let b1 = HeadBlock::new(params, "head.0", in_dim, config.hidden, config.drops.0, rng);
        let b2 = HeadBlock::new(params, "head.1", config.hidden, config.n_classes, config.drops.1, rng);
        Ok(Self {
            config,
            blocks: [b1, b2],
        })
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(HeadBlock::trainable).collect()
    }
}

/// Output of [`head_forward`].
pub struct HeadOutput {
    /// `[batch, n_classes]` unnormalised scores.
    pub logits: Var,
    /// Batch-norm outputs per block, for reading batch statistics.
    pub bn: Vec<Var>,
}

/// BN, dropout, linear, ReLU; then BN, dropout, linear. Softmax is left to
/// the loss or to [`softmax_rows`].
pub fn head_forward<T: Real, R: Rng + ?Sized>(
    head: &Head,
    params: &ParamStore<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    pooled: Var,
    train: bool,
    rng: &mut R,
) -> Result<HeadOutput, ClfError> {
    let mut x = pooled;
    let mut bn = Vec::new();
    for (i, block) in head.blocks.iter().enumerate() {
        if head.config.use_batch_norm {
            let mode = if train {
                BatchNormMode::Train
            } else {
                BatchNormMode::Eval {
                    mean: params.get(block.running_mean).data(),
                    var: params.get(block.running_var).data(),
                }
            };
            x = tape.batch_norm(x, vars[block.gamma.0], vars[block.beta.0], mode, BN_EPS)?;
            bn.push(x);
        }
        if train && block.drop > 0.0 {
            let mask = dropout_mask(tape.value(x).numel(), block.drop, rng);
            x = tape.dropout(x, mask)?;
        }
        let y = tape.matmul(x, vars[block.weight.0])?;
        x = tape.add(y, vars[block.bias.0])?;
        if i == 0 {
            x = tape.relu(x)?;
        }
    }
    Ok(HeadOutput { logits: x, bn })
}

/// Folds the batch statistics recorded during a training forward pass into
/// the running estimates (momentum 0.1, unbiased variance).
pub fn update_running_stats<T: Real>(head: &Head, params: &mut ParamStore<T>, tape: &Tape<T>, out: &HeadOutput) {
    for (block, &v) in head.blocks.iter().zip(&out.bn) {
        let Some((mean, var)) = tape.batch_stats(v) else {
            continue;
        };
        let n = tape.shape(v)[0] as f64;
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = T::lit(n / (n - 1.0));
        let (mean, var) = (mean.to_vec(), var.to_vec());
        for (r, b) in params.get_mut(block.running_mean).data_mut().iter_mut().zip(&mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in params.get_mut(block.running_var).data_mut().iter_mut().zip(&var) {
            *r = keep * *r + m * *b * unbias;
        }
    }
}

/// Pooling statistics over the trunk's final-layer outputs.
#[derive(Debug, Clone)]
pub struct PooledState {
    /// `[batch, H]` output at the last time step.
    pub h_last: Var,
    /// `[batch, H]` max over content positions.
    pub running_max: Var,
    /// `[batch, H]` sum over content positions.
    pub running_sum: Var,
    /// Content positions per batch element.
    pub count: Vec<usize>,
}

/// `[h_last, max, mean]` along the feature axis.
pub fn concat_pool<T: Real>(tape: &mut Tape<T>, state: &PooledState) -> Result<Var, ClfError> {
    if let Some(b) = state.count.iter().position(|&c| c == 0) {
        return Err(ClfError::EmptyDocument(b));
    }
    let inv: Vec<T> = state.count.iter().map(|&c| T::one() / T::from_usize(c).unwrap()).collect();
    let mean = tape.scale_rows(state.running_sum, &inv)?;
    Ok(tape.concat(&[state.h_last, state.running_max, mean], 1)?)
}

/// A classifier: language-model trunk plus head, sharing one parameter store.
/// Decoder parameters of the trunk stay in the store but are unused.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub lm: LmModel<T>,
    pub head: Head,
}

impl<T: Real> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(mut lm: LmModel<T>, config: HeadConfig, rng: &mut R) -> Result<Self, ClfError> {
        let in_dim = 3 * lm.config.output_dim();
        let head = Head::new(config, in_dim, &mut lm.params, rng)?;
        Ok(Self { lm, head })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.lm.params
    }

    /// Embedding, each LSTM layer, then the head.
    pub fn layer_groups(&self) -> Vec<Vec<ParamId>> {
        let mut groups = self.lm.trunk_groups();
        groups.push(self.head.trainable());
        groups
    }
}

/// Result of [`bpt3c_forward`].
pub struct ClfOutput {
    pub logits: Var,
    pub pooled: Var,
    pub head: HeadOutput,
}

/// Runs a batch of front-padded documents through the trunk chunk by chunk,
/// carrying hidden state across chunks, then pools and classifies.
///
/// Only the last `grad_window` chunks are recorded on `tape`; earlier ones
/// run on a scratch tape and contribute their state and pooling statistics
/// as constants. Dropout masks are drawn once for the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn bpt3c_forward<T: Real, R: Rng + ?Sized>(
    model: &Classifier<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    chunks: &DocChunks,
    grad_window: usize,
    train: bool,
    rng: &mut R,
) -> Result<ClfOutput, ClfError> {
    let lm = &model.lm;
    let b = chunks.batch_size;
    let h = lm.config.output_dim();
    let n = chunks.num_chunks();
    let masks = if train {
        DropoutMasks::sample(&lm.config, b, rng)
    } else {
        DropoutMasks::none(lm.config.n_layers)
    };
    let first_taped = n.saturating_sub(grad_window.max(1));

    let mut state = LstmState::<T>::zeros(&lm.config, b);
    let mut run_max = vec![T::neg_infinity(); b * h];
    let mut run_sum = vec![T::zero(); b * h];
    for k in 0..first_taped {
        let mut scratch = Tape::new();
        let svars = lm.params.register(&mut scratch, |_| false);
        let init = state.to_tape(&mut scratch);
        let mask = chunks.mask(k);
        let trunk = lm.encode(&mut scratch, &svars, &chunks.chunks[k], b, &init, &masks)?;
        let seq = scratch.reshape(trunk.outputs, &[chunks.chunk_len, b, h])?;
        let mx = scratch.max_over_time(seq, Some(&mask))?;
        let sm = scratch.sum_over_time(seq, Some(&mask))?;
        for (r, x) in run_max.iter_mut().zip(scratch.data(mx)) {
            if *x > *r {
                *r = *x;
            }
        }
        for (r, x) in run_sum.iter_mut().zip(scratch.data(sm)) {
            *r += *x;
        }
        state = LstmState::from_tape(&scratch, &trunk.state);
    }

    let mut carried = state.to_tape(tape);
    let mut max_var = tape.constant(Tensor::new([b, h], run_max)?);
    let mut sum_var = tape.constant(Tensor::new([b, h], run_sum)?);
    let mut h_last = None;
    for k in first_taped..n {
        let mask = chunks.mask(k);
        let trunk = lm.encode(tape, vars, &chunks.chunks[k], b, &carried, &masks)?;
        let seq = tape.reshape(trunk.outputs, &[chunks.chunk_len, b, h])?;
        let mx = tape.max_over_time(seq, Some(&mask))?;
        let sm = tape.sum_over_time(seq, Some(&mask))?;
        max_var = tape.maximum(mx, max_var)?;
        sum_var = tape.add(sum_var, sm)?;
        carried = trunk.state;
        h_last = Some(tape.slice(trunk.outputs, 0, (chunks.chunk_len - 1) * b, b)?);
    }
    let pooled_state = PooledState {
        h_last: h_last.expect("at least one chunk"),
        running_max: max_var,
        running_sum: sum_var,
        count: chunks.lengths.clone(),
    };
    let pooled = concat_pool(tape, &pooled_state)?;
    let head = head_forward(&model.head, &lm.params, tape, vars, pooled, train, rng)?;
    Ok(ClfOutput {
        logits: head.logits,
        pooled,
        head,
    })
}

/// Class probabilities from logits, computed in f64.
pub fn probabilities<T: Real>(tape: &Tape<T>, logits: Var) -> Tensor<f64> {
    softmax_rows(&tape.value(logits).cast::<f64>())
}

/// Elementwise mean of two probability tables.
pub fn ensemble_predict(fwd: &Tensor<f64>, bwd: &Tensor<f64>) -> Result<Tensor<f64>, ClfError> {
    if fwd.shape() != bwd.shape() {
        return Err(ClfError::ShapeMismatch(fwd.shape().to_vec(), bwd.shape().to_vec()));
    }
    let data = fwd.data().iter().zip(bwd.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(Tensor::new(fwd.shape().to_vec(), data)?)
}
