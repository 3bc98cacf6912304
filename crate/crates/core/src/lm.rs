//! Weight-dropped LSTM language model.
//!
//! Five dropout sites: rows of the embedding matrix, the embedded inputs,
//! the outputs of every non-final LSTM layer, the final LSTM output, and the
//! hidden-to-hidden weights (DropConnect). All masks are drawn once per
//! forward call and shared across time steps.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dropout_mask, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};
use crate::text::LmBatch;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("hidden state has batch size {state} but the input has {input}")]
    StateMismatch { state: usize, input: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmDropouts {
    /// Final LSTM output, before the decoder or classifier.
    pub output: f64,
    /// Between LSTM layers.
    pub rnn_internal: f64,
    /// Embedded inputs.
    pub input_embedding: f64,
    /// Whole rows of the embedding matrix.
    pub embedding_matrix: f64,
    /// Hidden-to-hidden weights.
    pub weight_drop: f64,
}

impl LmDropouts {
    pub const PAPER: LmDropouts = LmDropouts {
        output: 0.4,
        rnn_internal: 0.3,
        input_embedding: 0.4,
        embedding_matrix: 0.05,
        weight_drop: 0.5,
    };

    pub const NONE: LmDropouts = LmDropouts {
        output: 0.0,
        rnn_internal: 0.0,
        input_embedding: 0.0,
        embedding_matrix: 0.0,
        weight_drop: 0.0,
    };

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            output: self.output * factor,
            rnn_internal: self.rnn_internal * factor,
            input_embedding: self.input_embedding * factor,
            embedding_matrix: self.embedding_matrix * factor,
            weight_drop: self.weight_drop * factor,
        }
    }
}

impl Default for LmDropouts {
    fn default() -> Self {
        Self::PAPER
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub dropouts: LmDropouts,
    pub tie_weights: bool,
    pub direction: Direction,
}

impl LmConfig {
    /// Full-size configuration: 400-d embeddings, 3 x 1150 LSTM.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 400,
            hidden_dim: 1150,
            n_layers: 3,
            dropouts: LmDropouts::PAPER,
            tie_weights: true,
            direction: Direction::Forward,
        }
    }

    /// Desk-scale configuration: 64-d embeddings, 3 x 128 LSTM.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            ..Self::paper(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let d = &self.dropouts;
        let rates = [
            ("output", d.output),
            ("rnn_internal", d.rnn_internal),
            ("input_embedding", d.input_embedding),
            ("embedding_matrix", d.embedding_matrix),
        ];
        for (name, p) in rates {
            if !(0.0..1.0).contains(&p) {
                return Err(LmError::Config(format!("{name} dropout {p} outside [0, 1)")));
            }
        }
        // A weight-drop rate of 1 is allowed: it removes the recurrence entirely.
        if !(0.0..=1.0).contains(&d.weight_drop) {
            return Err(LmError::Config(format!(
                "weight_drop {} outside [0, 1]",
                d.weight_drop
            )));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(LmError::Config("dimensions and n_layers must be positive".into()));
        }
        Ok(())
    }

    /// Output width of LSTM layer `l`; the last layer matches the embedding
    /// when weights are tied.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let input = if l == 0 { self.embed_dim } else { self.hidden_dim };
        let output = if l + 1 == self.n_layers && self.tie_weights {
            self.embed_dim
        } else {
            self.hidden_dim
        };
        (input, output)
    }

    pub fn output_dim(&self) -> usize {
        self.layer_dims(self.n_layers - 1).1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Per-layer `(h, c)` values, each `[batch, hidden_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub h: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(config: &LmConfig, batch: usize) -> Self {
        let dims: Vec<usize> = (0..config.n_layers).map(|l| config.layer_dims(l).1).collect();
        Self {
            h: dims.iter().map(|&d| Tensor::zeros([batch, d])).collect(),
            c: dims.iter().map(|&d| Tensor::zeros([batch, d])).collect(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.h.first().map_or(0, |t| t.shape()[0])
    }

    /// Records the state on `tape` as constants (gradient does not flow into
    /// earlier windows).
    pub fn to_tape(&self, tape: &mut Tape<T>) -> Vec<(Var, Var)> {
        self.h
            .iter()
            .zip(&self.c)
            .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
            .collect()
    }

    pub fn from_tape(tape: &Tape<T>, vars: &[(Var, Var)]) -> Self {
        Self {
            h: vars.iter().map(|(h, _)| tape.value(*h).clone().with_requires_grad(false)).collect(),
            c: vars.iter().map(|(_, c)| tape.value(*c).clone().with_requires_grad(false)).collect(),
        }
    }
}

/// Dropout masks for one forward call. `None` means the site is inactive.
/// Variational masks are `[batch * dim]` and reused at every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    /// One entry per vocabulary row.
    pub embedding_rows: Option<Vec<T>>,
    pub input: Option<Vec<T>>,
    /// After layers `0..n_layers - 1`.
    pub hidden: Vec<Option<Vec<T>>>,
    pub output: Option<Vec<T>>,
    /// `[hidden_l * 4 hidden_l]` per layer.
    pub weight: Vec<Option<Vec<T>>>,
}

impl<T: Real> DropoutMasks<T> {
    pub fn none(n_layers: usize) -> Self {
        Self {
            embedding_rows: None,
            input: None,
            hidden: vec![None; n_layers.saturating_sub(1)],
            output: None,
            weight: vec![None; n_layers],
        }
    }

    pub fn sample<R: Rng + ?Sized>(config: &LmConfig, batch: usize, rng: &mut R) -> Self {
        let d = config.dropouts;
        let draw = |len: usize, p: f64, rng: &mut R| (p > 0.0).then(|| dropout_mask(len, p, rng));
        let embedding_rows = draw(config.vocab_size, d.embedding_matrix, rng);
        let input = draw(batch * config.embed_dim, d.input_embedding, rng);
        let hidden = (0..config.n_layers.saturating_sub(1))
            .map(|l| draw(batch * config.layer_dims(l).1, d.rnn_internal, rng))
            .collect();
        let output = draw(batch * config.output_dim(), d.output, rng);
        let weight = (0..config.n_layers)
            .map(|l| {
                let h = config.layer_dims(l).1;
                draw(h * 4 * h, d.weight_drop, rng)
            })
            .collect();
        Self {
            embedding_rows,
            input,
            hidden,
            output,
            weight,
        }
    }
}

fn tile<T: Real>(mask: &[T], times: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(mask.len() * times);
    for _ in 0..times {
        out.extend_from_slice(mask);
    }
    out
}

/// Output of [`LmModel::encode`].
pub struct TrunkOutput {
    /// Final-layer outputs after output dropout, `[seq_len * batch, out_dim]`.
    pub outputs: Var,
    /// Input to each LSTM layer after dropout, `[seq_len * batch, in_dim]`.
    pub layer_inputs: Vec<Var>,
    /// Final `(h, c)` per layer, still on the tape.
    pub state: Vec<(Var, Var)>,
    /// Per-step hidden states of the last layer before output dropout.
    pub last_hidden: Var,
}

#[derive(Debug, Clone)]
pub struct LmModel<T> {
    pub config: LmConfig,
    pub params: ParamStore<T>,
    pub embedding: ParamId,
    pub layers: Vec<LstmLayer>,
    /// `None` when tied to the embedding.
    pub decoder_weight: Option<ParamId>,
    pub decoder_bias: ParamId,
}

impl<T: Real> LmModel<T> {
    /// Random initialisation: embeddings `U(-0.1, 0.1)`, LSTM weights
    /// `U(-1/sqrt(h), 1/sqrt(h))`, zero biases except `+1` on the forget gate.
    pub fn new<R: Rng + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self, LmError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let embedding = params.add(
            "encoder.weight",
            Tensor::uniform([config.vocab_size, config.embed_dim], -0.1, 0.1, rng),
        );
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let (input_dim, h) = config.layer_dims(l);
            let k = 1.0 / (h as f64).sqrt();
            let w_ih = params.add(format!("rnn.{l}.weight_ih"), Tensor::uniform([input_dim, 4 * h], -k, k, rng));
            let w_hh = params.add(format!("rnn.{l}.weight_hh"), Tensor::uniform([h, 4 * h], -k, k, rng));
            let mut b = vec![T::zero(); 4 * h];
            // Gate order is [input, forget, output, cell].
            b[h..2 * h].iter_mut().for_each(|x| *x = T::one());
            let bias = params.add(format!("rnn.{l}.bias"), Tensor::new([4 * h], b)?);
            layers.push(LstmLayer {
                w_ih,
                w_hh,
                bias,
                input_dim,
                hidden_dim: h,
            });
        }
        let out_dim = config.output_dim();
        let decoder_weight = (!config.tie_weights).then(|| {
            let k = 1.0 / (out_dim as f64).sqrt();
            params.add(
                "decoder.weight",
                Tensor::uniform([out_dim, config.vocab_size], -k, k, rng),
            )
        });
        let decoder_bias = params.add("decoder.bias", Tensor::zeros([config.vocab_size]));
        Ok(Self {
            config,
            params,
            embedding,
            layers,
            decoder_weight,
            decoder_bias,
        })
    }

    /// Parameter groups from the bottom up: embedding (with the tied decoder
    /// bias), one group per LSTM layer, and a separate decoder group when
    /// weights are untied.
    pub fn layer_groups(&self) -> Vec<Vec<ParamId>> {
        let mut groups = Vec::new();
        let mut first = vec![self.embedding];
        if self.decoder_weight.is_none() {
            first.push(self.decoder_bias);
        }
        groups.push(first);
        for layer in &self.layers {
            groups.push(vec![layer.w_ih, layer.w_hh, layer.bias]);
        }
        if let Some(w) = self.decoder_weight {
            groups.push(vec![w, self.decoder_bias]);
        }
        groups
    }

    /// Trunk parameters grouped per layer, without the decoder: the
    /// embedding followed by each LSTM layer.
    pub fn trunk_groups(&self) -> Vec<Vec<ParamId>> {
        let mut groups = vec![vec![self.embedding]];
        for layer in &self.layers {
            groups.push(vec![layer.w_ih, layer.w_hh, layer.bias]);
        }
        groups
    }

    /// Runs the embedding and LSTM stack over `ids` laid out row-major
    /// `[seq_len x batch]`, starting from `state`.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ids: &[usize],
        batch: usize,
        state: &[(Var, Var)],
        masks: &DropoutMasks<T>,
    ) -> Result<TrunkOutput, LmError> {
        let cfg = &self.config;
        if state.len() != cfg.n_layers {
            return Err(LmError::Config(format!(
                "state has {} layers, model has {}",
                state.len(),
                cfg.n_layers
            )));
        }
        let state_batch = tape.shape(state[0].0)[0];
        if state_batch != batch || !ids.len().is_multiple_of(batch) {
            return Err(LmError::StateMismatch {
                state: state_batch,
                input: batch,
            });
        }
        let seq_len = ids.len() / batch;

        let mut table = vars[self.embedding.0];
        if let Some(rows) = &masks.embedding_rows {
            let e = cfg.embed_dim;
            let full: Vec<T> = rows.iter().flat_map(|&m| std::iter::repeat_n(m, e)).collect();
            table = tape.dropout(table, full)?;
        }
        let mut x = tape.embedding(table, ids)?;
        if let Some(m) = &masks.input {
            x = tape.dropout(x, tile(m, seq_len))?;
        }

        let mut layer_inputs = Vec::with_capacity(cfg.n_layers);
        let mut new_state = Vec::with_capacity(cfg.n_layers);
        let mut last_hidden = x;
        for (l, layer) in self.layers.iter().enumerate() {
            layer_inputs.push(x);
            let h_dim = layer.hidden_dim;
            let xw = tape.matmul(x, vars[layer.w_ih.0])?;
            let xproj = tape.add(xw, vars[layer.bias.0])?;
            let mut w_hh = vars[layer.w_hh.0];
            if let Some(m) = &masks.weight[l] {
                w_hh = tape.dropout(w_hh, m.clone())?;
            }
            let (mut h, mut c) = state[l];
            let mut hs = Vec::with_capacity(seq_len);
            for t in 0..seq_len {
                let xt = tape.slice(xproj, 0, t * batch, batch)?;
                let hw = tape.matmul(h, w_hh)?;
                let gates = tape.add(xt, hw)?;
                let sig_in = tape.slice(gates, 1, 0, 3 * h_dim)?;
                let sig = tape.sigmoid(sig_in)?;
                let g_in = tape.slice(gates, 1, 3 * h_dim, h_dim)?;
                let g = tape.tanh(g_in)?;
                let i = tape.slice(sig, 1, 0, h_dim)?;
                let f = tape.slice(sig, 1, h_dim, h_dim)?;
                let o = tape.slice(sig, 1, 2 * h_dim, h_dim)?;
                let fc = tape.mul(f, c)?;
                let ig = tape.mul(i, g)?;
                c = tape.add(fc, ig)?;
                let tc = tape.tanh(c)?;
                h = tape.mul(o, tc)?;
                hs.push(h);
            }
            new_state.push((h, c));
            let out = if hs.len() == 1 { hs[0] } else { tape.concat(&hs, 0)? };
            last_hidden = out;
            x = out;
            if l + 1 < cfg.n_layers {
                if let Some(m) = &masks.hidden[l] {
                    x = tape.dropout(x, tile(m, seq_len))?;
                }
            }
        }
        if let Some(m) = &masks.output {
            x = tape.dropout(x, tile(m, seq_len))?;
        }
        Ok(TrunkOutput {
            outputs: x,
            layer_inputs,
            state: new_state,
            last_hidden,
        })
    }

    /// Projects trunk outputs onto vocabulary logits.
    pub fn decode(&self, tape: &mut Tape<T>, vars: &[Var], outputs: Var) -> Result<Var, LmError> {
        let scores = match self.decoder_weight {
            Some(w) => tape.matmul(outputs, vars[w.0])?,
            None => tape.matmul_nt(outputs, vars[self.embedding.0])?,
        };
        Ok(tape.add(scores, vars[self.decoder_bias.0])?)
    }
}

/// Result of one [`lm_forward`] call.
pub struct LmOutput<T> {
    /// `[len * batch, vocab]`; row `t * batch + b` is step `t` of column `b`.
    pub logits: Var,
    /// Mean token cross-entropy.
    pub loss: Var,
    /// Final state, detached from the tape.
    pub state: LstmState<T>,
    pub trunk: TrunkOutput,
    pub masks: DropoutMasks<T>,
}

/// One language-model step over `batch`, carrying `state` in and out.
///
/// In training mode fresh dropout masks are drawn for this call.
pub fn lm_forward<T: Real, R: Rng + ?Sized>(
    model: &LmModel<T>,
    tape: &mut Tape<T>,
    vars: &[Var],
    batch: &LmBatch,
    state: &LstmState<T>,
    train: bool,
    rng: &mut R,
) -> Result<LmOutput<T>, LmError> {
    if state.batch_size() != batch.batch_size {
        return Err(LmError::StateMismatch {
            state: state.batch_size(),
            input: batch.batch_size,
        });
    }
    let masks = if train {
        DropoutMasks::sample(&model.config, batch.batch_size, rng)
    } else {
        DropoutMasks::none(model.config.n_layers)
    };
    let init = state.to_tape(tape);
    let trunk = model.encode(tape, vars, &batch.inputs, batch.batch_size, &init, &masks)?;
    let logits = model.decode(tape, vars, trunk.outputs)?;
    let loss = tape.softmax_cross_entropy(logits, &batch.targets)?;
    let state = LstmState::from_tape(tape, &trunk.state);
    Ok(LmOutput {
        logits,
        loss,
        state,
        trunk,
        masks,
    })
}

/// Reverses token order, for training a backward language model.
pub fn reverse_stream(stream: &[usize]) -> Vec<usize> {
    stream.iter().rev().copied().collect()
}
