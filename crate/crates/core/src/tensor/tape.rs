use std::collections::HashMap;

use super::gemm::{gemm, MatRef};
use super::{shape_err, softmax_in_place, OpKind, ParamId, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How `batch_norm` normalises its input.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with externally tracked running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        bias: bool,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    MaxOverTime {
        a: Var,
        argmax: Vec<Option<usize>>,
    },
    PoolOverTime {
        a: Var,
        mask: Option<Vec<bool>>,
        /// Per batch-element multiplier: `1/count` for mean, `1` for sum.
        weight: Vec<T>,
    },
    Maximum {
        a: Var,
        b: Var,
    },
    ScaleRows {
        a: Var,
        scale: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        a: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    map: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.map.insert(id, grad);
    }

    /// L2 norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.map.keys().copied().collect();
        ids.sort();
        ids.iter()
            .flat_map(|id| self.map[id].data().iter())
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = T::lit(max_norm / norm);
            for g in self.map.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }
}

/// Records operations in execution order and replays them backwards.
///
/// Nodes are appended, so inputs always precede the nodes that consume them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient stored on a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Mean and biased variance computed by a training-mode `batch_norm`.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        self.nodes[v.0]
            .batch_stats
            .as_ref()
            .map(|(m, s)| (m.as_slice(), s.as_slice()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            param: None,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Records a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, tensor: &Tensor<T>) -> Var {
        let v = self.push(tensor.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn mat_dims(&self, op: OpKind, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(shape_err(op, format!("expected a rank-2 operand, got {s:?}"))),
        }
    }

    fn same_shape(&self, op: OpKind, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (m, k) = self.mat_dims(OpKind::MatMul, a)?;
        let (br, bc) = self.mat_dims(OpKind::MatMul, b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                OpKind::MatMul,
                format!(
                    "lhs {:?} cannot multiply rhs {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if trans_b { " (transposed)" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatRef::row_major(self.data(a), m, k);
            let bv = if trans_b {
                MatRef::transposed(self.data(b), br, bc)
            } else {
                MatRef::row_major(self.data(b), br, bc)
            };
            gemm(av, bv, T::zero(), &mut out);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `a b` for rank-2 `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a bᵀ` for rank-2 `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    /// Elementwise sum of equal shapes, or `a + b` with `b` a rank-1 bias
    /// over the last dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bias = if sa == sb {
            false
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            true
        } else {
            return Err(shape_err(
                OpKind::Add,
                format!("cannot add {sa:?} and {sb:?}"),
            ));
        };
        let mut out = self.data(a).to_vec();
        let bd = self.data(b);
        if bias {
            let c = sb[0];
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(bd).for_each(|(x, y)| *x += *y);
            }
        } else {
            out.iter_mut().zip(bd).for_each(|(x, y)| *x += *y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, Op::Add { a, b, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(OpKind::Mul, a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, TensorError> {
        let out: Vec<T> = self.data(a).iter().map(|x| *x * factor).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { a, factor }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, TensorError> {
        let out: Vec<T> = self.data(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err(OpKind::Concat, "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(
                OpKind::Concat,
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err(
                    OpKind::Concat,
                    format!("operand {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let d = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.data(*p)[o * d..(o + 1) * d]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err(
                OpKind::Slice,
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Gathers rows of `table: [V, E]` into `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, e) = self.mat_dims(OpKind::EmbeddingLookup, table)?;
        if ids.is_empty() {
            return Err(shape_err(OpKind::EmbeddingLookup, "no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err(
                OpKind::EmbeddingLookup,
                format!("id {bad} outside table of {v} rows"),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), e], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies by a precomputed inverted-dropout mask (see [`super::dropout_mask`]).
    pub fn dropout(&mut self, a: Var, mask: Vec<T>) -> Result<Var, TensorError> {
        if mask.len() != self.value(a).numel() {
            return Err(shape_err(
                OpKind::DropoutMaskApply,
                format!("mask of {} for operand {:?}", mask.len(), self.shape(a)),
            ));
        }
        let out: Vec<T> = self.data(a).iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { a, mask }, rg))
    }

    /// Batch normalisation of `x: [N, D]` with affine `gamma`, `beta: [D]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (n, d) = self.mat_dims(OpKind::BatchNorm, x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err(
                    OpKind::BatchNorm,
                    format!("affine parameter {:?} for input {:?}", self.shape(p), self.shape(x)),
                ));
            }
        }
        let eps = T::lit(eps);
        let xd = self.data(x);
        let (mean, var, training) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(TensorError::DegenerateBatch { rows: n });
                }
                let nf = T::from_usize(n).unwrap();
                let mut mean = vec![T::zero(); d];
                for row in xd.chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += *v);
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); d];
                for row in xd.chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nf);
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != d || var.len() != d {
                    return Err(shape_err(
                        OpKind::BatchNorm,
                        format!("running stats of length {} for {d} features", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for row in xd.chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new([n, d], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        );
        if training {
            self.nodes[v.0].batch_stats = Some((mean, var));
        }
        Ok(v)
    }

    fn time_dims(
        &self,
        op: OpKind,
        a: Var,
        mask: Option<&[bool]>,
    ) -> Result<(usize, usize, usize), TensorError> {
        let s = self.shape(a);
        let [t, b, h] = s else {
            return Err(shape_err(op, format!("expected [time, batch, hidden], got {s:?}")));
        };
        if let Some(m) = mask {
            if m.len() != t * b {
                return Err(shape_err(op, format!("mask of {} for {s:?}", m.len())));
            }
        }
        Ok((*t, *b, *h))
    }

    /// Elementwise max over the time axis of `[T, B, H]`, skipping masked-out
    /// positions. Entries with no valid step are `-inf`.
    pub fn max_over_time(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let (t, b, h) = self.time_dims(OpKind::MaxOverTime, a, mask)?;
        let src = self.data(a);
        let mut out = vec![T::neg_infinity(); b * h];
        let mut argmax = vec![None; b * h];
        for ti in 0..t {
            for bi in 0..b {
                if mask.is_some_and(|m| !m[ti * b + bi]) {
                    continue;
                }
                let base = (ti * b + bi) * h;
                for hi in 0..h {
                    let x = src[base + hi];
                    let o = bi * h + hi;
                    if argmax[o].is_none() || x > out[o] {
                        out[o] = x;
                        argmax[o] = Some(base + hi);
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new([b, h], out)?, Op::MaxOverTime { a, argmax }, rg))
    }

    fn pool_over_time(
        &mut self,
        op: OpKind,
        a: Var,
        mask: Option<&[bool]>,
        mean: bool,
    ) -> Result<Var, TensorError> {
        let (t, b, h) = self.time_dims(op, a, mask)?;
        let src = self.data(a);
        let mut out = vec![T::zero(); b * h];
        let mut count = vec![0usize; b];
        for ti in 0..t {
            for bi in 0..b {
                if mask.is_some_and(|m| !m[ti * b + bi]) {
                    continue;
                }
                count[bi] += 1;
                let base = (ti * b + bi) * h;
                out[bi * h..(bi + 1) * h]
                    .iter_mut()
                    .zip(&src[base..base + h])
                    .for_each(|(o, x)| *o += *x);
            }
        }
        let weight: Vec<T> = count
            .iter()
            .map(|&c| {
                if mean && c > 0 {
                    T::one() / T::from_usize(c).unwrap()
                } else if mean {
                    T::zero()
                } else {
                    T::one()
                }
            })
            .collect();
        for bi in 0..b {
            out[bi * h..(bi + 1) * h].iter_mut().for_each(|o| *o *= weight[bi]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new([b, h], out)?,
            Op::PoolOverTime {
                a,
                mask: mask.map(<[bool]>::to_vec),
                weight,
            },
            rg,
        ))
    }

    /// Mean over the time axis of `[T, B, H]` counting only unmasked steps.
    pub fn mean_over_time(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        self.pool_over_time(OpKind::MeanOverTime, a, mask, true)
    }

    /// Sum over the time axis of `[T, B, H]` counting only unmasked steps.
    pub fn sum_over_time(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        self.pool_over_time(OpKind::SumOverTime, a, mask, false)
    }

    /// Elementwise maximum; ties route gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(OpKind::Maximum, a, b)?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| if *x >= *y { *x } else { *y })
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Maximum { a, b }, rg))
    }

    /// Multiplies row `i` of a rank-2 tensor by `scale[i]`.
    pub fn scale_rows(&mut self, a: Var, scale: &[T]) -> Result<Var, TensorError> {
        let (r, c) = self.mat_dims(OpKind::ScaleRows, a)?;
        if scale.len() != r {
            return Err(shape_err(
                OpKind::ScaleRows,
                format!("{} scales for {r} rows", scale.len()),
            ));
        }
        let mut out = self.data(a).to_vec();
        for (row, s) in out.chunks_mut(c).zip(scale) {
            row.iter_mut().for_each(|x| *x *= *s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new([r, c], out)?,
            Op::ScaleRows {
                a,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    /// A rank-1 `logits` is one row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let op = OpKind::SoftmaxCrossEntropy;
        let (n, c) = self
            .value(logits)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("logits {:?}", self.shape(logits))))?;
        if targets.len() != n {
            return Err(shape_err(op, format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err(op, format!("target {bad} with {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|x| (*x - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let loss = loss / T::from_usize(n).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.data(a).iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    /// Replays the tape from `loss` backwards, accumulating gradients.
    ///
    /// Leaves that require grad end up with a populated `grad`; intermediates
    /// do not keep theirs. Parameters the loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.value.requires_grad() || !matches!(node.op, Op::Leaf) {
                node.value.set_grad(None);
                continue;
            }
            let g = grads[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            if let Some(id) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                match out.map.get_mut(&id) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += *b),
                    None => {
                        out.map.insert(id, t);
                    }
                }
            }
            node.value.set_grad(Some(g));
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn backward_node(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (br, bc) = self.value(*b).dims2().unwrap();
                let n = if *trans_b { br } else { bc };
                let gv = MatRef::row_major(&g, m, n);
                if self.needs(*a) {
                    // dA = dC Bᵀ
                    let bt = if *trans_b {
                        MatRef::row_major(self.data(*b), br, bc)
                    } else {
                        MatRef::transposed(self.data(*b), br, bc)
                    };
                    gemm_into(gv, bt, &mut grads[a.0], m * k);
                }
                if self.needs(*b) {
                    if *trans_b {
                        // dB [n, k] = dCᵀ A
                        let gt = MatRef::transposed(&g, m, n);
                        let av = MatRef::row_major(self.data(*a), m, k);
                        gemm_into(gt, av, &mut grads[b.0], n * k);
                    } else {
                        // dB [k, n] = Aᵀ dC
                        let at = MatRef::transposed(self.data(*a), m, k);
                        gemm_into(at, gv, &mut grads[b.0], k * n);
                    }
                }
            }
            Op::Add { a, b, bias } => {
                if self.needs(*b) {
                    if *bias {
                        let c = self.value(*b).numel();
                        let mut gb = vec![T::zero(); c];
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += *y);
                        }
                        accumulate(&mut grads[b.0], gb);
                    } else {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let ga = g.iter().zip(self.data(*b)).map(|(x, y)| *x * *y).collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if self.needs(*b) {
                    let gb = g.iter().zip(self.data(*a)).map(|(x, y)| *x * *y).collect();
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale { a, factor } => {
                let ga = g.iter().map(|x| *x * *factor).collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let ga = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| *gi * *yi * (T::one() - *yi))
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                let ga = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| *gi * (T::one() - *yi * *yi))
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Relu { a } => {
                let y = node.value.data();
                let ga = g
                    .iter()
                    .zip(y)
                    .map(|(gi, yi)| if *yi > T::zero() { *gi } else { T::zero() })
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                let row = node.value.shape()[*axis] * inner;
                for p in parts {
                    let d = self.shape(*p)[*axis] * inner;
                    if self.needs(*p) {
                        let mut gp = Vec::with_capacity(outer * d);
                        for o in 0..outer {
                            let base = o * row + offset;
                            gp.extend_from_slice(&g[base..base + d]);
                        }
                        accumulate(&mut grads[p.0], gp);
                    }
                    offset += d;
                }
            }
            Op::Slice { a, axis, start } => {
                let src = self.shape(*a);
                let (outer, dim, inner) = axis_split(src, *axis);
                let len = node.value.shape()[*axis];
                let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); outer * dim * inner]);
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    slot[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(x, y)| *x += *y);
                }
            }
            Op::Reshape { a } => accumulate(&mut grads[a.0], g),
            Op::Embedding { table, ids } => {
                let (v, e) = self.value(*table).dims2().unwrap();
                let slot = grads[table.0].get_or_insert_with(|| vec![T::zero(); v * e]);
                for (r, &id) in ids.iter().enumerate() {
                    slot[id * e..(id + 1) * e]
                        .iter_mut()
                        .zip(&g[r * e..(r + 1) * e])
                        .for_each(|(x, y)| *x += *y);
                }
            }
            Op::Dropout { a, mask } => {
                let ga = g.iter().zip(mask).map(|(x, m)| *x * *m).collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, d) = self.value(*x).dims2().unwrap();
                let gm = self.data(*gamma);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads[beta.0], db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    if *training {
                        let nf = T::from_usize(n).unwrap();
                        let mut sum_dh = vec![T::zero(); d];
                        let mut sum_dh_h = vec![T::zero(); d];
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                let dh = grow[j] * gm[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * hrow[j];
                            }
                        }
                        for r in 0..n {
                            for j in 0..d {
                                let k = r * d + j;
                                let dh = g[k] * gm[j];
                                dx[k] = inv_std[j] / nf
                                    * (nf * dh - sum_dh[j] - xhat[k] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..d {
                                let k = r * d + j;
                                dx[k] = g[k] * gm[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::MaxOverTime { a, argmax } => {
                let n = self.value(*a).numel();
                let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); n]);
                for (gi, am) in g.iter().zip(argmax) {
                    if let Some(k) = am {
                        slot[*k] += *gi;
                    }
                }
            }
            Op::PoolOverTime { a, mask, weight } => {
                let s = self.shape(*a);
                let (t, b, h) = (s[0], s[1], s[2]);
                let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); t * b * h]);
                for ti in 0..t {
                    for bi in 0..b {
                        if mask.as_ref().is_some_and(|m| !m[ti * b + bi]) {
                            continue;
                        }
                        let base = (ti * b + bi) * h;
                        for hi in 0..h {
                            slot[base + hi] += g[bi * h + hi] * weight[bi];
                        }
                    }
                }
            }
            Op::Maximum { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let ga = (0..g.len())
                        .map(|k| if ad[k] >= bd[k] { g[k] } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if self.needs(*b) {
                    let gb = (0..g.len())
                        .map(|k| if ad[k] >= bd[k] { T::zero() } else { g[k] })
                        .collect();
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::ScaleRows { a, scale } => {
                let c = g.len() / scale.len();
                let mut ga = g;
                for (row, s) in ga.chunks_mut(c).zip(scale) {
                    row.iter_mut().for_each(|x| *x *= *s);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let s = g[0] / T::from_usize(n).unwrap();
                let mut gl: Vec<T> = probs.iter().map(|p| *p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= s;
                }
                accumulate(&mut grads[logits.0], gl);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
        }
    }
}

fn gemm_into<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, slot: &mut Option<Vec<T>>, len: usize) {
    match slot {
        Some(buf) => gemm(a, b, T::one(), buf),
        None => {
            let mut buf = vec![T::zero(); len];
            gemm(a, b, T::zero(), &mut buf);
            *slot = Some(buf);
        }
    }
}
