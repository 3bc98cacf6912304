//! Reference implementations shared by the integration tests.

use ulmfit::lm::LmModel;
use ulmfit::tensor::Real;

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `a [m,k] * b [k,n]`, or `a * b^T` for `b [n,k]`, through the same GEMM
/// kernel the engine uses.
pub fn sgemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// Plain multi-layer LSTM language model over a `[len x batch]` input, with
/// no dropout machinery at all. Returns logits `[len * batch, vocab]`.
pub fn vanilla_lm(model: &LmModel<f32>, ids: &[usize], b: usize) -> Vec<f32> {
    let cfg = &model.config;
    let emb = model.params.get(model.embedding).data();
    let e = cfg.embed_dim;
    let len = ids.len() / b;
    let mut x: Vec<f32> = ids.iter().flat_map(|&id| emb[id * e..(id + 1) * e].to_vec()).collect();
    let mut in_dim = e;
    for layer in &model.layers {
        let h = layer.hidden_dim;
        let w_ih = model.params.get(layer.w_ih).data();
        let w_hh = model.params.get(layer.w_hh).data();
        let bias = model.params.get(layer.bias).data();
        let mut proj = sgemm(&x, w_ih, len * b, in_dim, 4 * h, false);
        for row in proj.chunks_mut(4 * h) {
            row.iter_mut().zip(bias).for_each(|(v, bb)| *v += *bb);
        }
        let mut hs = vec![0.0f32; b * h];
        let mut cs = vec![0.0f32; b * h];
        let mut out = Vec::with_capacity(len * b * h);
        for t in 0..len {
            let rec = sgemm(&hs, w_hh, b, h, 4 * h, false);
            for r in 0..b {
                let z: Vec<f32> = (0..4 * h)
                    .map(|j| proj[(t * b + r) * 4 * h + j] + rec[r * 4 * h + j])
                    .collect();
                for j in 0..h {
                    let (i, f, o, g) = (sigmoid(z[j]), sigmoid(z[h + j]), sigmoid(z[2 * h + j]), z[3 * h + j].tanh());
                    let c = f * cs[r * h + j] + i * g;
                    cs[r * h + j] = c;
                    hs[r * h + j] = o * c.tanh();
                }
            }
            out.extend_from_slice(&hs);
        }
        x = out;
        in_dim = h;
    }
    let mut logits = sgemm(&x, emb, len * b, e, cfg.vocab_size, true);
    let dec_b = model.params.get(model.decoder_bias).data();
    for row in logits.chunks_mut(cfg.vocab_size) {
        row.iter_mut().zip(dec_b).for_each(|(v, bb)| *v += *bb);
    }
    logits
}
