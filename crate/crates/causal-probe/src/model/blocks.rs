//! Tape-level transformer building blocks: layer norm, multi-head attention,
//! and the GELU feed-forward sublayer. All blocks take parameter tensor ids,
//! so the same code serves both the frozen encoder and the trainable decoder.

use crate::tape::{Tape, TensorId};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Parameter ids for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub bq: TensorId,
    pub bk: TensorId,
    pub bv: TensorId,
    pub bo: TensorId,
}

/// Parameter ids for one feed-forward sublayer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Parameter ids for one layer norm.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIds {
    pub g: TensorId,
    pub b: TensorId,
}

pub(crate) fn layer_norm(tape: &mut Tape, x: TensorId, ln: LnIds) -> TensorId {
    let normed = tape.normalize(x, LN_EPS);
    let scaled = tape.mul_last_axis(normed, ln.g);
    tape.add_last_axis(scaled, ln.b)
}

/// Project (B, S, d) through a (d, out) matrix plus bias.
fn project(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
    let shape = tape.shape(x).to_vec();
    let (batch, seq, d) = (shape[0], shape[1], shape[2]);
    let out = tape.shape(w)[1];
    let flat = tape.reshape(x, &[batch * seq, d]);
    let proj = tape.matmul(flat, w, false);
    let biased = tape.add_last_axis(proj, b);
    tape.reshape(biased, &[batch, seq, out])
}

/// Split (B, S, d) into heads: (B*h, S, d/h).
fn split_heads(tape: &mut Tape, x: TensorId, n_heads: usize) -> TensorId {
    let shape = tape.shape(x).to_vec();
    let (batch, seq, d) = (shape[0], shape[1], shape[2]);
    let dh = d / n_heads;
    let with_heads = tape.reshape(x, &[batch, seq, n_heads, dh]);
    let swapped = tape.permute(with_heads, &[0, 2, 1, 3]);
    tape.reshape(swapped, &[batch * n_heads, seq, dh])
}

/// Inverse of [`split_heads`].
fn merge_heads(tape: &mut Tape, x: TensorId, batch: usize, n_heads: usize) -> TensorId {
    let shape = tape.shape(x).to_vec();
    let (seq, dh) = (shape[1], shape[2]);
    let unflat = tape.reshape(x, &[batch, n_heads, seq, dh]);
    let swapped = tape.permute(unflat, &[0, 2, 1, 3]);
    tape.reshape(swapped, &[batch, seq, n_heads * dh])
}

/// Multi-head scaled-dot-product attention. Queries come from `q_in`
/// (B, Sq, d), keys and values from `kv_in` (B, Sk, d); self-attention is the
/// special case `q_in == kv_in`. Returns (B, Sq, d).
pub(crate) fn multihead_attention(
    tape: &mut Tape,
    q_in: TensorId,
    kv_in: TensorId,
    p: &AttnIds,
    n_heads: usize,
) -> TensorId {
    let q_shape = tape.shape(q_in).to_vec();
    let kv_shape = tape.shape(kv_in).to_vec();
    assert_eq!(q_shape.len(), 3, "attention expects (B, S, d)");
    assert_eq!(q_shape[0], kv_shape[0], "attention batch dims differ");
    assert_eq!(q_shape[2], kv_shape[2], "attention widths differ");
    let (batch, d) = (q_shape[0], q_shape[2]);
    assert_eq!(d % n_heads, 0, "d must divide into heads");
    let dh = d / n_heads;

    let q = project(tape, q_in, p.wq, p.bq);
    let k = project(tape, kv_in, p.wk, p.bk);
    let v = project(tape, kv_in, p.wv, p.bv);
    let qh = split_heads(tape, q, n_heads);
    let kh = split_heads(tape, k, n_heads);
    let vh = split_heads(tape, v, n_heads);

    let raw_scores = tape.batch_matmul(qh, kh, true);
    let scores = tape.scale(raw_scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax(scores);
    let ctx = tape.batch_matmul(attn, vh, false);
    let merged = merge_heads(tape, ctx, batch, n_heads);
    project(tape, merged, p.wo, p.bo)
}

/// Position-wise GELU feed-forward: works on any (..., d) tensor.
pub(crate) fn feed_forward(tape: &mut Tape, x: TensorId, p: &FfnIds) -> TensorId {
    let shape = tape.shape(x).to_vec();
    let d = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(x, &[rows, d]);
    let h_pre = tape.matmul(flat, p.w1, false);
    let h_b = tape.add_last_axis(h_pre, p.b1);
    let h = tape.gelu(h_b);
    let out_pre = tape.matmul(h, p.w2, false);
    let out = tape.add_last_axis(out_pre, p.b2);
    tape.reshape(out, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, Dimension};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(shape.to_vec(), |_| rng.gen::<f64>() - 0.5)
    }

    fn attn_ids(tape: &mut Tape, rng: &mut StdRng, d: usize, grad: bool) -> AttnIds {
        AttnIds {
            wq: tape.leaf(randn(rng, &[d, d]), grad),
            wk: tape.leaf(randn(rng, &[d, d]), grad),
            wv: tape.leaf(randn(rng, &[d, d]), grad),
            wo: tape.leaf(randn(rng, &[d, d]), grad),
            bq: tape.leaf(randn(rng, &[d]), grad),
            bk: tape.leaf(randn(rng, &[d]), grad),
            bv: tape.leaf(randn(rng, &[d]), grad),
            bo: tape.leaf(randn(rng, &[d]), grad),
        }
    }

    #[test]
    fn attention_output_shape_and_determinism() {
        let mut rng = StdRng::seed_from_u64(31);
        let x = randn(&mut rng, &[2, 5, 8]);
        let kv = randn(&mut rng, &[2, 7, 8]);
        let run = |xv: &ArrayD<f64>, kvv: &ArrayD<f64>| {
            let mut tape = Tape::new();
            let mut prng = StdRng::seed_from_u64(99);
            let xi = tape.constant(xv.clone());
            let ki = tape.constant(kvv.clone());
            let ids = attn_ids(&mut tape, &mut prng, 8, false);
            let out = multihead_attention(&mut tape, xi, ki, &ids, 2);
            tape.value(out).clone()
        };
        let a = run(&x, &kv);
        assert_eq!(a.shape(), &[2, 5, 8]);
        let b = run(&x, &kv);
        assert_eq!(a, b);
    }

    #[test]
    fn cross_attention_is_invariant_to_key_order() {
        // Softmax attention is a weighted sum over keys: permuting the key
        // rows must not change the output (up to float reassociation).
        let mut rng = StdRng::seed_from_u64(32);
        let q = randn(&mut rng, &[1, 3, 8]);
        let kv = randn(&mut rng, &[1, 6, 8]);
        let mut kv_perm = kv.clone();
        for j in 0..6 {
            let src = (j * 5 + 2) % 6; // fixed permutation
            for e in 0..8 {
                kv_perm[[0, j, e]] = kv[[0, src, e]];
            }
        }
        let run = |kvv: &ArrayD<f64>| {
            let mut tape = Tape::new();
            let mut prng = StdRng::seed_from_u64(7);
            let qi = tape.constant(q.clone());
            let ki = tape.constant(kvv.clone());
            let ids = attn_ids(&mut tape, &mut prng, 8, false);
            let out = multihead_attention(&mut tape, qi, ki, &ids, 4);
            tape.value(out).clone()
        };
        let a = run(&kv);
        let b = run(&kv_perm);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_and_ffn_gradients_pass_finite_differences() {
        let mut rng = StdRng::seed_from_u64(33);
        let x0 = randn(&mut rng, &[2, 3, 4]);
        let weights = randn(&mut rng, &[4, 4]);
        let run = |xv: &ArrayD<f64>, want_grad: bool| {
            let mut tape = Tape::new();
            let mut prng = StdRng::seed_from_u64(13);
            let xi = tape.leaf(xv.clone(), want_grad);
            let ids = attn_ids(&mut tape, &mut prng, 4, false);
            let attn = multihead_attention(&mut tape, xi, xi, &ids, 2);
            let ffn = FfnIds {
                w1: tape.constant(randn(&mut prng, &[4, 6])),
                b1: tape.constant(randn(&mut prng, &[6])),
                w2: tape.constant(randn(&mut prng, &[6, 4])),
                b2: tape.constant(randn(&mut prng, &[4])),
            };
            let ff = feed_forward(&mut tape, attn, &ffn);
            let weighted = tape.mul_const_array(ff, weights_to(&weights, ff_shape(&tape, ff)));
            let loss = tape.sum_all(weighted);
            (tape, xi, loss)
        };
        fn ff_shape(tape: &Tape, id: TensorId) -> Vec<usize> {
            tape.shape(id).to_vec()
        }
        fn weights_to(w: &ArrayD<f64>, shape: Vec<usize>) -> ArrayD<f64> {
            ArrayD::from_shape_fn(shape, |ix| {
                let flat: Vec<usize> = ix.as_array_view().to_vec();
                w[[flat[1] % 4, flat[2] % 4]]
            })
        }
        let (tape, xi, loss) = run(&x0, true);
        let grads = tape.backward(loss);
        let analytic = grads.get(xi).unwrap().clone();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let (tp, _, lp) = run(&plus, false);
            let (tm, _, lm) = run(&minus, false);
            let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "index {idx}: fd={fd} analytic={an}"
            );
        }
    }
}
