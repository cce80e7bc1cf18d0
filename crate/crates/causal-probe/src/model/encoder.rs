//! Frozen dual-attention encoder: cell embedding of (value, intervention
//! flag) pairs and alternating attention across features and across samples.
//!
//! Encoder parameters are always registered on the tape as non-differentiable
//! leaves, so the backward sweep never enters this subgraph.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD};

use crate::error::{Error, Result};
use crate::model::blocks::{
    feed_forward, layer_norm, multihead_attention, AttnIds, FfnIds, LnIds,
};
use crate::scm::Dataset;
use crate::tape::{Tape, TensorId};

/// Data tokens (n, f, d) tagged with the encoder layer that produced them
/// (0 = raw cell embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct DataTokens {
    pub tensor: Array3<f64>,
    pub layer: usize,
}

pub(crate) fn ln_ids(ids: &BTreeMap<String, TensorId>, prefix: &str) -> LnIds {
    LnIds {
        g: ids[&format!("{prefix}.g")],
        b: ids[&format!("{prefix}.b")],
    }
}

pub(crate) fn attn_ids(ids: &BTreeMap<String, TensorId>, prefix: &str) -> AttnIds {
    AttnIds {
        wq: ids[&format!("{prefix}.wq")],
        wk: ids[&format!("{prefix}.wk")],
        wv: ids[&format!("{prefix}.wv")],
        wo: ids[&format!("{prefix}.wo")],
        bq: ids[&format!("{prefix}.bq")],
        bk: ids[&format!("{prefix}.bk")],
        bv: ids[&format!("{prefix}.bv")],
        bo: ids[&format!("{prefix}.bo")],
    }
}

pub(crate) fn ffn_ids(ids: &BTreeMap<String, TensorId>, prefix: &str) -> FfnIds {
    FfnIds {
        w1: ids[&format!("{prefix}.w1")],
        b1: ids[&format!("{prefix}.b1")],
        w2: ids[&format!("{prefix}.w2")],
        b2: ids[&format!("{prefix}.b2")],
    }
}

/// Embed each (value, flag) cell with the frozen affine projection:
/// (n, f) values and mask → (n, f, d) tokens.
pub(crate) fn embed_cells_tape(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    dataset: &Dataset,
    d: usize,
) -> TensorId {
    let (n, f) = (dataset.n(), dataset.f());
    let mut cells = Vec::with_capacity(n * f * 2);
    for r in 0..n {
        for j in 0..f {
            cells.push(dataset.values[(r, j)]);
            cells.push(dataset.intervention_mask[(r, j)] as f64);
        }
    }
    let input = tape.constant(ArrayD::from_shape_vec(vec![n * f, 2], cells).unwrap());
    let proj = tape.matmul(input, ids["encoder.embed.w"], false);
    let biased = tape.add_last_axis(proj, ids["encoder.embed.b"]);
    tape.reshape(biased, &[n, f, d])
}

/// One dual-attention encoder layer (pre-norm residual blocks):
/// attention across features, feed-forward, attention across samples,
/// feed-forward. Returns both the midpoint (after the first two sublayers)
/// and the layer output; the midpoint is what appended query rows attend to.
pub(crate) fn encoder_layer_tape(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    layer: usize,
    x: TensorId,
    n_heads: usize,
) -> (TensorId, TensorId) {
    let p = format!("encoder.l{layer:02}");

    // Attention across features: each sample row attends over its f cells.
    let ln = ln_ids(ids, &format!("{p}.feat_ln"));
    let normed = layer_norm(tape, x, ln);
    let attn = attn_ids(ids, &format!("{p}.feat_attn"));
    let a = multihead_attention(tape, normed, normed, &attn, n_heads);
    let x = tape.add(x, a);

    let ln = ln_ids(ids, &format!("{p}.ff1_ln"));
    let normed = layer_norm(tape, x, ln);
    let ffn = ffn_ids(ids, &format!("{p}.ff1"));
    let ff = feed_forward(tape, normed, &ffn);
    let mid = tape.add(x, ff);

    // Attention across samples: each feature column attends over its n rows.
    let xp = tape.permute(mid, &[1, 0, 2]);
    let ln = ln_ids(ids, &format!("{p}.samp_ln"));
    let normed = layer_norm(tape, xp, ln);
    let attn = attn_ids(ids, &format!("{p}.samp_attn"));
    let a = multihead_attention(tape, normed, normed, &attn, n_heads);
    let a_back = tape.permute(a, &[1, 0, 2]);
    let x = tape.add(mid, a_back);

    let ln = ln_ids(ids, &format!("{p}.ff2_ln"));
    let normed = layer_norm(tape, x, ln);
    let ffn = ffn_ids(ids, &format!("{p}.ff2"));
    let ff = feed_forward(tape, normed, &ffn);
    let out = tape.add(x, ff);

    (mid, out)
}

/// Apply encoder layers 1..=`upto` to the cell embeddings, returning every
/// intermediate: index l of the result holds H_l (index 0 is the input).
pub(crate) fn encode_tape(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    h0: TensorId,
    upto: usize,
    n_heads: usize,
) -> Vec<TensorId> {
    let mut layers = Vec::with_capacity(upto + 1);
    layers.push(h0);
    let mut x = h0;
    for l in 0..upto {
        let (_, out) = encoder_layer_tape(tape, ids, l, x, n_heads);
        x = out;
        layers.push(out);
    }
    layers
}

pub(crate) fn tensor_to_tokens(value: &ArrayD<f64>, layer: usize) -> Result<DataTokens> {
    let tensor = value
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::Contract("data tokens must be 3-D".into()))?;
    if tensor.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("data tokens".into()));
    }
    Ok(DataTokens { tensor, layer })
}
