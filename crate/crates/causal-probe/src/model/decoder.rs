//! Learnable causal tokens, the cross-attention decoder variants, statistical
//! aggregation over the token axis, and the parent/child dot-product head.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::model::blocks::{feed_forward, layer_norm, multihead_attention};
use crate::model::encoder::{attn_ids, encoder_layer_tape, ffn_ids, ln_ids};
use crate::model::DecoderVariant;
use crate::tape::{Tape, TensorId};

/// Per-feature representations of shape (f, k·d): the four aggregation
/// statistics concatenated along the representational axis.
pub type FeatureReps = Array2<f64>;

/// Predicted edge probabilities: off-diagonal strictly inside (0, 1), the
/// diagonal exactly zero and excluded from losses and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyPrediction {
    pub probs: Array2<f64>,
}

impl AdjacencyPrediction {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() != probs.ncols() {
            return Err(Error::Contract("prediction must be square".into()));
        }
        for ((i, j), &v) in probs.indexed_iter() {
            if i == j {
                if v != 0.0 {
                    return Err(Error::Contract(format!("diagonal entry ({i},{i}) = {v} != 0")));
                }
            } else if !v.is_finite() || v <= 0.0 || v >= 1.0 {
                return Err(Error::Contract(format!(
                    "off-diagonal probability ({i},{j}) = {v} outside (0,1)"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn f(&self) -> usize {
        self.probs.nrows()
    }
}

/// Slice the first `f` bank rows and reshape (f, t·d) → (t, f, d): row r of
/// the bank holds feature r's t token vectors back to back, so
/// `Q0[i, r, :] == bank[r, i·d .. (i+1)·d]`.
pub fn init_causal_tokens(f: usize, bank: &Array2<f64>, t: usize) -> Result<Array3<f64>> {
    let f_max = bank.nrows();
    if f < 2 || f > f_max {
        return Err(Error::Contract(format!(
            "need 2 <= f <= F_max={f_max}, got f={f}"
        )));
    }
    if t < 1 || !bank.ncols().is_multiple_of(t) {
        return Err(Error::Contract(format!(
            "bank width {} is not a multiple of t={t}",
            bank.ncols()
        )));
    }
    let d = bank.ncols() / t;
    let mut q0 = Array3::<f64>::zeros((t, f, d));
    for r in 0..f {
        for i in 0..t {
            for e in 0..d {
                q0[(i, r, e)] = bank[(r, i * d + e)];
            }
        }
    }
    Ok(q0)
}

/// Tape version of the bank slicing; gradient flows only into rows 0..f.
pub(crate) fn causal_tokens_tape(
    tape: &mut Tape,
    bank: TensorId,
    f: usize,
    t: usize,
    d: usize,
) -> TensorId {
    let rows = tape.slice_axis0(bank, 0, f);
    let cube = tape.reshape(rows, &[f, t, d]);
    tape.permute(cube, &[1, 0, 2])
}

/// One decoder layer: across-samples cross-attention (t causal tokens at
/// feature j query the n data tokens at j), feed-forward, across-features
/// cross-attention (each causal row's f tokens query the f sample-pooled data
/// tokens), feed-forward. Pre-norm residual blocks; keys/values get their own
/// normalization.
pub(crate) fn decoder_layer_tape(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    layer: usize,
    x: TensorId,
    h: TensorId,
    n_heads: usize,
) -> TensorId {
    let p = format!("decoder.l{layer:02}");
    let t = tape.shape(x)[0];

    // (a) across samples: batch over features.
    let xq = tape.permute(x, &[1, 0, 2]); // (f, t, d)
    let ln = ln_ids(ids, &format!("{p}.samp_q_ln"));
    let q = layer_norm(tape, xq, ln);
    let hp = tape.permute(h, &[1, 0, 2]); // (f, n, d)
    let ln = ln_ids(ids, &format!("{p}.samp_kv_ln"));
    let kv = layer_norm(tape, hp, ln);
    let attn = attn_ids(ids, &format!("{p}.samp_attn"));
    let a = multihead_attention(tape, q, kv, &attn, n_heads);
    let a_back = tape.permute(a, &[1, 0, 2]);
    let x = tape.add(x, a_back);

    let ln = ln_ids(ids, &format!("{p}.ff1_ln"));
    let normed = layer_norm(tape, x, ln);
    let ffn = ffn_ids(ids, &format!("{p}.ff1"));
    let ff = feed_forward(tape, normed, &ffn);
    let x = tape.add(x, ff);

    // (b) across features: keys/values are data tokens mean-pooled over the
    // sample axis, shared by all t causal rows.
    let pooled = tape.mean_axis0(h); // (f, d)
    let ln = ln_ids(ids, &format!("{p}.feat_kv_ln"));
    let kv_small = layer_norm(tape, pooled, ln);
    let kv = tape.broadcast_axis0(kv_small, t); // (t, f, d)
    let ln = ln_ids(ids, &format!("{p}.feat_q_ln"));
    let q = layer_norm(tape, x, ln);
    let attn = attn_ids(ids, &format!("{p}.feat_attn"));
    let a = multihead_attention(tape, q, kv, &attn, n_heads);
    let x = tape.add(x, a);

    let ln = ln_ids(ids, &format!("{p}.ff2_ln"));
    let normed = layer_norm(tape, x, ln);
    let ffn = ffn_ids(ids, &format!("{p}.ff2"));
    let ff = feed_forward(tape, normed, &ffn);
    tape.add(x, ff)
}

/// Run the decoder stack. `per_layer_h[l]` holds encoder output H_l (index 0
/// is the raw embedding). Standard feeds the deepest tensor to every layer;
/// EvolvingStandard pairs decoder layer i with encoder layer i+1.
pub(crate) fn decode_tape(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    q0: TensorId,
    per_layer_h: &[TensorId],
    variant: DecoderVariant,
    n_layers: usize,
    n_heads: usize,
) -> TensorId {
    let mut x = q0;
    for l in 0..n_layers {
        let h = match variant {
            DecoderVariant::Standard => *per_layer_h.last().unwrap(),
            DecoderVariant::EvolvingStandard => {
                per_layer_h[(l + 1).min(per_layer_h.len() - 1)]
            }
            DecoderVariant::NoDecoder => unreachable!("NoDecoder bypasses decode"),
        };
        x = decoder_layer_tape(tape, ids, l, x, h, n_heads);
    }
    x
}

/// NoDecoder realization: the causal tokens ride through the frozen encoder
/// as appended sample rows. Token rows self-attend across features and
/// cross-attend to the data rows' midpoint state in each sample-attention
/// sublayer; data rows never see the tokens, so their path stays exactly the
/// plain encoder (and gradient-free).
pub(crate) fn no_decoder_forward(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    h0: TensorId,
    q0: TensorId,
    l_eff: usize,
    n_heads: usize,
) -> TensorId {
    let mut h = h0;
    let mut tok = q0;
    for l in 0..l_eff {
        let p = format!("encoder.l{l:02}");

        // Token rows: feature self-attention + feed-forward, frozen weights.
        let ln = ln_ids(ids, &format!("{p}.feat_ln"));
        let normed = layer_norm(tape, tok, ln);
        let attn = attn_ids(ids, &format!("{p}.feat_attn"));
        let a = multihead_attention(tape, normed, normed, &attn, n_heads);
        let x = tape.add(tok, a);
        let ln = ln_ids(ids, &format!("{p}.ff1_ln"));
        let normed = layer_norm(tape, x, ln);
        let ffn = ffn_ids(ids, &format!("{p}.ff1"));
        let ff = feed_forward(tape, normed, &ffn);
        let tok_mid = tape.add(x, ff);

        // Data rows advance one full layer on the side.
        let (data_mid, data_out) = encoder_layer_tape(tape, ids, l, h, n_heads);

        // Token rows cross-attend to the data rows over the sample axis.
        let tq = tape.permute(tok_mid, &[1, 0, 2]); // (f, t, d)
        let ln = ln_ids(ids, &format!("{p}.samp_ln"));
        let q = layer_norm(tape, tq, ln);
        let dp = tape.permute(data_mid, &[1, 0, 2]); // (f, n, d)
        let kv = layer_norm(tape, dp, ln);
        let attn = attn_ids(ids, &format!("{p}.samp_attn"));
        let a = multihead_attention(tape, q, kv, &attn, n_heads);
        let a_back = tape.permute(a, &[1, 0, 2]);
        let x = tape.add(tok_mid, a_back);
        let ln = ln_ids(ids, &format!("{p}.ff2_ln"));
        let normed = layer_norm(tape, x, ln);
        let ffn = ffn_ids(ids, &format!("{p}.ff2"));
        let ff = feed_forward(tape, normed, &ffn);
        tok = tape.add(x, ff);

        h = data_out;
    }
    tok
}

/// Aggregate R_L (t, f, d) over the token axis with {max, min, mean,
/// population std} and concatenate to (f, 4·d).
pub(crate) fn aggregate_tape(tape: &mut Tape, r: TensorId) -> TensorId {
    let shape = tape.shape(r).to_vec();
    assert_eq!(shape.len(), 3, "aggregate expects (t, f, d)");
    let (t, f, d) = (shape[0], shape[1], shape[2]);
    assert!(t >= 2, "aggregate requires t >= 2");
    let mx = tape.max_axis0(r);
    let mn = tape.min_axis0(r);
    let me = tape.mean_axis0(r);
    let sd = tape.std_axis0(r);
    let stacked = tape.concat_axis0(&[mx, mn, me, sd]); // (4f, d)
    let cube = tape.reshape(stacked, &[4, f, d]);
    let swapped = tape.permute(cube, &[1, 0, 2]); // (f, 4, d)
    tape.reshape(swapped, &[f, 4 * d])
}

/// Scalar-path aggregation.
pub fn aggregate(r: &Array3<f64>) -> Result<FeatureReps> {
    if r.dim().0 < 2 {
        return Err(Error::Contract(format!(
            "aggregate requires t >= 2, got t={}",
            r.dim().0
        )));
    }
    let mut tape = Tape::new();
    let id = tape.constant(r.clone().into_dyn());
    let out = aggregate_tape(&mut tape, id);
    Ok(tape
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// Head on the tape: parent/child projections, scaled dot-product logits,
/// sigmoid, diagonal masked to exactly zero.
pub(crate) fn head_tape(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    reps: TensorId,
) -> TensorId {
    let f = tape.shape(reps)[0];
    let m = tape.shape(ids["head.parent.w"])[1];
    let parent = tape.matmul(reps, ids["head.parent.w"], false);
    let child = tape.matmul(reps, ids["head.child.w"], false);
    let raw = tape.matmul(parent, child, true);
    let logits = tape.scale(raw, 1.0 / (m as f64).sqrt());
    let probs = tape.sigmoid(logits);
    let mask =
        Array2::from_shape_fn((f, f), |(i, j)| if i == j { 0.0 } else { 1.0 }).into_dyn();
    tape.mul_const_array(probs, mask)
}

/// Scalar-path head.
pub fn predict_adjacency(
    reps: &FeatureReps,
    w_parent: &Array2<f64>,
    w_child: &Array2<f64>,
) -> Result<AdjacencyPrediction> {
    if reps.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature representations".into()));
    }
    let mut tape = Tape::new();
    let r = tape.constant(reps.clone().into_dyn());
    let mut ids = BTreeMap::new();
    ids.insert(
        "head.parent.w".to_string(),
        tape.constant(w_parent.clone().into_dyn()),
    );
    ids.insert(
        "head.child.w".to_string(),
        tape.constant(w_child.clone().into_dyn()),
    );
    let out = head_tape(&mut tape, &ids, r);
    AdjacencyPrediction::new(
        tape.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap(),
    )
}
