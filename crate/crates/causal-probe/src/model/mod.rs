//! The amortized causal-discovery model: a frozen dual-attention encoder over
//! dataset cells, a bank of learnable causal tokens decoded against the data
//! tokens, statistical aggregation, and a parent/child dot-product head that
//! emits an edge-probability matrix.

pub(crate) mod blocks;
pub(crate) mod decoder;
pub(crate) mod encoder;
pub(crate) mod params;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Ix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scm::Dataset;
use crate::seeds::{rng_for, NS_INIT};
use crate::tape::{Tape, TensorId};

pub use decoder::{
    aggregate, init_causal_tokens, predict_adjacency, AdjacencyPrediction, FeatureReps,
};
pub use encoder::DataTokens;
pub use params::{InitKind, ParamSet, ParamSpec};

/// Seed used to materialize deterministic embedding/normalization weights for
/// the PreEncoderBypass variant, which skips every attention layer but still
/// needs the cell-embedding projection to exist.
pub const ENCODER_BYPASS_SEED: u64 = 0x5eed_ba5e;

/// Where the frozen encoder weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightSource {
    /// Read from a named-tensor archive (e.g. converted pre-trained weights).
    LoadedFile(PathBuf),
    /// Deterministic random initialization.
    RandomSeed(u64),
    /// Skip the attention stack entirely: data tokens are the raw cell
    /// embeddings (from a fixed internal seed) and never pass through a layer.
    PreEncoderBypass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding width.
    pub d: usize,
    /// Number of dual-attention layers available.
    pub l_total: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward sublayers.
    pub ff_hidden: usize,
    pub weight_source: WeightSource,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d={} not divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.l_total < 1 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderVariant {
    /// Every decoder layer cross-attends to the final encoder output H_L.
    Standard,
    /// Decoder layer i cross-attends to encoder layer i+1's output.
    EvolvingStandard,
    /// No decoder stack: causal tokens ride through the frozen encoder as
    /// appended query rows and are read off its output.
    NoDecoder,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 3] = [
        DecoderVariant::Standard,
        DecoderVariant::EvolvingStandard,
        DecoderVariant::NoDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderVariant::Standard => "standard",
            DecoderVariant::EvolvingStandard => "evolving-standard",
            DecoderVariant::NoDecoder => "no-decoder",
        }
    }
}

/// The four aggregation statistics (max, min, mean, std).
pub const AGGREGATION_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub variant: DecoderVariant,
    /// Causal tokens per feature.
    pub t: usize,
    /// Largest feature count the token bank supports.
    pub f_max: usize,
    /// Latent width m of the parent/child head projections.
    pub head_width: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.t < 2 {
            return Err(Error::Config(
                "need t >= 2 causal tokens (std aggregation)".into(),
            ));
        }
        if self.f_max < 2 {
            return Err(Error::Config("token bank must cover f >= 2".into()));
        }
        if self.head_width < 1 {
            return Err(Error::Config("head width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Which encoder layer's data tokens feed the decoder (0 = raw embeddings).
    pub encoder_layer: usize,
    /// Base seed for the trainable parameters (token bank, decoder, head).
    pub seed: u64,
}

impl ModelConfig {
    /// Laptop-scale defaults: small widths, two layers of everything.
    pub fn desk(seed: u64) -> Self {
        Self {
            encoder: EncoderConfig {
                d: 32,
                l_total: 2,
                n_heads: 4,
                ff_hidden: 64,
                weight_source: WeightSource::RandomSeed(seed),
            },
            decoder: DecoderConfig {
                n_layers: 2,
                variant: DecoderVariant::Standard,
                t: 8,
                f_max: 20,
                head_width: 32,
            },
            encoder_layer: 2,
            seed,
        }
    }

    /// Full-scale defaults: d=192, 12 encoder layers with the first 4 used,
    /// t=30 causal tokens.
    pub fn paper(seed: u64) -> Self {
        Self {
            encoder: EncoderConfig {
                d: 192,
                l_total: 12,
                n_heads: 6,
                ff_hidden: 768,
                weight_source: WeightSource::RandomSeed(seed),
            },
            decoder: DecoderConfig {
                n_layers: 4,
                variant: DecoderVariant::Standard,
                t: 30,
                f_max: 20,
                head_width: 192,
            },
            encoder_layer: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder_layer > self.encoder.l_total {
            return Err(Error::Config(format!(
                "encoder_layer={} exceeds L_total={}",
                self.encoder_layer, self.encoder.l_total
            )));
        }
        if self.decoder.variant == DecoderVariant::EvolvingStandard
            && self.encoder.weight_source != WeightSource::PreEncoderBypass
            && self.decoder.n_layers != self.encoder_layer
        {
            return Err(Error::Config(format!(
                "evolving-standard pairs decoder layers with encoder layers: \
                 n_layers={} must equal encoder_layer={}",
                self.decoder.n_layers, self.encoder_layer
            )));
        }
        Ok(())
    }

    /// Encoder depth actually applied; PreEncoderBypass short-circuits to the
    /// raw embeddings.
    pub fn effective_encoder_layer(&self) -> usize {
        match self.encoder.weight_source {
            WeightSource::PreEncoderBypass => 0,
            _ => self.encoder_layer,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::new(format!("{prefix}.g"), &[d], InitKind::Ones));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[d], InitKind::Zeros));
}

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push(ParamSpec::new(format!("{prefix}.{w}"), &[d, d], InitKind::Normal));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        out.push(ParamSpec::new(format!("{prefix}.{b}"), &[d], InitKind::Zeros));
    }
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, hidden: usize) {
    out.push(ParamSpec::new(format!("{prefix}.w1"), &[d, hidden], InitKind::Normal));
    out.push(ParamSpec::new(format!("{prefix}.b1"), &[hidden], InitKind::Zeros));
    out.push(ParamSpec::new(format!("{prefix}.w2"), &[hidden, d], InitKind::Normal));
    out.push(ParamSpec::new(format!("{prefix}.b2"), &[d], InitKind::Zeros));
}

/// Specs for every frozen encoder tensor, in deterministic order.
pub fn encoder_param_specs(enc: &EncoderConfig) -> Vec<ParamSpec> {
    let d = enc.d;
    let mut out = Vec::new();
    out.push(ParamSpec::new("encoder.embed.w", &[2, d], InitKind::Normal));
    out.push(ParamSpec::new("encoder.embed.b", &[d], InitKind::Zeros));
    for l in 0..enc.l_total {
        let p = format!("encoder.l{l:02}");
        ln_specs(&mut out, &format!("{p}.feat_ln"), d);
        attn_specs(&mut out, &format!("{p}.feat_attn"), d);
        ln_specs(&mut out, &format!("{p}.ff1_ln"), d);
        ffn_specs(&mut out, &format!("{p}.ff1"), d, enc.ff_hidden);
        ln_specs(&mut out, &format!("{p}.samp_ln"), d);
        attn_specs(&mut out, &format!("{p}.samp_attn"), d);
        ln_specs(&mut out, &format!("{p}.ff2_ln"), d);
        ffn_specs(&mut out, &format!("{p}.ff2"), d, enc.ff_hidden);
    }
    out
}

/// Specs for every trainable tensor: the causal token bank, the decoder stack
/// (absent under NoDecoder), and the head projections.
pub fn trainable_param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.encoder.d;
    let dec = &cfg.decoder;
    let mut out = Vec::new();
    out.push(ParamSpec::new(
        "decoder.bank",
        &[dec.f_max, dec.t * d],
        InitKind::Normal,
    ));
    if dec.variant != DecoderVariant::NoDecoder {
        for l in 0..dec.n_layers {
            let p = format!("decoder.l{l:02}");
            ln_specs(&mut out, &format!("{p}.samp_q_ln"), d);
            ln_specs(&mut out, &format!("{p}.samp_kv_ln"), d);
            attn_specs(&mut out, &format!("{p}.samp_attn"), d);
            ln_specs(&mut out, &format!("{p}.ff1_ln"), d);
            ffn_specs(&mut out, &format!("{p}.ff1"), d, cfg.encoder.ff_hidden);
            ln_specs(&mut out, &format!("{p}.feat_q_ln"), d);
            ln_specs(&mut out, &format!("{p}.feat_kv_ln"), d);
            attn_specs(&mut out, &format!("{p}.feat_attn"), d);
            ln_specs(&mut out, &format!("{p}.ff2_ln"), d);
            ffn_specs(&mut out, &format!("{p}.ff2"), d, cfg.encoder.ff_hidden);
        }
    }
    let kd = AGGREGATION_K * d;
    out.push(ParamSpec::new("head.parent.w", &[kd, dec.head_width], InitKind::Normal));
    out.push(ParamSpec::new("head.child.w", &[kd, dec.head_width], InitKind::Normal));
    out
}

/// A forward pass recorded on a tape: the probability matrix node plus the
/// tape ids of every trainable parameter (for gradient lookup and updates)
/// and of the frozen encoder tensors (for asserting nothing flows there).
pub struct ForwardPass {
    pub probs: TensorId,
    pub param_ids: BTreeMap<String, TensorId>,
    pub encoder_ids: BTreeMap<String, TensorId>,
}

/// A batched forward pass: one probability node per dataset, all sharing a
/// single parameter registration so gradients accumulate across the batch.
pub struct BatchForward {
    pub probs: Vec<TensorId>,
    pub param_ids: BTreeMap<String, TensorId>,
    pub encoder_ids: BTreeMap<String, TensorId>,
}

/// Parameters plus configuration; the only mutable state is the trainable
/// subset of `params`.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

impl Model {
    /// Trainability is a naming convention: everything outside the encoder
    /// namespace trains.
    pub fn is_trainable(name: &str) -> bool {
        !name.starts_with("encoder.")
    }

    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let enc_specs = encoder_param_specs(&config.encoder);
        let encoder = match &config.encoder.weight_source {
            WeightSource::LoadedFile(path) => {
                let set = ParamSet::load(path)?;
                set.check_against(&enc_specs)?;
                set
            }
            WeightSource::RandomSeed(s) => {
                ParamSet::init(&enc_specs, &mut rng_for(*s, NS_INIT, 0))
            }
            WeightSource::PreEncoderBypass => {
                ParamSet::init(&enc_specs, &mut rng_for(ENCODER_BYPASS_SEED, NS_INIT, 0))
            }
        };
        let trainable = ParamSet::init(
            &trainable_param_specs(&config),
            &mut rng_for(config.seed, NS_INIT, 1),
        );
        let mut map = encoder.into_map();
        map.extend(trainable.into_map());
        Ok(Self {
            config,
            params: ParamSet::from_map(map),
        })
    }

    /// Rebuild from a configuration and a full parameter set (e.g. a
    /// checkpoint). Shapes are checked against both spec lists.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut specs = encoder_param_specs(&config.encoder);
        specs.extend(trainable_param_specs(&config));
        params.check_against(&specs)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| Self::is_trainable(n))
            .cloned()
            .collect()
    }

    /// Content hash of the frozen subset; checkpoints reference the encoder
    /// by this digest instead of duplicating its tensors.
    pub fn encoder_digest(&self) -> String {
        let map: BTreeMap<String, _> = self
            .params
            .iter()
            .filter(|(n, _)| !Self::is_trainable(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        ParamSet::from_map(map).digest()
    }

    /// Content hash of the trainable subset (token bank, decoder, head).
    pub fn trainable_digest(&self) -> String {
        let map: BTreeMap<String, _> = self
            .params
            .iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        ParamSet::from_map(map).digest()
    }

    /// Write the frozen subset to a named-tensor archive.
    pub fn save_encoder_weights(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, _> = self
            .params
            .iter()
            .filter(|(n, _)| !Self::is_trainable(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        ParamSet::from_map(map).save(path)
    }

    /// Replace the frozen subset from an archive; shape mismatches abort
    /// before any parameter is touched.
    pub fn load_encoder_weights(&mut self, path: &Path) -> Result<()> {
        let set = ParamSet::load(path)?;
        set.check_against(&encoder_param_specs(&self.config.encoder))?;
        for (name, value) in set.into_map() {
            self.params.insert(name, value);
        }
        Ok(())
    }

    /// Re-draw the frozen subset from a seed.
    pub fn reinit_encoder(&mut self, seed: u64) {
        let fresh = ParamSet::init(
            &encoder_param_specs(&self.config.encoder),
            &mut rng_for(seed, NS_INIT, 0),
        );
        for (name, value) in fresh.into_map() {
            self.params.insert(name, value);
        }
    }

    fn register_all(&self, tape: &mut Tape) -> ForwardIds {
        let mut ids = BTreeMap::new();
        let mut trainable = BTreeMap::new();
        let mut frozen = BTreeMap::new();
        for (name, value) in self.params.iter() {
            let requires_grad = Self::is_trainable(name);
            let id = tape.leaf(value.clone(), requires_grad);
            if requires_grad {
                trainable.insert(name.clone(), id);
            } else {
                frozen.insert(name.clone(), id);
            }
            ids.insert(name.clone(), id);
        }
        ForwardIds { ids, trainable, frozen }
    }

    fn register_encoder(&self, tape: &mut Tape) -> BTreeMap<String, TensorId> {
        self.params
            .iter()
            .filter(|(n, _)| !Self::is_trainable(n))
            .map(|(n, v)| (n.clone(), tape.constant(v.clone())))
            .collect()
    }

    /// Append one dataset's forward graph (embed → encode → decode →
    /// aggregate → head) to a tape whose parameters are already registered.
    fn forward_graph(
        &self,
        tape: &mut Tape,
        dataset: &Dataset,
        ids: &BTreeMap<String, TensorId>,
    ) -> Result<TensorId> {
        dataset.validate()?;
        let f = dataset.f();
        let dec = &self.config.decoder;
        if f < 2 || f > dec.f_max {
            return Err(Error::Contract(format!(
                "dataset has f={f} features; need 2 <= f <= F_max={}",
                dec.f_max
            )));
        }
        if dataset.n() == 0 {
            return Err(Error::Contract("dataset has no rows".into()));
        }

        let d = self.config.encoder.d;
        let heads = self.config.encoder.n_heads;
        let h0 = encoder::embed_cells_tape(tape, ids, dataset, d);
        let l_eff = self.config.effective_encoder_layer();
        let q0 = decoder::causal_tokens_tape(tape, ids["decoder.bank"], f, dec.t, d);
        let r = match dec.variant {
            DecoderVariant::NoDecoder => {
                decoder::no_decoder_forward(tape, ids, h0, q0, l_eff, heads)
            }
            variant => {
                let per_layer = encoder::encode_tape(tape, ids, h0, l_eff, heads);
                decoder::decode_tape(tape, ids, q0, &per_layer, variant, dec.n_layers, heads)
            }
        };
        let reps = decoder::aggregate_tape(tape, r);
        Ok(decoder::head_tape(tape, ids, reps))
    }

    /// Record the full forward pass on `tape`. The returned probability node
    /// has a zero diagonal and off-diagonal entries in (0, 1).
    pub fn forward(&self, tape: &mut Tape, dataset: &Dataset) -> Result<ForwardPass> {
        let batch = self.forward_batch(tape, std::slice::from_ref(dataset))?;
        Ok(ForwardPass {
            probs: batch.probs[0],
            param_ids: batch.param_ids,
            encoder_ids: batch.encoder_ids,
        })
    }

    /// Forward passes for a whole batch sharing one parameter registration,
    /// so per-name gradients accumulate across the batch.
    pub fn forward_batch(&self, tape: &mut Tape, datasets: &[Dataset]) -> Result<BatchForward> {
        if datasets.is_empty() {
            return Err(Error::Contract("forward_batch needs at least one dataset".into()));
        }
        let reg = self.register_all(tape);
        let mut probs = Vec::with_capacity(datasets.len());
        for dataset in datasets {
            probs.push(self.forward_graph(tape, dataset, &reg.ids)?);
        }
        Ok(BatchForward {
            probs,
            param_ids: reg.trainable,
            encoder_ids: reg.frozen,
        })
    }

    /// Forward pass without gradients, returning the validated prediction.
    pub fn predict(&self, dataset: &Dataset) -> Result<AdjacencyPrediction> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, dataset)?;
        let probs = tape
            .value(pass.probs)
            .clone()
            .into_dimensionality::<Ix2>()
            .unwrap();
        AdjacencyPrediction::new(probs)
    }

    /// Map each (value, intervention flag) cell through the frozen affine
    /// projection to a d-vector.
    pub fn embed_cells(&self, dataset: &Dataset) -> Result<DataTokens> {
        dataset.validate()?;
        let mut tape = Tape::new();
        let ids = self.register_encoder(&mut tape);
        let h0 = encoder::embed_cells_tape(&mut tape, &ids, dataset, self.config.encoder.d);
        encoder::tensor_to_tokens(tape.value(h0), 0)
    }

    /// Apply encoder layers up to `upto_layer` (0 = identity on raw
    /// embeddings). Tokens carry their layer, so partial encodes compose.
    pub fn encode(&self, tokens: &DataTokens, upto_layer: usize) -> Result<DataTokens> {
        if upto_layer > self.config.encoder.l_total {
            return Err(Error::Contract(format!(
                "upto_layer={upto_layer} exceeds L_total={}",
                self.config.encoder.l_total
            )));
        }
        if tokens.layer > upto_layer {
            return Err(Error::Contract(format!(
                "tokens already at layer {}, cannot rewind to {upto_layer}",
                tokens.layer
            )));
        }
        let d = self.config.encoder.d;
        if tokens.tensor.dim().2 != d {
            return Err(Error::ShapeMismatch {
                name: "data tokens".into(),
                expected: vec![tokens.tensor.dim().0, tokens.tensor.dim().1, d],
                found: tokens.tensor.shape().to_vec(),
            });
        }
        if tokens.tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data tokens".into()));
        }
        let mut tape = Tape::new();
        let ids = self.register_encoder(&mut tape);
        let mut x = tape.constant(tokens.tensor.clone().into_dyn());
        for l in tokens.layer..upto_layer {
            let (_, out) = encoder::encoder_layer_tape(&mut tape, &ids, l, x, self.config.encoder.n_heads);
            x = out;
        }
        encoder::tensor_to_tokens(tape.value(x), upto_layer)
    }
}

struct ForwardIds {
    ids: BTreeMap<String, TensorId>,
    trainable: BTreeMap<String, TensorId>,
    frozen: BTreeMap<String, TensorId>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{DatasetMeta, GraphFamily, MechanismKind};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2, Array3, ArrayD};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy_dataset(seed: u64, n: usize, f: usize) -> Dataset {
        let mut rng = rng_for(seed, "test/toy", 0);
        let values = Array2::from_shape_fn((n, f), |_| rng.sample::<f64, _>(StandardNormal));
        Dataset {
            values,
            intervention_mask: Array2::zeros((n, f)),
            meta: DatasetMeta {
                seed,
                family: GraphFamily::ErdosRenyi,
                mechanism: MechanismKind::Linear,
                n_obs: n,
                n_int: 0,
            },
        }
    }

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d: 16,
                l_total: 1,
                n_heads: 4,
                ff_hidden: 24,
                weight_source: WeightSource::RandomSeed(seed),
            },
            decoder: DecoderConfig {
                n_layers: 1,
                variant: DecoderVariant::Standard,
                t: 2,
                f_max: 6,
                head_width: 8,
            },
            encoder_layer: 1,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(0);
        cfg.encoder.d = 15; // not divisible by 4 heads
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_config(0);
        cfg.encoder_layer = 2; // beyond l_total=1
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_config(0);
        cfg.decoder.variant = DecoderVariant::EvolvingStandard;
        cfg.decoder.n_layers = 3; // must equal encoder_layer=1
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = tiny_config(0);
        cfg.decoder.t = 1; // std undefined
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        assert!(tiny_config(0).validate().is_ok());
        assert!(ModelConfig::desk(1).validate().is_ok());
        assert!(ModelConfig::paper(1).validate().is_ok());
    }

    #[test]
    fn embed_zero_weights_gives_zero_tokens() {
        let mut model = Model::new(tiny_config(0)).unwrap();
        model.params_mut().get_mut("encoder.embed.w").fill(0.0);
        model.params_mut().get_mut("encoder.embed.b").fill(0.0);
        let ds = toy_dataset(1, 5, 3);
        let tokens = model.embed_cells(&ds).unwrap();
        assert_eq!(tokens.tensor.dim(), (5, 3, 16));
        assert!(tokens.tensor.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_is_cell_local() {
        let model = Model::new(tiny_config(0)).unwrap();
        let base = toy_dataset(2, 4, 3);
        let mut flipped = base.clone();
        flipped.intervention_mask[(3, 1)] = 1;
        flipped.meta.n_obs = 3;
        flipped.meta.n_int = 1;

        let a = model.embed_cells(&base).unwrap().tensor;
        let b = model.embed_cells(&flipped).unwrap().tensor;
        for r in 0..4 {
            for j in 0..3 {
                let same = a
                    .index_axis(ndarray::Axis(0), r)
                    .index_axis(ndarray::Axis(0), j)
                    == b.index_axis(ndarray::Axis(0), r).index_axis(ndarray::Axis(0), j);
                if r == 3 && j == 1 {
                    assert!(!same, "toggled cell must change");
                } else {
                    assert!(same, "untouched cell ({r},{j}) changed");
                }
            }
        }
    }

    #[test]
    fn embed_deterministic() {
        let model = Model::new(tiny_config(3)).unwrap();
        let ds = toy_dataset(4, 6, 4);
        let a = model.embed_cells(&ds).unwrap();
        let b = model.embed_cells(&ds).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_upto_zero_is_identity() {
        let model = Model::new(tiny_config(5)).unwrap();
        let tokens = model.embed_cells(&toy_dataset(6, 4, 3)).unwrap();
        let out = model.encode(&tokens, 0).unwrap();
        assert_eq!(out, tokens);
        assert_eq!(out.layer, 0);
    }

    #[test]
    fn encode_range_errors() {
        let model = Model::new(tiny_config(5)).unwrap();
        let tokens = model.embed_cells(&toy_dataset(6, 4, 3)).unwrap();
        assert!(model.encode(&tokens, 2).is_err()); // beyond l_total=1
        let deep = model.encode(&tokens, 1).unwrap();
        assert_eq!(deep.layer, 1);
        assert!(model.encode(&deep, 0).is_err()); // cannot rewind
    }

    /// No positional encoding on either axis: encoding commutes with sample
    /// and feature permutations (d=16, n=8, f=4).
    #[test]
    fn encode_permutation_equivariance() {
        let model = Model::new(tiny_config(7)).unwrap();
        let ds = toy_dataset(8, 8, 4);
        let h = model
            .encode(&model.embed_cells(&ds).unwrap(), 1)
            .unwrap()
            .tensor;

        // Samples: rows 8 reversed-ish permutation.
        let sp = [3usize, 7, 0, 5, 1, 6, 2, 4];
        let mut ds_s = ds.clone();
        for (new_r, &old_r) in sp.iter().enumerate() {
            for j in 0..4 {
                ds_s.values[(new_r, j)] = ds.values[(old_r, j)];
            }
        }
        let h_s = model
            .encode(&model.embed_cells(&ds_s).unwrap(), 1)
            .unwrap()
            .tensor;
        for (new_r, &old_r) in sp.iter().enumerate() {
            for j in 0..4 {
                for e in 0..16 {
                    assert_abs_diff_eq!(
                        h_s[(new_r, j, e)],
                        h[(old_r, j, e)],
                        epsilon = 1e-9
                    );
                }
            }
        }

        // Features: columns permuted.
        let fp = [2usize, 0, 3, 1];
        let mut ds_f = ds.clone();
        for r in 0..8 {
            for (new_j, &old_j) in fp.iter().enumerate() {
                ds_f.values[(r, new_j)] = ds.values[(r, old_j)];
            }
        }
        let h_f = model
            .encode(&model.embed_cells(&ds_f).unwrap(), 1)
            .unwrap()
            .tensor;
        for r in 0..8 {
            for (new_j, &old_j) in fp.iter().enumerate() {
                for e in 0..16 {
                    assert_abs_diff_eq!(
                        h_f[(r, new_j, e)],
                        h[(r, old_j, e)],
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn encoder_weight_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.cpts");
        let model = Model::new(tiny_config(11)).unwrap();
        model.save_encoder_weights(&path).unwrap();

        let mut cfg = tiny_config(11);
        cfg.encoder.weight_source = WeightSource::LoadedFile(path.clone());
        let loaded = Model::new(cfg).unwrap();
        for (name, value) in model.params.iter() {
            if !Model::is_trainable(name) {
                assert_eq!(loaded.params.get(name), value, "{name} not bit-identical");
            }
        }

        // Same seed → identical init.
        let again = Model::new(tiny_config(11)).unwrap();
        assert_eq!(model.params().digest(), again.params().digest());

        // Mismatched d → error before any partial load.
        let mut wrong = tiny_config(11);
        wrong.encoder.d = 32;
        wrong.encoder.ff_hidden = 48;
        wrong.encoder.weight_source = WeightSource::LoadedFile(path);
        assert!(matches!(
            Model::new(wrong),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn causal_token_slicing_is_the_documented_bijection() {
        let (f_max, t, d) = (6, 3, 2);
        let mut rng = rng_for(0, "test/bank", 0);
        let bank =
            Array2::from_shape_fn((f_max, t * d), |_| rng.sample::<f64, _>(StandardNormal));

        let q0 = init_causal_tokens(4, &bank, t).unwrap();
        assert_eq!(q0.dim(), (t, 4, d));
        for r in 0..4 {
            for i in 0..t {
                for e in 0..d {
                    assert_eq!(q0[(i, r, e)], bank[(r, i * d + e)]);
                }
            }
        }

        // Boundary: the whole bank.
        let full = init_causal_tokens(f_max, &bank, t).unwrap();
        assert_eq!(full.dim(), (t, f_max, d));
        // Determinism.
        assert_eq!(init_causal_tokens(4, &bank, t).unwrap(), q0);
        // Degenerate and out-of-range f.
        assert!(init_causal_tokens(1, &bank, t).is_err());
        assert!(init_causal_tokens(f_max + 1, &bank, t).is_err());
        // t must divide the bank width.
        assert!(init_causal_tokens(4, &bank, 4).is_err());
    }

    /// Zeroed output projections leave only the residual path: R_L == Q₀.
    #[test]
    fn zeroed_decoder_projections_are_identity() {
        let mut model = Model::new(tiny_config(13)).unwrap();
        for l in 0..model.config.decoder.n_layers {
            let p = format!("decoder.l{l:02}");
            for name in ["samp_attn.wo", "samp_attn.bo", "feat_attn.wo", "feat_attn.bo"] {
                model.params_mut().get_mut(&format!("{p}.{name}")).fill(0.0);
            }
            for name in ["ff1.w2", "ff1.b2", "ff2.w2", "ff2.b2"] {
                model.params_mut().get_mut(&format!("{p}.{name}")).fill(0.0);
            }
        }
        let ds = toy_dataset(14, 5, 3);
        let (d, t) = (model.config.encoder.d, model.config.decoder.t);

        let mut tape = Tape::new();
        let reg = model.register_all(&mut tape);
        let h0 = encoder::embed_cells_tape(&mut tape, &reg.ids, &ds, d);
        let per_layer = encoder::encode_tape(&mut tape, &reg.ids, h0, 1, 4);
        let q0 = decoder::causal_tokens_tape(&mut tape, reg.ids["decoder.bank"], 3, t, d);
        let r = decoder::decode_tape(
            &mut tape,
            &reg.ids,
            q0,
            &per_layer,
            DecoderVariant::Standard,
            1,
            4,
        );
        assert_eq!(tape.value(r), tape.value(q0), "residual-only path must be exact");
    }

    /// Causal-token queries are not samples, so shuffling dataset rows leaves
    /// the prediction unchanged.
    #[test]
    fn sample_permutation_leaves_probs_unchanged() {
        for variant in DecoderVariant::ALL {
            let mut cfg = tiny_config(17);
            cfg.decoder.variant = variant;
            let model = Model::new(cfg).unwrap();
            let ds = toy_dataset(18, 7, 4);
            let sp = [6usize, 2, 4, 0, 5, 1, 3];
            let mut ds_s = ds.clone();
            for (new_r, &old_r) in sp.iter().enumerate() {
                for j in 0..4 {
                    ds_s.values[(new_r, j)] = ds.values[(old_r, j)];
                }
            }
            let a = model.predict(&ds).unwrap().probs;
            let b = model.predict(&ds_s).unwrap().probs;
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    /// With tied bank rows (the per-position rows deliberately break feature
    /// symmetry otherwise), permuting features permutes the prediction.
    #[test]
    fn feature_permutation_equivariance_with_tied_bank() {
        let mut model = Model::new(tiny_config(19)).unwrap();
        let row0: Array1<f64> = model
            .params()
            .get("decoder.bank")
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .unwrap();
        {
            let bank = model.params_mut().get_mut("decoder.bank");
            for mut row in bank.rows_mut() {
                row.assign(&row0);
            }
        }

        let ds = toy_dataset(20, 6, 4);
        let fp = [2usize, 0, 3, 1];
        let mut ds_f = ds.clone();
        for r in 0..6 {
            for (new_j, &old_j) in fp.iter().enumerate() {
                ds_f.values[(r, new_j)] = ds.values[(r, old_j)];
            }
        }
        let a = model.predict(&ds).unwrap().probs;
        let b = model.predict(&ds_f).unwrap().probs;
        for (ni, &oi) in fp.iter().enumerate() {
            for (nj, &oj) in fp.iter().enumerate() {
                assert_abs_diff_eq!(b[(ni, nj)], a[(oi, oj)], epsilon = 1e-9);
            }
        }
    }

    /// When every decoder layer sees the same data tokens (PreEncoderBypass
    /// has exactly one tensor), EvolvingStandard degenerates to Standard.
    #[test]
    fn evolving_equals_standard_on_identical_layers() {
        let mut cfg = tiny_config(23);
        cfg.encoder.weight_source = WeightSource::PreEncoderBypass;
        cfg.decoder.n_layers = 2;
        let mut cfg_ev = cfg.clone();
        cfg_ev.decoder.variant = DecoderVariant::EvolvingStandard;

        let ds = toy_dataset(24, 5, 3);
        let std = Model::new(cfg).unwrap().predict(&ds).unwrap();
        let ev = Model::new(cfg_ev).unwrap().predict(&ds).unwrap();
        assert_eq!(std.probs, ev.probs);
    }

    #[test]
    fn aggregate_identical_tokens() {
        let mut rng = rng_for(0, "test/agg", 0);
        let base = Array2::from_shape_fn((3, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let mut r = Array3::<f64>::zeros((5, 3, 4));
        for i in 0..5 {
            r.index_axis_mut(ndarray::Axis(0), i).assign(&base);
        }
        let reps = aggregate(&r).unwrap();
        assert_eq!(reps.dim(), (3, 16));
        for j in 0..3 {
            for e in 0..4 {
                let v = base[(j, e)];
                assert_abs_diff_eq!(reps[(j, e)], v, epsilon = 1e-12); // max
                assert_abs_diff_eq!(reps[(j, 4 + e)], v, epsilon = 1e-12); // min
                assert_abs_diff_eq!(reps[(j, 8 + e)], v, epsilon = 1e-12); // mean
                assert_abs_diff_eq!(reps[(j, 12 + e)], 0.0, epsilon = 1e-12); // std
            }
        }
    }

    #[test]
    fn aggregate_two_opposite_tokens() {
        let mut rng = rng_for(1, "test/agg", 0);
        let v = Array2::from_shape_fn((2, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let mut r = Array3::<f64>::zeros((2, 2, 3));
        r.index_axis_mut(ndarray::Axis(0), 0).assign(&v);
        r.index_axis_mut(ndarray::Axis(0), 1).assign(&v.mapv(|x| -x));
        let reps = aggregate(&r).unwrap();
        for j in 0..2 {
            for e in 0..3 {
                let a = v[(j, e)].abs();
                assert_abs_diff_eq!(reps[(j, e)], a, epsilon = 1e-12); // max = |v|
                assert_abs_diff_eq!(reps[(j, 3 + e)], -a, epsilon = 1e-12); // min = -|v|
                assert_abs_diff_eq!(reps[(j, 6 + e)], 0.0, epsilon = 1e-12); // mean = 0
                assert_abs_diff_eq!(reps[(j, 9 + e)], a, epsilon = 1e-12); // std = |v|
            }
        }
    }

    #[test]
    fn aggregate_order_statistics_hold() {
        let mut rng = rng_for(2, "test/agg", 0);
        let r = Array3::from_shape_fn((6, 5, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let reps = aggregate(&r).unwrap();
        assert_eq!(reps.dim(), (5, 12));
        for j in 0..5 {
            for e in 0..3 {
                let (mx, mn, me, sd) = (
                    reps[(j, e)],
                    reps[(j, 3 + e)],
                    reps[(j, 6 + e)],
                    reps[(j, 9 + e)],
                );
                assert!(mn <= me && me <= mx, "min <= mean <= max violated");
                assert!(sd >= 0.0);
            }
        }
        // t=1 is rejected.
        assert!(aggregate(&Array3::zeros((1, 2, 2))).is_err());
    }

    #[test]
    fn head_gram_matrix_is_symmetric() {
        let mut rng = rng_for(3, "test/head", 0);
        let reps = Array2::from_shape_fn((4, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let w = Array2::from_shape_fn((8, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let pred = predict_adjacency(&reps, &w, &w).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(pred.probs[(i, j)], pred.probs[(j, i)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn head_zero_weights_give_half() {
        let reps = Array2::from_elem((3, 8), 1.7);
        let zeros = Array2::zeros((8, 4));
        let pred = predict_adjacency(&reps, &zeros, &zeros).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 };
                assert_eq!(pred.probs[(i, j)], expect);
            }
        }
    }

    #[test]
    fn head_matches_closed_form() {
        // m=1: logit(i→j) = (reps_i · wp)(reps_j · wc) / 1.0.
        let mut rng = rng_for(4, "test/head", 0);
        let reps = Array2::from_shape_fn((3, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let wp = Array2::from_shape_fn((4, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let wc = Array2::from_shape_fn((4, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let pred = predict_adjacency(&reps, &wp, &wc).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(pred.probs[(i, j)], 0.0);
                    continue;
                }
                let p: f64 = (0..4).map(|k| reps[(i, k)] * wp[(k, 0)]).sum();
                let c: f64 = (0..4).map(|k| reps[(j, k)] * wc[(k, 0)]).sum();
                let expect = 1.0 / (1.0 + (-p * c).exp());
                assert_abs_diff_eq!(pred.probs[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn prediction_matrix_contract() {
        for variant in DecoderVariant::ALL {
            let mut cfg = tiny_config(29);
            cfg.decoder.variant = variant;
            let model = Model::new(cfg).unwrap();
            let pred = model.predict(&toy_dataset(30, 6, 5)).unwrap();
            assert_eq!(pred.f(), 5);
            // AdjacencyPrediction::new already enforced the contract;
            // spot-check the diagonal anyway.
            for i in 0..5 {
                assert_eq!(pred.probs[(i, i)], 0.0);
            }
        }
    }

    #[test]
    fn forward_rejects_oversized_f() {
        let model = Model::new(tiny_config(31)).unwrap(); // f_max = 6
        let err = model.predict(&toy_dataset(32, 4, 7));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    /// Gradients reach the used bank rows, every decoder/head tensor, and no
    /// encoder tensor; unused bank rows get exactly zero.
    #[test]
    fn gradient_flow_boundaries() {
        for variant in DecoderVariant::ALL {
            let mut cfg = tiny_config(37);
            cfg.decoder.variant = variant;
            let model = Model::new(cfg).unwrap();
            let ds = toy_dataset(38, 5, 3);

            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &ds).unwrap();
            let loss = tape.sum_all(pass.probs);
            let grads = tape.backward(loss);

            for (name, id) in &pass.encoder_ids {
                assert!(
                    grads.get(*id).is_none(),
                    "frozen parameter {name} received a gradient ({variant:?})"
                );
            }
            for (name, id) in &pass.param_ids {
                let g = grads
                    .get(*id)
                    .unwrap_or_else(|| panic!("no gradient for trainable {name} ({variant:?})"));
                assert!(g.iter().all(|v| v.is_finite()), "{name}: non-finite grad");
            }

            let bank_grad = grads.get(pass.param_ids["decoder.bank"]).unwrap();
            let bank_grad = bank_grad.view().into_dimensionality::<Ix2>().unwrap();
            for r in 0..6 {
                let row_norm: f64 = bank_grad.row(r).iter().map(|v| v * v).sum();
                if r < 3 {
                    assert!(
                        row_norm > 0.0,
                        "bank row {r} used by f=3 but got zero gradient ({variant:?})"
                    );
                } else {
                    assert_eq!(
                        row_norm, 0.0,
                        "bank row {r} beyond f=3 must get exactly zero ({variant:?})"
                    );
                }
            }
        }
    }

    /// Same config and seeds → bit-identical prediction, run to run.
    #[test]
    fn forward_deterministic() {
        let ds = toy_dataset(40, 6, 4);
        let a = Model::new(tiny_config(41)).unwrap().predict(&ds).unwrap();
        let b = Model::new(tiny_config(41)).unwrap().predict(&ds).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn from_parts_checks_shapes() {
        let model = Model::new(tiny_config(43)).unwrap();
        let mut map = model.params().as_map().clone();
        map.insert("decoder.bank".into(), ArrayD::zeros(vec![2, 2]));
        let err = Model::from_parts(tiny_config(43), ParamSet::from_map(map));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));

        let ok = Model::from_parts(tiny_config(43), model.params().clone());
        assert!(ok.is_ok());
    }
}
