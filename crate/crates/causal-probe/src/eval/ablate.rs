//! Ablation harnesses: encoder-layer sweep, encoder weight variants, and
//! decoder variants. Every arm trains its own model but shares the batch
//! stream and the held-out evaluation suite, so rows differ only in the
//! component under study; the shared data is provable by digest equality.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, EvalReport, PlotSeries};
use crate::model::{DecoderVariant, Model, ModelConfig, WeightSource};
use crate::train::{drive_run, prepare_run, TrainConfig};

/// Shared per-arm schedule: one training run plus one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// One ablation row: the arm's resolved model configuration and its
/// evaluation, or the reason it was skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationArm {
    pub label: String,
    pub model: ModelConfig,
    /// Why the arm did not run (e.g. a missing weight file); `None` for
    /// completed arms.
    pub skipped: Option<String>,
    /// Digest of the evaluation data; equal across arms by construction.
    pub data_digest: Option<String>,
    pub eval: Option<EvalReport>,
}

/// A comparative report over one ablation axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    /// Which axis was swept: `layers`, `encoder_variants`, or
    /// `decoder_variants`.
    pub kind: String,
    pub arms: Vec<AblationArm>,
}

impl AblationReport {
    /// Label → overall mean AP (None for skipped arms or empty suites).
    pub fn ap_table(&self) -> Vec<(String, Option<f64>)> {
        self.arms
            .iter()
            .map(|arm| {
                let ap = arm.eval.as_ref().and_then(|e| e.overall.ap.mean);
                (arm.label.clone(), ap)
            })
            .collect()
    }

    /// Mean AP per completed arm, x = arm position in the sweep.
    pub fn ap_series(&self) -> PlotSeries {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut yerr = Vec::new();
        for (i, arm) in self.arms.iter().enumerate() {
            if let Some(eval) = &arm.eval {
                if let Some(mean) = eval.overall.ap.mean {
                    x.push(i as f64);
                    y.push(mean);
                    yerr.push(eval.overall.ap.stderr.unwrap_or(0.0));
                }
            }
        }
        PlotSeries {
            name: format!("{}_ap", self.kind),
            x,
            y,
            yerr,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// All arms that ran share identical evaluation data.
    pub fn data_digests_agree(&self) -> bool {
        let mut digests = self.arms.iter().filter_map(|a| a.data_digest.as_deref());
        match digests.next() {
            None => true,
            Some(first) => digests.all(|d| d == first),
        }
    }
}

/// Directory-safe form of an arm label.
fn fs_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Train one arm under `out_dir/<label>/` and evaluate it.
fn run_arm(
    label: &str,
    model_cfg: &ModelConfig,
    cfg: &AblationConfig,
    out_dir: &Path,
) -> Result<AblationArm> {
    let arm_dir = out_dir.join(fs_label(label));
    let (mut trainer, resumed) = prepare_run(&arm_dir, model_cfg, &cfg.train, false)?;
    drive_run(&arm_dir, &mut trainer, resumed)?;
    let report = evaluate(trainer.model(), &cfg.eval)?;
    report.write(&arm_dir, "eval")?;
    Ok(AblationArm {
        label: label.to_string(),
        model: model_cfg.clone(),
        skipped: None,
        data_digest: Some(report.data_digest.clone()),
        eval: Some(report),
    })
}

/// Sweep the encoder layer the decoder reads from. Layer 0 feeds the decoder
/// raw cell embeddings, which is the pre-encoder condition.
pub fn ablate_layers(
    base: &ModelConfig,
    layers: &[usize],
    cfg: &AblationConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    let mut arms = Vec::with_capacity(layers.len());
    for &layer in layers {
        let mut model_cfg = base.clone();
        model_cfg.encoder_layer = layer;
        let label = format!("layer={layer}");
        arms.push(run_arm(&label, &model_cfg, cfg, out_dir)?);
    }
    Ok(AblationReport {
        kind: "layers".into(),
        arms,
    })
}

fn source_label(source: &WeightSource) -> String {
    match source {
        WeightSource::LoadedFile(path) => format!("loaded:{}", path.display()),
        WeightSource::RandomSeed(seed) => format!("random:{seed}"),
        WeightSource::PreEncoderBypass => "pre_encoder_bypass".into(),
    }
}

/// Sweep the encoder weight source. File-backed variants whose weight file
/// is missing are skipped with an explicit notice instead of failing the
/// whole sweep.
pub fn ablate_encoder_variants(
    base: &ModelConfig,
    sources: &[WeightSource],
    cfg: &AblationConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    let mut arms = Vec::with_capacity(sources.len());
    for source in sources {
        let mut model_cfg = base.clone();
        model_cfg.encoder.weight_source = source.clone();
        let label = source_label(source);
        if let WeightSource::LoadedFile(path) = source {
            if !path.exists() {
                arms.push(AblationArm {
                    label,
                    model: model_cfg,
                    skipped: Some(format!("weight file not found: {}", path.display())),
                    data_digest: None,
                    eval: None,
                });
                continue;
            }
        }
        arms.push(run_arm(&label, &model_cfg, cfg, out_dir)?);
    }
    Ok(AblationReport {
        kind: "encoder_variants".into(),
        arms,
    })
}

/// Sweep the decoder variant.
pub fn ablate_decoder_variants(
    base: &ModelConfig,
    variants: &[DecoderVariant],
    cfg: &AblationConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    let mut arms = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut model_cfg = base.clone();
        model_cfg.decoder.variant = variant;
        arms.push(run_arm(variant.name(), &model_cfg, cfg, out_dir)?);
    }
    Ok(AblationReport {
        kind: "decoder_variants".into(),
        arms,
    })
}

/// Convenience check used by reports and tests: a completed arm's model was
/// built from this exact config.
pub fn arm_model(arm: &AblationArm) -> Result<Model> {
    Model::new(arm.model.clone())
}
