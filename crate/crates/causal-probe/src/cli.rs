//! Command-line front end. Resolves a total [`RunConfig`] from preset
//! defaults, an optional JSON config file, and flags (in that precedence),
//! persists the result into the run directory, and drives dataset
//! generation, training, evaluation, ablations, and artifact inspection.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! runtime failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    ablate_decoder_variants, ablate_encoder_variants, ablate_layers, evaluate, AblationConfig,
    AblationReport, EvalConfig, MetricSummary,
};
use crate::model::{DecoderVariant, ModelConfig, WeightSource};
use crate::scm::{
    dataset_to_json, deserialize_dataset, generate_dataset_profiled, serialize_dataset,
    DataProfile,
};
use crate::seeds::{derive_seed, NS_GENERATE};
use crate::tensor_store;
use crate::train::{
    checkpoint_path, latest_checkpoint_step, restore_model, run_training, Checkpoint, TrainConfig,
    METRICS_FILE,
};

/// Environment override for the default output root (`runs` otherwise).
pub const OUT_ENV: &str = "CAUSAL_PROBE_OUT";

/// Seed used when neither a flag nor the config file provides one.
pub const DEFAULT_SEED: u64 = 0;

const CONFIG_FILE: &str = "config.json";
const LOCK_FILE: &str = ".lock";

const EXIT_USAGE: i32 = 2;
const EXIT_RUNTIME: i32 = 1;

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// The fully resolved invocation: every knob has a concrete value, and the
/// struct is serialized verbatim into the run directory it describes, so a
/// stored `config.json` reproduces its run when passed back via `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; presets thread it into every stage-specific seed below.
    pub seed: u64,
    /// Run directory every output lands in.
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub generate: GenerateConfig,
}

/// What `generate` writes: `count` standalone datasets of `f` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub count: usize,
    pub f: usize,
    pub n_obs: usize,
    pub n_int: usize,
    /// Base seed of the `generate/dataset` namespace.
    pub seed: u64,
    pub profile: DataProfile,
}

impl GenerateConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            count: 10,
            f: 5,
            n_obs: 150,
            n_int: 150,
            seed,
            profile: DataProfile::full(),
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            count: 100,
            f: 10,
            n_obs: 300,
            n_int: 300,
            seed,
            profile: DataProfile::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("generate.count must be positive".into()));
        }
        if self.f < 2 {
            return Err(Error::Config("generate.f must be at least 2".into()));
        }
        if self.n_obs + self.n_int == 0 {
            return Err(Error::Config(
                "generated datasets need at least one row".into(),
            ));
        }
        self.profile.validate()
    }
}

/// Built-in default bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Laptop-scale: small model, 2,000 steps, ER-only train/eval data.
    Desk,
    /// Full-scale protocol: d=192, 100,000 steps, all six graph families.
    Paper,
}

impl RunConfig {
    /// Preset defaults with `seed` threaded into every stage.
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (model, train, eval, generate) = match preset {
            Preset::Desk => (
                ModelConfig::desk(seed),
                TrainConfig::desk(seed),
                EvalConfig::desk(seed),
                GenerateConfig::desk(seed),
            ),
            Preset::Paper => (
                ModelConfig::paper(seed),
                TrainConfig::paper(seed),
                EvalConfig::paper(seed),
                GenerateConfig::paper(seed),
            ),
        };
        Self {
            seed,
            out: default_run_dir(),
            model,
            train,
            eval,
            generate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out.as_os_str().is_empty() {
            return Err(Error::Config("output directory must not be empty".into()));
        }
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.eval.validate(&self.model)?;
        self.generate.validate()
    }
}

fn default_run_dir() -> PathBuf {
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join("run")
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "causal-probe",
    version,
    about = "Train and probe amortized causal-discovery models on synthetic SCM data"
)]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Globals {
    /// JSON config file merged over the preset defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in defaults to start from (desk unless specified).
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Master seed; reseeds every stage of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default: $CAUSAL_PROBE_OUT/run, or runs/run).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Sample SCM datasets to disk together with a manifest.
    Generate {
        /// Override the configured dataset count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run (or resume) training in the run directory.
    Train {
        /// Continue from the newest checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the held-out suite; writes JSON, CSV, and
    /// plot-ready series.
    Eval {
        /// Checkpoint to score (default: newest under the run directory).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate arms that differ in exactly one component.
    Ablate {
        /// Axis to sweep.
        #[arg(long, value_enum)]
        kind: AblateKind,
        /// Encoder layers to sweep (kind=layers); defaults to 0..=L.
        #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
        layers: Option<Vec<usize>>,
        /// Extra pre-trained weight file to include as an arm (kind=encoder).
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
    },
    /// Pretty-print a dataset file, checkpoint, or tensor archive.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateKind {
    Layers,
    Encoder,
    Decoder,
}

/// Entry point behind `main`. Returns the process exit code instead of
/// exiting so tests can drive the full surface in-process.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version land here too; those are not failures.
            let code = if err.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Inspect { ref path } => cmd_inspect(path),
        Cmd::Generate { count } => cmd_generate(&resolve(&cli.globals)?, count),
        Cmd::Train { resume } => cmd_train(&resolve(&cli.globals)?, resume),
        Cmd::Eval { ref checkpoint } => cmd_eval(&resolve(&cli.globals)?, checkpoint.as_deref()),
        Cmd::Ablate {
            kind,
            ref layers,
            ref weights,
        } => cmd_ablate(
            &resolve(&cli.globals)?,
            kind,
            layers.as_deref(),
            weights.as_deref(),
        ),
    }
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

/// Precedence: preset defaults < config file < flags. The file may be any
/// subset of the [`RunConfig`] tree; unknown keys are an error rather than
/// silently ignored. A top-level `"seed"` in the file (like `--seed`)
/// reseeds the nested defaults, so a one-line config changes the whole run.
fn resolve(globals: &Globals) -> Result<RunConfig> {
    let preset = globals.preset.unwrap_or(Preset::Desk);
    let file: Option<Value> = match &globals.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            Some(serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("config file {} is not JSON: {e}", path.display()))
            })?)
        }
        None => None,
    };
    let file_seed = file.as_ref().and_then(|v| v.get("seed")).and_then(Value::as_u64);
    let seed = globals.seed.or(file_seed).unwrap_or(DEFAULT_SEED);

    let base = RunConfig::preset(preset, seed);
    let mut merged = serde_json::to_value(&base)?;
    if let Some(overrides) = file {
        deep_merge(&mut merged, overrides);
    }
    let mut cfg: RunConfig = serde_json::from_value(merged.clone())
        .map_err(|e| Error::Config(format!("config does not form a valid run config: {e}")))?;
    check_unknown_keys("", &merged, &serde_json::to_value(&cfg)?)?;

    if let Some(seed) = globals.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
        cfg.generate.seed = seed;
    }
    if let Some(out) = &globals.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Objects merge key by key and shared keys recurse. An incoming non-empty
/// object with no keys in common replaces the base wholesale — that is how
/// an externally tagged enum (e.g. a weight source) switches variants.
/// Arrays and scalars replace.
fn deep_merge(base: &mut Value, incoming: Value) {
    let inc = match incoming {
        Value::Object(map) => map,
        other => {
            *base = other;
            return;
        }
    };
    if inc.is_empty() {
        return;
    }
    let slot = match base {
        Value::Object(map) if inc.keys().any(|k| map.contains_key(k)) => map,
        _ => {
            *base = Value::Object(inc);
            return;
        }
    };
    for (key, value) in inc {
        match slot.get_mut(&key) {
            Some(sub) => deep_merge(sub, value),
            None => {
                slot.insert(key, value);
            }
        }
    }
}

/// Every key present in `merged` must survive the typed round trip, or it
/// was an unknown key that deserialization silently dropped.
fn check_unknown_keys(path: &str, merged: &Value, canonical: &Value) -> Result<()> {
    match (merged, canonical) {
        (Value::Object(m), Value::Object(c)) => {
            for (key, value) in m {
                let sub = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match c.get(key) {
                    Some(cv) => check_unknown_keys(&sub, value, cv)?,
                    None => {
                        return Err(Error::Config(format!("unknown config key `{sub}`")));
                    }
                }
            }
            Ok(())
        }
        (Value::Array(m), Value::Array(c)) if m.len() == c.len() => {
            for (i, (mv, cv)) in m.iter().zip(c).enumerate() {
                check_unknown_keys(&format!("{path}[{i}]"), mv, cv)?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Run-directory plumbing
// ---------------------------------------------------------------------------

/// Exclusive advisory lock on a run directory, released on drop. Concurrent
/// invocations must target distinct run directories.
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::RunDirLocked(format!(
                    "{} (remove {} if the previous run crashed)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Write the resolved config verbatim under `cfg.out` and return the hex
/// SHA-256 of the exact bytes written — the run's provenance handle.
fn persist_config(cfg: &RunConfig, file_name: &str) -> Result<String> {
    let bytes = serde_json::to_string_pretty(cfg)? + "\n";
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(file_name), &bytes)?;
    Ok(hex_sha256(bytes.as_bytes()))
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_generate(cfg: &RunConfig, count_override: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(count) = count_override {
        cfg.generate.count = count;
        cfg.validate()?;
    }
    let _lock = LockGuard::acquire(&cfg.out)?;
    let config_sha256 = persist_config(&cfg, CONFIG_FILE)?;

    let dir = cfg.out.join("datasets");
    fs::create_dir_all(&dir)?;
    let g = &cfg.generate;
    let pairs = (g.f * (g.f - 1)) as f64;
    let mut entries = Vec::with_capacity(g.count);
    let mut family_counts: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..g.count {
        let seed = derive_seed(g.seed, NS_GENERATE, i as u64);
        let (dataset, dag, _scm) =
            generate_dataset_profiled(seed, g.f, g.n_obs, g.n_int, &g.profile)?;
        let file = format!("dataset_{i:05}.ds");
        fs::write(dir.join(&file), serialize_dataset(&dataset, &dag)?)?;
        *family_counts
            .entry(dataset.meta.family.name().to_string())
            .or_default() += 1;
        entries.push(serde_json::json!({
            "file": format!("datasets/{file}"),
            "seed": seed,
            "f": g.f,
            "family": dataset.meta.family.name(),
            "mechanism": dataset.meta.mechanism.name(),
            "n_obs": g.n_obs,
            "n_int": g.n_int,
            "edges": dag.edge_count(),
            "edge_density": dag.edge_count() as f64 / pairs,
        }));
    }
    let manifest = serde_json::json!({
        "config_sha256": config_sha256,
        "count": g.count,
        "family_counts": family_counts,
        "entries": entries,
    });
    fs::write(
        cfg.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    println!(
        "wrote {} datasets and manifest.json under {}",
        g.count,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    // resolve() already validated; repeating here keeps "fail before any
    // compute" for callers that assemble a RunConfig programmatically.
    cfg.validate()?;
    let _lock = LockGuard::acquire(&cfg.out)?;
    persist_config(cfg, CONFIG_FILE)?;
    let outcome = run_training(&cfg.out, &cfg.model, &cfg.train, resume)?;
    match outcome.resumed_from {
        Some(_) if outcome.steps_run == 0 => println!(
            "run already finished at step {}; nothing to do",
            outcome.completed
        ),
        Some(step) => println!(
            "resumed from step {step}; now at {} of {} steps",
            outcome.completed, cfg.train.steps
        ),
        None => println!(
            "trained {} steps; metrics in {}",
            outcome.completed,
            cfg.out.join(METRICS_FILE).display()
        ),
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let _lock = LockGuard::acquire(&cfg.out)?;
    let ckpt_path = match checkpoint {
        Some(path) => path.to_path_buf(),
        None => {
            let step = latest_checkpoint_step(&cfg.out)?.ok_or_else(|| {
                Error::Config(format!(
                    "no checkpoint under {}; train first or pass --checkpoint",
                    cfg.out.display()
                ))
            })?;
            checkpoint_path(&cfg.out, step)
        }
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = restore_model(&cfg.model, &ckpt)?;
    // The train run's config.json stays untouched; the eval invocation
    // stores its own resolved config for reproducibility.
    persist_config(cfg, "eval_config.json")?;

    let report = evaluate(&model, &cfg.eval)?;
    report.write(&cfg.out, "eval")?;
    fs::write(
        cfg.out.join("eval_plots.json"),
        serde_json::to_string_pretty(&report.metric_vs_f())? + "\n",
    )?;

    let overall = &report.overall;
    println!(
        "scored {} on {} datasets (digest {})",
        ckpt_path.display(),
        report.records.len(),
        &report.data_digest[..12],
    );
    println!(
        "  roc_auc {}  n={} excluded={}",
        fmt_mean(&overall.roc_auc),
        overall.roc_auc.n,
        overall.excluded_roc_auc
    );
    println!(
        "  ap      {}  n={} excluded={}",
        fmt_mean(&overall.ap),
        overall.ap.n,
        overall.excluded_ap
    );
    Ok(())
}

fn fmt_mean(summary: &MetricSummary) -> String {
    match summary.mean {
        Some(mean) => format!("{mean:.4}"),
        None => "undefined".into(),
    }
}

fn cmd_ablate(
    cfg: &RunConfig,
    kind: AblateKind,
    layers: Option<&[usize]>,
    weights: Option<&Path>,
) -> Result<()> {
    let _lock = LockGuard::acquire(&cfg.out)?;
    let config_sha256 = persist_config(cfg, CONFIG_FILE)?;
    let acfg = AblationConfig {
        train: cfg.train.clone(),
        eval: cfg.eval.clone(),
    };
    let report: AblationReport = match kind {
        AblateKind::Layers => {
            let default: Vec<usize> = (0..=cfg.model.encoder.l_total).collect();
            let layers = layers.map_or(default, <[usize]>::to_vec);
            ablate_layers(&cfg.model, &layers, &acfg, &cfg.out)?
        }
        AblateKind::Encoder => {
            // The configured source, an alternate random init, and the
            // bypass; --weights adds a pre-trained arm.
            let mut sources = vec![cfg.model.encoder.weight_source.clone()];
            let push = |s: WeightSource, sources: &mut Vec<WeightSource>| {
                if !sources.contains(&s) {
                    sources.push(s);
                }
            };
            push(
                WeightSource::RandomSeed(derive_seed(cfg.model.seed, "ablate/encoder-alt", 0)),
                &mut sources,
            );
            push(WeightSource::PreEncoderBypass, &mut sources);
            if let Some(path) = weights {
                push(WeightSource::LoadedFile(path.to_path_buf()), &mut sources);
            }
            ablate_encoder_variants(&cfg.model, &sources, &acfg, &cfg.out)?
        }
        AblateKind::Decoder => {
            ablate_decoder_variants(&cfg.model, &DecoderVariant::ALL, &acfg, &cfg.out)?
        }
    };

    let table = report.ap_table();
    let doc = serde_json::json!({
        "config_sha256": config_sha256,
        "kind": report.kind,
        "shared_eval_data": report.data_digests_agree(),
        "ap_table": table,
        "ap_series": report.ap_series(),
        "report": report,
    });
    fs::write(
        cfg.out.join("ablation.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;

    println!("ablation `{}`: {} arms", doc["kind"].as_str().unwrap_or(""), table.len());
    for (label, ap) in &table {
        match ap {
            Some(ap) => println!("  {label}: ap={ap:.4}"),
            None => println!("  {label}: (skipped or undefined)"),
        }
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    if let Ok((dataset, dag)) = deserialize_dataset(&bytes) {
        let mut doc = dataset_to_json(&dataset, &dag);
        let obj = doc.as_object_mut().expect("dataset json is an object");
        obj.insert("kind".into(), "dataset".into());
        obj.insert("n".into(), dataset.n().into());
        obj.insert("f".into(), dataset.f().into());
        obj.insert("edges".into(), dag.edge_count().into());
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    if let Ok(ckpt) = Checkpoint::load(path) {
        let doc = serde_json::json!({
            "kind": "checkpoint",
            "step": ckpt.step,
            "adam_t": ckpt.adam_t,
            "dual": ckpt.dual,
            "encoder_digest": ckpt.encoder_digest,
            "trainable": tensor_summary(ckpt.trainable.iter()),
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    match tensor_store::tensors_from_bytes(&bytes) {
        Ok(tensors) => {
            let doc = serde_json::json!({
                "kind": "tensor_archive",
                "count": tensors.len(),
                "tensors": tensor_summary(tensors.iter()),
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(())
        }
        Err(_) => Err(Error::Parse {
            offset: 0,
            message: format!(
                "{} is not a dataset, checkpoint, or tensor archive",
                path.display()
            ),
        }),
    }
}

fn tensor_summary<'a>(
    tensors: impl Iterator<Item = (&'a String, &'a ArrayD<f64>)>,
) -> Vec<Value> {
    tensors
        .map(|(name, t)| {
            serde_json::json!({
                "name": name,
                "shape": t.shape(),
                "elements": t.len(),
            })
        })
        .collect()
}
