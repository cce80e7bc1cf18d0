//! Batch construction, the optimization loop, checkpointing, and the run
//! directory layout (`metrics.jsonl` + `checkpoints/step_N.cpts`).
//!
//! Training data is generated on the fly: batch `i` is a pure function of
//! `(config.seed, i)`, so a resumed run consumes exactly the same stream of
//! datasets as an uninterrupted one.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::objective::{
    augmented_lagrangian_tape, bce_edge_loss_tape, dual_update, pos_weight_for,
    spectral_radius_tape, DualState, TRAIN_POWER_ITERS,
};
use crate::scm::{generate_dataset_profiled, Dag, DataProfile, Dataset};
use crate::seeds::{rng_for, NS_TRAIN};
use crate::tape::Tape;

pub use checkpoint::Checkpoint;
pub use optim::{clip_global_norm, cosine_lr, AdamW};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Everything the optimization loop needs besides the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total optimizer steps in the run.
    pub steps: u64,
    pub batch_size: usize,
    /// Cosine-annealed learning rate: `lr_init` at step 0 down to `lr_floor`
    /// at the final step, no warm restarts.
    pub lr_init: f64,
    pub lr_floor: f64,
    /// Decoupled decay, applied to matrix-shaped learnables only.
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Feature-count range; one f per batch with P(f) ∝ f.
    pub f_min: usize,
    pub f_max: usize,
    /// Probability a dataset uses scheme A (observational + interventional
    /// rows); otherwise scheme B (observational only).
    pub p_mixed: f64,
    pub n_obs_mixed: usize,
    pub n_int_mixed: usize,
    pub n_obs_only: usize,
    /// Initial dual state and its update schedule.
    pub dual: DualState,
    /// Metrics record cadence in steps; the final step always logs.
    pub log_every: u64,
    /// Checkpoint cadence in steps; the final step always checkpoints.
    pub ckpt_every: u64,
    /// Base seed of the batch stream (namespaced per batch index).
    pub seed: u64,
    /// Restriction on the generated training data.
    pub profile: DataProfile,
}

impl TrainConfig {
    /// Desk-scale run: 2,000 steps, batch 8, f ∈ [4, 8], linear-Gaussian
    /// Erdős–Rényi data only, and halved sample counts (50 + 50 mixed,
    /// 100 observational) so the run fits a single-core half-hour budget.
    pub fn desk(seed: u64) -> Self {
        Self {
            steps: 2_000,
            batch_size: 8,
            lr_init: 5e-4,
            lr_floor: 1e-6,
            weight_decay: 0.01,
            clip_norm: 1.0,
            f_min: 4,
            f_max: 8,
            p_mixed: 0.75,
            n_obs_mixed: 50,
            n_int_mixed: 50,
            n_obs_only: 100,
            dual: DualState::default(),
            log_every: 1,
            ckpt_every: 500,
            seed,
            profile: DataProfile::linear_gaussian_er(),
        }
    }

    /// Paper-scale run: 100,000 steps, batch 32, f ∈ [4, 20], 100 + 100
    /// samples in scheme A or 200 in scheme B, full data variety.
    pub fn paper(seed: u64) -> Self {
        Self {
            steps: 100_000,
            batch_size: 32,
            f_min: 4,
            f_max: 20,
            n_obs_mixed: 100,
            n_int_mixed: 100,
            n_obs_only: 200,
            ckpt_every: 5_000,
            profile: DataProfile::full(),
            ..Self::desk(seed)
        }
    }

    /// Structural checks plus compatibility with the model.
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        // Written to reject NaN as well: a NaN never satisfies the closures.
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let nonnegative = |x: f64| x.is_finite() && x >= 0.0;
        if !positive(self.lr_init) || !positive(self.lr_floor) || self.lr_floor > self.lr_init {
            return Err(Error::Config(format!(
                "need 0 < lr_floor <= lr_init, got floor={} init={}",
                self.lr_floor, self.lr_init
            )));
        }
        if !nonnegative(self.weight_decay) || !positive(self.clip_norm) {
            return Err(Error::Config(
                "need weight_decay >= 0 and clip_norm > 0".into(),
            ));
        }
        if self.f_min < 2 || self.f_min > self.f_max || self.f_max > model.decoder.f_max {
            return Err(Error::Config(format!(
                "feature range [{}, {}] must sit inside [2, {}]",
                self.f_min, self.f_max, model.decoder.f_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_mixed) {
            return Err(Error::Config(format!(
                "p_mixed={} outside [0, 1]",
                self.p_mixed
            )));
        }
        if self.n_obs_mixed == 0 || self.n_int_mixed == 0 || self.n_obs_only == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.log_every == 0 || self.ckpt_every == 0 {
            return Err(Error::Config(
                "log_every and ckpt_every must be positive".into(),
            ));
        }
        self.dual.validate()?;
        self.profile.validate()
    }
}

/// Everything needed to regenerate one training dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub f: usize,
    pub n_obs: usize,
    pub n_int: usize,
}

impl DatasetSpec {
    /// Generate the dataset and its ground-truth graph.
    pub fn materialize(&self, profile: &DataProfile) -> Result<(Dataset, Dag)> {
        let (dataset, dag, _) =
            generate_dataset_profiled(self.seed, self.f, self.n_obs, self.n_int, profile)?;
        Ok((dataset, dag))
    }
}

/// Deterministic plan for batch `batch_index`: one f for the whole batch
/// drawn with P(f) ∝ f over `[f_min, f_max]`, then an independent scheme
/// draw and data seed per dataset.
pub fn batch_plan(cfg: &TrainConfig, batch_index: u64) -> Vec<DatasetSpec> {
    let mut rng = rng_for(cfg.seed, NS_TRAIN, batch_index);
    let total: u64 = (cfg.f_min..=cfg.f_max).map(|f| f as u64).sum();
    let mut pick = rng.gen_range(0..total);
    let mut f = cfg.f_max;
    for cand in cfg.f_min..=cfg.f_max {
        let w = cand as u64;
        if pick < w {
            f = cand;
            break;
        }
        pick -= w;
    }
    (0..cfg.batch_size)
        .map(|_| {
            let mixed = rng.gen::<f64>() < cfg.p_mixed;
            let seed = rng.gen::<u64>();
            let (n_obs, n_int) = if mixed {
                (cfg.n_obs_mixed, cfg.n_int_mixed)
            } else {
                (cfg.n_obs_only, 0)
            };
            DatasetSpec {
                seed,
                f,
                n_obs,
                n_int,
            }
        })
        .collect()
}

/// One metrics record; each line of `metrics.jsonl` is one of these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// 0-based index of the step this record describes.
    pub step: u64,
    /// Batch-mean positive-weighted BCE.
    pub bce: f64,
    /// Batch-mean spectral-radius penalty.
    pub h: f64,
    /// Dual variable after this step's (possible) dual update.
    pub lambda: f64,
    pub rho: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Batch-mean augmented-Lagrangian total.
    pub total: f64,
}

/// The optimization loop: owns the model, optimizer state, and dual state.
#[derive(Debug)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    opt: AdamW,
    dual: DualState,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(model.config())?;
        let names = model.trainable_names();
        let opt = AdamW::new(model.params(), &names, cfg.weight_decay, cfg.clip_norm);
        let dual = cfg.dual;
        Ok(Self {
            model,
            cfg,
            opt,
            dual,
            step: 0,
        })
    }

    /// Rebuild a trainer mid-run. The encoder comes from `model_cfg`'s weight
    /// source and must hash to what the checkpoint recorded.
    pub fn from_checkpoint(
        model_cfg: &ModelConfig,
        cfg: TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let model = restore_model(model_cfg, ckpt)?;
        cfg.validate(model.config())?;
        let opt = ckpt.optimizer(cfg.weight_decay, cfg.clip_norm);
        Ok(Self {
            model,
            cfg,
            opt,
            dual: ckpt.dual,
            step: ckpt.step,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn dual(&self) -> &DualState {
        &self.dual
    }

    /// Completed steps; the next step consumes batch index `completed_steps()`.
    pub fn completed_steps(&self) -> u64 {
        self.step
    }

    /// Snapshot everything a bit-exact resume needs.
    pub fn checkpoint(&self) -> Checkpoint {
        let map: BTreeMap<String, _> = self
            .model
            .trainable_names()
            .into_iter()
            .map(|n| {
                let tensor = self.model.params().get(&n).clone();
                (n, tensor)
            })
            .collect();
        Checkpoint {
            step: self.step,
            dual: self.dual,
            encoder_digest: self.model.encoder_digest(),
            trainable: ParamSet::from_map(map),
            m: self.opt.m.clone(),
            v: self.opt.v.clone(),
            adam_t: self.opt.t,
        }
    }

    /// One optimizer step: materialize the planned batch for the current
    /// step index, then update on it.
    pub fn step_once(&mut self) -> Result<StepStats> {
        let specs = batch_plan(&self.cfg, self.step);
        let mut datasets = Vec::with_capacity(specs.len());
        let mut dags = Vec::with_capacity(specs.len());
        for spec in &specs {
            let (dataset, dag) = spec.materialize(&self.cfg.profile)?;
            datasets.push(dataset);
            dags.push(dag);
        }
        self.step_on_batch(&datasets, &dags)
    }

    /// One optimizer step on a caller-provided batch: take the mean
    /// augmented-Lagrangian loss over it, backpropagate, update the
    /// learnables, and advance the step counter, learning rate, and dual
    /// state exactly as `step_once` would.
    pub fn step_on_batch(&mut self, datasets: &[Dataset], dags: &[Dag]) -> Result<StepStats> {
        if datasets.is_empty() || datasets.len() != dags.len() {
            return Err(Error::Contract(format!(
                "batch of {} datasets with {} graphs",
                datasets.len(),
                dags.len()
            )));
        }
        let lr = cosine_lr(self.step, self.cfg.steps, self.cfg.lr_init, self.cfg.lr_floor);

        let mut tape = Tape::new();
        let fwd = self.model.forward_batch(&mut tape, datasets)?;
        let inv_b = 1.0 / datasets.len() as f64;
        let mut acc = None;
        let (mut bce_sum, mut h_sum) = (0.0, 0.0);
        for (probs, dag) in fwd.probs.iter().zip(dags) {
            let bce = bce_edge_loss_tape(&mut tape, *probs, dag, pos_weight_for(dag));
            let h = spectral_radius_tape(&mut tape, *probs, TRAIN_POWER_ITERS);
            let total = augmented_lagrangian_tape(&mut tape, bce, h, &self.dual);
            bce_sum += tape.value(bce).sum();
            h_sum += tape.value(h).sum();
            acc = Some(match acc {
                None => total,
                Some(prev) => tape.add(prev, total),
            });
        }
        let loss = tape.scale(acc.expect("non-empty batch"), inv_b);
        let loss_value = tape.value(loss).sum();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }

        let grads = tape.backward(loss);
        let mut grad_map = BTreeMap::new();
        for (name, id) in &fwd.param_ids {
            let g = grads.get_or_zeros(*id, tape.shape(*id));
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at step {}",
                    self.step
                )));
            }
            grad_map.insert(name.clone(), g);
        }
        let grad_norm = self.opt.step(self.model.params_mut(), grad_map, lr)?;

        self.step += 1;
        if self.step.is_multiple_of(u64::from(self.dual.period)) {
            self.dual = dual_update(&self.dual, h_sum * inv_b);
        }
        Ok(StepStats {
            step: self.step - 1,
            bce: bce_sum * inv_b,
            h: h_sum * inv_b,
            lambda: self.dual.lambda,
            rho: self.dual.rho,
            lr,
            grad_norm,
            total: loss_value,
        })
    }
}

/// Build a model from its config and load the checkpoint's trainables into
/// it. The encoder comes from the config's weight source and must hash to
/// what the checkpoint recorded.
pub fn restore_model(model_cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(model_cfg.clone())?;
    if model.encoder_digest() != ckpt.encoder_digest {
        return Err(Error::Contract(format!(
            "encoder digest mismatch: model has {}, checkpoint expects {}",
            model.encoder_digest(),
            ckpt.encoder_digest
        )));
    }
    install_trainables(&mut model, &ckpt.trainable)?;
    Ok(model)
}

/// Overwrite the model's trainables with a saved set; names and shapes must
/// match exactly.
fn install_trainables(model: &mut Model, saved: &ParamSet) -> Result<()> {
    let names = model.trainable_names();
    if saved.len() != names.len() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} trainable tensors, model expects {}",
            saved.len(),
            names.len()
        )));
    }
    for name in &names {
        if !saved.contains(name) {
            return Err(Error::Contract(format!(
                "checkpoint is missing trainable `{name}`"
            )));
        }
        let tensor = saved.get(name);
        let expected = model.params().get(name).shape().to_vec();
        if tensor.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected,
                found: tensor.shape().to_vec(),
            });
        }
        model.params_mut().insert(name.clone(), tensor.clone());
    }
    Ok(())
}

/// `checkpoints/step_{N}.cpts` under the run directory.
pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step_{step}.cpts"))
}

/// Highest checkpoint step present under the run directory, if any.
pub fn latest_checkpoint_step(run_dir: &Path) -> Result<Option<u64>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(&dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".cpts"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            best = best.max(Some(step));
        }
    }
    Ok(best)
}

/// What a `run_training` call did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrainOutcome {
    /// Steps executed in this call (0 for an already-finished run).
    pub steps_run: u64,
    /// Completed steps after this call.
    pub completed: u64,
    /// Checkpoint step the run resumed from, if any.
    pub resumed_from: Option<u64>,
}

/// Build the trainer for a run directory: fresh, or resumed from the newest
/// checkpoint when `resume` is set and one exists. Metrics lines at or past
/// the resume step are dropped so the file keeps one record per step.
pub fn prepare_run(
    run_dir: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    resume: bool,
) -> Result<(Trainer, Option<u64>)> {
    fs::create_dir_all(run_dir.join(CHECKPOINT_DIR))?;
    let metrics_path = run_dir.join(METRICS_FILE);
    if resume {
        if let Some(step) = latest_checkpoint_step(run_dir)? {
            let ckpt = Checkpoint::load(&checkpoint_path(run_dir, step))?;
            truncate_metrics(&metrics_path, ckpt.step)?;
            let trainer = Trainer::from_checkpoint(model_cfg, train_cfg.clone(), &ckpt)?;
            return Ok((trainer, Some(step)));
        }
    }
    if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    let trainer = Trainer::new(Model::new(model_cfg.clone())?, train_cfg.clone())?;
    Ok((trainer, None))
}

/// Run the trainer to completion, appending `metrics.jsonl` records and
/// periodic checkpoints. A non-finite loss or gradient aborts the run after
/// dumping `diagnostics.json`.
pub fn drive_run(
    run_dir: &Path,
    trainer: &mut Trainer,
    resumed_from: Option<u64>,
) -> Result<TrainOutcome> {
    drive_run_until(run_dir, trainer, resumed_from, None)
}

/// `drive_run`, but pausing once `stop_at` steps have completed — the moral
/// equivalent of killing the process there. The run resumes from the newest
/// periodic checkpoint.
pub fn drive_run_until(
    run_dir: &Path,
    trainer: &mut Trainer,
    resumed_from: Option<u64>,
    stop_at: Option<u64>,
) -> Result<TrainOutcome> {
    let cfg = trainer.config().clone();
    let target = stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let mut steps_run = 0;
    while trainer.completed_steps() < target {
        let stats = match trainer.step_once() {
            Ok(stats) => stats,
            Err(err) => {
                let diag = serde_json::json!({
                    "step": trainer.completed_steps(),
                    "error": err.to_string(),
                });
                fs::write(
                    run_dir.join("diagnostics.json"),
                    serde_json::to_string_pretty(&diag)?,
                )?;
                return Err(err);
            }
        };
        steps_run += 1;
        let done = trainer.completed_steps();
        if stats.step.is_multiple_of(cfg.log_every) || done == cfg.steps {
            serde_json::to_writer(&mut metrics, &stats)?;
            metrics.write_all(b"\n")?;
        }
        if done.is_multiple_of(cfg.ckpt_every) || done == cfg.steps {
            trainer.checkpoint().save(&checkpoint_path(run_dir, done))?;
        }
    }
    metrics.flush()?;
    Ok(TrainOutcome {
        steps_run,
        completed: trainer.completed_steps(),
        resumed_from,
    })
}

/// Drive a full run under `run_dir`; see `prepare_run` and `drive_run`.
pub fn run_training(
    run_dir: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    resume: bool,
) -> Result<TrainOutcome> {
    let (mut trainer, resumed_from) = prepare_run(run_dir, model_cfg, train_cfg, resume)?;
    drive_run(run_dir, &mut trainer, resumed_from)
}

/// Keep only metrics lines for steps before `resume_step`.
fn truncate_metrics(path: &Path, resume_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let stats: StepStats = serde_json::from_str(line)?;
        if stats.step < resume_step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderConfig, DecoderVariant, EncoderConfig, WeightSource};
    use crate::scm::{GraphFamily, MechanismKind};

    fn tiny_model_config(seed: u64) -> ModelConfig {
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

    fn toy_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            steps: 200,
            batch_size: 2,
            lr_init: 3e-3,
            lr_floor: 1e-5,
            weight_decay: 0.01,
            clip_norm: 1.0,
            f_min: 4,
            f_max: 4,
            p_mixed: 0.75,
            n_obs_mixed: 16,
            n_int_mixed: 16,
            n_obs_only: 32,
            dual: DualState::default(),
            log_every: 1,
            ckpt_every: 100,
            seed,
            profile: DataProfile::linear_gaussian_er(),
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let model = tiny_model_config(1);
        let good = toy_train_config(1);
        assert!(good.validate(&model).is_ok());

        let mut c = good.clone();
        c.f_max = 7; // model F_max is 6
        assert!(c.validate(&model).is_err());
        c = good.clone();
        c.f_min = 1;
        assert!(c.validate(&model).is_err());
        c = good.clone();
        c.p_mixed = 1.5;
        assert!(c.validate(&model).is_err());
        c = good.clone();
        c.lr_floor = c.lr_init * 2.0;
        assert!(c.validate(&model).is_err());
        c = good.clone();
        c.steps = 0;
        assert!(c.validate(&model).is_err());
        c = good;
        c.dual.gamma = 1.5;
        assert!(c.validate(&model).is_err());
    }

    #[test]
    fn batch_plan_is_deterministic_and_index_sensitive() {
        let cfg = toy_train_config(7);
        assert_eq!(batch_plan(&cfg, 3), batch_plan(&cfg, 3));
        let a = batch_plan(&cfg, 3);
        let b = batch_plan(&cfg, 4);
        assert_ne!(
            a.iter().map(|s| s.seed).collect::<Vec<_>>(),
            b.iter().map(|s| s.seed).collect::<Vec<_>>()
        );
    }

    #[test]
    fn batch_f_draw_is_proportional_to_f() {
        // P(f) ∝ f over [4, 20]; check the extreme bins of 100k batch draws
        // against their binomial 3σ bands, which also pins the ≈5 ratio.
        let mut cfg = toy_train_config(11);
        cfg.f_min = 4;
        cfg.f_max = 20;
        cfg.batch_size = 1;
        let trials = 100_000u64;
        let total_w: f64 = (4..=20).map(f64::from).sum();
        let (mut n4, mut n20) = (0u64, 0u64);
        for i in 0..trials {
            match batch_plan(&cfg, i)[0].f {
                4 => n4 += 1,
                20 => n20 += 1,
                _ => {}
            }
        }
        for (count, f) in [(n4, 4.0), (n20, 20.0)] {
            let p = f / total_w;
            let mean = trials as f64 * p;
            let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (count as f64 - mean).abs() <= 3.0 * sigma,
                "f={f}: count {count} outside {mean} ± 3·{sigma:.1}"
            );
        }
        let ratio = n20 as f64 / n4 as f64;
        assert!((4.0..=6.0).contains(&ratio), "P(20)/P(4) ratio {ratio}");
    }

    #[test]
    fn scheme_frequency_and_batch_homogeneity() {
        let mut cfg = toy_train_config(13);
        cfg.f_min = 4;
        cfg.f_max = 6;
        cfg.batch_size = 8;
        let batches = 1_250u64; // 10,000 datasets
        let mut mixed = 0u64;
        for i in 0..batches {
            let plan = batch_plan(&cfg, i);
            let f0 = plan[0].f;
            for spec in &plan {
                assert_eq!(spec.f, f0, "batch {i} mixes feature counts");
                if spec.n_int > 0 {
                    assert_eq!((spec.n_obs, spec.n_int), (16, 16));
                    mixed += 1;
                } else {
                    assert_eq!(spec.n_obs, 32);
                }
            }
        }
        let n = (batches * 8) as f64;
        let sigma = (0.75 * 0.25 / n).sqrt();
        let freq = mixed as f64 / n;
        assert!(
            (freq - 0.75).abs() <= 3.0 * sigma,
            "scheme-A frequency {freq} outside 0.75 ± 3·{sigma:.4}"
        );
    }

    #[test]
    fn materialized_batch_matches_spec() {
        let cfg = toy_train_config(17);
        for spec in batch_plan(&cfg, 0) {
            let (dataset, dag) = spec.materialize(&cfg.profile).unwrap();
            assert_eq!(dataset.f(), spec.f);
            assert_eq!(dataset.meta.n_obs, spec.n_obs);
            assert_eq!(dataset.meta.n_int, spec.n_int);
            assert_eq!(dag.f(), spec.f);
            assert_eq!(dataset.meta.family, GraphFamily::ErdosRenyi);
            assert_eq!(dataset.meta.mechanism, MechanismKind::Linear);
        }
    }

    #[test]
    fn fixed_batch_loss_decreases_and_encoder_stays_frozen() {
        let model = Model::new(tiny_model_config(23)).unwrap();
        let cfg = toy_train_config(23);
        let pairs: Vec<_> = (0..2u64)
            .map(|i| {
                DatasetSpec {
                    seed: 0xab5e_ed00 + i,
                    f: 4,
                    n_obs: 12,
                    n_int: 12,
                }
                .materialize(&cfg.profile)
                .unwrap()
            })
            .collect();
        let datasets: Vec<_> = pairs.iter().map(|(d, _)| d.clone()).collect();
        let dags: Vec<_> = pairs.iter().map(|(_, g)| g.clone()).collect();

        let encoder_before = model.encoder_digest();
        let mut trainer = Trainer::new(model, cfg.clone()).unwrap();
        let mut totals = Vec::new();
        let mut lambdas = Vec::new();
        let (mut first_lr, mut last_lr) = (None, 0.0);
        for _ in 0..cfg.steps {
            let stats = trainer.step_on_batch(&datasets, &dags).unwrap();
            assert!(stats.grad_norm.is_finite(), "grad norm at step {}", stats.step);
            assert!(stats.total.is_finite());
            first_lr.get_or_insert(stats.lr);
            last_lr = stats.lr;
            totals.push(stats.total);
            lambdas.push(stats.lambda);
        }
        assert_eq!(first_lr.unwrap(), cfg.lr_init);
        assert_eq!(last_lr, cfg.lr_floor);
        assert!(lambdas.windows(2).all(|w| w[1] >= w[0]), "λ decreased");

        let head = totals[..10].iter().sum::<f64>() / 10.0;
        let tail = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head,
            "fixed-batch loss did not decrease: {head} -> {tail}"
        );
        assert_eq!(trainer.model().encoder_digest(), encoder_before);
    }

    /// Short-run config for the resume tests: 6 steps, checkpoint every 3.
    fn resume_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 2,
            f_min: 3,
            f_max: 3,
            n_obs_mixed: 8,
            n_int_mixed: 8,
            n_obs_only: 16,
            ckpt_every: 3,
            ..toy_train_config(seed)
        }
    }

    #[test]
    fn interrupted_run_resumes_bit_exactly() {
        let model_cfg = tiny_model_config(31);
        let cfg = resume_train_config(31);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();

        let full = run_training(dir_a.path(), &model_cfg, &cfg, false).unwrap();
        assert_eq!((full.steps_run, full.completed, full.resumed_from), (6, 6, None));

        // Same config, but "killed" after step 3, then resumed.
        let (mut trainer, _) = prepare_run(dir_b.path(), &model_cfg, &cfg, false).unwrap();
        let paused = drive_run_until(dir_b.path(), &mut trainer, None, Some(3)).unwrap();
        assert_eq!((paused.steps_run, paused.completed), (3, 3));
        let resumed = run_training(dir_b.path(), &model_cfg, &cfg, true).unwrap();
        assert_eq!(
            (resumed.steps_run, resumed.completed, resumed.resumed_from),
            (3, 6, Some(3))
        );

        let metrics_a = fs::read_to_string(dir_a.path().join(METRICS_FILE)).unwrap();
        let metrics_b = fs::read_to_string(dir_b.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics_a.lines().count(), 6);
        assert_eq!(metrics_a, metrics_b, "resumed metrics differ");

        let final_a = fs::read(checkpoint_path(dir_a.path(), 6)).unwrap();
        let final_b = fs::read(checkpoint_path(dir_b.path(), 6)).unwrap();
        assert_eq!(final_a, final_b, "final checkpoints differ");
    }

    #[test]
    fn finished_run_resume_is_a_noop() {
        let model_cfg = tiny_model_config(37);
        let cfg = resume_train_config(37);
        let dir = tempfile::tempdir().unwrap();
        run_training(dir.path(), &model_cfg, &cfg, false).unwrap();
        let before = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let outcome = run_training(dir.path(), &model_cfg, &cfg, true).unwrap();
        assert_eq!((outcome.steps_run, outcome.completed, outcome.resumed_from), (0, 6, Some(6)));
        let after = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let model_cfg = tiny_model_config(41);
        let cfg = resume_train_config(41);
        let dir = tempfile::tempdir().unwrap();
        let (mut trainer, _) = prepare_run(dir.path(), &model_cfg, &cfg, false).unwrap();
        let shape = trainer.model().params().get("decoder.bank").shape().to_vec();
        trainer
            .model_mut()
            .params_mut()
            .insert("decoder.bank".into(), ndarray::ArrayD::from_elem(shape, f64::NAN));
        let err = drive_run(dir.path(), &mut trainer, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "got {err:?}");
        let diag = fs::read_to_string(dir.path().join("diagnostics.json")).unwrap();
        assert!(diag.contains("non-finite"), "diagnostics: {diag}");
        assert!(!dir.path().join(METRICS_FILE).exists() || fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap().is_empty());
    }

    #[test]
    fn resume_rejects_foreign_encoder() {
        let cfg = resume_train_config(43);
        let trainer = Trainer::new(Model::new(tiny_model_config(43)).unwrap(), cfg.clone()).unwrap();
        let ckpt = trainer.checkpoint();
        let err = Trainer::from_checkpoint(&tiny_model_config(44), cfg, &ckpt).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }
}
