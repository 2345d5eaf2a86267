//! Experiment orchestration: configuration, training runs with probe
//! diagnostics, stage detection, ablation grids and file output.
//!
//! Every KL probe is `KL(reference ‖ model)`: the ground-truth or
//! reference-model distribution comes first. Excess loss is cross-entropy
//! minus the entropy of the true conditional.

mod ablation;
mod metrics;
mod output;
mod stages;

use serde::{Deserialize, Serialize};

use crate::attention::{forward, lag_mass, train, ModelParams, OptimizerKind, TrainConfig, TrainData, TrainOutcome};
use crate::error::{Error, Result};
use crate::markov::{build_task, entropy, sample_batch, SequenceBatch, TaskConfig, TaskSpec};
use crate::rng::{keys, stream};
use crate::theory::config_digest;

pub use ablation::{run_ablation, AblationCell, AblationGrid, AblationOutcome, CellResult, CellSettings};
pub use metrics::{kl_divergence, probe_restricted_gt, probe_restricted_model, MetricLog, MetricRow, KL_FLAG_NATS};
pub use output::{emit_outputs, plot_metric_log, plot_trajectory, prepare_out_dir, Emitter, Manifest};
pub use stages::{detect_stages, StageReport, StageSeries};

/// Model block of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of heads.
    pub h: usize,
    /// Attention entries start uniform on `[−u, u]`.
    pub u: f64,
    /// Keys visible to each query; all previous positions when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            h: 3,
            u: 1.0,
            context_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Size of the fixed training set; ignored when `online`.
    pub train_size: usize,
    /// Size of the held-out validation set. Overrides
    /// `optim.validation_size`.
    pub test_size: usize,
    /// Draw a fresh batch at every step instead of using a fixed set.
    pub online: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 9000,
            test_size: 3000,
            online: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Steps between metric rows.
    pub stride: usize,
    /// Sequences in the fixed probe batch.
    pub batch_size: usize,
    /// Context limits of the restricted reference models.
    pub contexts: Vec<usize>,
    /// Restricted ground truths to probe (group counts `1..=h`); all when
    /// empty.
    pub predictors: Vec<usize>,
    /// Fraction of the initial value below which a series counts as learned.
    pub threshold: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            stride: 10,
            batch_size: 512,
            contexts: Vec::new(),
            predictors: Vec::new(),
            threshold: 0.1,
        }
    }
}

/// One training experiment. Parsed from TOML; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub optim: TrainConfig,
    pub data: DataConfig,
    pub probes: ProbeConfig,
    pub ablation: AblationGrid,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn digest(&self) -> Result<String> {
        config_digest(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        let len = self.task.t + self.task.w;
        let bad = |m: String| Err(Error::config(m));
        if self.model.h == 0 {
            return bad("model.h must be positive".into());
        }
        if !(self.model.u >= 0.0 && self.model.u.is_finite()) {
            return bad(format!(
                "model.u = {} must be a finite nonnegative number",
                self.model.u
            ));
        }
        for c in self.model.context_limit.iter().chain(&self.probes.contexts) {
            if *c == 0 || *c > len {
                return bad(format!("context limit {c} outside 1..={len} (T + w)"));
            }
        }
        if self.probes.stride == 0 || self.probes.batch_size == 0 {
            return bad("probe stride and batch size must be positive".into());
        }
        if let Some(i) = self.probes.predictors.iter().find(|i| **i == 0 || **i > self.task.h) {
            return bad(format!("restricted predictor {i} outside 1..={}", self.task.h));
        }
        if !(self.probes.threshold > 0.0 && self.probes.threshold < 1.0) {
            return bad(format!("stage threshold {} must lie in (0, 1)", self.probes.threshold));
        }
        if !self.data.online && self.data.train_size == 0 {
            return bad("data.train_size must be positive for a fixed training set".into());
        }
        if self.data.test_size == 0 {
            return bad("data.test_size must be positive".into());
        }
        self.ablation.validate()
    }

    /// Training settings with the data block applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            validation_size: self.data.test_size,
            log_every: self.probes.stride,
            ..self.optim.clone()
        }
    }

    fn predictors(&self) -> Vec<usize> {
        if self.probes.predictors.is_empty() {
            (1..=self.task.h).collect()
        } else {
            self.probes.predictors.clone()
        }
    }
}

/// Everything a run produces besides files.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub config_digest: String,
    pub log: MetricLog,
    pub stages: StageReport,
    pub params: ModelParams,
    pub best_val_loss: f64,
    /// First logged step whose validation loss equals the best logged one.
    pub best_step: usize,
    /// Probe evaluations whose KL exceeded [`KL_FLAG_NATS`].
    pub flagged_kl: usize,
}

struct Probe {
    batch: SequenceBatch,
    // restricted ground truths, [predictor][n][step][token]
    truths: Vec<Vec<f64>>,
}

fn restricted_table(spec: &TaskSpec, groups: usize, batch: &SequenceBatch) -> Result<Vec<f64>> {
    let w = spec.w();
    let mut out = Vec::with_capacity(batch.count() * spec.t() * spec.d());
    for seq in batch.iter() {
        for pos in w..seq.len() {
            out.extend_from_slice(spec.restricted_predictor(groups, &seq[pos - w..pos])?.as_slice());
        }
    }
    Ok(out)
}

/// Mean entropy of the true conditional over the scored positions of `batch`.
fn entropy_floor(spec: &TaskSpec, batch: &SequenceBatch) -> Result<f64> {
    let w = spec.w();
    let mut total = 0.0;
    for seq in batch.iter() {
        for pos in w..seq.len() {
            total += entropy(spec.next_token_distribution(&seq[pos - w..pos])?.as_slice());
        }
    }
    Ok(total / (batch.count() * spec.t()) as f64)
}

fn initial_params(cfg: &ExperimentConfig, spec: &TaskSpec) -> Result<ModelParams> {
    let p = ModelParams::init(
        spec.d(),
        spec.w(),
        spec.t(),
        cfg.model.h,
        cfg.model.u,
        &mut stream(cfg.seed, keys::INIT),
    );
    p.with_context_limit(cfg.model.context_limit)
}

fn training_set(cfg: &ExperimentConfig, spec: &TaskSpec) -> Result<Option<SequenceBatch>> {
    if cfg.data.online {
        return Ok(None);
    }
    sample_batch(spec, cfg.data.train_size, &mut stream(cfg.seed, keys::TRAIN_SET)).map(Some)
}

/// Trains the reference model with context limit `c` under the same seed
/// and settings and keeps its parameters at every logged step.
fn reference_snapshots(cfg: &ExperimentConfig, spec: &TaskSpec, c: usize) -> Result<Vec<ModelParams>> {
    let init = initial_params(cfg, spec)?.with_context_limit(Some(c))?;
    let data = training_set(cfg, spec)?;
    let source = data.as_ref().map_or(TrainData::Online, TrainData::Fixed);
    let mut snaps = Vec::new();
    train(spec, source, &cfg.train_config(), init, cfg.seed, |o| {
        snaps.push(o.params.clone());
        Ok(())
    })?;
    Ok(snaps)
}

/// Trains the configured model and records one metric row every
/// `probes.stride` steps and after the last update.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let spec = build_task(&cfg.task)?;
    let tc = cfg.train_config();
    let predictors = cfg.predictors();
    let probe_batch = sample_batch(&spec, cfg.probes.batch_size, &mut stream(cfg.seed, keys::PROBE))?;
    let probe = Probe {
        truths: predictors
            .iter()
            .map(|&i| restricted_table(&spec, i, &probe_batch))
            .collect::<Result<_>>()?,
        batch: probe_batch,
    };
    let validation = sample_batch(&spec, tc.validation_size, &mut stream(cfg.seed, keys::VALIDATION))?;
    let floor = entropy_floor(&spec, &validation)?;
    let references = cfg
        .probes
        .contexts
        .iter()
        .map(|&c| reference_snapshots(cfg, &spec, c))
        .collect::<Result<Vec<_>>>()?;

    let mut log = MetricLog::new(&predictors, &cfg.probes.contexts, cfg.model.h, spec.w());
    let data = training_set(cfg, &spec)?;
    let source = data.as_ref().map_or(TrainData::Online, TrainData::Fixed);
    let init = initial_params(cfg, &spec)?;
    let mut flagged = 0usize;
    let mut pending: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut index = 0usize;
    let outcome: TrainOutcome = train(&spec, source, &tc, init, cfg.seed, |o| {
        let val = match o.val_loss {
            Some(v) => v,
            None => crate::attention::cross_entropy(&forward(o.params, &validation)?, &validation)?,
        };
        let cache = forward(o.params, &probe.batch)?;
        let mut values = vec![f64::NAN, val, val - floor];
        for truth in &probe.truths {
            let (kl, f) = metrics::mean_kl_table(truth, &cache, spec.d())?;
            flagged += f;
            values.push(kl);
        }
        for snaps in &references {
            let r = snaps
                .get(index)
                .ok_or_else(|| Error::Numeric("reference run logged fewer steps than the main run".into()))?;
            let (kl, f) = metrics::mean_kl_models(&forward(r, &probe.batch)?, &cache)?;
            flagged += f;
            values.push(kl);
        }
        values.extend(lag_mass(o.params, &cache)?.transpose().iter());
        values.push(o.lr);
        pending.push((o.step, values));
        index += 1;
        Ok(())
    })?;
    // train loss of a row is the minibatch loss at that step; the row after
    // the last update repeats the most recent one
    let last_loss = outcome.records.last().map_or(f64::NAN, |r| r.train_loss);
    for (step, mut values) in pending {
        values[0] = outcome.records.get(step).map_or(last_loss, |r| r.train_loss);
        log.push(step, values)?;
    }
    let stages = detect_stages(&log.kl_gt_series(), cfg.probes.threshold)?;
    let vals = log.column("val_loss").unwrap_or_default();
    let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let best_step = log
        .rows()
        .iter()
        .zip(&vals)
        .find(|(_, v)| **v == best)
        .map_or(0, |(r, _)| r.step);
    Ok(ExperimentOutcome {
        config_digest: cfg.digest()?,
        log,
        stages,
        params: outcome.params,
        best_val_loss: best,
        best_step,
        flagged_kl: flagged,
    })
}

/// The optimizer axis value as written in configs and file names.
pub fn optimizer_name(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Adamw => "adamw",
        OptimizerKind::Sgd => "sgd",
    }
}

/// Samples a dataset for the task (used by the `generate` command).
pub fn generate_dataset(task: &TaskConfig, count: usize, seed: u64) -> Result<(TaskSpec, SequenceBatch)> {
    let spec = build_task(task)?;
    let batch = sample_batch(&spec, count, &mut stream(seed, keys::GENERATE))?;
    Ok((spec, batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            task: TaskConfig::minimal(5, 6, 3),
            ..ExperimentConfig::default()
        };
        cfg.optim.steps = 30;
        cfg.optim.batch_size = 32;
        cfg.data.test_size = 32;
        cfg.probes.batch_size = 16;
        cfg.probes.stride = 5;
        cfg
    }

    #[test]
    fn config_rejects_typos_and_bad_limits() {
        assert!(ExperimentConfig::from_toml("seed = 1\n[model]\nhh = 3\n").is_err());
        let cfg = ExperimentConfig::from_toml("seed = 1\n[probes]\ncontexts = [2, 4]\n").unwrap();
        assert_eq!(cfg.probes.contexts, vec![2, 4]);
        assert!(matches!(
            ExperimentConfig::from_toml("[probes]\ncontexts = [27]\n"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("[probes]\nstride = 0\n").is_err());
        let text = ExperimentConfig::default().to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn run_logs_every_stride_and_is_reproducible() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        assert_eq!(
            a.log.rows().iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 5, 10, 15, 20, 25, 30]
        );
        assert_eq!(a.log.header().len(), 1 + 3 + 3 + 3 * 6 + 1);
        let b = run_experiment(&cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.log.write_csv(&mut x).unwrap();
        b.log.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        assert!(a.log.rows().iter().all(|r| r.values.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn full_context_reference_matches_main_run() {
        let mut cfg = tiny();
        cfg.probes.contexts = vec![12];
        let out = run_experiment(&cfg).unwrap();
        let kl = out.log.column("kl_model_c12").unwrap();
        assert!(kl.iter().all(|v| *v == 0.0), "{kl:?}");
    }
}
