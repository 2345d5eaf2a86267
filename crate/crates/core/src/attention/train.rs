use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::forward::{loss_and_grad, mean_loss};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::markov::{sample_batch, SequenceBatch, TaskSpec};
use crate::rng::{keys, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global L2 norm the gradient is clipped to. Non-positive disables.
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Plateau scheduler: validation checks without improvement tolerated
    /// before the learning rate is multiplied by `factor`.
    pub patience: usize,
    pub factor: f64,
    /// Steps between validation checks.
    pub eval_every: usize,
    pub validation_size: usize,
    /// Steps between observer calls.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 3000,
            lr: 0.003,
            clip_norm: 1.0,
            weight_decay: 0.01,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            factor: 0.5,
            eval_every: 10,
            validation_size: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.batch_size == 0 || self.eval_every == 0 || self.log_every == 0 {
            return bad("batch_size, eval_every and log_every must be positive");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be nonnegative");
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return bad("scheduler factor must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("moment decay rates must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Learning-rate reduction on a stalled validation metric. An improvement
/// must beat the best value by a relative `1e-4`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub best: f64,
    pub bad_checks: usize,
    pub patience: usize,
    pub factor: f64,
}

impl PlateauScheduler {
    const THRESHOLD: f64 = 1e-4;

    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            best: f64::INFINITY,
            bad_checks: 0,
            patience,
            factor,
        }
    }

    /// Records a metric and returns the multiplier for the learning rate.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - Self::THRESHOLD) {
            self.best = metric;
            self.bad_checks = 0;
            return 1.0;
        }
        self.bad_checks += 1;
        if self.bad_checks > self.patience {
            self.bad_checks = 0;
            self.factor
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first: ModelParams,
    pub second: ModelParams,
    pub step: usize,
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    pub scheduler: PlateauScheduler,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let zeros = ModelParams::zeros(params.d(), params.w(), params.t(), params.h());
        Self {
            kind: cfg.optimizer,
            first: zeros.clone(),
            second: zeros,
            step: 0,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            scheduler: PlateauScheduler::new(cfg.patience, cfg.factor),
        }
    }

    /// One update with an already clipped gradient.
    pub fn apply(&mut self, params: &mut ModelParams, grad: &ModelParams) -> Result<()> {
        if !params.same_shape(grad) || !params.same_shape(&self.first) {
            return Err(Error::dim("gradient and optimizer state do not match the parameters"));
        }
        self.step += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.slices_mut().zip(grad.slices()) {
                    for (x, dx) in p.iter_mut().zip(g) {
                        *x -= lr * (dx + wd * *x);
                    }
                }
            }
            OptimizerKind::Adamw => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (((p, g), m), v) in params
                    .slices_mut()
                    .zip(grad.slices())
                    .zip(self.first.slices_mut())
                    .zip(self.second.slices_mut())
                {
                    for i in 0..p.len() {
                        p[i] -= lr * wd * p[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grad` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grad.slices_mut().flatten().for_each(|x| *x *= s);
    }
    norm
}

/// Where minibatches come from.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    /// Subsets of a fixed training set, the whole set when it is no larger
    /// than a batch.
    Fixed(&'a SequenceBatch),
    /// A fresh batch from the task at every step.
    Online,
}

/// Per-step summary kept in the outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Set on steps where the validation loss was evaluated.
    pub val_loss: Option<f64>,
}

/// What the observer sees: the parameters before update `step` (or the final
/// parameters when `step == steps`).
pub struct Observation<'a> {
    pub step: usize,
    pub params: &'a ModelParams,
    pub lr: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<TrainRecord>,
    pub best_val_loss: f64,
    pub validation: SequenceBatch,
}

/// Trains `init` on the task. Randomness comes from keyed streams of `seed`:
/// the validation set, minibatch selection and online batches never share a
/// stream, so a run is reproducible independently of thread count.
pub fn train<F>(
    spec: &TaskSpec,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    init: ModelParams,
    seed: u64,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Observation<'_>) -> Result<()>,
{
    cfg.validate()?;
    if init.d() != spec.d() || init.seq_len() != spec.seq_len() || init.w() != spec.w() {
        return Err(Error::dim("model dimensions do not match the task"));
    }
    let validation = sample_batch(spec, cfg.validation_size.max(1), &mut stream(seed, keys::VALIDATION))?;
    let mut params = init;
    let mut opt = OptimizerState::new(&params, cfg);
    let mut pick = stream(seed, keys::MINIBATCH);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut val_loss = Some(mean_loss(&params, &validation)?);
    let mut best_val = val_loss.unwrap_or(f64::INFINITY);

    for step in 0..cfg.steps {
        if step % cfg.log_every == 0 {
            observer(&Observation {
                step,
                params: &params,
                lr: opt.lr,
                val_loss,
            })?;
        }
        let batch = match data {
            TrainData::Online => {
                sample_batch(spec, cfg.batch_size, &mut stream(seed, keys::ONLINE_BASE + step as u64))?
            }
            TrainData::Fixed(set) if set.count() <= cfg.batch_size => set.clone(),
            TrainData::Fixed(set) => {
                let mut idx = index::sample(&mut pick, set.count(), cfg.batch_size).into_vec();
                idx.sort_unstable();
                let mut tokens = Vec::with_capacity(cfg.batch_size * set.seq_len());
                for i in idx {
                    tokens.extend_from_slice(set.sequence(i));
                }
                SequenceBatch::from_tokens(set.seq_len(), tokens)?
            }
        };
        let (loss, mut grad) = loss_and_grad(&params, &batch).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        let grad_norm = clip_global_norm(&mut grad, cfg.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("training loss {loss}, gradient norm {grad_norm}"),
            });
        }
        opt.apply(&mut params, &grad)?;
        let lr_used = opt.lr;

        val_loss = None;
        if (step + 1) % cfg.eval_every == 0 {
            let v = mean_loss(&params, &validation).map_err(|e| Error::Diverged {
                step,
                detail: e.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("validation loss {v}"),
                });
            }
            best_val = best_val.min(v);
            opt.lr *= opt.scheduler.observe(v);
            val_loss = Some(v);
        }
        records.push(TrainRecord {
            step,
            train_loss: loss,
            grad_norm,
            lr: lr_used,
            val_loss,
        });
    }
    let final_val = mean_loss(&params, &validation)?;
    best_val = best_val.min(final_val);
    observer(&Observation {
        step: cfg.steps,
        params: &params,
        lr: opt.lr,
        val_loss: Some(final_val),
    })?;
    Ok(TrainOutcome {
        params,
        records,
        best_val_loss: best_val,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{build_task, TaskConfig};

    fn small() -> (TaskSpec, TrainConfig) {
        let spec = build_task(&TaskConfig::minimal(5, 6, 1)).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 32,
            validation_size: 32,
            ..TrainConfig::default()
        };
        (spec, cfg)
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.steps, c.batch_size, c.patience), (2000, 3000, 10));
        assert_eq!((c.lr, c.clip_norm, c.weight_decay, c.factor), (0.003, 1.0, 0.01, 0.5));
        assert_eq!(c.optimizer, OptimizerKind::Adamw);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (spec, cfg) = small();
        let init = ModelParams::init(5, 6, 6, 3, 1.0, &mut stream(1, keys::INIT));
        let cfg = TrainConfig { lr: 0.0, ..cfg };
        let out = train(&spec, TrainData::Online, &cfg, init.clone(), 1, |_| Ok(())).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn zero_init_keeps_heads_identical() {
        let (spec, cfg) = small();
        let init = ModelParams::init(5, 6, 6, 3, 0.0, &mut stream(1, keys::INIT));
        let out = train(&spec, TrainData::Online, &cfg, init, 1, |_| Ok(())).unwrap();
        let h0 = &out.params.heads[0];
        assert!(h0.value.norm() > 0.0);
        for head in &out.params.heads[1..] {
            assert_eq!(head, h0);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (spec, cfg) = small();
        let cfg = TrainConfig { steps: 60, ..cfg };
        let init = ModelParams::init(5, 6, 6, 3, 1.0, &mut stream(1, keys::INIT));
        let data = sample_batch(&spec, 100, &mut stream(1, keys::TRAIN_SET)).unwrap();
        let mut seen = Vec::new();
        let a = train(&spec, TrainData::Fixed(&data), &cfg, init.clone(), 1, |o| {
            seen.push(o.step);
            Ok(())
        })
        .unwrap();
        let b = train(&spec, TrainData::Fixed(&data), &cfg, init, 1, |_| Ok(())).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(seen, vec![0, 10, 20, 30, 40, 50, 60]);
        let first = a.records[0].train_loss;
        let last = a.records.last().unwrap().train_loss;
        assert!(last < first);
        assert!(a.records.iter().all(|r| r.grad_norm.is_finite()));
    }

    #[test]
    fn huge_lr_aborts_with_step() {
        let (spec, cfg) = small();
        let cfg = TrainConfig {
            lr: 1e300,
            clip_norm: 0.0,
            optimizer: OptimizerKind::Sgd,
            steps: 50,
            ..cfg
        };
        let init = ModelParams::init(5, 6, 6, 3, 1.0, &mut stream(1, keys::INIT));
        match train(&spec, TrainData::Online, &cfg, init, 1, |_| Ok(())) {
            Err(Error::Diverged { step, .. }) => assert!(step < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn clipping_and_scheduler() {
        let mut g = ModelParams::zeros(2, 1, 1, 1);
        g.heads[0].value[(0, 0)] = 3.0;
        g.heads[0].value[(1, 0)] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-15);

        let mut s = PlateauScheduler::new(2, 0.5);
        assert_eq!(s.observe(1.0), 1.0);
        assert_eq!(s.observe(1.0), 1.0);
        assert_eq!(s.observe(1.0), 1.0);
        assert_eq!(s.observe(1.0), 0.5);
        assert_eq!(s.observe(0.5), 1.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ModelParams::zeros(2, 1, 1, 1);
        let mut g = ModelParams::zeros(2, 1, 1, 1);
        g.heads[0].attn[(0, 0)] = 0.25;
        g.heads[0].value[(1, 1)] = -7.0;
        let mut opt = OptimizerState::new(&p, &TrainConfig::default());
        opt.apply(&mut p, &g).unwrap();
        assert!((p.heads[0].attn[(0, 0)] + 0.003).abs() < 1e-9);
        assert!((p.heads[0].value[(1, 1)] - 0.003).abs() < 1e-9);
        assert_eq!(p.heads[0].attn[(1, 0)], 0.0);
    }
}
