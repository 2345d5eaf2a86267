//! Minimal multi-head attention on position-augmented one-hot inputs.
//!
//! Each column of the input is a one-hot token stacked on a one-hot position,
//! so an input of length `L = T + w` has `D = d + L` rows. Head `k` owns a
//! merged attention matrix `A_k` (`D×D`, standing in for `K_kᵀQ_k`) and a
//! value matrix `V_k` (`d×D`). To predict the token at position `p ≥ w` the
//! query is column `p − 1` and the keys are columns `p − c, …, p − 1` (all of
//! `0, …, p − 1` without a context limit). Lag `i` is key `p − 1 − i`.

mod checkpoint;
mod forward;
mod train;

use rand::Rng;

use crate::error::{Error, Result};
use crate::markov::TaskSpec;
use crate::numerics::Matrix;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    backward, cross_entropy, excess_loss, forward, gradient_check, loss_and_grad, position_losses, ForwardCache,
};
pub use train::{
    clip_global_norm, train, Observation, OptimizerKind, OptimizerState, PlateauScheduler, TrainConfig, TrainData,
    TrainOutcome, TrainRecord,
};

/// One attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub attn: Matrix,
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    d: usize,
    w: usize,
    t: usize,
    pub heads: Vec<Head>,
    context_limit: Option<usize>,
}

impl ModelParams {
    /// All-zero parameters.
    pub fn zeros(d: usize, w: usize, t: usize, h: usize) -> Self {
        let dim = d + t + w;
        Self {
            d,
            w,
            t,
            heads: (0..h)
                .map(|_| Head {
                    attn: Matrix::zeros(dim, dim),
                    value: Matrix::zeros(d, dim),
                })
                .collect(),
            context_limit: None,
        }
    }

    pub fn from_heads(d: usize, w: usize, t: usize, heads: Vec<Head>) -> Result<Self> {
        let dim = d + t + w;
        if w == 0 || t == 0 || heads.is_empty() {
            return Err(Error::dim("model needs w, T and at least one head"));
        }
        for head in &heads {
            if head.attn.shape() != (dim, dim) || head.value.shape() != (d, dim) {
                return Err(Error::dim(format!(
                    "head shapes ({:?}, {:?}) do not match D = {dim}, d = {d}",
                    head.attn.shape(),
                    head.value.shape()
                )));
            }
        }
        Ok(Self {
            d,
            w,
            t,
            heads,
            context_limit: None,
        })
    }

    /// Attention uniform on `[−u, u]` and zero values.
    pub fn init<R: Rng + ?Sized>(d: usize, w: usize, t: usize, h: usize, u: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, w, t, h);
        if u > 0.0 {
            for head in &mut p.heads {
                for x in head.attn.iter_mut() {
                    *x = rng.random_range(-u..=u);
                }
            }
        }
        p
    }

    pub fn for_task(spec: &TaskSpec, h: usize) -> Self {
        Self::zeros(spec.d(), spec.w(), spec.t(), h)
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn seq_len(&self) -> usize {
        self.t + self.w
    }
    /// Augmented input dimension `D = d + T + w`.
    pub fn dim(&self) -> usize {
        self.d + self.t + self.w
    }
    pub fn h(&self) -> usize {
        self.heads.len()
    }
    pub fn context_limit(&self) -> Option<usize> {
        self.context_limit
    }

    /// Copy that only attends to the last `c` visible tokens.
    pub fn with_context_limit(&self, c: Option<usize>) -> Result<Self> {
        if let Some(c) = c {
            if c == 0 || c > self.seq_len() {
                return Err(Error::domain(format!(
                    "context limit {c} outside 1..={}",
                    self.seq_len()
                )));
            }
        }
        Ok(Self {
            context_limit: c,
            ..self.clone()
        })
    }

    pub fn num_params(&self) -> usize {
        self.heads.len() * (self.dim() * self.dim() + self.d * self.dim())
    }

    /// Parameters in declared order: per head, attention then value,
    /// each column-major.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for head in &self.heads {
            out.extend_from_slice(head.attn.as_slice());
            out.extend_from_slice(head.value.as_slice());
        }
        out
    }

    /// Entry `i` of [`ModelParams::flat`].
    pub fn flat_at(&self, i: usize) -> f64 {
        self.slices().flatten().nth(i).copied().unwrap_or(f64::NAN)
    }

    pub(crate) fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.heads
            .iter_mut()
            .flat_map(|h| [h.attn.as_mut_slice(), h.value.as_mut_slice()])
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.heads.iter().flat_map(|h| [h.attn.as_slice(), h.value.as_slice()])
    }

    pub fn norm(&self) -> f64 {
        self.slices().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub(crate) fn same_shape(&self, other: &ModelParams) -> bool {
        self.d == other.d && self.w == other.w && self.t == other.t && self.h() == other.h()
    }

    /// Heads reordered so that new head `k` is old head `order[k]`.
    pub fn permute_heads(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.h()];
        if order.len() != self.h()
            || order
                .iter()
                .any(|&k| k >= self.h() || std::mem::replace(&mut seen[k], true))
        {
            return Err(Error::domain("not a permutation of the heads"));
        }
        Ok(Self {
            heads: order.iter().map(|&k| self.heads[k].clone()).collect(),
            ..self.clone()
        })
    }
}

/// One-hot tokens stacked on the identity over positions, `(d + L) × L`.
pub fn augment_input(d: usize, tokens: &[u16]) -> Result<Matrix> {
    let len = tokens.len();
    let mut x = Matrix::zeros(d + len, len);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok as usize >= d {
            return Err(Error::domain(format!("token id {tok} outside 0..{d}")));
        }
        x[(tok as usize, i)] = 1.0;
        x[(d + i, i)] = 1.0;
    }
    Ok(x)
}

/// The sparse construction that reproduces the task: value `k` carries
/// `A_k` on the token block and attention `k` scores `λ` from each query
/// position to the key positions at the lags of group `k`.
///
/// Non-uniform importance weights are matched by adding `ln(α_i |I(k)|)` to
/// the score of lag `i`, which is zero for the default weights.
pub fn build_ideal_params(spec: &TaskSpec, lambda: f64) -> Result<ModelParams> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!("scale λ = {lambda} must be nonnegative")));
    }
    let (d, w, t) = (spec.d(), spec.w(), spec.t());
    let mut params = ModelParams::for_task(spec, spec.h());
    let len = params.seq_len();
    for (k, group) in spec.intervals().iter().enumerate() {
        let head = &mut params.heads[k];
        let feature = spec.feature(k);
        head.value.view_mut((0, 0), (d, d)).copy_from(&feature);
        for &lag in group {
            let alpha = spec.alphas()[lag];
            if alpha == 0.0 {
                continue;
            }
            let score = lambda + (alpha * group.len() as f64).ln();
            for q in lag..len {
                head.attn[(d + q - lag, d + q)] = score;
            }
        }
    }
    debug_assert_eq!(params.seq_len(), t + w);
    Ok(params)
}

/// Mean attention mass per head (rows) and lag (columns), averaged over every
/// predicted position of every sequence in `probe`.
pub fn attention_summary(params: &ModelParams, probe: &crate::markov::SequenceBatch) -> Result<Matrix> {
    if probe.count() == 0 {
        return Err(Error::domain("empty probe batch"));
    }
    lag_mass(params, &forward(params, probe)?)
}

/// [`attention_summary`] from an existing forward pass.
pub fn lag_mass(params: &ModelParams, cache: &ForwardCache) -> Result<Matrix> {
    let (h, w, t) = (params.h(), params.w(), params.t());
    if cache.count() == 0 {
        return Err(Error::domain("empty probe batch"));
    }
    let mut mass = Matrix::zeros(h, w);
    for n in 0..cache.count() {
        for k in 0..h {
            for step in 0..t {
                let row = cache.attention_row(n, k, step);
                let q = w + step - 1;
                for lag in 0..w {
                    mass[(k, lag)] += row[q - lag];
                }
            }
        }
    }
    Ok(mass / (cache.count() * t) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{build_task, sample_batch, TaskConfig};
    use crate::rng::stream;

    #[test]
    fn augmented_input_structure() {
        let x = augment_input(4, &[3, 0, 0, 2, 1]).unwrap();
        assert_eq!(x.shape(), (9, 5));
        for c in 0..5 {
            assert_eq!(x.column(c).sum(), 2.0);
            assert_eq!(x.view((0, c), (4, 1)).iter().filter(|v| **v == 1.0).count(), 1);
        }
        assert_eq!(x.view((4, 0), (5, 5)).into_owned(), Matrix::identity(5, 5));
        assert!(matches!(augment_input(4, &[4]), Err(Error::Domain(_))));
    }

    #[test]
    fn ideal_attention_pattern() {
        let spec = build_task(&TaskConfig::minimal(6, 10, 1)).unwrap();
        let probe = sample_batch(&spec, 20, &mut stream(1, 4)).unwrap();
        let mass = attention_summary(&build_ideal_params(&spec, 1e3).unwrap(), &probe).unwrap();
        for k in 0..3 {
            for lag in 0..6 {
                let expect = if spec.group_of_lag(lag) == k { 0.5 } else { 0.0 };
                assert!((mass[(k, lag)] - expect).abs() < 1e-12);
            }
        }
        let params = build_ideal_params(&spec, 1e3).unwrap();
        let cache = forward(&params, &probe).unwrap();
        for n in 0..probe.count() {
            for k in 0..3 {
                for step in 0..10 {
                    let row = cache.attention_row(n, k, step);
                    let q = 6 + step - 1;
                    let on: f64 = spec.intervals()[k].iter().map(|&i| row[q - i]).sum();
                    assert!(on >= 1.0 - 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_attention_spreads_over_prefix() {
        let spec = build_task(&TaskConfig::minimal(5, 4, 1)).unwrap();
        let probe = sample_batch(&spec, 3, &mut stream(1, 4)).unwrap();
        let params = build_ideal_params(&spec, 0.0).unwrap();
        let mass = attention_summary(&params, &probe).unwrap();
        // query q sees q + 1 keys
        let expect: f64 = (5..9).map(|q| 1.0 / (q as f64 + 1.0)).sum::<f64>() / 4.0;
        for k in 0..3 {
            for lag in 0..6 {
                assert!((mass[(k, lag)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_ranges() {
        let p = ModelParams::init(4, 2, 3, 2, 0.5, &mut stream(0, 2));
        assert!(p.heads.iter().all(|h| h.value.iter().all(|v| *v == 0.0)));
        assert!(p.heads.iter().all(|h| h.attn.iter().all(|v| v.abs() <= 0.5)));
        assert!(p.heads[0].attn.iter().any(|v| *v != 0.0));
        assert_eq!(p.num_params(), 2 * (81 + 36));
        assert!(p.with_context_limit(Some(6)).is_err());
        assert!(p.permute_heads(&[0, 0]).is_err());
    }
}
