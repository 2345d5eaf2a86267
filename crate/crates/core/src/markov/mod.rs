//! The importance-structured order-`w` Markov chain.
//!
//! The next token is drawn from
//! `softmax(Σ_k A_k Σ_{i∈I(k)} α_i x_{t−i})`, where the `I(k)` partition the
//! lags `{0, …, w−1}` and `A_k = m_k Q_k` with `Q_k` Haar-orthogonal and
//! `m_k = m^{h−k} b₀`.
//!
//! Lags are 0-indexed: lag `i` is the token `i` steps before the most recent
//! one, so lag 0 is the most recent visible token. Tables that label positions
//! from 1 map to lag `label − 1`.

mod dataset;
mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_orthogonal, softmax_in_place, Matrix, Vector};
use crate::rng::{keys, stream};

pub use dataset::{read_dataset, write_dataset, DatasetHeader, DATASET_MAGIC};
pub use sample::{sample_batch, SequenceBatch};

/// User-facing description of a task. [`build_task`] turns it into a
/// [`TaskSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Alphabet size.
    pub d: usize,
    /// Markov order.
    pub w: usize,
    /// Number of generated tokens per sequence.
    #[serde(rename = "T")]
    pub t: usize,
    /// Number of position groups.
    pub h: usize,
    /// Multiplicative constant of the scale hierarchy.
    pub m: f64,
    /// Base scale.
    pub b0: f64,
    /// Explicit lag groups (0-indexed). Equal contiguous blocks when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<Vec<usize>>>,
    /// Explicit per-lag weights. `1/|I(k)|` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    pub seed: u64,
}

/// The minimal-model task at `d = 20`, `T = 20`.
impl Default for TaskConfig {
    fn default() -> Self {
        Self::minimal(20, 20, 0)
    }
}

impl TaskConfig {
    /// The minimal-model task: `w = 6`, lag groups `{0,1}, {2,3}, {4,5}`,
    /// `m = 1.7`, `b₀ = 10`.
    pub fn minimal(d: usize, t: usize, seed: u64) -> Self {
        Self {
            d,
            w: 6,
            t,
            h: 3,
            m: 1.7,
            b0: 10.0,
            intervals: None,
            alphas: None,
            seed,
        }
    }
}

/// The full generative model.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    d: usize,
    w: usize,
    t: usize,
    intervals: Vec<Vec<usize>>,
    alphas: Vec<f64>,
    scales: Vec<f64>,
    directions: Vec<Matrix>,
    seed: u64,
    // group index of each lag
    group_of_lag: Vec<usize>,
}

/// Equal contiguous lag blocks of size `w / h`.
pub fn equal_intervals(w: usize, h: usize) -> Result<Vec<Vec<usize>>> {
    if h == 0 || !w.is_multiple_of(h) {
        return Err(Error::config(format!(
            "equal interval layout needs h | w (w = {w}, h = {h})"
        )));
    }
    let width = w / h;
    Ok((0..h).map(|k| (k * width..(k + 1) * width).collect()).collect())
}

/// Geometric scales `m_k = m^{h−k} b₀`, `k = 1..h`.
pub fn geometric_scales(h: usize, m: f64, b0: f64) -> Vec<f64> {
    (1..=h).map(|k| m.powi((h - k) as i32) * b0).collect()
}

pub fn build_task(config: &TaskConfig) -> Result<TaskSpec> {
    let TaskConfig { d, w, t, h, m, b0, .. } = *config;
    if d == 0 || w == 0 || t == 0 || h == 0 {
        return Err(Error::config("d, w, T and h must all be positive"));
    }
    if d > u16::MAX as usize + 1 {
        return Err(Error::config("alphabet does not fit 16-bit token ids"));
    }
    if !(m >= 1.0 && m.is_finite()) {
        return Err(Error::config(format!(
            "multiplicative constant m = {m} must be ≥ 1 so that feature norms are ordered"
        )));
    }
    if !(b0 > 0.0 && b0.is_finite()) {
        return Err(Error::config(format!("base scale b0 = {b0} must be positive")));
    }
    let intervals = match &config.intervals {
        Some(iv) => iv.clone(),
        None => equal_intervals(w, h)?,
    };
    if intervals.len() != h {
        return Err(Error::config(format!(
            "{} intervals given for h = {h}",
            intervals.len()
        )));
    }
    let mut rng = stream(config.seed, keys::FEATURES);
    let mut directions = Vec::with_capacity(h);
    for _ in 0..h {
        directions.push(sample_orthogonal(d, &mut rng)?);
    }
    let alphas = match &config.alphas {
        Some(a) => a.clone(),
        None => uniform_alphas(w, &intervals)?,
    };
    TaskSpec::from_parts(
        d,
        w,
        t,
        intervals,
        alphas,
        geometric_scales(h, m, b0),
        directions,
        config.seed,
    )
}

fn uniform_alphas(w: usize, intervals: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut alphas = vec![0.0; w];
    for group in intervals {
        for &i in group {
            if i >= w {
                return Err(Error::config(format!("lag {i} outside 0..{w}")));
            }
            alphas[i] = 1.0 / group.len() as f64;
        }
    }
    Ok(alphas)
}

impl TaskSpec {
    /// Assembles a task from explicit parts, checking the partition,
    /// normalization and ordering invariants. Feature `k` is
    /// `scales[k] · directions[k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        d: usize,
        w: usize,
        t: usize,
        intervals: Vec<Vec<usize>>,
        alphas: Vec<f64>,
        scales: Vec<f64>,
        directions: Vec<Matrix>,
        seed: u64,
    ) -> Result<Self> {
        let h = intervals.len();
        if h == 0 || scales.len() != h || directions.len() != h {
            return Err(Error::config("intervals, scales and directions must have h entries"));
        }
        let mut group_of_lag = vec![usize::MAX; w];
        for (k, group) in intervals.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::config(format!("interval {k} is empty")));
            }
            for &i in group {
                if i >= w {
                    return Err(Error::config(format!("lag {i} outside 0..{w}")));
                }
                if group_of_lag[i] != usize::MAX {
                    return Err(Error::config(format!("lag {i} appears in two intervals")));
                }
                group_of_lag[i] = k;
            }
        }
        if let Some(i) = group_of_lag.iter().position(|g| *g == usize::MAX) {
            return Err(Error::config(format!("lag {i} is not covered by any interval")));
        }
        if alphas.len() != w || alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::config("alphas must be w nonnegative weights"));
        }
        for (k, group) in intervals.iter().enumerate() {
            let total: f64 = group.iter().map(|&i| alphas[i]).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("alphas of interval {k} sum to {total}, not 1")));
            }
        }
        for dir in &directions {
            if dir.shape() != (d, d) {
                return Err(Error::dim("feature directions must be d×d"));
            }
        }
        let norms: Vec<f64> = scales
            .iter()
            .zip(&directions)
            .map(|(s, q)| s.abs() * q.norm())
            .collect();
        if norms.windows(2).any(|p| p[0] < p[1] * (1.0 - 1e-12)) {
            return Err(Error::config(
                "feature norms must be non-increasing (‖A_1‖ ≥ … ≥ ‖A_h‖)",
            ));
        }
        Ok(Self {
            d,
            w,
            t,
            intervals,
            alphas,
            scales,
            directions,
            seed,
            group_of_lag,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn w(&self) -> usize {
        self.w
    }
    /// Generated length `T`.
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn h(&self) -> usize {
        self.intervals.len()
    }
    pub fn seq_len(&self) -> usize {
        self.t + self.w
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn intervals(&self) -> &[Vec<usize>] {
        &self.intervals
    }
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
    pub fn directions(&self) -> &[Matrix] {
        &self.directions
    }
    pub fn group_of_lag(&self, lag: usize) -> usize {
        self.group_of_lag[lag]
    }

    /// `A_k = m_k Q_k`.
    pub fn feature(&self, k: usize) -> Matrix {
        &self.directions[k] * self.scales[k]
    }

    /// `‖A_k‖_F`.
    pub fn feature_norm(&self, k: usize) -> f64 {
        self.scales[k].abs() * self.directions[k].norm()
    }

    fn check_context(&self, context: &[u16]) -> Result<()> {
        if context.len() != self.w {
            return Err(Error::dim(format!(
                "context has {} tokens, order is {}",
                context.len(),
                self.w
            )));
        }
        if let Some(bad) = context.iter().find(|&&x| x as usize >= self.d) {
            return Err(Error::domain(format!("token id {bad} outside 0..{}", self.d)));
        }
        Ok(())
    }

    /// Logits using only the first `groups` position groups. `context` holds
    /// the last `w` tokens, oldest first.
    fn logits_unchecked(&self, groups: usize, context: &[u16], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for lag in 0..self.w {
            let k = self.group_of_lag[lag];
            if k >= groups {
                continue;
            }
            let tok = context[self.w - 1 - lag] as usize;
            let coeff = self.scales[k] * self.alphas[lag];
            if coeff == 0.0 {
                continue;
            }
            let col = self.directions[k].column(tok);
            for (o, q) in out.iter_mut().zip(col.iter()) {
                *o += coeff * q;
            }
        }
    }

    /// Writes the full conditional for `context` into `out` (length `d`).
    pub(crate) fn conditional_into(&self, groups: usize, context: &[u16], out: &mut [f64]) {
        self.logits_unchecked(groups, context, out);
        softmax_in_place(out);
    }

    /// Exact next-token distribution given the last `w` tokens (oldest first).
    pub fn next_token_distribution(&self, context: &[u16]) -> Result<Vector> {
        self.restricted_predictor(self.h(), context)
    }

    /// Ground truth using only the first `groups` position groups,
    /// `1 ≤ groups ≤ h`.
    pub fn restricted_predictor(&self, groups: usize, context: &[u16]) -> Result<Vector> {
        if groups == 0 || groups > self.h() {
            return Err(Error::domain(format!(
                "restricted predictor index {groups} outside 1..={}",
                self.h()
            )));
        }
        self.check_context(context)?;
        let mut out = vec![0.0; self.d];
        self.conditional_into(groups, context, &mut out);
        Ok(Vector::from_vec(out))
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn minimal(d: usize) -> TaskSpec {
        build_task(&TaskConfig::minimal(d, 8, 0)).unwrap()
    }

    /// Straight-line evaluation of the transition law, independent of the
    /// lag/group bookkeeping used by `TaskSpec`.
    fn brute_force(spec: &TaskSpec, context: &[u16]) -> Vec<f64> {
        let d = spec.d();
        let w = spec.w();
        let mut logits = vec![0.0; d];
        for (k, group) in spec.intervals().iter().enumerate() {
            let a = spec.feature(k);
            let mut mix = vec![0.0; d];
            for &i in group {
                mix[context[w - 1 - i] as usize] += spec.alphas()[i];
            }
            for r in 0..d {
                for c in 0..d {
                    logits[r] += a[(r, c)] * mix[c];
                }
            }
        }
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        logits.iter().map(|l| (l - max).exp() / z).collect()
    }

    #[test]
    fn scales_follow_geometric_hierarchy() {
        let s = geometric_scales(3, 1.7, 10.0);
        assert!((s[0] - 28.9).abs() < 1e-12);
        assert!((s[1] - 17.0).abs() < 1e-12);
        assert!((s[2] - 10.0).abs() < 1e-12);
        assert!(geometric_scales(4, 1.0, 2.5).iter().all(|x| *x == 2.5));
    }

    #[test]
    fn minimal_layout() {
        let spec = minimal(5);
        assert_eq!(spec.intervals(), &[vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert!(spec.alphas().iter().all(|a| (*a - 0.5).abs() < 1e-15));
        let norms: Vec<f64> = (0..3).map(|k| spec.feature(k).norm()).collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2]);
    }

    #[test]
    fn config_errors() {
        let mut c = TaskConfig::minimal(5, 8, 0);
        c.w = 7;
        assert!(matches!(build_task(&c), Err(Error::Config(_))));
        let mut c = TaskConfig::minimal(5, 8, 0);
        c.intervals = Some(vec![vec![0, 1], vec![1, 2, 3], vec![4, 5]]);
        assert!(matches!(build_task(&c), Err(Error::Config(_))));
        c.intervals = Some(vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert!(matches!(build_task(&c), Err(Error::Config(_))));
        let mut c = TaskConfig::minimal(5, 8, 0);
        c.b0 = 0.0;
        assert!(build_task(&c).is_err());
        let mut c = TaskConfig::minimal(5, 8, 0);
        c.alphas = Some(vec![0.7, 0.3, 0.5, 0.5, 0.9, 0.2]);
        assert!(build_task(&c).is_err());
        c.alphas = Some(vec![0.7, 0.3, 0.5, 0.5, 0.9, 0.1]);
        assert!(build_task(&c).is_ok());
    }

    #[test]
    fn zero_features_give_uniform() {
        let spec = TaskSpec::from_parts(
            4,
            2,
            5,
            vec![vec![0], vec![1]],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            vec![Matrix::identity(4, 4); 2],
            0,
        )
        .unwrap();
        let p = spec.next_token_distribution(&[1, 3]).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let p = spec.restricted_predictor(1, &[1, 3]).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_group_is_an_order_one_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = sample_orthogonal(6, &mut rng).unwrap();
        let spec = TaskSpec::from_parts(6, 1, 4, vec![vec![0]], vec![1.0], vec![3.0], vec![a.clone()], 0).unwrap();
        let p = spec.next_token_distribution(&[4]).unwrap();
        let expect = crate::numerics::softmax(&(a.column(4) * 3.0).into_owned()).unwrap();
        assert!((p - expect).abs().max() < 1e-15);
    }

    #[test]
    fn matches_brute_force() {
        let spec = minimal(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let ctx: Vec<u16> = (0..6).map(|_| rng.random_range(0..7)).collect();
            let p = spec.next_token_distribution(&ctx).unwrap();
            let q = brute_force(&spec, &ctx);
            assert!((p.sum() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let full = spec.next_token_distribution(&[0, 1, 2, 3, 4, 5]).unwrap();
        let top = spec.restricted_predictor(3, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(full, top);
    }

    #[test]
    fn context_errors() {
        let spec = minimal(5);
        assert!(matches!(
            spec.next_token_distribution(&[0, 1]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            spec.next_token_distribution(&[0, 1, 2, 3, 4, 9]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(spec.restricted_predictor(0, &[0; 6]), Err(Error::Domain(_))));
        assert!(matches!(spec.restricted_predictor(4, &[0; 6]), Err(Error::Domain(_))));
    }

    #[test]
    fn restricted_kl_is_nonincreasing_in_prefix() {
        let spec = minimal(10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mean = [0.0; 3];
        let n = 1000;
        for _ in 0..n {
            let ctx: Vec<u16> = (0..6).map(|_| rng.random_range(0..10)).collect();
            let full = spec.next_token_distribution(&ctx).unwrap();
            for i in 1..=3 {
                let r = spec.restricted_predictor(i, &ctx).unwrap();
                let kl: f64 = r.iter().zip(full.iter()).map(|(p, q)| p * (p / q).ln()).sum();
                mean[i - 1] += kl / n as f64;
            }
        }
        assert!(mean[0] >= mean[1] && mean[1] >= mean[2]);
        assert!(mean[2].abs() < 1e-15);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = TaskConfig::minimal(20, 20, 3);
        c.intervals = Some(vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("T = 20"));
        let back: TaskConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<TaskConfig>(&format!("{text}\nbogus = 1\n")).is_err());
    }
}
