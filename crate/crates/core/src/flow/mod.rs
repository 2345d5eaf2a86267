//! Gradient flow of the regression variant, written as tensor factorization.
//!
//! The target is `G = Σ_k m_k V_k^⋆ ⊗ s_k^⋆` with orthonormal directions
//! `V_k^⋆` and one-hot positions `s_k^⋆`; the model is `P = Σ_k V_k ⊗ s_k`
//! with every `s_k` on the simplex, and the loss is `½‖G − P‖²`. Writing the
//! softmax scores through `s_k` the flow reads
//!
//! ```text
//! V̇_k = (G − P) s_k,    ṡ_k = Π(s_k)² V_kᵀ(G − P).
//! ```
//!
//! [`reduced`] holds the lower-dimensional systems obtained when heads are
//! tied together, [`integrate`] the fixed-step integrator shared by all of
//! them and [`log`] the trajectory CSV.

pub mod integrate;
pub mod log;
pub mod reduced;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{
    basis, frob_inner, frobenius_orthonormalize, pi_apply, pi_squared_apply, project_simplex, sample_orthogonal,
    Matrix, SumTensor, Vector,
};

pub use integrate::{
    integrate, step_halving_check, Controls, Dynamics, FlowVector, HalvingReport, RunSummary, Sample, StopReason,
    CORRECTION_FLAG,
};
pub use log::{format_float, TrajectoryLog};
pub use reduced::{CooperativeFlow, CooperativeState, CoupledFlow, HigherOrderFlow, PairState};

/// The target tensor and its factors.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    d: usize,
    t: usize,
    scales: Vec<f64>,
    directions: Vec<Matrix>,
    positions: Vec<usize>,
    tensor: SumTensor,
}

/// Samples `h` Frobenius-orthonormal directions (Gram–Schmidt over Haar
/// matrices), places feature `k` at position `k`, and uses the geometric
/// scales `m_k = m^{h−k} b₀`.
pub fn build_ground_truth<R: Rng + ?Sized>(
    d: usize,
    t: usize,
    h: usize,
    m: f64,
    b0: f64,
    rng: &mut R,
) -> Result<GroundTruth> {
    if h == 0 || h > d * d || h > t {
        return Err(Error::config(format!(
            "h = {h} features need 1 ≤ h ≤ min(d², T) = {}",
            (d * d).min(t)
        )));
    }
    if !(m > 1.0 && m.is_finite()) {
        return Err(Error::config(format!("scale ratio m = {m} must exceed 1")));
    }
    if !(b0 > 0.0 && b0.is_finite()) {
        return Err(Error::config(format!("base scale b0 = {b0} must be positive")));
    }
    let raw = (0..h).map(|_| sample_orthogonal(d, rng)).collect::<Result<Vec<_>>>()?;
    let directions = frobenius_orthonormalize(&raw)?;
    let scales = crate::markov::geometric_scales(h, m, b0);
    GroundTruth::new(d, t, scales, directions, (0..h).collect())
}

impl GroundTruth {
    /// Checks orthonormality (1e-10), strictly decreasing scales and distinct
    /// positions.
    pub fn new(d: usize, t: usize, scales: Vec<f64>, directions: Vec<Matrix>, positions: Vec<usize>) -> Result<Self> {
        let h = scales.len();
        if directions.len() != h || positions.len() != h || h == 0 {
            return Err(Error::config("scales, directions and positions need h entries"));
        }
        if scales.windows(2).any(|w| w[0] <= w[1]) || scales.iter().any(|m| *m <= 0.0) {
            return Err(Error::config("scales must be positive and strictly decreasing"));
        }
        for (i, a) in directions.iter().enumerate() {
            if a.shape() != (d, d) {
                return Err(Error::dim("directions must be d×d"));
            }
            for (j, b) in directions.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (frob_inner(a, b) - target).abs() > 1e-10 {
                    return Err(Error::config("directions are not Frobenius-orthonormal"));
                }
            }
        }
        let mut seen = vec![false; t];
        for &p in &positions {
            if p >= t || std::mem::replace(&mut seen[p], true) {
                return Err(Error::config("positions must be distinct and below T"));
            }
        }
        let mut tensor = SumTensor::zeros(d, d, t);
        for k in 0..h {
            tensor.push_scaled(scales[k], &directions[k], &basis(t, positions[k]))?;
        }
        Ok(Self {
            d,
            t,
            scales,
            directions,
            positions,
            tensor,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    /// Sequence length `T` (dimension of every `s`).
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn h(&self) -> usize {
        self.scales.len()
    }
    /// `m_k^⋆`.
    pub fn scale(&self, k: usize) -> f64 {
        self.scales[k]
    }
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }
    /// `V_k^⋆`.
    pub fn direction(&self, k: usize) -> &Matrix {
        &self.directions[k]
    }
    /// Index of the one-hot `s_k^⋆`.
    pub fn position(&self, k: usize) -> usize {
        self.positions[k]
    }
    /// `s_k^⋆`.
    pub fn target_position(&self, k: usize) -> Vector {
        basis(self.t, self.positions[k])
    }
    pub fn tensor(&self) -> &SumTensor {
        &self.tensor
    }
    /// `½‖G‖² = ½ Σ m_k²`.
    pub fn half_norm_sq(&self) -> f64 {
        0.5 * self.scales.iter().map(|m| m * m).sum::<f64>()
    }

    /// `G_(i) = G − Σ_{j<i} m_j V_j^⋆ ⊗ s_j^⋆`: the target with its first `i`
    /// features removed.
    pub fn deflated(&self, i: usize) -> SumTensor {
        let terms = self.tensor.terms()[i.min(self.h())..].to_vec();
        let mut out = SumTensor::zeros(self.d, self.d, self.t);
        for (b, v) in terms {
            out.push(b, v).expect("shapes come from the same tensor");
        }
        out
    }

    /// `s_(i)`: `s` with its entries at the first `i` true positions zeroed.
    pub fn deflate_position(&self, s: &Vector, i: usize) -> Vector {
        let mut out = s.clone();
        for &p in &self.positions[..i.min(self.h())] {
            out[p] = 0.0;
        }
        out
    }

    /// `V_(i)`: `V` with its components along the first `i` directions removed.
    pub fn deflate_direction(&self, v: &Matrix, i: usize) -> Matrix {
        let mut out = v.clone();
        for dir in &self.directions[..i.min(self.h())] {
            out -= dir * frob_inner(dir, v);
        }
        out
    }

    /// `G 1_T / T`, the common early direction of every value matrix.
    pub fn mean_feature(&self) -> Matrix {
        self.tensor
            .apply_right(&Vector::from_element(self.t, 1.0 / self.t as f64))
            .expect("vector length matches")
    }
}

/// All heads of the full system.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub v: Vec<Matrix>,
    pub s: Vec<Vector>,
}

impl FlowState {
    pub fn h(&self) -> usize {
        self.v.len()
    }

    /// Every head at `(v, s)`.
    pub fn symmetric(h: usize, v: &Matrix, s: &Vector) -> Self {
        Self {
            v: vec![v.clone(); h],
            s: vec![s.clone(); h],
        }
    }

    /// Zero values and uniform scores plus Gaussian noise of standard
    /// deviation `noise`, projected back onto the simplex. Returns the state
    /// and the pre-projection scores.
    pub fn noisy_uniform<R: Rng + ?Sized>(gt: &GroundTruth, h: usize, noise: f64, rng: &mut R) -> (Self, Vec<Vector>) {
        let t = gt.t();
        let raw: Vec<Vector> = (0..h)
            .map(|_| Vector::from_fn(t, |_, _| 1.0 / t as f64 + noise * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let state = Self {
            v: vec![Matrix::zeros(gt.d(), gt.d()); h],
            s: raw.iter().map(project_simplex).collect(),
        };
        (state, raw)
    }

    /// `P = Σ_k V_k ⊗ s_k`.
    pub fn model_tensor(&self) -> Result<SumTensor> {
        let (r, c) = self.v[0].shape();
        let mut p = SumTensor::zeros(r, c, self.s[0].len());
        for (v, s) in self.v.iter().zip(&self.s) {
            p.push(v.clone(), s.clone())?;
        }
        Ok(p)
    }

    fn check(&self, gt: &GroundTruth) -> Result<()> {
        if self.v.is_empty() || self.v.len() != self.s.len() {
            return Err(Error::dim("flow state needs the same positive number of V and s"));
        }
        if self.v.iter().any(|v| v.shape() != (gt.d(), gt.d())) || self.s.iter().any(|s| s.len() != gt.t()) {
            return Err(Error::dim("flow state does not match the ground truth"));
        }
        Ok(())
    }
}

/// `G − P` for the given state.
pub fn residual_tensor(state: &FlowState, gt: &GroundTruth) -> Result<SumTensor> {
    state.check(gt)?;
    gt.tensor().sub(&state.model_tensor()?)
}

/// `½‖G − P‖²`.
pub fn factorization_loss(state: &FlowState, gt: &GroundTruth) -> Result<f64> {
    let r = residual_tensor(state, gt)?;
    Ok(0.5 * r.inner(&r)?.max(0.0))
}

/// Loss contributions `C[a][b] = ½⟨V_a^⋆, (G − P) s_b^⋆⟩²` for every pair of
/// true feature `a` and true position `b`. The diagonal `C[k][k]` starts at
/// `½ m_k²` from zero values and is the per-feature residual.
pub fn residual_components(state: &FlowState, gt: &GroundTruth) -> Result<Matrix> {
    let r = residual_tensor(state, gt)?;
    let h = gt.h();
    let mut out = Matrix::zeros(h, h);
    for b in 0..h {
        let col = r.apply_right(&gt.target_position(b))?;
        for a in 0..h {
            out[(a, b)] = 0.5 * frob_inner(gt.direction(a), &col).powi(2);
        }
    }
    Ok(out)
}

/// Time derivative of every head.
pub fn full_rhs(state: &FlowState, gt: &GroundTruth) -> Result<FlowState> {
    let r = residual_tensor(state, gt)?;
    let mut out = FlowState {
        v: Vec::with_capacity(state.h()),
        s: Vec::with_capacity(state.h()),
    };
    for (v, s) in state.v.iter().zip(&state.s) {
        out.v.push(r.apply_right(s)?);
        out.s.push(pi_squared_apply(s, &r.apply_left(v)?));
    }
    Ok(out)
}

/// The full system as an integrable [`Dynamics`].
pub struct FullFlow<'a> {
    gt: &'a GroundTruth,
}

impl<'a> FullFlow<'a> {
    pub fn new(gt: &'a GroundTruth) -> Self {
        Self { gt }
    }
}

impl Dynamics for FullFlow<'_> {
    type State = FlowState;
    fn rhs(&self, state: &FlowState) -> Result<FlowState> {
        full_rhs(state, self.gt)
    }
}

/// `−dL/dt = Σ ‖V̇_k‖² + Σ ‖Π(s_k) V_kᵀ(G − P)‖²`.
pub fn loss_decrease_rate(state: &FlowState, gt: &GroundTruth) -> Result<f64> {
    let r = residual_tensor(state, gt)?;
    let mut total = 0.0;
    for (v, s) in state.v.iter().zip(&state.s) {
        total += r.apply_right(s)?.norm_squared();
        total += pi_apply(s, &r.apply_left(v)?).norm_squared();
    }
    Ok(total)
}

/// `φ(V, s) = ⟨V, G s⟩ − (h/2)‖V‖²‖s‖²`.
pub fn lyapunov_phi(v: &Matrix, s: &Vector, gt: &GroundTruth, h: usize) -> Result<f64> {
    let gs = gt.tensor().apply_right(s)?;
    Ok(frob_inner(v, &gs) - 0.5 * h as f64 * v.norm_squared() * s.norm_squared())
}

/// Lyapunov function of the cooperative system:
/// `(h−1) m_1 ⟨V, V_1^⋆⟩ − ((h−1)²/2)‖V‖² − (h−1)⟨s_1^⋆, s′⟩⟨V, V′⟩
///  + ⟨V′, G s′⟩ − ½‖s′‖²‖V′‖²`.
pub fn lyapunov_coop(v: &Matrix, v_off: &Matrix, s_off: &Vector, gt: &GroundTruth, h: usize) -> Result<f64> {
    let hm = h as f64 - 1.0;
    let gs = gt.tensor().apply_right(s_off)?;
    Ok(hm * gt.scale(0) * frob_inner(v, gt.direction(0))
        - 0.5 * hm * hm * v.norm_squared()
        - hm * s_off[gt.position(0)] * frob_inner(v, v_off)
        + frob_inner(v_off, &gs)
        - 0.5 * s_off.norm_squared() * v_off.norm_squared())
}

/// Head relabeling that best matches `targets`: returns `order` with head
/// `order[k]` assigned to target `k`, and the summed squared distance.
/// Exhaustive over all `h!` orders, so limited to `h ≤ 8`.
pub fn best_permutation(heads: &[(Matrix, Vector)], targets: &[(Matrix, Vector)]) -> Result<(Vec<usize>, f64)> {
    let h = heads.len();
    if targets.len() != h {
        return Err(Error::dim("heads and targets differ in number"));
    }
    if h > 8 {
        return Err(Error::domain("exhaustive head matching is limited to h ≤ 8"));
    }
    let cost: Vec<Vec<f64>> = (0..h)
        .map(|k| {
            (0..h)
                .map(|j| (&heads[j].0 - &targets[k].0).norm_squared() + (&heads[j].1 - &targets[k].1).norm_squared())
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..h).collect();
    let mut best = (order.clone(), f64::INFINITY);
    permute(&mut order, 0, &cost, &mut best);
    Ok(best)
}

fn permute(order: &mut Vec<usize>, at: usize, cost: &[Vec<f64>], best: &mut (Vec<usize>, f64)) {
    if at == order.len() {
        let c: f64 = order.iter().enumerate().map(|(k, &j)| cost[k][j]).sum();
        if c < best.1 {
            *best = (order.clone(), c);
        }
        return;
    }
    for i in at..order.len() {
        order.swap(at, i);
        permute(order, at + 1, cost, best);
        order.swap(at, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn gt(d: usize, t: usize, h: usize, seed: u64) -> GroundTruth {
        build_ground_truth(d, t, h, 1.7, 1.0, &mut stream(seed, 6)).unwrap()
    }

    fn random_state(gt: &GroundTruth, h: usize, seed: u64) -> FlowState {
        let mut rng = stream(seed, 99);
        FlowState {
            v: (0..h)
                .map(|_| Matrix::from_fn(gt.d(), gt.d(), |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            s: (0..h)
                .map(|_| {
                    let raw = Vector::from_fn(gt.t(), |_, _| rng.random_range(0.01..1.0));
                    let sum = raw.sum();
                    raw / sum
                })
                .collect(),
        }
    }

    #[test]
    fn ground_truth_invariants() {
        let g = gt(5, 6, 3, 1);
        for i in 0..3 {
            for j in 0..3 {
                let e = frob_inner(g.direction(i), g.direction(j)) - if i == j { 1.0 } else { 0.0 };
                assert!(e.abs() < 1e-10);
            }
        }
        assert!((g.scale(0) - 2.89).abs() < 1e-12 && (g.scale(2) - 1.0).abs() < 1e-12);
        assert_eq!(g.tensor().terms().len(), 3);
        let single = build_ground_truth(3, 2, 1, 1.7, 1.0, &mut stream(0, 6)).unwrap();
        assert_eq!(single.tensor().terms().len(), 1);
        assert!(build_ground_truth(2, 10, 5, 1.7, 1.0, &mut stream(0, 6)).is_err());
        assert!(build_ground_truth(5, 2, 3, 1.7, 1.0, &mut stream(0, 6)).is_err());
        assert!(build_ground_truth(5, 6, 3, 1.0, 1.0, &mut stream(0, 6)).is_err());
    }

    #[test]
    fn loss_examples() {
        let g = gt(4, 5, 3, 2);
        let exact = FlowState {
            v: (0..3).map(|k| g.direction(k) * g.scale(k)).collect(),
            s: (0..3).map(|k| g.target_position(k)).collect(),
        };
        assert!(factorization_loss(&exact, &g).unwrap() < 1e-24);
        let rhs = full_rhs(&exact, &g).unwrap();
        assert!(rhs.v.iter().all(|v| v.norm() < 1e-12));
        assert!(rhs.s.iter().all(|s| s.norm() < 1e-12));

        let (zero, _) = FlowState::noisy_uniform(&g, 3, 0.0, &mut stream(0, 0));
        let l = factorization_loss(&zero, &g).unwrap();
        assert!((l - g.half_norm_sq()).abs() < 1e-12);
        let c = residual_components(&zero, &g).unwrap();
        for k in 0..3 {
            assert!((c[(k, k)] - 0.5 * g.scale(k).powi(2)).abs() < 1e-12);
        }
        // zero values: V̇_k = G s_k and ṡ_k = 0
        let s = random_state(&g, 3, 4).s;
        let state = FlowState {
            v: vec![Matrix::zeros(4, 4); 3],
            s,
        };
        let rhs = full_rhs(&state, &g).unwrap();
        for k in 0..3 {
            let expect = g.tensor().apply_right(&state.s[k]).unwrap();
            assert!((&rhs.v[k] - expect).norm() < 1e-14);
            assert_eq!(rhs.s[k].norm(), 0.0);
        }
    }

    #[test]
    fn score_derivatives_stay_tangent() {
        let g = gt(4, 6, 3, 3);
        for seed in 0..20 {
            let state = random_state(&g, 3, seed);
            let rhs = full_rhs(&state, &g).unwrap();
            for s in &rhs.s {
                assert!(s.sum().abs() < 1e-12);
            }
        }
    }

    /// The full flow is the negative gradient in `V` and the `Π²`-preconditioned
    /// negative gradient in `s`, checked against central differences of the loss.
    #[test]
    fn rhs_matches_finite_difference_gradient() {
        let mut rng = stream(5, 0);
        for seed in 0..10 {
            let d = rng.random_range(2..=8);
            let t = rng.random_range(3..=8);
            let g = gt(d, t, 3, seed);
            let state = random_state(&g, 3, seed);
            let rhs = full_rhs(&state, &g).unwrap();
            let h = 1e-6;
            let loss = |st: &FlowState| factorization_loss(st, &g).unwrap();
            for k in 0..3 {
                for idx in 0..d * d {
                    let mut up = state.clone();
                    up.v[k].as_mut_slice()[idx] += h;
                    let mut dn = state.clone();
                    dn.v[k].as_mut_slice()[idx] -= h;
                    let fd = -(loss(&up) - loss(&dn)) / (2.0 * h);
                    let a = rhs.v[k].as_slice()[idx];
                    assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0));
                }
                let mut grad = Vector::zeros(t);
                for i in 0..t {
                    let mut up = state.clone();
                    up.s[k][i] += h;
                    let mut dn = state.clone();
                    dn.s[k][i] -= h;
                    grad[i] = -(loss(&up) - loss(&dn)) / (2.0 * h);
                }
                let expect = pi_squared_apply(&state.s[k], &grad);
                assert!((&rhs.s[k] - expect).norm() <= 1e-6 * rhs.s[k].norm().max(1.0));
            }
        }
    }

    #[test]
    fn loss_rate_matches_difference_along_flow() {
        let g = gt(4, 5, 3, 7);
        for seed in 0..5 {
            let state = random_state(&g, 3, seed);
            let rhs = full_rhs(&state, &g).unwrap();
            let step = |sign: f64| {
                let mut s = state.clone();
                s.v.iter_mut().zip(&rhs.v).for_each(|(a, b)| *a += b * (sign * 1e-6));
                s.s.iter_mut().zip(&rhs.s).for_each(|(a, b)| *a += b * (sign * 1e-6));
                factorization_loss(&s, &g).unwrap()
            };
            let fd = (step(1.0) - step(-1.0)) / 2e-6;
            let rate = loss_decrease_rate(&state, &g).unwrap();
            assert!(rate >= 0.0);
            assert!((fd + rate).abs() <= 1e-6 * rate, "fd {fd} rate {rate}");
        }
    }

    #[test]
    fn lyapunov_examples() {
        let g = gt(4, 5, 3, 8);
        assert_eq!(
            lyapunov_phi(&Matrix::zeros(4, 4), &g.target_position(0), &g, 3).unwrap(),
            0.0
        );
        let v = g.direction(0) * (g.scale(0) / 3.0);
        let phi = lyapunov_phi(&v, &g.target_position(0), &g, 3).unwrap();
        assert!((phi - g.scale(0).powi(2) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_matching() {
        let g = gt(3, 4, 3, 9);
        let targets: Vec<(Matrix, Vector)> = (0..3).map(|k| (g.direction(k).clone(), g.target_position(k))).collect();
        let heads = vec![targets[2].clone(), targets[0].clone(), targets[1].clone()];
        let (order, cost) = best_permutation(&heads, &targets).unwrap();
        assert_eq!(order, vec![1, 2, 0]);
        assert!(cost < 1e-24);
    }
}
