//! Reduced systems obtained by tying heads together.
//!
//! * [`CoupledFlow`]: every head identical, state `(V, s)`.
//! * [`CooperativeFlow`]: `h − 1` heads at `(V, s_1^⋆)` and one free head
//!   `(V′, s′)`.
//! * [`HigherOrderFlow`]: the free head alone, with the ensemble assumed to
//!   sit at its optimum and the first `n − 1` features already fitted.
//!   `n = 2` is the two-scale system.

use crate::error::{Error, Result};
use crate::numerics::{frob_inner, pi_squared_apply, renormalize_simplex, Matrix, SumTensor, Vector};

use super::integrate::{axpy_mat, axpy_vec, Dynamics, FlowVector};
use super::{lyapunov_coop, lyapunov_phi, FlowState, GroundTruth};

/// One value matrix and one score vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PairState {
    pub v: Matrix,
    pub s: Vector,
}

impl FlowVector for PairState {
    fn axpy(&mut self, a: f64, x: &Self) {
        axpy_mat(&mut self.v, a, &x.v);
        axpy_vec(&mut self.s, a, &x.s);
    }
    fn norm_sq(&self) -> f64 {
        self.v.norm_squared() + self.s.norm_squared()
    }
    fn renormalize(&mut self) -> f64 {
        renormalize_simplex(&mut self.s)
    }
    fn is_finite(&self) -> bool {
        self.v.iter().chain(self.s.iter()).all(|x| x.is_finite())
    }
}

/// Ensemble value `V` plus the free head `(V′, s′)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CooperativeState {
    pub v: Matrix,
    pub v_off: Matrix,
    pub s_off: Vector,
}

impl FlowVector for CooperativeState {
    fn axpy(&mut self, a: f64, x: &Self) {
        axpy_mat(&mut self.v, a, &x.v);
        axpy_mat(&mut self.v_off, a, &x.v_off);
        axpy_vec(&mut self.s_off, a, &x.s_off);
    }
    fn norm_sq(&self) -> f64 {
        self.v.norm_squared() + self.v_off.norm_squared() + self.s_off.norm_squared()
    }
    fn renormalize(&mut self) -> f64 {
        renormalize_simplex(&mut self.s_off)
    }
    fn is_finite(&self) -> bool {
        self.v
            .iter()
            .chain(self.v_off.iter())
            .chain(self.s_off.iter())
            .all(|x| x.is_finite())
    }
}

/// `V̇ = G s − h‖s‖²V`, `ṡ = Π(s)²(VᵀG − h‖V‖²s)`.
pub struct CoupledFlow<'a> {
    gt: &'a GroundTruth,
    h: usize,
}

impl<'a> CoupledFlow<'a> {
    pub fn new(gt: &'a GroundTruth, h: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::domain("coupled flow needs at least one head"));
        }
        Ok(Self { gt, h })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    /// `V = (m_1^⋆/h) V_1^⋆`, `s = s_1^⋆`.
    pub fn fixed_point(&self) -> PairState {
        PairState {
            v: self.gt.direction(0) * (self.gt.scale(0) / self.h as f64),
            s: self.gt.target_position(0),
        }
    }

    pub fn lyapunov(&self, state: &PairState) -> Result<f64> {
        lyapunov_phi(&state.v, &state.s, self.gt, self.h)
    }

    /// Smallest margin of the ordering conditions
    /// `⟨V, V_1^⋆ − V_k^⋆⟩ ≥ 0` and `⟨s, s_1^⋆ − s_k^⋆⟩ ≥ 0` over `k`.
    pub fn ordering_margin(&self, state: &PairState) -> f64 {
        ordering_margin(self.gt, state, 0)
    }

    /// Every head at the coupled state.
    pub fn embed(&self, state: &PairState) -> FlowState {
        FlowState::symmetric(self.h, &state.v, &state.s)
    }
}

impl Dynamics for CoupledFlow<'_> {
    type State = PairState;
    fn rhs(&self, state: &PairState) -> Result<PairState> {
        let g = self.gt.tensor();
        let h = self.h as f64;
        let mut v = g.apply_right(&state.s)?;
        axpy_mat(&mut v, -h * state.s.norm_squared(), &state.v);
        let mut grad = g.apply_left(&state.v)?;
        axpy_vec(&mut grad, -h * state.v.norm_squared(), &state.s);
        Ok(PairState {
            v,
            s: pi_squared_apply(&state.s, &grad),
        })
    }
}

/// Margin of `⟨V, V_a^⋆ − V_k^⋆⟩ ≥ 0`, `⟨s, s_a^⋆ − s_k^⋆⟩ ≥ 0` over `k > a`.
pub(crate) fn ordering_margin(gt: &GroundTruth, state: &PairState, a: usize) -> f64 {
    let va = frob_inner(&state.v, gt.direction(a));
    let sa = state.s[gt.position(a)];
    (a + 1..gt.h())
        .flat_map(|k| [va - frob_inner(&state.v, gt.direction(k)), sa - state.s[gt.position(k)]])
        .fold(f64::INFINITY, f64::min)
}

/// Ensemble of `h − 1` heads at `(V, s_1^⋆)` with one free head:
///
/// ```text
/// V̇  = m_1 V_1^⋆ − (h−1) V − ⟨s_1^⋆, s′⟩ V′
/// V̇′ = G s′ − (h−1)⟨s_1^⋆, s′⟩ V − ‖s′‖² V′
/// ṡ′ = Π(s′)² (V′ᵀG − (h−1)⟨V′, V⟩ s_1^⋆ − ‖V′‖² s′)
/// ```
pub struct CooperativeFlow<'a> {
    gt: &'a GroundTruth,
    h: usize,
}

impl<'a> CooperativeFlow<'a> {
    pub fn new(gt: &'a GroundTruth, h: usize) -> Result<Self> {
        if h < 2 {
            return Err(Error::domain("cooperative flow needs at least two heads"));
        }
        Ok(Self { gt, h })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    /// The ensemble value that zeroes `V̇` with the free head frozen:
    /// `(m_1 V_1^⋆ − ⟨s_1^⋆, s′⟩ V′)/(h − 1)`.
    pub fn optimal_ensemble(&self, state: &CooperativeState) -> Matrix {
        let mut out = self.gt.direction(0) * self.gt.scale(0);
        axpy_mat(&mut out, -state.s_off[self.gt.position(0)], &state.v_off);
        out / (self.h as f64 - 1.0)
    }

    pub fn lyapunov(&self, state: &CooperativeState) -> Result<f64> {
        lyapunov_coop(&state.v, &state.v_off, &state.s_off, self.gt, self.h)
    }

    /// Heads `0..h−1` at `(V, s_1^⋆)`, the last head at `(V′, s′)`.
    pub fn embed(&self, state: &CooperativeState) -> FlowState {
        let mut full = FlowState::symmetric(self.h - 1, &state.v, &self.gt.target_position(0));
        full.v.push(state.v_off.clone());
        full.s.push(state.s_off.clone());
        full
    }
}

impl Dynamics for CooperativeFlow<'_> {
    type State = CooperativeState;
    fn rhs(&self, state: &CooperativeState) -> Result<CooperativeState> {
        let gt = self.gt;
        let hm = self.h as f64 - 1.0;
        let p1 = gt.position(0);
        let overlap = state.s_off[p1];

        let mut v = gt.direction(0) * gt.scale(0);
        axpy_mat(&mut v, -hm, &state.v);
        axpy_mat(&mut v, -overlap, &state.v_off);

        let mut v_off = gt.tensor().apply_right(&state.s_off)?;
        axpy_mat(&mut v_off, -hm * overlap, &state.v);
        axpy_mat(&mut v_off, -state.s_off.norm_squared(), &state.v_off);

        let mut grad = gt.tensor().apply_left(&state.v_off)?;
        grad[p1] -= hm * frob_inner(&state.v_off, &state.v);
        axpy_vec(&mut grad, -state.v_off.norm_squared(), &state.s_off);

        Ok(CooperativeState {
            v,
            v_off,
            s_off: pi_squared_apply(&state.s_off, &grad),
        })
    }
}

/// The free head after the first `n − 1` features are fitted:
///
/// ```text
/// V̇′ = G_(n−1) s′_(n−1) − ‖s′_(n−1)‖² V′
/// ṡ′ = Π(s′)² (V′ᵀ G_(n−1) − ‖V′‖² s′_(n−1))
/// ```
///
/// `G_(n−1)` is `G` without its first `n − 1` terms and `s_(n−1)` zeroes the
/// first `n − 1` true positions.
pub struct HigherOrderFlow<'a> {
    gt: &'a GroundTruth,
    n: usize,
    tail: SumTensor,
}

impl<'a> HigherOrderFlow<'a> {
    /// Needs `2 ≤ n ≤ h`; `n = 2` is the two-scale system.
    pub fn new(gt: &'a GroundTruth, n: usize) -> Result<Self> {
        if n < 2 || n > gt.h() {
            return Err(Error::domain(format!("head index n = {n} outside 2..={}", gt.h())));
        }
        Ok(Self {
            gt,
            n,
            tail: gt.deflated(n - 1),
        })
    }

    pub fn two_scale(gt: &'a GroundTruth) -> Result<Self> {
        Self::new(gt, 2)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `(m_n^⋆ V_n^⋆, s_n^⋆)`, where both derivatives vanish.
    pub fn fixed_point(&self) -> PairState {
        let k = self.n - 1;
        PairState {
            v: self.gt.direction(k) * self.gt.scale(k),
            s: self.gt.target_position(k),
        }
    }

    /// `(V_n^⋆, s_n^⋆)`: the unit-magnitude point named as the limit.
    pub fn unit_target(&self) -> PairState {
        let k = self.n - 1;
        PairState {
            v: self.gt.direction(k).clone(),
            s: self.gt.target_position(k),
        }
    }

    fn deflated_s(&self, s: &Vector) -> Vector {
        self.gt.deflate_position(s, self.n - 1)
    }

    /// `⟨V′, G_(n−1) s′_(n−1)⟩ − ½‖V′‖²‖s′_(n−1)‖²`, nondecreasing along the flow.
    pub fn lyapunov(&self, state: &PairState) -> Result<f64> {
        let sd = self.deflated_s(&state.s);
        Ok(frob_inner(&state.v, &self.tail.apply_right(&sd)?) - 0.5 * state.v.norm_squared() * sd.norm_squared())
    }

    /// Margin of the initial condition `φ > 0`. Positive means satisfied.
    pub fn init_margin(&self, state: &PairState) -> Result<f64> {
        let sd = self.deflated_s(&state.s);
        let vd = self.gt.deflate_direction(&state.v, self.n - 1);
        Ok(frob_inner(&vd, &self.tail.apply_right(&sd)?) - 0.5 * state.v.norm_squared() * sd.norm_squared())
    }

    /// Ordering margin over the remaining features `k ≥ n`.
    pub fn ordering_margin(&self, state: &PairState) -> f64 {
        ordering_margin(self.gt, state, self.n - 1)
    }

    /// Tensor residual `‖V′ ⊗ s′_(n−1) − m_n V_n^⋆ ⊗ s_n^⋆‖`: how far the
    /// contribution of the free head to the remaining features is from the
    /// next feature.
    pub fn tensor_residual(&self, state: &PairState) -> f64 {
        let k = self.n - 1;
        let (p, target) = (self.gt.position(k), self.gt.direction(k) * self.gt.scale(k));
        let sd = self.deflated_s(&state.s);
        let mut total = 0.0;
        for (i, &w) in sd.iter().enumerate() {
            total += if i == p {
                (&state.v * w - &target).norm_squared()
            } else {
                w * w * state.v.norm_squared()
            };
        }
        total.sqrt()
    }

    /// Frozen ensemble values for `h` heads: the shared value
    /// `(m_1 V_1^⋆ − ⟨s_1^⋆, s′⟩V′)/(h − n + 1)` and the specialized values
    /// `m_i V_i^⋆ − ⟨s_i^⋆, s′⟩V′` for `i = 2..n−1`.
    pub fn ensemble_values(&self, h: usize, state: &PairState) -> Result<(Matrix, Vec<Matrix>)> {
        if h < self.n {
            return Err(Error::domain("ensemble needs h ≥ n"));
        }
        let gt = self.gt;
        let mut shared = gt.direction(0) * gt.scale(0);
        axpy_mat(&mut shared, -state.s[gt.position(0)], &state.v);
        let shared = shared / (h - self.n + 1) as f64;
        let specialized = (1..self.n - 1)
            .map(|i| {
                let mut m = gt.direction(i) * gt.scale(i);
                axpy_mat(&mut m, -state.s[gt.position(i)], &state.v);
                m
            })
            .collect();
        Ok((shared, specialized))
    }

    /// The modeled `h`-head configuration: `h − n + 1` heads at
    /// `(shared, s_1^⋆)`, head `i` at `(specialized_i, s_i^⋆)` for
    /// `i = 2..n−1`, and the free head last.
    pub fn embed(&self, h: usize, state: &PairState) -> Result<FlowState> {
        let (shared, specialized) = self.ensemble_values(h, state)?;
        let mut full = FlowState::symmetric(h - self.n + 1, &shared, &self.gt.target_position(0));
        for (i, v) in specialized.into_iter().enumerate() {
            full.v.push(v);
            full.s.push(self.gt.target_position(i + 1));
        }
        full.v.push(state.v.clone());
        full.s.push(state.s.clone());
        Ok(full)
    }
}

impl Dynamics for HigherOrderFlow<'_> {
    type State = PairState;
    fn rhs(&self, state: &PairState) -> Result<PairState> {
        let sd = self.deflated_s(&state.s);
        let mut v = self.tail.apply_right(&sd)?;
        axpy_mat(&mut v, -sd.norm_squared(), &state.v);
        let mut grad = self.tail.apply_left(&state.v)?;
        axpy_vec(&mut grad, -state.v.norm_squared(), &sd);
        Ok(PairState {
            v,
            s: pi_squared_apply(&state.s, &grad),
        })
    }
}
