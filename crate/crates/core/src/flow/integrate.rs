//! Classical fourth-order Runge–Kutta with a fixed step.
//!
//! After every step the simplex components are clamped at zero and rescaled
//! to unit sum; the L1 size of that correction is accumulated and any single
//! step correcting more than [`CORRECTION_FLAG`] is counted.

use crate::error::{Error, Result};
use crate::numerics::{renormalize_simplex, Matrix, Vector};

use super::FlowState;

/// Per-step simplex correction above which a step is flagged.
pub const CORRECTION_FLAG: f64 = 1e-6;

/// A state that can be integrated: linear combinations, a norm, and a
/// projection of its simplex parts.
pub trait FlowVector: Clone {
    /// `self += a · x`.
    fn axpy(&mut self, a: f64, x: &Self);
    fn norm_sq(&self) -> f64;
    /// Puts every simplex component back on the simplex; returns the L1 size
    /// of the change.
    fn renormalize(&mut self) -> f64;
    fn is_finite(&self) -> bool;
}

/// An autonomous system `ẏ = f(y)`.
pub trait Dynamics {
    type State: FlowVector;
    fn rhs(&self, state: &Self::State) -> Result<Self::State>;
}

pub(crate) fn axpy_mat(a: &mut Matrix, c: f64, x: &Matrix) {
    for (p, q) in a.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *p += c * q;
    }
}

pub(crate) fn axpy_vec(a: &mut Vector, c: f64, x: &Vector) {
    for (p, q) in a.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *p += c * q;
    }
}

impl FlowVector for FlowState {
    fn axpy(&mut self, a: f64, x: &Self) {
        self.v.iter_mut().zip(&x.v).for_each(|(p, q)| axpy_mat(p, a, q));
        self.s.iter_mut().zip(&x.s).for_each(|(p, q)| axpy_vec(p, a, q));
    }
    fn norm_sq(&self) -> f64 {
        self.v.iter().map(|v| v.norm_squared()).sum::<f64>() + self.s.iter().map(|s| s.norm_squared()).sum::<f64>()
    }
    fn renormalize(&mut self) -> f64 {
        self.s.iter_mut().map(renormalize_simplex).sum()
    }
    fn is_finite(&self) -> bool {
        self.v.iter().all(|v| v.iter().all(|x| x.is_finite())) && self.s.iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Matrices with no simplex part, for test systems.
impl FlowVector for Matrix {
    fn axpy(&mut self, a: f64, x: &Self) {
        axpy_mat(self, a, x);
    }
    fn norm_sq(&self) -> f64 {
        self.norm_squared()
    }
    fn renormalize(&mut self) -> f64 {
        0.0
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Controls {
    /// Fixed step `Δ`.
    pub dt: f64,
    pub t_end: f64,
    /// Steps between observer calls.
    pub log_every: usize,
    /// Stop once `‖ẏ‖ < rhs_tol`. Zero disables.
    pub rhs_tol: f64,
}

impl Default for Controls {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_end: 100.0,
            log_every: 100,
            rhs_tol: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Reached `t_end`.
    EndTime,
    /// `‖ẏ‖` fell below the tolerance.
    Stationary,
    /// The observer asked to stop.
    Observer,
    /// A step produced a non-finite value; the returned state is the last
    /// finite one.
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub t: f64,
    pub steps: usize,
    pub stop: StopReason,
    pub rhs_norm: f64,
    pub total_correction: f64,
    pub max_correction: f64,
    /// Steps whose correction exceeded [`CORRECTION_FLAG`].
    pub flagged_steps: usize,
}

/// What the observer receives: time, state, the simplex correction since the
/// previous call and `‖ẏ‖` at this state.
pub struct Sample<'a, S> {
    pub t: f64,
    pub step: usize,
    pub state: &'a S,
    pub correction: f64,
    pub rhs_norm: f64,
}

fn rk4_step<D: Dynamics>(sys: &D, y: &D::State, k1: &D::State, dt: f64) -> Result<D::State> {
    let mut y2 = y.clone();
    y2.axpy(0.5 * dt, k1);
    let k2 = sys.rhs(&y2)?;
    let mut y3 = y.clone();
    y3.axpy(0.5 * dt, &k2);
    let k3 = sys.rhs(&y3)?;
    let mut y4 = y.clone();
    y4.axpy(dt, &k3);
    let k4 = sys.rhs(&y4)?;
    let mut out = y.clone();
    out.axpy(dt / 6.0, k1);
    out.axpy(dt / 3.0, &k2);
    out.axpy(dt / 3.0, &k3);
    out.axpy(dt / 6.0, &k4);
    Ok(out)
}

/// Integrates from `init` at `t = 0`. The observer is called at step 0, every
/// `log_every` steps and at the final state; returning `false` stops the run.
pub fn integrate<D, F>(sys: &D, init: D::State, controls: &Controls, mut observe: F) -> Result<(D::State, RunSummary)>
where
    D: Dynamics,
    F: FnMut(&Sample<'_, D::State>) -> Result<bool>,
{
    if !(controls.dt > 0.0 && controls.dt.is_finite()) || controls.log_every == 0 {
        return Err(Error::config("integrator needs a positive step and log stride"));
    }
    let n_steps = (controls.t_end / controls.dt).round().max(0.0) as usize;
    let mut y = init;
    let mut pending_corr = y.renormalize();
    let mut summary = RunSummary {
        t: 0.0,
        steps: 0,
        stop: StopReason::EndTime,
        rhs_norm: f64::NAN,
        total_correction: pending_corr,
        max_correction: pending_corr,
        flagged_steps: usize::from(pending_corr > CORRECTION_FLAG),
    };
    let mut step = 0;
    loop {
        let t = step as f64 * controls.dt;
        let k1 = sys.rhs(&y)?;
        let rhs_norm = k1.norm_sq().sqrt();
        summary.t = t;
        summary.steps = step;
        summary.rhs_norm = rhs_norm;
        let last = step >= n_steps || rhs_norm < controls.rhs_tol || !rhs_norm.is_finite();
        if step % controls.log_every == 0 || last {
            let go_on = observe(&Sample {
                t,
                step,
                state: &y,
                correction: pending_corr,
                rhs_norm,
            })?;
            pending_corr = 0.0;
            if !go_on {
                summary.stop = StopReason::Observer;
                return Ok((y, summary));
            }
        }
        if !rhs_norm.is_finite() {
            summary.stop = StopReason::NonFinite;
            return Ok((y, summary));
        }
        if rhs_norm < controls.rhs_tol {
            summary.stop = StopReason::Stationary;
            return Ok((y, summary));
        }
        if step >= n_steps {
            return Ok((y, summary));
        }
        let mut next = rk4_step(sys, &y, &k1, controls.dt)?;
        if !next.is_finite() {
            summary.stop = StopReason::NonFinite;
            return Ok((y, summary));
        }
        let corr = next.renormalize();
        pending_corr += corr;
        summary.total_correction += corr;
        summary.max_correction = summary.max_correction.max(corr);
        if corr > CORRECTION_FLAG {
            summary.flagged_steps += 1;
        }
        y = next;
        step += 1;
    }
}

/// Result of integrating the same interval with `Δ`, `Δ/2` and `Δ/4`.
#[derive(Clone, Debug, PartialEq)]
pub struct HalvingReport {
    /// `‖y_Δ − y_{Δ/2}‖`.
    pub diff_half: f64,
    /// `‖y_{Δ/2} − y_{Δ/4}‖`.
    pub diff_quarter: f64,
    /// `log₂(diff_half / diff_quarter)`, close to 4 for a fourth-order method.
    pub observed_order: f64,
    /// `diff_quarter < 10 · diff_half / 16`: the second halving moves the
    /// state by less than ten times what fourth-order convergence predicts.
    pub pass: bool,
}

/// Step-halving self-check on `[0, t_end]`.
pub fn step_halving_check<D: Dynamics>(sys: &D, init: &D::State, dt: f64, t_end: f64) -> Result<HalvingReport> {
    let run = |h: f64| -> Result<D::State> {
        let controls = Controls {
            dt: h,
            t_end,
            log_every: usize::MAX,
            rhs_tol: 0.0,
        };
        Ok(integrate(sys, init.clone(), &controls, |_| Ok(true))?.0)
    };
    let a = run(dt)?;
    let b = run(dt / 2.0)?;
    let c = run(dt / 4.0)?;
    let diff = |x: &D::State, y: &D::State| {
        let mut z = x.clone();
        z.axpy(-1.0, y);
        z.norm_sq().sqrt()
    };
    let diff_half = diff(&a, &b);
    let diff_quarter = diff(&b, &c);
    Ok(HalvingReport {
        diff_half,
        diff_quarter,
        observed_order: (diff_half / diff_quarter).log2(),
        pass: diff_quarter <= 10.0 * diff_half / 16.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(f64);
    impl Dynamics for Linear {
        type State = Matrix;
        fn rhs(&self, y: &Matrix) -> Result<Matrix> {
            Ok(y * self.0)
        }
    }

    struct Blowup;
    impl Dynamics for Blowup {
        type State = Matrix;
        fn rhs(&self, y: &Matrix) -> Result<Matrix> {
            Ok(y.map(|x| x * x * 1e200))
        }
    }

    #[test]
    fn zero_rhs_keeps_state() {
        let y0 = Matrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let controls = Controls {
            t_end: 1.0,
            rhs_tol: 0.0,
            ..Controls::default()
        };
        let (y, s) = integrate(&Linear(0.0), y0.clone(), &controls, |_| Ok(true)).unwrap();
        assert_eq!(y, y0);
        assert_eq!(s.steps, 100);
        // with the default tolerance the run stops at once
        let (_, s) = integrate(&Linear(0.0), y0, &Controls::default(), |_| Ok(true)).unwrap();
        assert_eq!(s.stop, StopReason::Stationary);
        assert_eq!(s.steps, 0);
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let controls = Controls {
            dt: 1e-2,
            t_end: 1.0,
            log_every: 10,
            rhs_tol: 0.0,
        };
        let mut times = Vec::new();
        let (y, s) = integrate(&Linear(-1.0), Matrix::from_element(1, 1, 1.0), &controls, |o| {
            times.push(o.t);
            Ok(true)
        })
        .unwrap();
        assert!((y[(0, 0)] - (-1f64).exp()).abs() < 1e-10);
        assert_eq!(s.stop, StopReason::EndTime);
        assert_eq!(times.len(), 11);
        assert!((s.t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn halving_shows_fourth_order() {
        let r = step_halving_check(&Linear(-1.0), &Matrix::from_element(1, 1, 1.0), 0.2, 2.0).unwrap();
        assert!(r.pass);
        assert!((r.observed_order - 4.0).abs() < 0.3, "{r:?}");
    }

    #[test]
    fn non_finite_keeps_last_state() {
        let controls = Controls {
            dt: 0.1,
            t_end: 10.0,
            log_every: 1,
            rhs_tol: 0.0,
        };
        let (y, s) = integrate(&Blowup, Matrix::from_element(1, 1, 1.0), &controls, |_| Ok(true)).unwrap();
        assert_eq!(s.stop, StopReason::NonFinite);
        assert!(y[(0, 0)].is_finite());
    }
}
