use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{
    integrate, lyapunov_phi, residual_components, step_halving_check, Controls, CooperativeFlow, CooperativeState,
    CoupledFlow, Dynamics, FlowState, FullFlow, GroundTruth, HigherOrderFlow, PairState, StopReason, TrajectoryLog,
};
use crate::numerics::{frob_inner, pi_squared_apply, Matrix, Vector};

use super::{
    log_for, CheckReport, CheckStatus, CompetitiveParams, DeviationParams, EarlyParams, Envelope, FlowSetup,
    InvariantParams, OffshootParams, SimulateConfig, StageParams, Tolerances, VerifyConfig, CHECK_NAMES,
};

/// A report together with the logged trajectory and, for deviation checks,
/// the `(t, Δ(t))` series.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub report: CheckReport,
    pub log: TrajectoryLog,
    pub series: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct Keyed<'a, P: Serialize> {
    check: &'a str,
    setup: &'a FlowSetup,
    tolerances: &'a Tolerances,
    params: &'a P,
}

fn new_report<P: Serialize>(name: &str, setup: &FlowSetup, tol: &Tolerances, params: &P) -> Result<CheckReport> {
    CheckReport::new(
        name,
        &Keyed {
            check: name,
            setup,
            tolerances: tol,
            params,
        },
    )
}

fn outcome(report: CheckReport, log: TrajectoryLog, series: Vec<(f64, f64)>) -> CheckOutcome {
    CheckOutcome {
        report: report.finish(),
        log,
        series,
    }
}

/// Gaussian matrix rescaled to Frobenius norm `eps`.
fn matrix_kick<R: Rng + ?Sized>(d: usize, eps: f64, rng: &mut R) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = g.norm();
    g * (eps / n)
}

fn random_simplex<R: Rng + ?Sized>(t: usize, rng: &mut R) -> Vector {
    let e = Vector::from_fn(t, |_, _| Exp1.sample(rng));
    let sum: f64 = e.sum();
    e / sum
}

/// Moves `s` a Euclidean distance `eps` toward a random point of the simplex,
/// which keeps it on the simplex.
fn simplex_kick<R: Rng + ?Sized>(s: &Vector, eps: f64, rng: &mut R) -> Vector {
    let q = random_simplex(s.len(), rng);
    let dir = &q - s;
    let n = dir.norm();
    if n <= eps || n == 0.0 {
        return q;
    }
    s + dir * (eps / n)
}

fn cosine(a: &Matrix, b: &Matrix) -> f64 {
    frob_inner(a, b) / (a.norm() * b.norm())
}

fn uniform(t: usize) -> Vector {
    Vector::from_element(t, 1.0 / t as f64)
}

fn competitive_init<R: Rng + ?Sized>(gt: &GroundTruth, params: &CompetitiveParams, rng: &mut R) -> PairState {
    let t = gt.t();
    let q = random_simplex(t, rng);
    let lean = gt.target_position(0) * 0.9 + q * 0.1;
    PairState {
        v: gt.mean_feature() * params.value_scale,
        s: uniform(t) * (1.0 - params.tilt) + lean * params.tilt,
    }
}

/// Coupled flow from an ordering-compliant start converges to
/// `((m_1^⋆/h) V_1^⋆, s_1^⋆)`.
pub fn check_competitive_fixed_point(
    setup: &FlowSetup,
    tol: &Tolerances,
    params: &CompetitiveParams,
    init: Option<PairState>,
) -> Result<CheckOutcome> {
    let mut report = new_report("competitive", setup, tol, params)?;
    let gt = setup.ground_truth()?;
    let sys = CoupledFlow::new(&gt, setup.h)?;
    let init = match init {
        Some(s) => s,
        None => competitive_init(&gt, params, &mut setup.perturbation_rng()),
    };
    let mut log = log_for(&gt, setup.h);
    let margin0 = sys.ordering_margin(&init);
    report.residual("init_ordering_margin", margin0);
    if margin0 < 0.0 {
        report.status = CheckStatus::PreconditionUnmet;
        report.note("initialization violates the ordering conditions");
        return Ok(outcome(report, log, Vec::new()));
    }
    let fp = sys.fixed_point();
    let residuals = |st: &PairState| ((&st.v - &fp.v).norm(), (&st.s - &fp.s).norm());
    let controls = Controls {
        dt: params.run.dt,
        t_end: params.run.horizon(&gt, 1e7),
        log_every: params.run.log_every,
        rhs_tol: tol.stationary,
    };
    let mut last_phi: Option<f64> = None;
    let mut backslide = 0f64;
    let mut min_margin = f64::INFINITY;
    let (end, summary) = integrate(&sys, init, &controls, |o| {
        let phi = sys.lyapunov(o.state)?;
        if let Some(p) = last_phi {
            backslide = backslide.max(p - phi);
        }
        last_phi = Some(phi);
        min_margin = min_margin.min(sys.ordering_margin(o.state));
        log.record(o.t, &sys.embed(o.state), &gt, phi, o.correction)?;
        let (vr, sr) = residuals(o.state);
        Ok(!(vr < tol.fixed_point && sr < tol.fixed_point))
    })?;
    let (vr, sr) = residuals(&end);
    report.residual("t_final", summary.t);
    report.residual("rhs_final", summary.rhs_norm);
    report.residual("limit_norm_predicted", gt.scale(0) / setup.h as f64);
    report.residual("limit_norm", end.v.norm());
    report.at_most("v_residual", vr, tol.fixed_point);
    report.at_most("s_residual", sr, tol.fixed_point);
    report.at_most("lyapunov_backslide", backslide, tol.lyapunov);
    report.at_least("ordering_margin_min", min_margin, -tol.ordering);
    report.at_most("simplex_drift", summary.total_correction, tol.simplex_drift);
    if summary.stop != StopReason::Observer {
        report.note(format!("stopped ({:?}) before reaching the fixed point", summary.stop));
    }
    Ok(outcome(report, log, Vec::new()))
}

/// Fit of an exponential envelope `ε e^{ĉt}` to a deviation series.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeFit {
    pub rate: f64,
    pub window_end: f64,
    pub fit_points: usize,
    /// `max Δ(t) / (ε e^{ĉt})` over the window.
    pub worst_ratio: f64,
}

/// Least-squares slope of `ln Δ` over the first stretch where `Δ` climbs from
/// `2ε` to `20ε`, window `[0, 1/(−ĉ ln ε)]`, and the worst ratio to the
/// envelope inside it. `None` without two fit points or a positive rate.
pub fn fit_envelope(series: &[(f64, f64)], eps: f64) -> Option<EnvelopeFit> {
    if !(eps > 0.0 && eps < 1.0) {
        return None;
    }
    let start = series.iter().position(|p| p.1 >= 2.0 * eps)?;
    let pts: Vec<(f64, f64)> = series[start..]
        .iter()
        .take_while(|p| p.1 <= 20.0 * eps)
        .map(|p| (p.0, p.1.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let rate = sxy / sxx;
    if !(rate > 0.0) {
        return None;
    }
    let window_end = 1.0 / (-rate * eps.ln());
    let worst_ratio = series
        .iter()
        .filter(|p| p.0 <= window_end)
        .map(|p| p.1 / (eps * (rate * p.0).exp()))
        .fold(0.0, f64::max);
    Some(EnvelopeFit {
        rate,
        window_end,
        fit_points: pts.len(),
        worst_ratio,
    })
}

/// Smallest rate `c` with `Δ(t) ≤ ε e^{ct}` for every sample in `(0, end]`.
fn required_rate(series: &[(f64, f64)], eps: f64, end: f64) -> f64 {
    series
        .iter()
        .filter(|p| p.0 > 0.0 && p.0 <= end)
        .map(|p| (p.1 / eps).ln() / p.0)
        .fold(0.0, f64::max)
}

fn record_envelope(report: &mut CheckReport, series: &[(f64, f64)], eps: f64, tol: &Tolerances) {
    let max_delta = series.iter().map(|p| p.1).fold(0.0, f64::max);
    report.residual("max_deviation", max_delta);
    if eps == 0.0 {
        report.at_most("deviation_without_perturbation", max_delta, 1e-12);
        return;
    }
    match fit_envelope(series, eps) {
        Some(fit) => {
            report.residual("envelope_rate", fit.rate);
            report.residual("required_rate", required_rate(series, eps, fit.window_end));
            report.residual("envelope_window_end", fit.window_end);
            report.envelopes.insert(
                "deviation".into(),
                Envelope {
                    rate: fit.rate,
                    window_end: fit.window_end,
                    fit_points: fit.fit_points,
                },
            );
            report.at_most("envelope_worst_ratio", fit.worst_ratio, 1.0 + tol.envelope_slack);
        }
        None => {
            report.note("deviation never grew through a full decade above 2ε; no envelope fitted");
            report.at_least("envelope_fit_points", 0.0, 2.0);
        }
    }
}

/// Runs a reference and a perturbed full trajectory with the same step and
/// returns `(t, Δ(t))` at every logged step.
fn deviation_series<D, F>(
    reference: &D,
    ref_init: D::State,
    full_init: FlowState,
    gt: &GroundTruth,
    params: &DeviationParams,
    tol: &Tolerances,
    log: &mut TrajectoryLog,
    deviation: F,
) -> Result<(Vec<(f64, f64)>, f64)>
where
    D: Dynamics,
    F: Fn(&FlowState, &D::State) -> f64,
{
    let controls = Controls {
        dt: params.run.dt,
        t_end: params.run.horizon(gt, 100.0),
        log_every: params.run.log_every,
        rhs_tol: 0.0,
    };
    let mut states = Vec::new();
    integrate(reference, ref_init, &controls, |o| {
        if o.step % controls.log_every == 0 {
            states.push(o.state.clone());
        }
        Ok(true)
    })?;
    let full = FullFlow::new(gt);
    let mut series = Vec::new();
    let mut last_loss: Option<f64> = None;
    let mut loss_increase = 0f64;
    let h = full_init.h();
    integrate(&full, full_init, &controls, |o| {
        if o.step % controls.log_every != 0 {
            return Ok(true);
        }
        let Some(r) = states.get(o.step / controls.log_every) else {
            return Ok(false);
        };
        let dlt = deviation(o.state, r);
        series.push((o.t, dlt));
        let phi = mean_phi(o.state, gt, h)?;
        log.record(o.t, o.state, gt, phi, o.correction)?;
        let loss = log.rows().last().map(|row| row[1]).unwrap_or(f64::NAN);
        if let Some(l) = last_loss {
            loss_increase = loss_increase.max(loss - l);
        }
        last_loss = Some(loss);
        Ok(params.eps == 0.0 || dlt <= params.stop_ratio * params.eps)
    })?;
    let _ = tol;
    Ok((series, loss_increase))
}

/// Mean of `φ(V_k, s_k)` over heads, the `phi` column of full-flow logs.
fn mean_phi(state: &FlowState, gt: &GroundTruth, h: usize) -> Result<f64> {
    let mut total = 0.0;
    for (v, s) in state.v.iter().zip(&state.s) {
        total += lyapunov_phi(v, s, gt, h)?;
    }
    Ok(total / state.h() as f64)
}

/// Heads started within `ε` of a symmetric start stay within `ε e^{ĉt}` of
/// the coupled trajectory over `[0, 1/(−ĉ ln ε)]`.
pub fn check_bounded_deviation(setup: &FlowSetup, tol: &Tolerances, params: &DeviationParams) -> Result<CheckOutcome> {
    let mut report = new_report("bounded_deviation", setup, tol, params)?;
    let gt = setup.ground_truth()?;
    let h = setup.h;
    let sys = CoupledFlow::new(&gt, h)?;
    let init = PairState {
        v: Matrix::zeros(gt.d(), gt.d()),
        s: uniform(gt.t()),
    };
    let mut rng = setup.perturbation_rng();
    let mut full = sys.embed(&init);
    for k in 0..h {
        full.v[k] += matrix_kick(gt.d(), params.eps, &mut rng);
        full.s[k] = simplex_kick(&init.s, params.eps, &mut rng);
    }
    let mut log = log_for(&gt, h);
    let (series, loss_increase) = deviation_series(
        &sys,
        init,
        full,
        &gt,
        params,
        tol,
        &mut log,
        |st: &FlowState, r: &PairState| {
            (0..st.h())
                .map(|k| (&st.v[k] - &r.v).norm().max((&st.s[k] - &r.s).norm()))
                .fold(0.0, f64::max)
        },
    )?;
    record_envelope(&mut report, &series, params.eps, tol);
    report.at_most("loss_increase", loss_increase, tol.loss_increase);
    Ok(outcome(report, log, series))
}

/// The cooperative start: ensemble at `(m_1^⋆/h) V_1^⋆`, free head nudged a
/// distance `δ` toward the second feature.
fn cooperative_start(gt: &GroundTruth, h: usize, offshoot: f64) -> CooperativeState {
    let base = gt.direction(0) * (gt.scale(0) / h as f64);
    CooperativeState {
        v: base.clone(),
        v_off: base + gt.direction(1) * offshoot,
        s_off: gt.target_position(0) * (1.0 - offshoot) + gt.target_position(1) * offshoot,
    }
}

/// Heads started within `ε` of the cooperative configuration stay within
/// `ε e^{ĉt}` of the cooperative trajectory.
pub fn check_boundedcoop(setup: &FlowSetup, tol: &Tolerances, params: &DeviationParams) -> Result<CheckOutcome> {
    let mut report = new_report("boundedcoop", setup, tol, params)?;
    let gt = setup.ground_truth()?;
    let h = setup.h;
    let sys = CooperativeFlow::new(&gt, h)?;
    let init = cooperative_start(&gt, h, params.offshoot);
    let mut rng = setup.perturbation_rng();
    let mut full = sys.embed(&init);
    for k in 0..h {
        full.v[k] += matrix_kick(gt.d(), params.eps, &mut rng);
        full.s[k] = simplex_kick(&full.s[k], params.eps, &mut rng);
    }
    let s1 = gt.target_position(0);
    let mut log = log_for(&gt, h);
    let mut frozen_rate = 0f64;
    if params.eps == 0.0 {
        let rhs = sys.embed(&init);
        let r = crate::flow::full_rhs(&rhs, &gt)?;
        frozen_rate = r.s[..h - 1].iter().map(|s| s.norm()).fold(0.0, f64::max);
    }
    let (series, loss_increase) = deviation_series(
        &sys,
        init,
        full,
        &gt,
        params,
        tol,
        &mut log,
        |st: &FlowState, r: &CooperativeState| {
            let last = st.h() - 1;
            let ens = (0..last)
                .map(|k| (&st.v[k] - &r.v).norm().max((&st.s[k] - &s1).norm()))
                .fold(0.0, f64::max);
            ens.max((&st.v[last] - &r.v_off).norm())
                .max((&st.s[last] - &r.s_off).norm())
        },
    )?;
    if params.eps == 0.0 {
        report.at_most("frozen_score_rate", frozen_rate, 0.0);
    }
    record_envelope(&mut report, &series, params.eps, tol);
    report.at_most("loss_increase", loss_increase, tol.loss_increase);
    Ok(outcome(report, log, series))
}

/// Start of the free head for index `n`: the shared ensemble value
/// `m_1^⋆ V_1^⋆ / (h − n + 2)` nudged by `ε V_n^⋆`, and scores
/// `(1 − ε) s_1^⋆ + ε s_n^⋆`.
pub fn offshoot_init(gt: &GroundTruth, n: usize, eps: f64) -> Result<PairState> {
    let h = gt.h();
    if n < 2 || n > h {
        return Err(Error::domain(format!("head index n = {n} outside 2..={h}")));
    }
    let k = n - 1;
    Ok(PairState {
        v: gt.direction(0) * (gt.scale(0) / (h - n + 2) as f64) + gt.direction(k) * eps,
        s: gt.target_position(0) * (1.0 - eps) + gt.target_position(k) * eps,
    })
}

fn run_offshoot(
    name: &str,
    setup: &FlowSetup,
    tol: &Tolerances,
    params: &OffshootParams,
    init: Option<PairState>,
) -> Result<(CheckReport, TrajectoryLog, GroundTruth, PairState)> {
    let mut report = new_report(name, setup, tol, params)?;
    let gt = setup.ground_truth()?;
    let sys = HigherOrderFlow::new(&gt, params.n)?;
    let init = match init {
        Some(s) => s,
        None => offshoot_init(&gt, params.n, params.eps)?,
    };
    let mut log = log_for(&gt, setup.h);
    let margin = sys.init_margin(&init)?;
    let order0 = sys.ordering_margin(&init);
    report.residual("init_margin", margin);
    report.residual("init_ordering_margin", order0);
    let rhs0 = sys.rhs(&init)?;
    if rhs0.s.norm() == 0.0 && margin <= 0.0 {
        report.residual("initial_score_rate", 0.0);
        report.status = CheckStatus::Saddle;
        report.note("free head starts on the stationary saddle at the first position");
        return Ok((report, log, gt, init));
    }
    if margin <= tol.init_margin || order0 < 0.0 {
        report.status = CheckStatus::PreconditionUnmet;
        report.note(format!(
            "precondition unmet: initial-loss margin {margin:.3e} (needs > {:.1e}), ordering margin {order0:.3e}",
            tol.init_margin
        ));
        return Ok((report, log, gt, init));
    }
    let target = sys.unit_target();
    let scaled = sys.fixed_point();
    let residuals = |st: &PairState| ((&st.v - &target.v).norm(), (&st.s - &target.s).norm());
    let controls = Controls {
        dt: params.run.dt,
        t_end: params.run.horizon(&gt, 1e5),
        log_every: params.run.log_every,
        rhs_tol: tol.stationary,
    };
    let mut last_phi: Option<f64> = None;
    let mut backslide = 0f64;
    let mut min_margin = f64::INFINITY;
    let (end, summary) = integrate(&sys, init, &controls, |o| {
        let phi = sys.lyapunov(o.state)?;
        if let Some(p) = last_phi {
            backslide = backslide.max(p - phi);
        }
        last_phi = Some(phi);
        min_margin = min_margin.min(sys.ordering_margin(o.state));
        log.record(o.t, &sys.embed(setup.h, o.state)?, &gt, phi, o.correction)?;
        let (vr, sr) = residuals(o.state);
        Ok(!(vr < tol.fixed_point && sr < tol.fixed_point))
    })?;
    let (vr, sr) = residuals(&end);
    let k = params.n - 1;
    report.residual("t_final", summary.t);
    report.residual("rhs_final", summary.rhs_norm);
    report.residual("v_residual_scaled", (&end.v - &scaled.v).norm());
    report.residual("tensor_residual", sys.tensor_residual(&end));
    report.residual("score_first_position", end.s[gt.position(0)]);
    report.residual("score_target_position", end.s[gt.position(k)]);
    report.at_most("v_residual", vr, tol.fixed_point);
    report.at_most("s_residual", sr, tol.fixed_point);
    report.at_most("lyapunov_backslide", backslide, tol.lyapunov);
    report.at_least("ordering_margin_min", min_margin, -tol.ordering);
    report.at_most("simplex_drift", summary.total_correction, tol.simplex_drift);
    if summary.stop == StopReason::Stationary && sr > tol.fixed_point {
        report.note(format!(
            "stationary with the free head splitting its scores {:.6} / {:.6} between the first and target positions",
            end.s[gt.position(0)],
            end.s[gt.position(k)]
        ));
    }
    Ok((report, log, gt, end))
}

/// Two-scale flow of the free head from the nudged start converges to the
/// second feature; the full cooperative system keeps its ensemble close to
/// the optimal value.
pub fn check_cooperative_convergence(
    setup: &FlowSetup,
    tol: &Tolerances,
    params: &OffshootParams,
) -> Result<CheckOutcome> {
    let params = OffshootParams { n: 2, ..params.clone() };
    let (mut report, log, gt, _) = run_offshoot("cooperative", setup, tol, &params, None)?;
    if report.status == CheckStatus::Fail && setup.h >= 2 {
        let sys = CooperativeFlow::new(&gt, setup.h)?;
        let start = offshoot_init(&gt, 2, params.eps)?;
        let init = CooperativeState {
            v: gt.direction(0) * (gt.scale(0) / setup.h as f64),
            v_off: start.v,
            s_off: start.s,
        };
        let controls = Controls {
            dt: params.run.dt,
            t_end: params.run.horizon(&gt, 1e5),
            log_every: params.run.log_every,
            rhs_tol: tol.stationary,
        };
        let mut gaps = Vec::new();
        let mut last_phi: Option<f64> = None;
        let mut backslide = 0f64;
        integrate(&sys, init, &controls, |o| {
            gaps.push((&o.state.v - sys.optimal_ensemble(o.state)).norm());
            let phi = sys.lyapunov(o.state)?;
            if let Some(p) = last_phi {
                backslide = backslide.max(p - phi);
            }
            last_phi = Some(phi);
            Ok(true)
        })?;
        let tail = (gaps.len() / 10).max(1);
        let tail_mean = gaps[gaps.len() - tail..].iter().sum::<f64>() / tail as f64;
        report.residual("ensemble_gap_initial", gaps[0]);
        report.at_most("ensemble_gap_tail", tail_mean, gaps[0] * (1.0 - 1e-9));
        report.at_most("cooperative_lyapunov_backslide", backslide, tol.lyapunov);
    }
    Ok(outcome(report, log, Vec::new()))
}

/// Free head `n` converges to feature `n` once the first `n − 1` are fitted.
pub fn check_higher_order(
    setup: &FlowSetup,
    tol: &Tolerances,
    params: &OffshootParams,
    init: Option<PairState>,
) -> Result<CheckOutcome> {
    let (report, log, _, _) = run_offshoot("higher_order", setup, tol, params, init)?;
    Ok(outcome(report, log, Vec::new()))
}

/// From zero values and near-uniform scores, every value matrix first moves
/// along `G 1_T / T` and the scores drift toward the first true position.
pub fn check_early_alignment(setup: &FlowSetup, tol: &Tolerances, params: &EarlyParams) -> Result<CheckOutcome> {
    let mut report = new_report("early_alignment", setup, tol, params)?;
    let gt = setup.ground_truth()?;
    let h = setup.h;
    let (init, _) = FlowState::noisy_uniform(&gt, h, params.noise, &mut setup.perturbation_rng());
    let t_small = params.t_small.unwrap_or(0.1 / gt.scale(0));
    let steps = params.steps.max(1);
    let controls = Controls {
        dt: t_small / steps as f64,
        t_end: t_small,
        log_every: 1,
        rhs_tol: 0.0,
    };
    let target = gt.mean_feature();
    let sys = FullFlow::new(&gt);
    report.residual(
        "initial_score_rate",
        sys.rhs(&init)?.s.iter().map(|s| s.norm()).fold(0.0, f64::max),
    );
    let mut log = log_for(&gt, h);
    let mut min_cos = f64::INFINITY;
    let (end, _) = integrate(&sys, init.clone(), &controls, |o| {
        if o.step > 0 {
            for v in &o.state.v {
                min_cos = min_cos.min(cosine(v, &target));
            }
        }
        log.record(o.t, o.state, &gt, mean_phi(o.state, &gt, h)?, o.correction)?;
        Ok(true)
    })?;
    let p1 = gt.position(0);
    let pull = gt.tensor().apply_left(&target)?;
    let mut hits = 0;
    let mut min_gap = f64::INFINITY;
    let mut min_taylor = f64::INFINITY;
    for k in 0..h {
        let disp = &end.s[k] - &init.s[k];
        if disp.imax() == p1 {
            hits += 1;
        }
        let rest = disp
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != p1)
            .map(|(_, x)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        min_gap = min_gap.min(disp[p1] - rest);
        let predicted = pi_squared_apply(&init.s[k], &pull) * (0.5 * t_small * t_small);
        min_taylor = min_taylor.min(disp.dot(&predicted) / (disp.norm() * predicted.norm()));
    }
    report.residual("t_small", t_small);
    report.residual("displacement_gap_min", min_gap);
    report.at_least("value_cosine_min", min_cos, params.cosine);
    report.at_least("displacement_argmax_hits", hits as f64, h as f64);
    report.at_least("taylor_cosine_min", min_taylor, 0.99);
    Ok(outcome(report, log, Vec::new()))
}

/// Full flow from zero values and noisy uniform scores learns the features in
/// order of strength, each stage taking at least `min_ratio` times as long as
/// the previous one.
pub fn check_full_flow_stages(setup: &FlowSetup, tol: &Tolerances, params: &StageParams) -> Result<CheckOutcome> {
    let mut report = new_report("full_flow_stages", setup, tol, params)?;
    let gt = setup.ground_truth()?;
    let h = setup.h;
    let (init, raw) = FlowState::noisy_uniform(&gt, h, params.noise, &mut setup.perturbation_rng());
    let shift: f64 = raw.iter().zip(&init.s).map(|(r, s)| (r - s).abs().sum()).sum();
    report.residual("init_projection_shift", shift);
    let stride = params.run.log_every.max(1);
    let controls = Controls {
        dt: params.run.dt,
        t_end: params.run.horizon(&gt, 5000.0),
        log_every: 1,
        rhs_tol: tol.stationary,
    };
    let f = gt.h();
    let mut initial = vec![f64::NAN; f];
    let mut crossing = vec![f64::INFINITY; f];
    let mut last_loss: Option<f64> = None;
    let mut loss_increase = 0f64;
    let mut correction = 0.0;
    let mut log = log_for(&gt, h);
    let sys = FullFlow::new(&gt);
    let (_, summary) = integrate(&sys, init, &controls, |o| {
        let c = residual_components(o.state, &gt)?;
        for k in 0..f {
            if o.step == 0 {
                initial[k] = c[(k, k)];
            } else if crossing[k].is_infinite() && c[(k, k)] < params.threshold * initial[k] {
                crossing[k] = o.t;
            }
        }
        let loss = crate::flow::factorization_loss(o.state, &gt)?;
        if let Some(l) = last_loss {
            loss_increase = loss_increase.max(loss - l);
        }
        last_loss = Some(loss);
        correction += o.correction;
        let go_on = crossing.iter().any(|t| t.is_infinite());
        if o.step % stride == 0 || !go_on {
            log.record(o.t, o.state, &gt, mean_phi(o.state, &gt, h)?, correction)?;
            correction = 0.0;
        }
        Ok(go_on)
    })?;
    for (k, t) in crossing.iter().enumerate() {
        report.residual(&format!("crossing_t{}", k + 1), *t);
    }
    for k in 1..f {
        report.at_least(
            &format!("ratio_t{}_t{}", k + 1, k),
            crossing[k] / crossing[k - 1],
            params.min_ratio,
        );
    }
    report.at_least("crossing_t1_positive", crossing[0], f64::MIN_POSITIVE);
    report.at_most("loss_increase", loss_increase, tol.loss_increase);
    report.at_most("simplex_drift", summary.total_correction, tol.simplex_drift);
    Ok(outcome(report, log, Vec::new()))
}

/// Integrates the full flow from a near-uniform start and logs it. The
/// horizon defaults to `5000 / m_h`.
pub fn simulate_full_flow(cfg: &SimulateConfig) -> Result<(TrajectoryLog, crate::flow::RunSummary)> {
    let gt = cfg.setup.ground_truth()?;
    let h = cfg.heads.unwrap_or(cfg.setup.h);
    if h == 0 {
        return Err(Error::config("heads must be positive"));
    }
    let (init, _) = FlowState::noisy_uniform(&gt, h, cfg.noise, &mut cfg.setup.perturbation_rng());
    let controls = Controls {
        dt: cfg.run.dt,
        t_end: cfg.run.horizon(&gt, 5000.0),
        log_every: cfg.run.log_every,
        rhs_tol: cfg.stationary,
    };
    let mut log = log_for(&gt, h);
    let mut correction = 0.0;
    let (_, summary) = integrate(&FullFlow::new(&gt), init, &controls, |o| {
        correction += o.correction;
        log.record(o.t, o.state, &gt, mean_phi(o.state, &gt, h)?, correction)?;
        correction = 0.0;
        Ok(true)
    })?;
    Ok((log, summary))
}

/// Random ordering-compliant coupled start: `V` inside the span of the
/// features with the largest coefficient on the first one, and `s` with its
/// largest true-position entry at the first position.
fn random_ordered_pair<R: Rng + ?Sized>(gt: &GroundTruth, rng: &mut R) -> PairState {
    let h = gt.h();
    let mut coef: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..1.0)).collect();
    let top = coef.iter().cloned().fold(0.0, f64::max);
    coef[0] = top + rng.random_range(0.0..0.5);
    let mut v = Matrix::zeros(gt.d(), gt.d());
    for (k, c) in coef.iter().enumerate() {
        v += gt.direction(k) * *c;
    }
    let mut s = random_simplex(gt.t(), rng);
    let best = (0..h)
        .max_by(|&a, &b| s[gt.position(a)].total_cmp(&s[gt.position(b)]))
        .unwrap_or(0);
    s.swap_rows(gt.position(0), gt.position(best));
    PairState { v, s }
}

/// Lyapunov monotonicity, forward invariance of the ordering region and loss
/// monotonicity along random trajectories of every system.
pub fn check_invariants(setup: &FlowSetup, tol: &Tolerances, params: &InvariantParams) -> Result<CheckOutcome> {
    let mut report = new_report("invariants", setup, tol, params)?;
    let gt = setup.ground_truth()?;
    let h = setup.h;
    let mut rng = setup.perturbation_rng();
    let controls = Controls {
        dt: params.run.dt,
        t_end: params.run.horizon(&gt, 200.0),
        log_every: params.run.log_every,
        rhs_tol: 0.0,
    };
    let track = |prev: &mut Option<f64>, worst: &mut f64, now: f64, sign: f64| {
        if let Some(p) = *prev {
            *worst = worst.max(sign * (p - now));
        }
        *prev = Some(now);
    };

    let coupled = CoupledFlow::new(&gt, h)?;
    let start = random_ordered_pair(&gt, &mut rng);
    report.residual("coupled_init_ordering_margin", coupled.ordering_margin(&start));
    let (mut prev, mut phi_back, mut min_margin) = (None, 0f64, f64::INFINITY);
    integrate(&coupled, start, &controls, |o| {
        track(&mut prev, &mut phi_back, coupled.lyapunov(o.state)?, 1.0);
        min_margin = min_margin.min(coupled.ordering_margin(o.state));
        Ok(true)
    })?;
    report.at_most("phi_backslide", phi_back, tol.lyapunov);
    report.at_least("ordering_margin_min", min_margin, -tol.ordering);

    if h >= 2 {
        let coop = CooperativeFlow::new(&gt, h)?;
        let base = cooperative_start(&gt, h, rng.random_range(0.0..0.1));
        let start = CooperativeState {
            v: base.v + matrix_kick(gt.d(), 0.1, &mut rng),
            v_off: base.v_off + matrix_kick(gt.d(), 0.1, &mut rng),
            s_off: simplex_kick(&base.s_off, 0.1, &mut rng),
        };
        let (mut prev, mut back) = (None, 0f64);
        integrate(&coop, start, &controls, |o| {
            track(&mut prev, &mut back, coop.lyapunov(o.state)?, 1.0);
            Ok(true)
        })?;
        report.at_most("cooperative_backslide", back, tol.lyapunov);

        let two = HigherOrderFlow::two_scale(&gt)?;
        let start = offshoot_init(&gt, 2, rng.random_range(1e-3..1e-1))?;
        let (mut prev, mut back, mut order) = (None, 0f64, f64::INFINITY);
        integrate(&two, start, &controls, |o| {
            track(&mut prev, &mut back, two.lyapunov(o.state)?, 1.0);
            order = order.min(two.ordering_margin(o.state));
            Ok(true)
        })?;
        report.at_most("two_scale_backslide", back, tol.lyapunov);
        report.at_least("two_scale_ordering_min", order, -tol.ordering);
    }

    let full = FullFlow::new(&gt);
    let start = FlowState {
        v: (0..h)
            .map(|_| matrix_kick(gt.d(), rng.random_range(0.01..1.0), &mut rng))
            .collect(),
        s: (0..h).map(|_| random_simplex(gt.t(), &mut rng)).collect(),
    };
    let mut log = log_for(&gt, h);
    let (mut prev, mut rise) = (None, 0f64);
    let (_, summary) = integrate(&full, start, &controls, |o| {
        log.record(o.t, o.state, &gt, mean_phi(o.state, &gt, h)?, o.correction)?;
        track(
            &mut prev,
            &mut rise,
            log.rows().last().map(|r| r[1]).unwrap_or(f64::NAN),
            -1.0,
        );
        Ok(true)
    })?;
    report.at_most("loss_increase", rise, tol.loss_increase);
    report.at_most("simplex_drift", summary.total_correction, tol.simplex_drift);
    Ok(outcome(report, log, Vec::new()))
}

/// Step-halving self-check of the integrator on the coupled and full flows.
pub fn check_halving(setup: &FlowSetup, tol: &Tolerances, params: &CompetitiveParams) -> Result<CheckOutcome> {
    let mut report = new_report("halving", setup, tol, params)?;
    let gt = setup.ground_truth()?;
    let sys = CoupledFlow::new(&gt, setup.h)?;
    let init = competitive_init(&gt, params, &mut setup.perturbation_rng());
    let a = step_halving_check(&sys, &init, 0.1, 10.0)?;
    report.residual("coupled_observed_order", a.observed_order);
    report.at_most("coupled_quarter_over_half", a.diff_quarter / a.diff_half, 10.0 / 16.0);
    let full = FullFlow::new(&gt);
    let (start, _) = FlowState::noisy_uniform(&gt, setup.h, 1e-3, &mut setup.perturbation_rng());
    let b = step_halving_check(&full, &start, 0.1, 10.0)?;
    report.residual("full_observed_order", b.observed_order);
    report.at_most("full_quarter_over_half", b.diff_quarter / b.diff_half, 10.0 / 16.0);
    Ok(outcome(report, TrajectoryLog::default(), Vec::new()))
}

/// Runs the selected checks (all when the list is empty) concurrently and
/// returns them in request order.
pub fn run_all(config: &VerifyConfig) -> Result<Vec<CheckOutcome>> {
    let names: Vec<String> = if config.checks.is_empty() {
        CHECK_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        config.checks.clone()
    };
    if let Some(bad) = names.iter().find(|n| !CHECK_NAMES.contains(&n.as_str())) {
        return Err(Error::config(format!(
            "unknown check {bad:?}; known: {}",
            CHECK_NAMES.join(", ")
        )));
    }
    let (s, t) = (&config.setup, &config.tolerances);
    names
        .par_iter()
        .map(|name| match name.as_str() {
            "competitive" => check_competitive_fixed_point(s, t, &config.competitive, None),
            "bounded_deviation" => check_bounded_deviation(s, t, &config.deviation),
            "cooperative" => check_cooperative_convergence(s, t, &config.cooperative),
            "boundedcoop" => check_boundedcoop(s, t, &config.deviation),
            "higher_order" => check_higher_order(s, t, &config.higher_order, None),
            "early_alignment" => check_early_alignment(s, t, &config.early),
            "full_flow_stages" => check_full_flow_stages(s, t, &config.stages),
            "invariants" => check_invariants(s, t, &config.invariants),
            _ => check_halving(s, t, &config.competitive),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_fit_recovers_rate() {
        let eps = 1e-4;
        let series: Vec<(f64, f64)> = (0..2000)
            .map(|i| i as f64 * 0.01)
            .map(|t| (t, eps * (0.7 * t).exp()))
            .collect();
        let fit = fit_envelope(&series, eps).unwrap();
        assert!((fit.rate - 0.7).abs() < 1e-9);
        assert!((fit.worst_ratio - 1.0).abs() < 1e-9);
        assert!((fit.window_end - 1.0 / (0.7 * 9.210340371976184)).abs() < 1e-9);
        let flat: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, eps)).collect();
        assert!(fit_envelope(&flat, eps).is_none());
        assert!(fit_envelope(&series, 0.0).is_none());
    }

    #[test]
    fn kicks_have_exact_size_and_stay_on_simplex() {
        let mut rng = crate::rng::stream(0, 0);
        let m = matrix_kick(4, 1e-3, &mut rng);
        assert!((m.norm() - 1e-3).abs() < 1e-15);
        let s = uniform(6);
        let k = simplex_kick(&s, 1e-3, &mut rng);
        assert!(((&k - &s).norm() - 1e-3).abs() < 1e-15);
        assert!(k.iter().all(|x| *x >= 0.0) && (k.sum() - 1.0).abs() < 1e-15);
        let vertex = crate::numerics::basis(6, 0);
        let k = simplex_kick(&vertex, 1e-2, &mut rng);
        assert!(k.iter().all(|x| *x >= 0.0) && (k.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_fixed_point_passes_at_once() {
        let setup = FlowSetup::default();
        let gt = setup.ground_truth().unwrap();
        let fp = CoupledFlow::new(&gt, 3).unwrap().fixed_point();
        let out =
            check_competitive_fixed_point(&setup, &Tolerances::default(), &CompetitiveParams::default(), Some(fp))
                .unwrap();
        assert!(out.report.passed(), "{:?}", out.report);
        assert_eq!(out.report.residuals["t_final"], 0.0);
    }

    #[test]
    fn ordering_violation_short_circuits() {
        let setup = FlowSetup::default();
        let gt = setup.ground_truth().unwrap();
        let bad = PairState {
            v: gt.direction(1).clone(),
            s: gt.target_position(1),
        };
        let out =
            check_competitive_fixed_point(&setup, &Tolerances::default(), &CompetitiveParams::default(), Some(bad))
                .unwrap();
        assert_eq!(out.report.status, CheckStatus::PreconditionUnmet);
        assert!(out.report.assertions.is_empty());
    }

    #[test]
    fn zero_offshoot_is_a_saddle() {
        let params = OffshootParams {
            eps: 0.0,
            ..OffshootParams::default()
        };
        let out = check_cooperative_convergence(&FlowSetup::default(), &Tolerances::default(), &params).unwrap();
        assert_eq!(out.report.status, CheckStatus::Saddle);
    }

    #[test]
    fn unknown_check_name_is_config_error() {
        let cfg = VerifyConfig {
            checks: vec!["nope".into()],
            ..VerifyConfig::default()
        };
        assert!(matches!(run_all(&cfg), Err(Error::Config(_))));
    }
}
