//! Numerical checks of the convergence and deviation results for the
//! regression flow.
//!
//! Every check integrates one of the systems in [`crate::flow`], records named
//! residuals and turns each claim into an [`Assertion`] with an explicit
//! bound. A report passes exactly when every assertion holds and the
//! preconditions were met at initialization.

mod checks;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{build_ground_truth, GroundTruth, TrajectoryLog};
use crate::rng::{keys, stream, StreamRng};

pub use checks::{
    check_bounded_deviation, check_boundedcoop, check_competitive_fixed_point, check_cooperative_convergence,
    check_early_alignment, check_full_flow_stages, check_halving, check_higher_order, check_invariants, fit_envelope,
    offshoot_init, run_all, simulate_full_flow, CheckOutcome, EnvelopeFit,
};

/// The ground truth a check runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSetup {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub h: usize,
    pub m: f64,
    pub b0: f64,
    pub seed: u64,
}

impl Default for FlowSetup {
    fn default() -> Self {
        Self {
            d: 10,
            t: 10,
            h: 3,
            m: 1.7,
            b0: 1.0,
            seed: 0,
        }
    }
}

impl FlowSetup {
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        build_ground_truth(
            self.d,
            self.t,
            self.h,
            self.m,
            self.b0,
            &mut stream(self.seed, keys::GROUND_TRUTH),
        )
    }

    pub(crate) fn perturbation_rng(&self) -> StreamRng {
        stream(self.seed, keys::PERTURBATION)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Distance to a claimed fixed point.
    pub fixed_point: f64,
    /// Allowed decrease of a Lyapunov function between logged steps.
    pub lyapunov: f64,
    /// Allowed negative excursion of an ordering margin.
    pub ordering: f64,
    /// Required margin of the initial-loss condition.
    pub init_margin: f64,
    /// Relative slack on fitted deviation envelopes.
    pub envelope_slack: f64,
    /// Stop once `‖ẏ‖` falls below this.
    pub stationary: f64,
    /// Allowed cumulative simplex renormalization.
    pub simplex_drift: f64,
    /// Allowed increase of the loss between logged steps of the full flow.
    pub loss_increase: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fixed_point: 1e-3,
            lyapunov: 1e-8,
            ordering: 1e-9,
            init_margin: 1e-6,
            envelope_slack: 0.1,
            stationary: 1e-12,
            simplex_drift: 1e-6,
            loss_increase: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
}

/// One claim: `value ≤ bound` or `value ≥ bound`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub bound: f64,
}

impl Assertion {
    /// NaN never holds.
    pub fn holds(&self) -> bool {
        match self.relation {
            Relation::AtMost => self.value <= self.bound,
            Relation::AtLeast => self.value >= self.bound,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The initialization violates a hypothesis; nothing was asserted.
    PreconditionUnmet,
    /// The initialization is a stationary saddle; nothing was asserted.
    Saddle,
}

/// Constant fitted for an exponential deviation envelope and the window it
/// is asserted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub rate: f64,
    pub window_end: f64,
    pub fit_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    /// SHA-256 of the serialized check configuration.
    pub config_digest: String,
    pub status: CheckStatus,
    pub assertions: Vec<Assertion>,
    pub residuals: BTreeMap<String, f64>,
    pub envelopes: BTreeMap<String, Envelope>,
    pub notes: Vec<String>,
    pub trajectory: Option<String>,
}

impl CheckReport {
    pub(crate) fn new(name: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            config_digest: config_digest(config)?,
            status: CheckStatus::Fail,
            assertions: Vec::new(),
            residuals: BTreeMap::new(),
            envelopes: BTreeMap::new(),
            notes: Vec::new(),
            trajectory: None,
        })
    }

    pub(crate) fn residual(&mut self, name: &str, value: f64) {
        self.residuals.insert(name.to_string(), value);
    }

    pub(crate) fn at_most(&mut self, name: &str, value: f64, bound: f64) {
        self.residual(name, value);
        self.assertions.push(Assertion {
            name: name.to_string(),
            value,
            relation: Relation::AtMost,
            bound,
        });
    }

    pub(crate) fn at_least(&mut self, name: &str, value: f64, bound: f64) {
        self.residual(name, value);
        self.assertions.push(Assertion {
            name: name.to_string(),
            value,
            relation: Relation::AtLeast,
            bound,
        });
    }

    pub(crate) fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Sets the status from the assertions unless a precondition or saddle
    /// status was already recorded.
    pub(crate) fn finish(mut self) -> Self {
        if matches!(self.status, CheckStatus::Fail | CheckStatus::Pass) {
            self.status = if !self.assertions.is_empty() && self.assertions.iter().all(Assertion::holds) {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
        }
        self
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }

    /// Assertions that do not hold.
    pub fn failures(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| !a.holds())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize report: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("malformed report: {e}")))
    }

    /// SHA-256 of the serialized report.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

/// SHA-256 of the TOML serialization.
pub fn config_digest(config: &impl Serialize) -> Result<String> {
    let text = toml::to_string(config).map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Integration settings shared by the checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunControls {
    pub dt: f64,
    /// Final time; `None` uses the check's own default.
    pub t_max: Option<f64>,
    pub log_every: usize,
}

impl RunControls {
    pub fn new(dt: f64, t_max: Option<f64>, log_every: usize) -> Self {
        Self { dt, t_max, log_every }
    }

    /// `t_max`, or `scale / m_h^⋆`.
    pub(crate) fn horizon(&self, gt: &GroundTruth, scale: f64) -> f64 {
        self.t_max.unwrap_or(scale / gt.scale(gt.h() - 1))
    }
}

impl Default for RunControls {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_max: None,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompetitiveParams {
    /// Weight moved from the uniform scores onto the first true position.
    pub tilt: f64,
    /// Scale of the initial value `V(0) = scale · G 1_T / T`.
    pub value_scale: f64,
    pub run: RunControls,
}

impl Default for CompetitiveParams {
    fn default() -> Self {
        Self {
            tilt: 1e-2,
            value_scale: 1e-2,
            run: RunControls::new(0.8, None, 1000),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviationParams {
    /// Size of every per-head perturbation.
    pub eps: f64,
    /// Size of the offshoot of the free head in the cooperative reference.
    pub offshoot: f64,
    /// Stop once the deviation exceeds this multiple of `eps`.
    pub stop_ratio: f64,
    pub run: RunControls,
}

impl Default for DeviationParams {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            offshoot: 1e-2,
            stop_ratio: 50.0,
            run: RunControls::new(1e-2, Some(100.0), 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffshootParams {
    /// Index of the free head, `2 ≤ n ≤ h`.
    pub n: usize,
    pub eps: f64,
    pub run: RunControls,
}

impl Default for OffshootParams {
    fn default() -> Self {
        Self {
            n: 2,
            eps: 1e-2,
            run: RunControls::new(0.1, None, 100),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyParams {
    pub noise: f64,
    /// End of the early window; `None` uses `0.1 / m_1^⋆`.
    pub t_small: Option<f64>,
    pub steps: usize,
    pub cosine: f64,
}

impl Default for EarlyParams {
    fn default() -> Self {
        Self {
            noise: 1e-6,
            t_small: None,
            steps: 100,
            cosine: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageParams {
    pub noise: f64,
    /// Fraction of the initial component that counts as learned.
    pub threshold: f64,
    /// Required ratio between successive crossing times.
    pub min_ratio: f64,
    pub run: RunControls,
}

impl Default for StageParams {
    fn default() -> Self {
        Self {
            noise: 1e-6,
            threshold: 0.1,
            min_ratio: 2.0,
            run: RunControls::new(5e-2, Some(5000.0), 100),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvariantParams {
    pub run: RunControls,
}

impl Default for InvariantParams {
    fn default() -> Self {
        Self {
            run: RunControls::new(2e-2, Some(200.0), 1),
        }
    }
}

/// Everything `verify` needs: the ground truth, the tolerances and the
/// parameters of each check.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub setup: FlowSetup,
    pub tolerances: Tolerances,
    pub competitive: CompetitiveParams,
    pub deviation: DeviationParams,
    pub cooperative: OffshootParams,
    pub higher_order: OffshootParams,
    pub early: EarlyParams,
    pub stages: StageParams,
    pub invariants: InvariantParams,
    /// Checks to run; empty means all.
    pub checks: Vec<String>,
}

impl VerifyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("verify config: {e}")))
    }
}

/// A plain run of the full flow from a near-uniform start, for
/// `simulate-flow`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub setup: FlowSetup,
    /// Model heads; the number of features when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    pub noise: f64,
    /// Stop once `‖ẏ‖` falls below this.
    pub stationary: f64,
    pub run: RunControls,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            setup: FlowSetup::default(),
            heads: None,
            noise: 1e-6,
            stationary: 1e-12,
            run: RunControls::new(5e-2, None, 100),
        }
    }
}

impl SimulateConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("simulate config: {e}")))
    }
}

/// Names accepted in [`VerifyConfig::checks`].
pub const CHECK_NAMES: [&str; 9] = [
    "competitive",
    "bounded_deviation",
    "cooperative",
    "boundedcoop",
    "higher_order",
    "early_alignment",
    "full_flow_stages",
    "invariants",
    "halving",
];

pub(crate) fn log_for(gt: &GroundTruth, heads: usize) -> TrajectoryLog {
    TrajectoryLog::new(heads, gt.h())
}
