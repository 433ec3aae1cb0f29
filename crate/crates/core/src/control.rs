//! Safety-filter controllers.
//!
//! Every pair `(i, j)` shares one CBF budget
//!
//! ```text
//! A (u_i − u_j) ≤ b_raw,   A = −2(x_i − x_j)ᵀ,   b_raw = γ_pair·h_ij ± 2·CVaR term
//! ```
//!
//! The decentralized controllers split it: agent `i` enforces
//! `A u_i ≤ w_i b_raw` and agent `j` enforces `−A u_j ≤ w_j b_raw` with
//! `w_i + w_j = 1`. Adding the two recovers the joint constraint, so each
//! agent can solve its own 2-D QP from the shared observed state alone.
//!
//! The centralized baseline solves one `2N`-dimensional projection with all
//! joint constraints via Dykstra's method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::allocation::WeightMatrix;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::qp::{
    self, dykstra_project, DykstraOptions, LinearConstraint, PairTag, QpProblem, QpStatus,
    SparseHalfspace,
};
use crate::risk::{evaluate_scene_risk_with, raw_safety_value, RiskOptions, RiskReport};
use crate::types::{pair_gamma, AgentState, Scene, Vec2};
use crate::uncertainty::{pairwise_noise_cvar, CvarConvention};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerKind {
    RiskAwareDecentralized,
    FixedShareDecentralized(f64),
    Centralized,
}

impl ControllerKind {
    pub fn is_decentralized(self) -> bool {
        !matches!(self, ControllerKind::Centralized)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerKind::RiskAwareDecentralized => f.write_str("risk-aware"),
            ControllerKind::FixedShareDecentralized(w) => write!(f, "fixed:{w}"),
            ControllerKind::Centralized => f.write_str("centralized"),
        }
    }
}

impl FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "risk-aware" => Ok(ControllerKind::RiskAwareDecentralized),
            "centralized" => Ok(ControllerKind::Centralized),
            other => {
                let share = other
                    .strip_prefix("fixed:")
                    .and_then(|w| w.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "unknown controller {other:?} (expected risk-aware | fixed:<w> | centralized)"
                        ))
                    })?;
                if !(share > 0.0 && share < 1.0) {
                    return Err(Error::invalid(format!(
                        "fixed share must lie in (0, 1), got {share}"
                    )));
                }
                Ok(ControllerKind::FixedShareDecentralized(share))
            }
        }
    }
}

impl Serialize for ControllerKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ControllerKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec2,
    pub upper: Vec2,
}

impl Bounds {
    pub fn new(lower: Vec2, upper: Vec2) -> Result<Self> {
        if !lower.is_finite() || !upper.is_finite() || lower.x > upper.x || lower.y > upper.y {
            return Err(Error::invalid(format!(
                "invalid control bounds {lower:?}..{upper:?}"
            )));
        }
        Ok(Bounds { lower, upper })
    }

    pub fn symmetric(limit: f64) -> Result<Self> {
        Bounds::new(Vec2::new(-limit, -limit), Vec2::new(limit, limit))
    }

    pub fn contains(&self, u: Vec2) -> bool {
        u.x >= self.lower.x && u.x <= self.upper.x && u.y >= self.lower.y && u.y <= self.upper.y
    }

    /// Bring `u` inside the box. If the box contains the origin the direction
    /// of `u` is kept (uniform scaling); otherwise componentwise clamping.
    pub fn fit(&self, u: Vec2) -> Vec2 {
        if !self.contains(Vec2::ZERO) {
            return u.clamp(self.lower, self.upper);
        }
        let mut s: f64 = 1.0;
        for (v, lo, hi) in [
            (u.x, self.lower.x, self.upper.x),
            (u.y, self.lower.y, self.upper.y),
        ] {
            if v > hi {
                s = s.min(hi / v);
            } else if v < lo {
                s = s.min(lo / v);
            }
        }
        (u * s).clamp(self.lower, self.upper)
    }

    /// Largest absolute speed component permitted.
    pub fn max_component(&self) -> f64 {
        [self.lower.x, self.lower.y, self.upper.x, self.upper.y]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlDecision {
    pub agent: u32,
    pub u_applied: Vec2,
    pub u_nominal: Vec2,
    pub deviation: f64,
    pub qp_status: QpStatus,
    pub slack_used: f64,
    /// `(partner id, this agent's share)` for every pair constraint.
    pub weights_used: Vec<(u32, f64)>,
}

/// Everything produced in one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStep {
    pub risk: RiskReport,
    pub weights: WeightMatrix,
    pub decisions: Vec<ControlDecision>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub convention: CvarConvention,
    pub risk: RiskOptions,
    pub exec: Exec,
    pub relax: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            convention: CvarConvention::default(),
            risk: RiskOptions::default(),
            exec: Exec::default(),
            relax: true,
        }
    }
}

/// The undivided pair budget `b_raw`. Symmetric in `(i, j)`.
pub fn pair_budget(
    i: &AgentState,
    j: &AgentState,
    alpha: f64,
    convention: CvarConvention,
) -> Result<f64> {
    if i.id == j.id {
        return Err(Error::SelfPair(i.id));
    }
    let d = i.position - j.position;
    let gamma_h = pair_gamma(i, j) * raw_safety_value(i, j);
    let noise_term = match convention {
        CvarConvention::PaperLiteral => pairwise_noise_cvar(d, &i.noise, &j.noise, alpha)?,
        // CVaR of the adverse projection −dᵀ(ε_i − ε_j) = dᵀ(ε_j − ε_i).
        CvarConvention::Conservative => -pairwise_noise_cvar(d, &j.noise, &i.noise, alpha)?,
    };
    Ok(gamma_h + 2.0 * noise_term)
}

/// Joint constraint row `A = −2(x_i − x_j)` for the pair.
pub fn pair_row(i: &AgentState, j: &AgentState) -> Vec2 {
    (i.position - j.position) * -2.0
}

/// Agent `i`'s share of the pair constraint: `A u_i ≤ w_i · b_raw`.
pub fn build_pair_constraint(
    i: &AgentState,
    j: &AgentState,
    w_i: f64,
    alpha: f64,
    convention: CvarConvention,
) -> Result<LinearConstraint> {
    if !(0.0..=1.0).contains(&w_i) {
        return Err(Error::invalid(format!(
            "share must lie in [0, 1], got {w_i}"
        )));
    }
    let b_raw = pair_budget(i, j, alpha, convention)?;
    Ok(LinearConstraint {
        a: pair_row(i, j),
        b: w_i * b_raw,
        tag: PairTag { i: i.id, j: j.id },
    })
}

fn check_nominals(scene: &Scene, nominals: &[Vec2]) -> Result<()> {
    if nominals.len() != scene.len() {
        return Err(Error::DimensionMismatch {
            what: "nominal controls",
            expected: scene.len(),
            got: nominals.len(),
        });
    }
    if nominals.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite {
            what: "nominal control",
        });
    }
    Ok(())
}

/// One step of a decentralized controller: evaluate risk once, derive the
/// share table for `kind`, then solve each agent's QP independently.
pub fn decentralized_step(
    scene: &Scene,
    nominals: &[Vec2],
    bounds: Bounds,
    kind: ControllerKind,
    opts: StepOptions,
) -> Result<ControlStep> {
    check_nominals(scene, nominals)?;
    let risk = evaluate_scene_risk_with(scene, opts.risk, opts.exec)?;
    let weights = match kind {
        ControllerKind::RiskAwareDecentralized => WeightMatrix::from_risks(&risk.agent_risk)?,
        ControllerKind::FixedShareDecentralized(share) => {
            WeightMatrix::fixed_share(scene.len(), share)
        }
        ControllerKind::Centralized => {
            return Err(Error::invalid(
                "decentralized_step called with the centralized controller",
            ))
        }
    };
    let decisions = solve_with_weights(scene, nominals, bounds, &weights, opts)?;
    Ok(ControlStep {
        risk,
        weights,
        decisions,
    })
}

/// Per-agent QPs for an explicit share table. Agents only see the shared
/// scene; nothing flows between their solves.
pub fn solve_with_weights(
    scene: &Scene,
    nominals: &[Vec2],
    bounds: Bounds,
    weights: &WeightMatrix,
    opts: StepOptions,
) -> Result<Vec<ControlDecision>> {
    check_nominals(scene, nominals)?;
    let agents = scene.agents();
    let n = agents.len();
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            what: "weight rows",
            expected: n,
            got: weights.len(),
        });
    }
    let alpha = scene.alpha();
    let results = par::map_range(opts.exec, n, |i| -> Result<ControlDecision> {
        let me = &agents[i];
        let mut constraints = Vec::with_capacity(n.saturating_sub(1));
        let mut weights_used = Vec::with_capacity(n.saturating_sub(1));
        for (j, other) in agents.iter().enumerate().filter(|&(j, _)| j != i) {
            let w = weights.get(i, j);
            constraints.push(build_pair_constraint(me, other, w, alpha, opts.convention)?);
            weights_used.push((other.id, w));
        }
        let mut problem = QpProblem::new(nominals[i], bounds.lower, bounds.upper, constraints);
        problem.relax = opts.relax;
        let sol = qp::solve(&problem);
        Ok(ControlDecision {
            agent: me.id,
            u_applied: sol.u,
            u_nominal: nominals[i],
            deviation: (sol.u - nominals[i]).norm(),
            qp_status: sol.status,
            slack_used: sol.slack_used,
            weights_used,
        })
    });
    results.into_iter().collect()
}

/// Feasibility threshold for accepting a Dykstra iterate as optimal.
pub const CENTRALIZED_ACCEPT_TOL: f64 = 1e-6;

/// Joint QP over all agents: minimize `Σ‖u_i − ū_i‖²` subject to every pair
/// constraint `A(u_i − u_j) ≤ b_raw` and the boxes.
///
/// If the joint set is empty, the smallest shared slack (found by bisection
/// on Dykstra feasibility) is added to every pair constraint.
pub fn centralized_step(
    scene: &Scene,
    nominals: &[Vec2],
    bounds: Bounds,
    opts: StepOptions,
) -> Result<ControlStep> {
    check_nominals(scene, nominals)?;
    let risk = evaluate_scene_risk_with(scene, opts.risk, opts.exec)?;
    let agents = scene.agents();
    let n = agents.len();
    let alpha = scene.alpha();

    let mut halfspaces = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = pair_row(&agents[i], &agents[j]);
            let b = pair_budget(&agents[i], &agents[j], alpha, opts.convention)?;
            halfspaces.push(SparseHalfspace {
                terms: vec![
                    (2 * i, a.x),
                    (2 * i + 1, a.y),
                    (2 * j, -a.x),
                    (2 * j + 1, -a.y),
                ],
                b,
            });
        }
    }
    let start: Vec<f64> = nominals.iter().flat_map(|u| [u.x, u.y]).collect();
    let lower: Vec<f64> = (0..n)
        .flat_map(|_| [bounds.lower.x, bounds.lower.y])
        .collect();
    let upper: Vec<f64> = (0..n)
        .flat_map(|_| [bounds.upper.x, bounds.upper.y])
        .collect();
    let dykstra = DykstraOptions::default();

    let mut result = dykstra_project(&start, &lower, &upper, &halfspaces, dykstra);
    let mut status = QpStatus::Optimal;
    let mut slack = 0.0;
    if result.max_violation > CENTRALIZED_ACCEPT_TOL {
        let shifted = |s: f64| -> Vec<SparseHalfspace> {
            halfspaces
                .iter()
                .map(|h| SparseHalfspace {
                    terms: h.terms.clone(),
                    b: h.b + s,
                })
                .collect()
        };
        // Any box point is feasible once s covers its worst violation.
        let clamped: Vec<f64> = start
            .iter()
            .zip(lower.iter().zip(&upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect();
        let mut hi = halfspaces
            .iter()
            .map(|h| h.value(&clamped) - h.b)
            .fold(0.0f64, f64::max);
        let mut lo = 0.0;
        let probe = DykstraOptions {
            max_iterations: 2_000,
            ..dykstra
        };
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let r = dykstra_project(&start, &lower, &upper, &shifted(mid), probe);
            if r.max_violation <= CENTRALIZED_ACCEPT_TOL {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-9 * (1.0 + hi) {
                break;
            }
        }
        slack = hi;
        result = dykstra_project(&start, &lower, &upper, &shifted(hi), dykstra);
        status = if opts.relax {
            QpStatus::RelaxedFeasible
        } else {
            QpStatus::Infeasible
        };
        log::debug!("centralized QP relaxed with shared slack {slack:.6}");
    } else if !result.converged {
        log::debug!(
            "centralized QP hit the iteration cap with violation {:.2e}; accepting",
            result.max_violation
        );
    }

    let decisions = (0..n)
        .map(|i| {
            let u = Vec2::new(result.u[2 * i], result.u[2 * i + 1]);
            ControlDecision {
                agent: agents[i].id,
                u_applied: u,
                u_nominal: nominals[i],
                deviation: (u - nominals[i]).norm(),
                qp_status: status,
                slack_used: slack,
                weights_used: Vec::new(),
            }
        })
        .collect();
    Ok(ControlStep {
        risk,
        weights: WeightMatrix::uniform(n, 0.5),
        decisions,
    })
}

/// Dispatch on the controller kind.
pub fn control_step(
    scene: &Scene,
    nominals: &[Vec2],
    bounds: Bounds,
    kind: ControllerKind,
    opts: StepOptions,
) -> Result<ControlStep> {
    match kind {
        ControllerKind::Centralized => centralized_step(scene, nominals, bounds, opts),
        _ => decentralized_step(scene, nominals, bounds, kind, opts),
    }
}

/// Proportional move-to-goal law `ū = −k (x − x_target)`.
pub fn move_to_goal_nominal(state: &AgentState, target: Vec2, k: f64) -> Vec2 {
    (state.position - target) * -k
}

/// Rotate the nominal clockwise by `clockwise_angle` radians when deadlocked.
pub fn right_hand_deadlock_adjust(
    nominal: Vec2,
    deadlock_detected: bool,
    clockwise_angle: f64,
) -> Vec2 {
    if deadlock_detected {
        nominal.rotated(-clockwise_angle)
    } else {
        nominal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeadlockConfig {
    pub enabled: bool,
    /// Below this speed (m/s) an agent counts as stalled.
    pub speed_eps: f64,
    /// Stalls closer than this to the goal (m) are arrivals, not deadlocks.
    pub goal_eps: f64,
    /// Consecutive stalled steps before the heuristic engages.
    pub trigger_steps: usize,
    pub clockwise_deg: f64,
    /// The heuristic disengages once speed reaches this value (m/s).
    pub recover_speed: f64,
}

impl DeadlockConfig {
    pub fn disabled() -> Self {
        DeadlockConfig {
            enabled: false,
            speed_eps: 0.0,
            goal_eps: 0.0,
            trigger_steps: 0,
            clockwise_deg: 0.0,
            recover_speed: 0.0,
        }
    }

    /// `v_eps = 0.05·u_max`, `d_eps = 2·R_safe`, 25 steps, 45° clockwise.
    pub fn standard(u_max: f64, safety_radius: f64) -> Self {
        DeadlockConfig {
            enabled: true,
            speed_eps: 0.05 * u_max,
            goal_eps: 2.0 * safety_radius,
            trigger_steps: 25,
            clockwise_deg: 45.0,
            recover_speed: 0.25 * u_max,
        }
    }
}

/// Per-agent stall counter with hysteresis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeadlockMonitor {
    stalled_for: usize,
    engaged: bool,
}

impl DeadlockMonitor {
    pub fn engaged(&self) -> bool {
        self.engaged
    }

    pub fn update(&mut self, cfg: &DeadlockConfig, speed: f64, distance_to_goal: f64) -> bool {
        if !cfg.enabled {
            return false;
        }
        if speed < cfg.speed_eps && distance_to_goal > cfg.goal_eps {
            self.stalled_for += 1;
        } else {
            self.stalled_for = 0;
        }
        if self.stalled_for >= cfg.trigger_steps {
            self.engaged = true;
        } else if self.engaged && (speed >= cfg.recover_speed || distance_to_goal <= cfg.goal_eps) {
            self.engaged = false;
        }
        self.engaged
    }
}

/// Acceleration that drives the velocity toward `commanded` with gain
/// `gain` (1/s), saturated componentwise at `accel_limit`.
pub fn velocity_tracking_accel(
    commanded: Vec2,
    velocity: Vec2,
    gain: f64,
    accel_limit: f64,
) -> Vec2 {
    let a = (commanded - velocity) * gain;
    a.clamp(
        Vec2::new(-accel_limit, -accel_limit),
        Vec2::new(accel_limit, accel_limit),
    )
}
