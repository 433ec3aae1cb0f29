//! Seeded closed-loop simulation.
//!
//! Each step: nominal controls → risk → shares → per-agent QPs → dynamics
//! with fresh noise. Noise for agent `id` at step `t` comes from a ChaCha8
//! stream keyed by `(seed, id)` and positioned at `t`, so draws never depend
//! on evaluation order or on which other agents exist.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::WeightMatrix;
use crate::control::{
    control_step, move_to_goal_nominal, pair_budget, pair_row, right_hand_deadlock_adjust,
    velocity_tracking_accel, Bounds, ControlDecision, ControllerKind, DeadlockConfig,
    DeadlockMonitor, StepOptions,
};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::qp::QpStatus;
use crate::risk::{RiskOptions, RiskReport};
use crate::types::{pair_safety_radius, AgentState, Scene, Vec2};
use crate::uncertainty::{sample_noise, CvarConvention};

/// Words reserved per step in each agent's stream. Two normal draws use a
/// handful; the rest is headroom for rejection sampling.
const WORDS_PER_STEP: u128 = 1 << 16;

/// Distances below `R_pair − COLLISION_TOL` count as collisions.
pub const COLLISION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dynamics {
    SingleIntegrator,
    DoubleIntegrator,
}

/// Where the disturbance enters a double integrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseChannel {
    /// `ẋ = v + ε`, `v̇ = u`.
    #[default]
    Position,
    /// `ẋ = v`, `v̇ = u + ε`.
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NominalPlanner {
    /// `ū = −k (x − x_target)`; an agent is done within `goal_tolerance`.
    MoveToGoal { gain: f64 },
    /// Ramp agents head for `merge_point`; agents on the main lane (`y ≈ 0`)
    /// drive along +x at their cruise speed with a lateral pull back to the
    /// lane centre. An agent is done once it passes its target's x.
    LaneFollow {
        merge_point: Vec2,
        cruise_speeds: Vec<f64>,
        lateral_gain: f64,
        lane_half_width: f64,
    },
}

impl NominalPlanner {
    fn nominal(&self, index: usize, agent: &AgentState, target: Vec2) -> Vec2 {
        match self {
            NominalPlanner::MoveToGoal { gain } => move_to_goal_nominal(agent, target, *gain),
            NominalPlanner::LaneFollow {
                merge_point,
                cruise_speeds,
                lateral_gain,
                lane_half_width,
            } => {
                let cruise = cruise_speeds[index];
                let p = agent.position;
                if p.x < merge_point.x && p.y.abs() > *lane_half_width {
                    let to_merge = *merge_point - p;
                    to_merge * (cruise / to_merge.norm())
                } else {
                    Vec2::new(cruise, -lateral_gain * p.y)
                }
            }
        }
    }

    /// Remaining distance to the agent's goal (0 once reached).
    pub fn remaining(&self, agent: &AgentState, target: Vec2) -> f64 {
        match self {
            NominalPlanner::MoveToGoal { .. } => agent.position.distance(target),
            NominalPlanner::LaneFollow { .. } => (target.x - agent.position.x).max(0.0),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            NominalPlanner::MoveToGoal { gain } if !(gain.is_finite() && *gain > 0.0) => Err(
                Error::invalid(format!("move-to-goal gain must be > 0, got {gain}")),
            ),
            NominalPlanner::LaneFollow { cruise_speeds, .. } if cruise_speeds.len() != n => {
                Err(Error::DimensionMismatch {
                    what: "cruise speeds",
                    expected: n,
                    got: cruise_speeds.len(),
                })
            }
            NominalPlanner::LaneFollow {
                cruise_speeds,
                lateral_gain,
                lane_half_width,
                ..
            } if cruise_speeds.iter().any(|s| !s.is_finite() || *s < 0.0)
                || !lateral_gain.is_finite()
                || !lane_half_width.is_finite() =>
            {
                Err(Error::invalid(
                    "lane-follow parameters must be finite and speeds non-negative",
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon_steps: usize,
    pub dynamics: Dynamics,
    pub u_min: Vec2,
    pub u_max: Vec2,
    pub alpha: f64,
    pub convention: CvarConvention,
    pub controller: ControllerKind,
    pub seed: u64,
    pub goal_tolerance: f64,
    pub nominal: NominalPlanner,
    pub deadlock: DeadlockConfig,
    /// Gain (1/s) of the velocity-tracking layer for double integrators.
    pub tracking_gain: f64,
    /// Componentwise acceleration limit (m/s²) for double integrators.
    pub accel_limit: f64,
    #[serde(default)]
    pub noise_channel: NoiseChannel,
    /// Deviations above this count toward `deviation_active_duration`.
    pub deviation_threshold: f64,
    /// Pairs farther apart than this are ignored in `R_i`. Unset = all pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_cutoff: Option<f64>,
    /// Allow shared-slack relaxation of infeasible QPs.
    pub relax_infeasible: bool,
    #[serde(default)]
    pub exec: Exec,
}

impl SimConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.horizon_steps == 0 {
            return Err(Error::invalid("horizon_steps must be at least 1"));
        }
        Bounds::new(self.u_min, self.u_max)?;
        crate::types::check_alpha(self.alpha)?;
        for (name, v) in [
            ("goal_tolerance", self.goal_tolerance),
            ("tracking_gain", self.tracking_gain),
            ("accel_limit", self.accel_limit),
            ("deviation_threshold", self.deviation_threshold),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Some(c) = self.risk_cutoff {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("risk_cutoff must be > 0, got {c}")));
            }
        }
        self.nominal.validate(n)
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            lower: self.u_min,
            upper: self.u_max,
        }
    }

    fn step_options(&self) -> StepOptions {
        StepOptions {
            convention: self.convention,
            risk: RiskOptions {
                neighbor_cutoff: self.risk_cutoff.unwrap_or(f64::INFINITY),
            },
            exec: self.exec,
            relax: self.relax_infeasible,
        }
    }
}

/// Forward-Euler step with the disturbance on the position rate.
///
/// Single integrator: `x += (u + ε)·dt`, `v = u + ε`.
/// Double integrator: `x += (v + ε)·dt`, `v += u·dt`.
pub fn step_dynamics(
    state: &AgentState,
    u: Vec2,
    noise_sample: Vec2,
    dt: f64,
    dynamics: Dynamics,
) -> AgentState {
    step_dynamics_with(state, u, noise_sample, dt, dynamics, NoiseChannel::Position)
}

pub fn step_dynamics_with(
    state: &AgentState,
    u: Vec2,
    noise_sample: Vec2,
    dt: f64,
    dynamics: Dynamics,
    channel: NoiseChannel,
) -> AgentState {
    let mut next = *state;
    match dynamics {
        Dynamics::SingleIntegrator => {
            let v = u + noise_sample;
            next.position += v * dt;
            next.velocity = v;
        }
        Dynamics::DoubleIntegrator => match channel {
            NoiseChannel::Position => {
                next.position += (state.velocity + noise_sample) * dt;
                next.velocity += u * dt;
            }
            NoiseChannel::Velocity => {
                next.position += state.velocity * dt;
                next.velocity += (u + noise_sample) * dt;
            }
        },
    }
    next
}

/// The disturbance drawn for agent `id` at `step`.
pub fn noise_draw(seed: u64, id: u32, step: usize, agent: &AgentState) -> Vec2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(id));
    rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    sample_noise(&agent.noise, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairRecord {
    pub i: u32,
    pub j: u32,
    pub distance: f64,
    pub safety_radius: f64,
    pub h: f64,
    pub loss: f64,
    pub w_i: f64,
    /// Undivided budget `b_raw` of the pair.
    pub b_raw: f64,
    /// `A(u_i − u_j)` for the applied controls.
    pub joint_lhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    /// States observed at the start of the step.
    pub agents: Vec<AgentState>,
    pub decisions: Vec<ControlDecision>,
    pub risk: RiskReport,
    pub weights: WeightMatrix,
    /// Ordered pairs `(i, j)`, `i ≠ j`, in scene order.
    pub pairs: Vec<PairRecord>,
    pub deadlocked: Vec<bool>,
}

impl StepRecord {
    pub fn all_optimal(&self) -> bool {
        self.decisions
            .iter()
            .all(|d| d.qp_status == QpStatus::Optimal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub steps: usize,
    pub min_pairwise_distance: f64,
    /// Smallest `distance − R_pair` seen.
    pub min_safety_margin: f64,
    pub collision_occurred: bool,
    pub completion_time: Option<f64>,
    /// `Σ_t Σ_i ‖u_i − ū_i‖ · dt`.
    pub total_deviation_integral: f64,
    /// Largest instantaneous `‖u_i − ū_i‖` over all agents and steps.
    pub max_individual_deviation: f64,
    /// Time during which some agent deviates by more than the threshold.
    pub deviation_active_duration: f64,
    /// Steps in which at least one QP was relaxed or infeasible.
    pub relaxed_step_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub config: SimConfig,
    pub loss_offset_c: f64,
    pub targets: Vec<Vec2>,
    pub steps: Vec<StepRecord>,
    pub final_agents: Vec<AgentState>,
    pub metrics: Metrics,
}

/// Run the closed loop until every agent reaches its goal or the horizon.
pub fn run(initial: &Scene, config: &SimConfig, targets: &[Vec2]) -> Result<TrajectoryLog> {
    let n = initial.len();
    config.validate(n)?;
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            what: "targets",
            expected: n,
            got: targets.len(),
        });
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { what: "target" });
    }
    let mut scene = initial.with_alpha(config.alpha)?;
    let bounds = config.bounds();
    let opts = config.step_options();
    let mut monitors = vec![DeadlockMonitor::default(); n];
    let mut steps = Vec::new();
    let mut completion_time = None;
    let rotation = config.deadlock.clockwise_deg.to_radians();

    for t in 0..config.horizon_steps {
        let agents = scene.agents().to_vec();
        let deadlocked: Vec<bool> = monitors.iter().map(DeadlockMonitor::engaged).collect();
        let nominals: Vec<Vec2> = agents
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let raw = config.nominal.nominal(k, a, targets[k]);
                bounds.fit(right_hand_deadlock_adjust(raw, deadlocked[k], rotation))
            })
            .collect();
        let step = control_step(&scene, &nominals, bounds, config.controller, opts)?;
        let pairs = pair_records(
            &scene,
            &step.risk,
            &step.weights,
            &step.decisions,
            config.convention,
        )?;

        let next: Vec<AgentState> = agents
            .iter()
            .zip(&step.decisions)
            .map(|(a, d)| {
                let noise = noise_draw(config.seed, a.id, t, a);
                let input = match config.dynamics {
                    Dynamics::SingleIntegrator => d.u_applied,
                    Dynamics::DoubleIntegrator => velocity_tracking_accel(
                        d.u_applied,
                        a.velocity,
                        config.tracking_gain,
                        config.accel_limit,
                    ),
                };
                step_dynamics_with(
                    a,
                    input,
                    noise,
                    config.dt,
                    config.dynamics,
                    config.noise_channel,
                )
            })
            .collect();
        // Stalls are judged on the commanded speed; the realized velocity
        // carries the disturbance and would keep resetting the counter.
        for (k, (m, a)) in monitors.iter_mut().zip(&next).enumerate() {
            let speed = step.decisions[k].u_applied.norm();
            m.update(
                &config.deadlock,
                speed,
                config.nominal.remaining(a, targets[k]),
            );
        }
        let mut risk = step.risk;
        risk.step = t;
        steps.push(StepRecord {
            step: t,
            time: t as f64 * config.dt,
            agents,
            decisions: step.decisions,
            risk,
            weights: step.weights,
            pairs,
            deadlocked,
        });
        scene = scene.with_agents(next)?;

        let done = scene
            .agents()
            .iter()
            .zip(targets)
            .all(|(a, &tgt)| config.nominal.remaining(a, tgt) <= config.goal_tolerance);
        if done {
            completion_time = Some((t + 1) as f64 * config.dt);
            break;
        }
    }

    let final_agents = scene.agents().to_vec();
    let metrics = compute_metrics(&steps, &final_agents, config, completion_time);
    Ok(TrajectoryLog {
        config: config.clone(),
        loss_offset_c: scene.loss_offset_c(),
        targets: targets.to_vec(),
        steps,
        final_agents,
        metrics,
    })
}

fn pair_records(
    scene: &Scene,
    risk: &RiskReport,
    weights: &WeightMatrix,
    decisions: &[ControlDecision],
    convention: CvarConvention,
) -> Result<Vec<PairRecord>> {
    let agents = scene.agents();
    let n = agents.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let (a, b) = (&agents[i], &agents[j]);
            let r = pair_safety_radius(a, b);
            let distance = a.position.distance(b.position);
            out.push(PairRecord {
                i: a.id,
                j: b.id,
                distance,
                safety_radius: r,
                h: (a.position - b.position).norm_squared() - r * r,
                loss: risk.pair_loss[i][j],
                w_i: weights.get(i, j),
                b_raw: pair_budget(a, b, scene.alpha(), convention)?,
                joint_lhs: pair_row(a, b).dot(decisions[i].u_applied - decisions[j].u_applied),
            });
        }
    }
    Ok(out)
}

/// Smallest pairwise distance and smallest `distance − R_pair` in a state.
fn distance_extremes(agents: &[AgentState]) -> (f64, f64) {
    let mut min_d = f64::INFINITY;
    let mut min_margin = f64::INFINITY;
    for (k, a) in agents.iter().enumerate() {
        for b in &agents[k + 1..] {
            let d = a.position.distance(b.position);
            min_d = min_d.min(d);
            min_margin = min_margin.min(d - pair_safety_radius(a, b));
        }
    }
    (min_d, min_margin)
}

pub fn compute_metrics(
    steps: &[StepRecord],
    final_agents: &[AgentState],
    config: &SimConfig,
    completion_time: Option<f64>,
) -> Metrics {
    let (mut min_d, mut min_margin) = distance_extremes(final_agents);
    let mut total = 0.0;
    let mut max_dev: f64 = 0.0;
    let mut active_steps = 0usize;
    let mut relaxed = 0usize;
    for s in steps {
        let (d, m) = distance_extremes(&s.agents);
        min_d = min_d.min(d);
        min_margin = min_margin.min(m);
        total += s.decisions.iter().map(|d| d.deviation).sum::<f64>() * config.dt;
        max_dev = s
            .decisions
            .iter()
            .fold(max_dev, |acc, d| acc.max(d.deviation));
        if s.decisions
            .iter()
            .any(|d| d.deviation > config.deviation_threshold)
        {
            active_steps += 1;
        }
        if !s.all_optimal() {
            relaxed += 1;
        }
    }
    Metrics {
        steps: steps.len(),
        min_pairwise_distance: min_d,
        min_safety_margin: min_margin,
        collision_occurred: min_margin < -COLLISION_TOL,
        completion_time,
        total_deviation_integral: total,
        max_individual_deviation: max_dev,
        deviation_active_duration: active_steps as f64 * config.dt,
        relaxed_step_count: relaxed,
    }
}

/// `deviation_active_duration` recomputed for another threshold.
pub fn deviation_active_duration(log: &TrajectoryLog, threshold: f64) -> f64 {
    let active = log
        .steps
        .iter()
        .filter(|s| s.decisions.iter().any(|d| d.deviation > threshold))
        .count();
    active as f64 * log.config.dt
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

impl TrajectoryLog {
    /// Write `trajectory.csv`, `pairs.csv` and `metrics.json-lines` into `dir`.
    pub fn write_to_dir(&self, dir: &Path, label: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_trajectory_csv(&dir.join("trajectory.csv"))?;
        self.write_pairs_csv(&dir.join("pairs.csv"))?;
        self.write_metrics_json(&dir.join("metrics.json-lines"), label)
    }

    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record([
            "step",
            "time",
            "agent",
            "px",
            "py",
            "vx",
            "vy",
            "ux",
            "uy",
            "deviation",
            "qp_status",
        ])
        .map_err(csv_err)?;
        for s in &self.steps {
            for (a, d) in s.agents.iter().zip(&s.decisions) {
                w.write_record(&[
                    s.step.to_string(),
                    s.time.to_string(),
                    a.id.to_string(),
                    a.position.x.to_string(),
                    a.position.y.to_string(),
                    a.velocity.x.to_string(),
                    a.velocity.y.to_string(),
                    d.u_applied.x.to_string(),
                    d.u_applied.y.to_string(),
                    d.deviation.to_string(),
                    d.qp_status.as_str().to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_pairs_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["step", "i", "j", "distance", "h_ij", "L_ij", "w_i"])
            .map_err(csv_err)?;
        for s in &self.steps {
            for p in &s.pairs {
                w.write_record(&[
                    s.step.to_string(),
                    p.i.to_string(),
                    p.j.to_string(),
                    p.distance.to_string(),
                    p.h.to_string(),
                    p.loss.to_string(),
                    p.w_i.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_metrics_json(&self, path: &Path, label: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            label: &'a str,
            controller: String,
            seed: u64,
            dt: f64,
            loss_offset_c: f64,
            #[serde(flatten)]
            metrics: &'a Metrics,
        }
        let line = Line {
            label,
            controller: self.config.controller.to_string(),
            seed: self.config.seed,
            dt: self.config.dt,
            loss_offset_c: self.loss_offset_c,
            metrics: &self.metrics,
        };
        let mut f = create(path)?;
        let json = serde_json::to_string(&line)
            .map_err(|e| Error::invalid(format!("metrics serialization: {e}")))?;
        writeln!(f, "{json}")
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }
}
