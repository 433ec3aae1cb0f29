//! Built-in scenarios: a three-vehicle highway on-ramp merge and an
//! N-agent antipodal position swap.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{ControllerKind, DeadlockConfig};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::sim::{Dynamics, NoiseChannel, NominalPlanner, SimConfig};
use crate::types::{default_loss_offset, pair_safety_radius, AgentState, NoiseModel, Scene, Vec2};
use crate::uncertainty::CvarConvention;

/// A scene with its simulation settings and per-agent targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub scene: Scene,
    pub config: SimConfig,
    pub targets: Vec<Vec2>,
    /// Present for ramp-merge scenarios; drives [`Scenario::trial`].
    pub ramp: Option<RampSetup>,
}

/// File form of a [`Scenario`]. The scene alpha is taken from `sim.alpha`;
/// an absent `loss_offset_c` is filled by [`default_loss_offset`] over the
/// agents and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_offset_c: Option<f64>,
    pub targets: Vec<Vec2>,
    pub sim: SimConfig,
    pub agents: Vec<AgentState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<RampSetup>,
}

impl ScenarioSpec {
    pub fn build(self) -> Result<Scenario> {
        if self.targets.len() != self.agents.len() {
            return Err(Error::DimensionMismatch {
                what: "targets",
                expected: self.agents.len(),
                got: self.targets.len(),
            });
        }
        let c = self
            .loss_offset_c
            .unwrap_or_else(|| default_loss_offset(&self.agents, &self.targets));
        let scene = Scene::new(self.agents, self.sim.alpha, c)?;
        self.sim.validate(scene.len())?;
        Ok(Scenario {
            name: self.name,
            scene,
            config: self.sim,
            targets: self.targets,
            ramp: self.ramp,
        })
    }
}

impl From<&Scenario> for ScenarioSpec {
    fn from(s: &Scenario) -> Self {
        ScenarioSpec {
            name: s.name.clone(),
            loss_offset_c: Some(s.scene.loss_offset_c()),
            targets: s.targets.clone(),
            sim: s.config.clone(),
            agents: s.scene.agents().to_vec(),
            ramp: s.ramp,
        }
    }
}

/// Straight main lane along +x at `y = 0`, ramp joining from below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampGeometry {
    pub lane_length: f64,
    pub merge_x: f64,
    pub ramp_angle_deg: f64,
}

impl Default for RampGeometry {
    fn default() -> Self {
        RampGeometry {
            lane_length: 120.0,
            merge_x: 80.0,
            ramp_angle_deg: 15.0,
        }
    }
}

impl RampGeometry {
    pub fn merge_point(&self) -> Vec2 {
        Vec2::new(self.merge_x, 0.0)
    }

    /// Unit vector along the ramp toward the merge point.
    pub fn ramp_direction(&self) -> Vec2 {
        Vec2::new(1.0, 0.0).rotated(self.ramp_angle_deg.to_radians())
    }

    /// Point on the ramp `s` metres before the merge point.
    pub fn ramp_point(&self, s: f64) -> Vec2 {
        self.merge_point() - self.ramp_direction() * s
    }

    pub fn lane_end(&self) -> Vec2 {
        Vec2::new(self.lane_length, 0.0)
    }
}

/// Uniform ranges `[lo, hi]` for randomized ramp-merge trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampRandomization {
    /// Leading ramp vehicle: distance before the merge point (m).
    pub lead_ramp_s: [f64; 2],
    /// Main-lane vehicle: x position (m).
    pub main_x: [f64; 2],
    /// Trailing ramp vehicle: distance before the merge point (m).
    pub trail_ramp_s: [f64; 2],
    /// Initial speed along the path (m/s).
    pub speed: [f64; 2],
    /// Cruise speed each vehicle accelerates or brakes toward (m/s).
    pub cruise_speed: [f64; 2],
    /// Resample if any initial gap is below `R_pair + min_clearance`.
    pub min_clearance: f64,
}

impl Default for RampRandomization {
    fn default() -> Self {
        RampRandomization {
            lead_ramp_s: [20.0, 30.0],
            main_x: [30.0, 42.0],
            trail_ramp_s: [45.0, 60.0],
            speed: [10.0, 14.0],
            cruise_speed: [10.0, 16.0],
            min_clearance: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSetup {
    pub geometry: RampGeometry,
    pub randomization: RampRandomization,
}

/// Ramp-merge tuning shared by the fixed and randomized instances.
pub const RAMP_SAFETY_RADIUS: f64 = 5.0;
pub const RAMP_GAMMA: f64 = 2.0;
pub const RAMP_NOISE_SIGMA: f64 = 0.1;
pub const RAMP_ALPHA: f64 = 0.999;

fn ramp_config(cruise_speeds: Vec<f64>, geometry: &RampGeometry) -> SimConfig {
    SimConfig {
        dt: 0.02,
        horizon_steps: 2_000,
        dynamics: Dynamics::DoubleIntegrator,
        u_min: Vec2::new(0.0, -5.0),
        u_max: Vec2::new(25.0, 5.0),
        alpha: RAMP_ALPHA,
        convention: CvarConvention::Conservative,
        controller: ControllerKind::RiskAwareDecentralized,
        seed: 0,
        goal_tolerance: 0.0,
        nominal: NominalPlanner::LaneFollow {
            merge_point: geometry.merge_point(),
            cruise_speeds,
            lateral_gain: 1.0,
            lane_half_width: 0.5,
        },
        deadlock: DeadlockConfig::disabled(),
        tracking_gain: 5.0,
        accel_limit: 8.0,
        noise_channel: NoiseChannel::Position,
        deviation_threshold: 1e-6,
        risk_cutoff: None,
        relax_infeasible: true,
        exec: Exec::default(),
    }
}

struct RampLayout {
    lead_s: f64,
    main_x: f64,
    trail_s: f64,
    speeds: [f64; 3],
    cruise: [f64; 3],
}

fn ramp_from_layout(
    geometry: RampGeometry,
    randomization: RampRandomization,
    layout: &RampLayout,
) -> Result<Scenario> {
    let noise = NoiseModel::isotropic(RAMP_NOISE_SIGMA)?;
    let dir = geometry.ramp_direction();
    let along = [dir, Vec2::new(1.0, 0.0), dir];
    let positions = [
        geometry.ramp_point(layout.lead_s),
        Vec2::new(layout.main_x, 0.0),
        geometry.ramp_point(layout.trail_s),
    ];
    let agents = (0..3)
        .map(|k| {
            AgentState::new(
                k as u32 + 1,
                positions[k],
                along[k] * layout.speeds[k],
                RAMP_SAFETY_RADIUS,
                RAMP_GAMMA,
                noise,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = vec![geometry.lane_end(); 3];
    let c = default_loss_offset(
        &agents,
        &[geometry.ramp_point(geometry.merge_x), geometry.lane_end()],
    );
    let scene = Scene::new(agents, RAMP_ALPHA, c)?;
    Ok(Scenario {
        name: "ramp".into(),
        config: ramp_config(layout.cruise.to_vec(), &geometry),
        scene,
        targets,
        ramp: Some(RampSetup {
            geometry,
            randomization,
        }),
    })
}

/// Vehicles 1 and 3 on the ramp, vehicle 2 on the main lane, all heading
/// for the lane end. Vehicle 2 cruises fastest and has to pass the merge
/// point between the two ramp vehicles.
pub fn scenario_ramp_merge() -> Scenario {
    let layout = RampLayout {
        lead_s: 25.0,
        main_x: 36.0,
        trail_s: 52.0,
        speeds: [12.0, 12.0, 12.0],
        cruise: [12.0, 15.0, 13.0],
    };
    ramp_from_layout(
        RampGeometry::default(),
        RampRandomization::default(),
        &layout,
    )
    .expect("built-in ramp scenario is valid")
}

/// Draw a ramp-merge instance from the uniform ranges in `randomization`.
/// The same seed always yields the same layout.
pub fn randomized_ramp_merge(
    geometry: RampGeometry,
    randomization: RampRandomization,
    seed: u64,
) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |[lo, hi]: [f64; 2]| -> Result<f64> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!(
                "bad randomization range [{lo}, {hi}]"
            )));
        }
        Ok(if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        })
    };
    for _ in 0..1_000 {
        let r = &randomization;
        let layout = RampLayout {
            lead_s: draw(r.lead_ramp_s)?,
            main_x: draw(r.main_x)?,
            trail_s: draw(r.trail_ramp_s)?,
            speeds: [draw(r.speed)?, draw(r.speed)?, draw(r.speed)?],
            cruise: [
                draw(r.cruise_speed)?,
                draw(r.cruise_speed)?,
                draw(r.cruise_speed)?,
            ],
        };
        let mut scenario = ramp_from_layout(geometry, randomization, &layout)?;
        let agents = scenario.scene.agents();
        let clear = agents.iter().enumerate().all(|(k, a)| {
            agents[k + 1..].iter().all(|b| {
                a.position.distance(b.position) >= pair_safety_radius(a, b) + r.min_clearance
            })
        });
        if clear {
            scenario.config.seed = seed;
            return Ok(scenario);
        }
    }
    Err(Error::invalid(
        "randomization ranges never produced a collision-free start",
    ))
}

pub const SWAP_RADIUS: f64 = 20.0;
pub const SWAP_SAFETY_RADIUS: f64 = 1.5;
pub const SWAP_GAMMA: f64 = 1.0;
pub const SWAP_NOISE_SIGMA: f64 = 0.05;
pub const SWAP_U_MAX: f64 = 2.0;

/// `n` agents evenly spaced on a circle, each heading for the antipode.
pub fn scenario_swap(n: usize) -> Result<Scenario> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "swap needs at least 2 agents, got {n}"
        )));
    }
    let noise = NoiseModel::isotropic(SWAP_NOISE_SIGMA)?;
    let start = Vec2::new(SWAP_RADIUS, 0.0);
    let positions: Vec<Vec2> = (0..n)
        .map(|k| start.rotated(k as f64 * TAU / n as f64))
        .collect();
    let agents = positions
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            AgentState::new(
                k as u32,
                p,
                Vec2::ZERO,
                SWAP_SAFETY_RADIUS,
                SWAP_GAMMA,
                noise,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec2> = positions.iter().map(|&p| -p).collect();
    let scene = Scene::with_default_offset(agents, 0.95, &targets)?;
    let config = SimConfig {
        dt: 0.02,
        horizon_steps: 10_000,
        dynamics: Dynamics::SingleIntegrator,
        u_min: Vec2::new(-SWAP_U_MAX, -SWAP_U_MAX),
        u_max: Vec2::new(SWAP_U_MAX, SWAP_U_MAX),
        alpha: 0.95,
        convention: CvarConvention::Conservative,
        controller: ControllerKind::RiskAwareDecentralized,
        seed: 7,
        goal_tolerance: 0.1,
        nominal: NominalPlanner::MoveToGoal { gain: 1.0 },
        deadlock: DeadlockConfig::standard(SWAP_U_MAX, SWAP_SAFETY_RADIUS),
        tracking_gain: 5.0,
        accel_limit: 10.0,
        noise_channel: NoiseChannel::Position,
        deviation_threshold: 1e-6,
        risk_cutoff: None,
        relax_infeasible: true,
        exec: Exec::default(),
    };
    Ok(Scenario {
        name: "swap".into(),
        scene,
        config,
        targets,
        ramp: None,
    })
}

impl Scenario {
    /// Instance `seed` of a batch: ramp scenarios draw a fresh layout, other
    /// scenarios only change the noise seed.
    pub fn trial(&self, seed: u64) -> Result<Scenario> {
        match &self.ramp {
            Some(setup) => {
                let mut s = randomized_ramp_merge(setup.geometry, setup.randomization, seed)?;
                let cruise = match &s.config.nominal {
                    NominalPlanner::LaneFollow { cruise_speeds, .. } => cruise_speeds.clone(),
                    NominalPlanner::MoveToGoal { .. } => {
                        unreachable!("ramp scenarios use lane following")
                    }
                };
                // Keep every setting of the base config except the drawn speeds.
                s.config = self.config.clone();
                if let NominalPlanner::LaneFollow { cruise_speeds, .. } = &mut s.config.nominal {
                    *cruise_speeds = cruise;
                }
                s.config.seed = seed;
                s.name = self.name.clone();
                Ok(s)
            }
            None => {
                let mut s = self.clone();
                s.config.seed = seed;
                Ok(s)
            }
        }
    }

    pub fn run(&self) -> Result<crate::sim::TrajectoryLog> {
        crate::sim::run(&self.scene, &self.config, &self.targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::evaluate_scene_risk;

    #[test]
    fn spec_roundtrip_rebuilds_the_same_scenario() {
        for s in [scenario_ramp_merge(), scenario_swap(4).unwrap()] {
            let json = serde_json::to_string(&ScenarioSpec::from(&s)).unwrap();
            let back: ScenarioSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back.build().unwrap(), s);
        }
    }

    #[test]
    fn spec_rejects_target_count_mismatch() {
        let mut spec = ScenarioSpec::from(&scenario_swap(3).unwrap());
        spec.targets.pop();
        assert!(spec.build().is_err());
    }

    #[test]
    fn ramp_shape() {
        let s = scenario_ramp_merge();
        assert_eq!(s.scene.len(), 3);
        assert_eq!(s.config.alpha, 0.999);
        assert_eq!(s.scene.alpha(), 0.999);
        let a = s.scene.agents();
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!(a[i].position.distance(a[j].position) > 5.0);
            }
        }
    }

    #[test]
    fn randomized_ramp_is_seeded_and_safe_at_start() {
        let g = RampGeometry::default();
        let r = RampRandomization::default();
        let a = randomized_ramp_merge(g, r, 5).unwrap();
        assert_eq!(a, randomized_ramp_merge(g, r, 5).unwrap());
        assert_ne!(a.scene, randomized_ramp_merge(g, r, 6).unwrap().scene);
        for seed in 0..200 {
            let s = randomized_ramp_merge(g, r, seed).unwrap();
            let ag = s.scene.agents();
            for i in 0..3 {
                for j in (i + 1)..3 {
                    assert!(ag[i].position.distance(ag[j].position) >= 7.0);
                }
            }
        }
    }

    #[test]
    fn swap_targets_are_a_permutation() {
        let s = scenario_swap(6).unwrap();
        assert_eq!(s.scene.len(), 6);
        let pos: Vec<Vec2> = s.scene.agents().iter().map(|a| a.position).collect();
        for t in &s.targets {
            assert!(pos.iter().any(|p| p.distance(*t) < 1e-9));
        }
        assert!(scenario_swap(1).is_err());
    }

    #[test]
    fn swap_start_has_uniform_risk() {
        let s = scenario_swap(6).unwrap();
        let r = evaluate_scene_risk(&s.scene).unwrap();
        for v in &r.agent_risk {
            assert!((v - r.agent_risk[0]).abs() <= 1e-9 * r.agent_risk[0].abs());
        }
    }
}
