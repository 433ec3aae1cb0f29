//! Plain value types shared by every module: planar vectors, 2×2 matrices,
//! Gaussian noise models, agents and scenes.
//!
//! Everything here is `Copy` or cheaply cloneable and immutable once built.
//! The checked constructors (`try_new`, `AgentState::new`, `Scene::new`)
//! reject NaN/Inf, non-PSD covariances and out-of-range parameters; the
//! serde implementations route through them.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Tolerance used for covariance symmetry and PSD checks.
pub const COVARIANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn try_new(x: f64, y: f64) -> Result<Self> {
        let v = Vec2 { x, y };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { what: "vector" })
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Rotate counter-clockwise by `angle` radians.
    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Componentwise clamp into `[lower, upper]`.
    pub fn clamp(self, lower: Vec2, upper: Vec2) -> Vec2 {
        Vec2::new(
            self.x.clamp(lower.x, upper.x),
            self.y.clamp(lower.y, upper.y),
        )
    }

    /// Scale down (never up) so that the norm is at most `max_norm`.
    pub fn limit_norm(self, max_norm: f64) -> Vec2 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self * (max_norm / n)
        } else {
            self
        }
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        v * self
    }
}

// Serialized as a two-element array so configs read `position = [0.0, 5.0]`.
impl Serialize for Vec2 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x, self.y].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vec2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Vec2::try_new(x, y).map_err(serde::de::Error::custom)
    }
}

/// Row-major 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat2 {
    pub m: [[f64; 2]; 2],
}

impl Mat2 {
    pub const ZERO: Mat2 = Mat2 { m: [[0.0; 2]; 2] };

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2 {
            m: [[a, b], [c, d]],
        }
    }

    pub fn try_new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let m = Mat2::new(a, b, c, d);
        if m.m.iter().flatten().all(|v| v.is_finite()) {
            Ok(m)
        } else {
            Err(Error::NonFinite { what: "matrix" })
        }
    }

    pub fn identity() -> Self {
        Mat2::new(1.0, 0.0, 0.0, 1.0)
    }

    pub fn diagonal(a: f64, d: f64) -> Self {
        Mat2::new(a, 0.0, 0.0, d)
    }

    pub fn scaled(self, s: f64) -> Mat2 {
        let [[a, b], [c, d]] = self.m;
        Mat2::new(a * s, b * s, c * s, d * s)
    }

    pub fn mul_vec(self, v: Vec2) -> Vec2 {
        let [[a, b], [c, d]] = self.m;
        Vec2::new(a * v.x + b * v.y, c * v.x + d * v.y)
    }

    /// The quadratic form `vᵀ M v`.
    pub fn quad_form(self, v: Vec2) -> f64 {
        v.dot(self.mul_vec(v))
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn symmetric_eigenvalues(self) -> (f64, f64) {
        let [[a, b], [c, d]] = self.m;
        let off = 0.5 * (b + c);
        let mean = 0.5 * (a + d);
        let radius = (0.5 * (a - d)).hypot(off);
        (mean - radius, mean + radius)
    }

    /// Validate as a covariance: finite, symmetric and positive semidefinite.
    pub fn check_covariance(self) -> Result<Self> {
        let m = Mat2::try_new(self.m[0][0], self.m[0][1], self.m[1][0], self.m[1][1])?;
        let (upper, lower) = (m.m[0][1], m.m[1][0]);
        if (upper - lower).abs() > COVARIANCE_TOL {
            return Err(Error::AsymmetricCovariance { upper, lower });
        }
        let (min_eig, _) = m.symmetric_eigenvalues();
        if min_eig < -COVARIANCE_TOL {
            return Err(Error::NotPsd {
                min_eigenvalue: min_eig,
            });
        }
        Ok(m)
    }

    /// Lower-triangular factor `L` with `L Lᵀ = self` for a PSD matrix.
    /// Semidefinite inputs are handled by zeroing the degenerate column.
    pub fn cholesky_lower(self) -> Mat2 {
        let [[a, b], [_, d]] = self.m;
        let l11 = a.max(0.0).sqrt();
        let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
        let l22 = (d - l21 * l21).max(0.0).sqrt();
        Mat2::new(l11, 0.0, l21, l22)
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, rhs: Mat2) -> Mat2 {
        let [[a, b], [c, d]] = self.m;
        let [[e, f], [g, h]] = rhs.m;
        Mat2::new(a + e, b + f, c + g, d + h)
    }
}

impl Serialize for Mat2 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.m.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [[a, b], [c, e]] = <[[f64; 2]; 2]>::deserialize(d)?;
        Mat2::try_new(a, b, c, e).map_err(serde::de::Error::custom)
    }
}

/// Gaussian motion disturbance `ε ~ N(mean, covariance)` in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawNoise")]
pub struct NoiseModel {
    pub mean: Vec2,
    pub covariance: Mat2,
}

#[derive(Deserialize)]
struct RawNoise {
    mean: Vec2,
    covariance: Mat2,
}

impl TryFrom<RawNoise> for NoiseModel {
    type Error = Error;
    fn try_from(raw: RawNoise) -> Result<Self> {
        NoiseModel::new(raw.mean, raw.covariance)
    }
}

impl NoiseModel {
    pub fn new(mean: Vec2, covariance: Mat2) -> Result<Self> {
        let mean = Vec2::try_new(mean.x, mean.y)?;
        let covariance = covariance.check_covariance()?;
        Ok(NoiseModel { mean, covariance })
    }

    pub fn zero() -> Self {
        NoiseModel::default()
    }

    /// Zero-mean isotropic noise with per-axis standard deviation `sigma`.
    pub fn isotropic(sigma: f64) -> Result<Self> {
        NoiseModel::new(Vec2::ZERO, Mat2::identity().scaled(sigma * sigma))
    }

    pub fn is_deterministic(&self) -> bool {
        self.covariance == Mat2::ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAgent")]
pub struct AgentState {
    pub id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
    /// Safety radius this agent asserts (m).
    pub safety_radius: f64,
    /// CBF aggressiveness (1/s).
    pub gamma: f64,
    #[serde(default)]
    pub noise: NoiseModel,
}

#[derive(Deserialize)]
struct RawAgent {
    id: u32,
    position: Vec2,
    #[serde(default)]
    velocity: Vec2,
    safety_radius: f64,
    gamma: f64,
    #[serde(default)]
    noise: NoiseModel,
}

impl TryFrom<RawAgent> for AgentState {
    type Error = Error;
    fn try_from(r: RawAgent) -> Result<Self> {
        AgentState::new(
            r.id,
            r.position,
            r.velocity,
            r.safety_radius,
            r.gamma,
            r.noise,
        )
    }
}

impl AgentState {
    pub fn new(
        id: u32,
        position: Vec2,
        velocity: Vec2,
        safety_radius: f64,
        gamma: f64,
        noise: NoiseModel,
    ) -> Result<Self> {
        if !position.is_finite() || !velocity.is_finite() {
            return Err(Error::NonFinite {
                what: "agent state",
            });
        }
        if !safety_radius.is_finite() || safety_radius < 0.0 {
            return Err(Error::invalid(format!(
                "agent {id}: safety radius must be finite and >= 0, got {safety_radius}"
            )));
        }
        if !gamma.is_finite() || gamma <= 0.0 {
            return Err(Error::invalid(format!(
                "agent {id}: gamma must be finite and > 0, got {gamma}"
            )));
        }
        let noise = NoiseModel::new(noise.mean, noise.covariance)?;
        Ok(AgentState {
            id,
            position,
            velocity,
            safety_radius,
            gamma,
            noise,
        })
    }

    /// Noise-free agent at rest.
    pub fn at_rest(id: u32, position: Vec2, safety_radius: f64, gamma: f64) -> Result<Self> {
        AgentState::new(
            id,
            position,
            Vec2::ZERO,
            safety_radius,
            gamma,
            NoiseModel::zero(),
        )
    }

    pub fn with_position(mut self, position: Vec2) -> Self {
        self.position = position;
        self
    }

    pub fn with_velocity(mut self, velocity: Vec2) -> Self {
        self.velocity = velocity;
        self
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }
}

/// Effective safety margin of a pair: the larger of the two radii.
pub fn pair_safety_radius(i: &AgentState, j: &AgentState) -> f64 {
    i.safety_radius.max(j.safety_radius)
}

/// Pairwise CBF rate: the smaller (more conservative) of the two gammas.
pub fn pair_gamma(i: &AgentState, j: &AgentState) -> f64 {
    i.gamma.min(j.gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    agents: Vec<AgentState>,
    alpha: f64,
    loss_offset_c: f64,
}

impl Scene {
    pub fn new(agents: Vec<AgentState>, alpha: f64, loss_offset_c: f64) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::invalid("scene needs at least one agent"));
        }
        check_alpha(alpha)?;
        if !loss_offset_c.is_finite() || loss_offset_c <= 0.0 {
            return Err(Error::invalid(format!(
                "loss offset c must be finite and > 0, got {loss_offset_c}"
            )));
        }
        let mut ids: Vec<u32> = agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateAgent(w[0]));
        }
        let agents = agents
            .into_iter()
            .map(|a| {
                AgentState::new(
                    a.id,
                    a.position,
                    a.velocity,
                    a.safety_radius,
                    a.gamma,
                    a.noise,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            agents,
            alpha,
            loss_offset_c,
        })
    }

    /// Build a scene whose loss offset follows the default rule
    /// `c = 4 · γ_max · D²`, with `D` the diagonal of the box spanned by the
    /// agent positions and any `extra_points` (targets, map bounds).
    pub fn with_default_offset(
        agents: Vec<AgentState>,
        alpha: f64,
        extra_points: &[Vec2],
    ) -> Result<Self> {
        let c = default_loss_offset(&agents, extra_points);
        Scene::new(agents, alpha, c)
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn loss_offset_c(&self) -> f64 {
        self.loss_offset_c
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    /// Same parameters, new agent states. Ids must match the existing scene.
    pub fn with_agents(&self, agents: Vec<AgentState>) -> Result<Self> {
        if agents.len() != self.agents.len() {
            return Err(Error::DimensionMismatch {
                what: "agents",
                expected: self.agents.len(),
                got: agents.len(),
            });
        }
        Scene::new(agents, self.alpha, self.loss_offset_c)
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Scene::new(self.agents.clone(), alpha, self.loss_offset_c)
    }

    /// Append an agent, keeping alpha and c.
    pub fn with_added(&self, agent: AgentState) -> Result<Self> {
        let mut agents = self.agents.clone();
        agents.push(agent);
        Scene::new(agents, self.alpha, self.loss_offset_c)
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

pub fn default_loss_offset(agents: &[AgentState], extra_points: &[Vec2]) -> f64 {
    let points = agents
        .iter()
        .map(|a| a.position)
        .chain(extra_points.iter().copied());
    let (mut lo, mut hi) = (
        Vec2::new(f64::INFINITY, f64::INFINITY),
        Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
    );
    for p in points {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let diag_sq = if lo.is_finite() && hi.is_finite() {
        (hi - lo).norm_squared()
    } else {
        0.0
    };
    let gamma_max = agents.iter().map(|a| a.gamma).fold(0.0, f64::max);
    // Floor keeps c > 0 for a single point or coincident agents.
    (4.0 * gamma_max * diag_sq).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(id: u32, r: f64) -> AgentState {
        AgentState::at_rest(id, Vec2::ZERO, r, 1.0).unwrap()
    }

    #[test]
    fn pair_radius_is_max() {
        assert_eq!(pair_safety_radius(&agent(0, 5.0), &agent(1, 5.0)), 5.0);
        assert_eq!(pair_safety_radius(&agent(0, 0.0), &agent(1, 0.0)), 0.0);
        assert_eq!(pair_safety_radius(&agent(0, 2.0), &agent(1, 3.0)), 3.0);
        assert_eq!(pair_safety_radius(&agent(0, 3.0), &agent(1, 2.0)), 3.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Vec2::try_new(f64::NAN, 0.0).is_err());
        assert!(Mat2::try_new(0.0, f64::INFINITY, 0.0, 0.0).is_err());
        let bad = AgentState::new(
            0,
            Vec2::new(f64::NAN, 0.0),
            Vec2::ZERO,
            1.0,
            1.0,
            NoiseModel::zero(),
        );
        assert!(matches!(bad, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn rejects_bad_covariance() {
        let asym = NoiseModel::new(Vec2::ZERO, Mat2::new(1.0, 0.5, 0.4, 1.0));
        assert!(matches!(asym, Err(Error::AsymmetricCovariance { .. })));
        let indefinite = NoiseModel::new(Vec2::ZERO, Mat2::new(1.0, 2.0, 2.0, 1.0));
        assert!(matches!(indefinite, Err(Error::NotPsd { .. })));
        // Rank-one PSD is fine.
        assert!(NoiseModel::new(Vec2::ZERO, Mat2::new(1.0, 1.0, 1.0, 1.0)).is_ok());
    }

    #[test]
    fn rejects_bad_agent_params() {
        assert!(AgentState::at_rest(0, Vec2::ZERO, -1.0, 1.0).is_err());
        assert!(AgentState::at_rest(0, Vec2::ZERO, 1.0, 0.0).is_err());
    }

    #[test]
    fn scene_validation() {
        let a = vec![agent(0, 1.0), agent(1, 1.0)];
        assert!(Scene::new(a.clone(), 0.95, 10.0).is_ok());
        assert!(matches!(
            Scene::new(a.clone(), 1.0, 10.0),
            Err(Error::InvalidAlpha(_))
        ));
        assert!(matches!(
            Scene::new(a.clone(), 0.0, 10.0),
            Err(Error::InvalidAlpha(_))
        ));
        assert!(Scene::new(a, 0.5, 0.0).is_err());
        assert!(Scene::new(vec![], 0.5, 1.0).is_err());
        let dup = vec![agent(3, 1.0), agent(3, 1.0)];
        assert!(matches!(
            Scene::new(dup, 0.5, 1.0),
            Err(Error::DuplicateAgent(3))
        ));
    }

    #[test]
    fn cholesky_reconstructs() {
        let s = Mat2::new(2.0, 0.6, 0.6, 1.0);
        let l = s.cholesky_lower();
        let [[a, _], [c, d]] = l.m;
        let rebuilt = Mat2::new(a * a, a * c, a * c, c * c + d * d);
        for (x, y) in rebuilt.m.iter().flatten().zip(s.m.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(Mat2::ZERO.cholesky_lower(), Mat2::ZERO);
    }

    #[test]
    fn default_offset_scales_with_extent() {
        let a = vec![
            AgentState::at_rest(0, Vec2::new(0.0, 0.0), 1.0, 0.5).unwrap(),
            AgentState::at_rest(1, Vec2::new(3.0, 4.0), 1.0, 2.0).unwrap(),
        ];
        assert_eq!(default_loss_offset(&a, &[]), 4.0 * 2.0 * 25.0);
    }

    #[test]
    fn vec2_serde_as_array() {
        let v: Vec2 = serde_json::from_str("[1.5, -2]").unwrap();
        assert_eq!(v, Vec2::new(1.5, -2.0));
        assert_eq!(serde_json::to_string(&v).unwrap(), "[1.5,-2.0]");
    }
}
