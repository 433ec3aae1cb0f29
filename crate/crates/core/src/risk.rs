//! Pairwise safety values, CVaR-augmented safety losses and aggregated risk.
//!
//! For agents `i`, `j` with `d = x_i − x_j`:
//!
//! ```text
//! h_ij = ‖d‖² − R_pair²
//! L_ij = −2dᵀ(u_i − u_j) − 2·CVaR_α(dᵀ(ε_i − ε_j)) − γ_pair·h_ij + c
//! R_i  = Σ_{j≠i} L_ij
//! ```
//!
//! `u` is each agent's current observed velocity, never a candidate control.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::types::{pair_gamma, pair_safety_radius, AgentState, Scene};
use crate::uncertainty::pairwise_noise_cvar;

/// `h_ij = ‖x_i − x_j‖² − R_pair²`; positive iff the pair is strictly safe.
pub fn safety_value(i: &AgentState, j: &AgentState) -> Result<f64> {
    if i.id == j.id {
        return Err(Error::SelfPair(i.id));
    }
    Ok(raw_safety_value(i, j))
}

pub(crate) fn raw_safety_value(i: &AgentState, j: &AgentState) -> f64 {
    let r = pair_safety_radius(i, j);
    (i.position - j.position).norm_squared() - r * r
}

pub fn safety_loss(i: &AgentState, j: &AgentState, alpha: f64, c: f64) -> Result<f64> {
    let h = safety_value(i, j)?;
    let d = i.position - j.position;
    let closing = -2.0 * d.dot(i.velocity - j.velocity);
    let noise = pairwise_noise_cvar(d, &i.noise, &j.noise, alpha)?;
    Ok(closing - 2.0 * noise - pair_gamma(i, j) * h + c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskOptions {
    /// Pairs farther apart than this contribute nothing to `R_i`. Infinite by
    /// default; finite values are an approximation for large swarms.
    pub neighbor_cutoff: f64,
}

impl Default for RiskOptions {
    fn default() -> Self {
        RiskOptions {
            neighbor_cutoff: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    /// Row-major `N×N` loss matrix; `pair_loss[i][j] = L_ij`, diagonal 0.
    pub pair_loss: Vec<Vec<f64>>,
    pub agent_risk: Vec<f64>,
    pub step: usize,
}

impl RiskReport {
    pub fn len(&self) -> usize {
        self.agent_risk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent_risk.is_empty()
    }

    /// Smallest off-diagonal loss, if any pair exists.
    pub fn min_pair_loss(&self) -> Option<f64> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.pair_loss[i][j])
            .min_by(f64::total_cmp)
    }
}

pub fn evaluate_scene_risk(scene: &Scene) -> Result<RiskReport> {
    evaluate_scene_risk_with(scene, RiskOptions::default(), Exec::default())
}

pub fn evaluate_scene_risk_with(
    scene: &Scene,
    opts: RiskOptions,
    exec: Exec,
) -> Result<RiskReport> {
    let agents = scene.agents();
    let n = agents.len();
    let (alpha, c) = (scene.alpha(), scene.loss_offset_c());
    let rows: Vec<Result<Vec<f64>>> = par::map_range(exec, n, |i| {
        let mut row = vec![0.0; n];
        for j in (0..n).filter(|&j| j != i) {
            let dist = agents[i].position.distance(agents[j].position);
            if dist <= opts.neighbor_cutoff {
                row[j] = safety_loss(&agents[i], &agents[j], alpha, c)?;
            }
        }
        Ok(row)
    });
    let pair_loss = rows.into_iter().collect::<Result<Vec<_>>>()?;
    // Row sums in fixed index order so results never depend on scheduling.
    let agent_risk: Vec<f64> = pair_loss.iter().map(|row| row.iter().sum()).collect();

    for (i, row) in pair_loss.iter().enumerate() {
        for (j, &l) in row.iter().enumerate() {
            if i != j
                && l <= 0.0
                && agents[i].position.distance(agents[j].position) <= opts.neighbor_cutoff
            {
                log::warn!(
                    "non-positive safety loss L[{}][{}] = {l:.3}; loss offset c = {c} is too small for this configuration",
                    agents[i].id,
                    agents[j].id
                );
            }
        }
    }
    Ok(RiskReport {
        pair_loss,
        agent_risk,
        step: 0,
    })
}
