//! Risk-aware decentralized control barrier function (CBF) safety filters
//! for multi-agent systems under Gaussian disturbances.
//!
//! Agents share a pairwise CBF budget in proportion to how much risk each
//! one carries: [`risk`] scores every agent with a CVaR-augmented safety
//! loss, [`allocation`] turns scores into responsibility shares and
//! [`control`] solves each agent's small QP independently. [`sim`] runs the
//! closed loop, [`riskmap`] renders risk fields and [`report`] compares
//! controllers.

pub mod allocation;
pub mod control;
pub mod error;
pub mod par;
pub mod qp;
pub mod report;
pub mod risk;
pub mod riskmap;
pub mod scenario;
pub mod sim;
pub mod types;
pub mod uncertainty;

pub use control::{Bounds, ControlDecision, ControllerKind};
pub use error::{Error, Result};
pub use par::Exec;
pub use scenario::{Scenario, ScenarioSpec};
pub use sim::{Metrics, SimConfig, TrajectoryLog};
pub use types::{AgentState, Mat2, NoiseModel, Scene, Vec2};
pub use uncertainty::CvarConvention;
