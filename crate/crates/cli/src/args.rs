use std::path::PathBuf;

use cbf_swarm::riskmap::Rect;
use cbf_swarm::ControllerKind;
use clap::{Args, Parser, Subcommand};

use crate::commands::{self, parse_rect, AddedAgent};
use crate::config::{Override, ScenarioSource};

#[derive(Debug, Parser)]
#[command(
    name = "cbf-swarm",
    version,
    about = "Risk-aware decentralized CBF safety filter simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its logs.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run seeded randomized instances and summarize them in trials.csv.
    Trials {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed0: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render the risk map of the initial scene.
    Riskmap {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// xmin,ymin,xmax,ymax; defaults to the padded extent of agents and targets.
        #[arg(long, value_parser = parse_rect, allow_hyphen_values = true)]
        bounds: Option<Rect>,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        /// Extra agent as x,y[,vx,vy[,gamma[,radius]]] (repeatable).
        #[arg(long = "add-agent", allow_hyphen_values = true)]
        add_agent: Vec<AddedAgent>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run several controllers on the same seed and tabulate the metrics.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "risk-aware,fixed:0.5,centralized"
        )]
        controllers: Vec<ControllerKind>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the fully resolved scenario config.
    Config {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// ramp | swap | file:<path>
    #[arg(long, default_value = "swap")]
    pub scenario: ScenarioSource,
    /// risk-aware | fixed:<w> | centralized
    #[arg(long)]
    pub controller: Option<ControllerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// conservative | paper-literal
    #[arg(long)]
    pub convention: Option<String>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Dotted-path config override, e.g. `sim.horizon_steps=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<Override>,
}

impl ScenarioArgs {
    /// Named flags first, then `--set` entries in order.
    pub fn overrides(&self) -> Vec<Override> {
        let mut out = Vec::new();
        if let Some(c) = &self.controller {
            out.push(Override::new("sim.controller", c.to_string().into()));
        }
        if let Some(s) = self.seed {
            let v = i64::try_from(s)
                .map(toml::Value::Integer)
                .unwrap_or_else(|_| s.to_string().into());
            out.push(Override::new("sim.seed", v));
        }
        if let Some(a) = self.alpha {
            out.push(Override::new("sim.alpha", a.into()));
        }
        if let Some(c) = &self.convention {
            out.push(Override::new("sim.convention", c.clone().into()));
        }
        if let Some(dt) = self.dt {
            out.push(Override::new("sim.dt", dt.into()));
        }
        out.extend(self.set.iter().cloned());
        out
    }
}

pub fn dispatch(cli: &Cli) -> i32 {
    match &cli.command {
        Command::Run { scenario, out } => {
            commands::cmd_run(&scenario.scenario, &scenario.overrides(), out)
        }
        Command::Trials {
            scenario,
            n,
            seed0,
            out,
        } => commands::cmd_trials(&scenario.scenario, &scenario.overrides(), *n, *seed0, out),
        Command::Riskmap {
            scenario,
            bounds,
            resolution,
            add_agent,
            out,
        } => commands::cmd_riskmap(
            &scenario.scenario,
            &scenario.overrides(),
            *bounds,
            *resolution,
            add_agent,
            out,
        ),
        Command::Compare {
            scenario,
            controllers,
            out,
        } => commands::cmd_compare(&scenario.scenario, &scenario.overrides(), controllers, out),
        Command::Config { scenario } => {
            commands::cmd_config(&scenario.scenario, &scenario.overrides())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_become_overrides_before_set() {
        let cli = Cli::try_parse_from([
            "cbf-swarm",
            "run",
            "--scenario",
            "ramp",
            "--seed",
            "3",
            "--controller",
            "fixed:0.3",
            "--set",
            "sim.seed=4",
        ])
        .unwrap();
        let Command::Run { scenario, .. } = cli.command else {
            panic!()
        };
        let paths: Vec<String> = scenario
            .overrides()
            .iter()
            .map(|o| o.path.join("."))
            .collect();
        assert_eq!(paths, ["sim.controller", "sim.seed", "sim.seed"]);
    }

    #[test]
    fn negative_numbers_in_list_arguments() {
        let cli = Cli::try_parse_from([
            "cbf-swarm",
            "riskmap",
            "--bounds",
            "-10,-10,10,10",
            "--add-agent",
            "-3,2,1,0",
            "--resolution",
            "50",
        ])
        .unwrap();
        let Command::Riskmap {
            bounds, add_agent, ..
        } = cli.command
        else {
            panic!()
        };
        assert_eq!(bounds.unwrap().min.x, -10.0);
        assert_eq!(add_agent[0].position.x, -3.0);
    }

    #[test]
    fn bad_controller_is_a_parse_error() {
        assert!(Cli::try_parse_from(["cbf-swarm", "run", "--controller", "fixed:1.5"]).is_err());
    }
}
