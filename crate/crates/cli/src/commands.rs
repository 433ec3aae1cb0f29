//! The four subcommands. Each returns a process exit code:
//! 0 success, 1 usage or config error, 2 safety violation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cbf_swarm::par;
use cbf_swarm::report::compare;
use cbf_swarm::riskmap::{compute_grid, export_raster, Probe, Rect};
use cbf_swarm::types::{default_loss_offset, AgentState, Scene, Vec2};
use cbf_swarm::{ControllerKind, Metrics, Scenario, TrajectoryLog};

use crate::config::{load_scenario, to_toml, Override, ScenarioSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SAFETY: i32 = 2;

/// Name of the resolved config written into every output directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

fn finish(result: anyhow::Result<bool>) -> i32 {
    match result {
        Ok(false) => EXIT_OK,
        Ok(true) => EXIT_SAFETY,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_resolved(scenario: &Scenario, dir: &Path) -> anyhow::Result<()> {
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, to_toml(scenario)?).with_context(|| format!("writing {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}"))
        .unwrap_or_else(|| "none".into())
}

pub fn metrics_summary(m: &Metrics) -> String {
    format!(
        "steps                     {}\n\
         min_pairwise_distance     {:.4}\n\
         min_safety_margin         {:.4}\n\
         collision_occurred        {}\n\
         completion_time           {}\n\
         total_deviation_integral  {:.4}\n\
         max_individual_deviation  {:.4}\n\
         deviation_active_duration {:.3}\n\
         relaxed_step_count        {}",
        m.steps,
        m.min_pairwise_distance,
        m.min_safety_margin,
        m.collision_occurred,
        fmt_opt(m.completion_time),
        m.total_deviation_integral,
        m.max_individual_deviation,
        m.deviation_active_duration,
        m.relaxed_step_count,
    )
}

fn run_into(scenario: &Scenario, dir: &Path, label: &str) -> anyhow::Result<TrajectoryLog> {
    create_dir(dir)?;
    write_resolved(scenario, dir)?;
    let log = scenario.run()?;
    log.write_to_dir(dir, label)?;
    Ok(log)
}

/// Run one scenario and write `trajectory.csv`, `pairs.csv`,
/// `metrics.json-lines` and the resolved config into `out`.
pub fn cmd_run(source: &ScenarioSource, overrides: &[Override], out: &Path) -> i32 {
    finish((|| {
        let scenario = load_scenario(source, overrides)?;
        log::info!(
            "running {} with {} agents",
            scenario.name,
            scenario.scene.len()
        );
        let log = run_into(&scenario, out, &scenario.name)?;
        println!("{}", metrics_summary(&log.metrics));
        Ok(log.metrics.collision_occurred)
    })())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Directory of trial `k` inside a trials output directory.
pub fn trial_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("trial_{k:04}"))
}

/// `n` seeded instances (seeds `seed0..seed0 + n`). Each gets its own
/// subdirectory; `trials.csv` lists one row per trial in trial order.
pub fn cmd_trials(
    source: &ScenarioSource,
    overrides: &[Override],
    n: usize,
    seed0: u64,
    out: &Path,
) -> i32 {
    finish((|| {
        if n == 0 {
            bail!("need at least one trial");
        }
        let base = load_scenario(source, overrides)?;
        create_dir(out)?;
        let results = par::map_range(base.config.exec, n, |k| -> anyhow::Result<TrialSummary> {
            let seed = seed0.checked_add(k as u64).context("seed overflow")?;
            let scenario = base.trial(seed)?;
            let log = run_into(
                &scenario,
                &trial_dir(out, k),
                &format!("{}-{k}", scenario.name),
            )?;
            Ok(TrialSummary {
                trial: k,
                seed,
                metrics: log.metrics,
            })
        });
        let results = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
        write_trials_csv(&results, &out.join("trials.csv"))?;

        let global_min = results
            .iter()
            .map(|r| r.metrics.min_pairwise_distance)
            .fold(f64::INFINITY, f64::min);
        let collisions = results
            .iter()
            .filter(|r| r.metrics.collision_occurred)
            .count();
        let relaxed: usize = results.iter().map(|r| r.metrics.relaxed_step_count).sum();
        println!("trials                {n}");
        println!("global_min_distance   {global_min:.4}");
        println!("collisions            {collisions}");
        println!("relaxed_steps         {relaxed}");
        Ok(collisions > 0)
    })())
}

fn write_trials_csv(results: &[TrialSummary], path: &Path) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "trial",
        "seed",
        "min_pairwise_distance",
        "min_safety_margin",
        "collision",
        "relaxed_step_count",
        "completion_time",
    ])?;
    for r in results {
        let m = &r.metrics;
        w.write_record([
            r.trial.to_string(),
            r.seed.to_string(),
            m.min_pairwise_distance.to_string(),
            m.min_safety_margin.to_string(),
            m.collision_occurred.to_string(),
            m.relaxed_step_count.to_string(),
            m.completion_time.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
        .with_context(|| format!("writing {}", path.display()))
}

/// An extra agent for `riskmap --add-agent`. Unset gamma and radius are
/// copied from the scenario's first agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddedAgent {
    pub position: Vec2,
    pub velocity: Vec2,
    pub gamma: Option<f64>,
    pub safety_radius: Option<f64>,
}

impl std::str::FromStr for AddedAgent {
    type Err = String;
    /// `x,y[,vx,vy[,gamma[,radius]]]`.
    fn from_str(s: &str) -> Result<Self, String> {
        let v = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if !matches!(v.len(), 2 | 4 | 5 | 6) {
            return Err(format!(
                "agent {s:?}: expected x,y[,vx,vy[,gamma[,radius]]]"
            ));
        }
        let at = |k: usize| v.get(k).copied();
        Ok(AddedAgent {
            position: Vec2::new(v[0], v[1]),
            velocity: Vec2::new(at(2).unwrap_or(0.0), at(3).unwrap_or(0.0)),
            gamma: at(4),
            safety_radius: at(5),
        })
    }
}

pub fn parse_rect(s: &str) -> Result<Rect, String> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match v[..] {
        [x0, y0, x1, y1] => {
            Rect::new(Vec2::new(x0, y0), Vec2::new(x1, y1)).map_err(|e| e.to_string())
        }
        _ => Err(format!("bounds {s:?}: expected xmin,ymin,xmax,ymax")),
    }
}

/// Bounding box of the agents and targets, padded by a quarter of its size
/// plus the largest safety radius.
pub fn default_bounds(scenario: &Scenario) -> Rect {
    let agents = scenario.scene.agents();
    let pts = agents
        .iter()
        .map(|a| a.position)
        .chain(scenario.targets.iter().copied());
    let (mut lo, mut hi) = (
        Vec2::new(f64::INFINITY, f64::INFINITY),
        Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
    );
    for p in pts {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let r = agents.iter().map(|a| a.safety_radius).fold(1.0, f64::max);
    let pad = Vec2::new(0.25 * (hi.x - lo.x) + r, 0.25 * (hi.y - lo.y) + r);
    Rect {
        min: lo - pad,
        max: hi + pad,
    }
}

/// The scene a risk map is drawn for: the scenario's initial agents plus any
/// added ones, with the loss offset taken over the agents and the map corners
/// so every panel of a sequence shares one scale.
pub fn riskmap_scene(
    scenario: &Scenario,
    added: &[AddedAgent],
    bounds: Rect,
) -> anyhow::Result<Scene> {
    let mut agents = scenario.scene.agents().to_vec();
    let template = agents[0];
    for a in added {
        let id = agents.iter().map(|a| a.id).max().unwrap_or(0) + 1;
        agents.push(AgentState::new(
            id,
            a.position,
            a.velocity,
            a.safety_radius.unwrap_or(template.safety_radius),
            a.gamma.unwrap_or(template.gamma),
            template.noise,
        )?);
    }
    let c = default_loss_offset(&agents, &bounds.corners());
    Ok(Scene::new(agents, scenario.scene.alpha(), c)?)
}

/// Render `riskmap.csv`, `riskmap.pgm` and its metadata sidecar.
pub fn cmd_riskmap(
    source: &ScenarioSource,
    overrides: &[Override],
    bounds: Option<Rect>,
    resolution: usize,
    added: &[AddedAgent],
    out: &Path,
) -> i32 {
    finish((|| {
        let scenario = load_scenario(source, overrides)?;
        let bounds = bounds.unwrap_or_else(|| default_bounds(&scenario));
        let scene = riskmap_scene(&scenario, added, bounds)?;
        create_dir(out)?;
        let grid = compute_grid(
            &scene,
            bounds,
            resolution,
            &Probe::default(),
            scenario.config.exec,
        )?;
        grid.write_csv(&out.join("riskmap.csv"))?;
        export_raster(&grid, &out.join("riskmap.pgm"))?;
        // Added agents are static for the map; their target is where they stand.
        let mut targets = scenario.targets.clone();
        targets.extend(added.iter().map(|a| a.position));
        write_resolved(
            &Scenario {
                scene,
                targets,
                ..scenario.clone()
            },
            out,
        )?;
        let (lo, hi) = grid.min_max();
        println!("agents       {}", scenario.scene.len() + added.len());
        println!("resolution   {resolution}x{resolution}");
        println!("risk range   [{lo:.4}, {hi:.4}]");
        println!("scene hash   {}", grid.scene_hash);
        Ok(false)
    })())
}

/// Label and directory name used for one controller in `compare`.
pub fn controller_label(kind: &ControllerKind) -> String {
    kind.to_string().replace(':', "_")
}

/// Run the scenario once per controller on the same seed, write each log to
/// `out/<label>/`, then `compare.csv` and a table on stdout.
pub fn cmd_compare(
    source: &ScenarioSource,
    overrides: &[Override],
    controllers: &[ControllerKind],
    out: &Path,
) -> i32 {
    finish((|| {
        if controllers.is_empty() {
            bail!("no controllers to compare");
        }
        let base = load_scenario(source, overrides)?;
        create_dir(out)?;
        let mut logs = Vec::new();
        for kind in controllers {
            let mut scenario = base.clone();
            scenario.config.controller = *kind;
            let label = controller_label(kind);
            log::info!("compare: running {label}");
            let log = run_into(&scenario, &out.join(&label), &label)?;
            logs.push((label, log));
        }
        let refs: Vec<(&str, &TrajectoryLog)> = logs.iter().map(|(l, g)| (l.as_str(), g)).collect();
        let comparison = compare(&refs)?;
        comparison.write_csv(&out.join("compare.csv"))?;
        let mut stdout = std::io::stdout().lock();
        write!(stdout, "{}", comparison.to_table())?;
        Ok(logs.iter().any(|(_, g)| g.metrics.collision_occurred))
    })())
}

/// Print the resolved config.
pub fn cmd_config(source: &ScenarioSource, overrides: &[Override]) -> i32 {
    finish((|| {
        print!("{}", to_toml(&load_scenario(source, overrides)?)?);
        Ok(false)
    })())
}
