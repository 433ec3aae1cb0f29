//! Scenario loading: built-in or TOML file, then dotted-path overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context};
use cbf_swarm::scenario::{scenario_ramp_merge, scenario_swap};
use cbf_swarm::{Scenario, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioSource {
    Ramp,
    Swap,
    File(PathBuf),
}

impl FromStr for ScenarioSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ramp" => Ok(ScenarioSource::Ramp),
            "swap" => Ok(ScenarioSource::Swap),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(ScenarioSource::File(PathBuf::from(p))),
                _ => Err(format!(
                    "unknown scenario {s:?} (expected ramp | swap | file:<path>)"
                )),
            },
        }
    }
}

impl fmt::Display for ScenarioSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioSource::Ramp => f.write_str("ramp"),
            ScenarioSource::Swap => f.write_str("swap"),
            ScenarioSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// `a.b.c=value`. Numeric segments index arrays. The value is read as a TOML
/// literal when it parses as one, else taken as a bare string.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: toml::Value,
}

impl Override {
    pub fn new(path: &str, value: toml::Value) -> Self {
        Override {
            path: path.split('.').map(str::to_owned).collect(),
            value,
        }
    }
}

impl FromStr for Override {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| format!("override {s:?} is not key=value"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(format!("bad override key {key:?}"));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        Ok(Override::new(key, value))
    }
}

fn apply(root: &mut toml::Value, ov: &Override) -> anyhow::Result<()> {
    let dotted = ov.path.join(".");
    let (last, parents) = ov.path.split_last().expect("override path is non-empty");
    let mut node = root;
    for seg in parents {
        node = match node {
            toml::Value::Table(t) => t.get_mut(seg),
            toml::Value::Array(a) => seg.parse::<usize>().ok().and_then(|k| a.get_mut(k)),
            _ => None,
        }
        .with_context(|| format!("override {dotted}: no entry {seg:?}"))?;
    }
    match node {
        toml::Value::Table(t) => {
            t.insert(last.clone(), ov.value.clone());
        }
        toml::Value::Array(a) => {
            let slot = last
                .parse::<usize>()
                .ok()
                .and_then(|k| a.get_mut(k))
                .with_context(|| format!("override {dotted}: no element {last:?}"))?;
            *slot = ov.value.clone();
        }
        _ => bail!("override {dotted}: parent is not a table or array"),
    }
    Ok(())
}

/// Resolve a scenario. Errors carry the line and field from the TOML parser.
pub fn load_scenario(source: &ScenarioSource, overrides: &[Override]) -> anyhow::Result<Scenario> {
    let text = match source {
        ScenarioSource::Ramp => to_toml(&scenario_ramp_merge())?,
        ScenarioSource::Swap => to_toml(&scenario_swap(6)?)?,
        ScenarioSource::File(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
    };
    let text = if overrides.is_empty() {
        text
    } else {
        let mut root: toml::Value =
            toml::from_str(&text).with_context(|| format!("parsing {source}"))?;
        for ov in overrides {
            apply(&mut root, ov)?;
        }
        toml::to_string(&root)?
    };
    let spec: ScenarioSpec =
        toml::from_str(&text).with_context(|| format!("invalid scenario {source}"))?;
    Ok(spec.build()?)
}

/// The fully materialized config, as written next to every output.
pub fn to_toml(scenario: &Scenario) -> anyhow::Result<String> {
    Ok(toml::to_string(&ScenarioSpec::from(scenario))?)
}
