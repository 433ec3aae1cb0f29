//! Risk maps: the aggregated safety loss a static probe at `p` would
//! experience from every agent in the scene, evaluated on a grid.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::risk::safety_loss;
use crate::types::{AgentState, NoiseModel, Scene, Vec2};

/// Points closer than this to an agent are treated as coincident.
pub const COINCIDENT_TOL: f64 = 1e-9;

/// The hypothetical static agent placed at each query point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub radius: f64,
    /// `None` uses the largest agent gamma, so each pair runs at the real
    /// agent's own rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub noise: NoiseModel,
}

impl Default for Probe {
    fn default() -> Self {
        Probe {
            radius: 0.0,
            gamma: None,
            noise: NoiseModel::zero(),
        }
    }
}

/// Sum of `L(probe, agent)` over all agents; `None` if `p` sits on an agent.
pub fn point_risk(scene: &Scene, p: Vec2, probe: &Probe) -> Result<Option<f64>> {
    if !p.is_finite() {
        return Err(Error::NonFinite {
            what: "query point",
        });
    }
    let agents = scene.agents();
    if agents
        .iter()
        .any(|a| a.position.distance(p) <= COINCIDENT_TOL)
    {
        return Ok(None);
    }
    let gamma = probe
        .gamma
        .unwrap_or_else(|| agents.iter().map(|a| a.gamma).fold(0.0, f64::max));
    // Id outside the agents' range; only used for the self-pair check.
    let id = agents
        .iter()
        .map(|a| a.id)
        .max()
        .unwrap_or(0)
        .wrapping_add(1);
    let virtual_agent = AgentState::new(id, p, Vec2::ZERO, probe.radius, gamma, probe.noise)?;
    let mut total = 0.0;
    for a in agents {
        total += safety_loss(&virtual_agent, a, scene.alpha(), scene.loss_offset_c())?;
    }
    Ok(Some(total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(min: Vec2, max: Vec2) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() || !(max.x > min.x) || !(max.y > min.y) {
            return Err(Error::invalid(format!(
                "degenerate rectangle {min:?}..{max:?}"
            )));
        }
        Ok(Rect { min, max })
    }

    pub fn corners(&self) -> [Vec2; 4] {
        [
            self.min,
            Vec2::new(self.max.x, self.min.y),
            Vec2::new(self.min.x, self.max.y),
            self.max,
        ]
    }
}

/// Row-major grid of risk values. Row 0 is the top (largest y).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskGrid {
    pub bounds: Rect,
    pub width: usize,
    pub height: usize,
    pub cell_size: Vec2,
    pub values: Vec<f64>,
    pub scene_hash: String,
}

impl RiskGrid {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vec2 {
        cell_center(self.bounds, self.cell_size, row, col)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["row", "col", "x", "y", "risk"])
            .map_err(csv_err)?;
        for row in 0..self.height {
            for col in 0..self.width {
                let c = self.cell_center(row, col);
                w.write_record(&[
                    row.to_string(),
                    col.to_string(),
                    c.x.to_string(),
                    c.y.to_string(),
                    self.value(row, col).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn cell_center(bounds: Rect, cell: Vec2, row: usize, col: usize) -> Vec2 {
    Vec2::new(
        bounds.min.x + (col as f64 + 0.5) * cell.x,
        bounds.max.y - (row as f64 + 0.5) * cell.y,
    )
}

/// SHA-256 of the scene's JSON form, hex encoded.
pub fn scene_hash(scene: &Scene) -> String {
    let json = serde_json::to_vec(scene).expect("scene serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Evaluate `point_risk` at the centre of each of `resolution × resolution`
/// cells. Cells on top of an agent take the largest finite value in the grid.
pub fn compute_grid(
    scene: &Scene,
    bounds: Rect,
    resolution: usize,
    probe: &Probe,
    exec: Exec,
) -> Result<RiskGrid> {
    let bounds = Rect::new(bounds.min, bounds.max)?;
    if resolution < 2 {
        return Err(Error::invalid(format!(
            "resolution must be at least 2, got {resolution}"
        )));
    }
    let cell = Vec2::new(
        (bounds.max.x - bounds.min.x) / resolution as f64,
        (bounds.max.y - bounds.min.y) / resolution as f64,
    );
    let cells = par::map_range(exec, resolution * resolution, |k| {
        point_risk(
            scene,
            cell_center(bounds, cell, k / resolution, k % resolution),
            probe,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let sentinel = cells
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let sentinel = if sentinel.is_finite() { sentinel } else { 0.0 };
    Ok(RiskGrid {
        bounds,
        width: resolution,
        height: resolution,
        cell_size: cell,
        values: cells.into_iter().map(|v| v.unwrap_or(sentinel)).collect(),
        scene_hash: scene_hash(scene),
    })
}

/// Min-max normalize to `0..=255`; a constant grid maps to all zeros.
pub fn normalize_to_bytes(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let bytes = values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    (bytes, lo, hi)
}

/// Write a binary PGM (P5) and a `*.meta.json-lines` sidecar next to it.
pub fn export_raster(grid: &RiskGrid, path: &Path) -> Result<()> {
    let (bytes, lo, hi) = normalize_to_bytes(&grid.values);
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write!(f, "P5\n{} {}\n255\n", grid.width, grid.height)
        .and_then(|_| f.write_all(&bytes))
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))?;

    #[derive(Serialize)]
    struct Meta<'a> {
        bounds: Rect,
        width: usize,
        height: usize,
        norm_min: f64,
        norm_max: f64,
        scene_hash: &'a str,
    }
    let meta = Meta {
        bounds: grid.bounds,
        width: grid.width,
        height: grid.height,
        norm_min: lo,
        norm_max: hi,
        scene_hash: &grid.scene_hash,
    };
    let meta_path = path.with_extension("meta.json-lines");
    let json = serde_json::to_string(&meta)
        .map_err(|e| Error::invalid(format!("raster metadata: {e}")))?;
    std::fs::write(&meta_path, format!("{json}\n")).map_err(|e| Error::io(&meta_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_agent(v: Vec2, gamma: f64) -> Scene {
        let a = AgentState::at_rest(0, Vec2::ZERO, 1.0, gamma)
            .unwrap()
            .with_velocity(v);
        Scene::new(vec![a], 0.95, 1e4).unwrap()
    }

    #[test]
    fn coincident_point_has_no_value() {
        let s = one_agent(Vec2::ZERO, 1.0);
        assert_eq!(point_risk(&s, Vec2::ZERO, &Probe::default()).unwrap(), None);
        assert!(point_risk(&s, Vec2::new(1e-3, 0.0), &Probe::default())
            .unwrap()
            .is_some());
    }

    #[test]
    fn stationary_agent_value_by_hand() {
        // L = −γ(|p|² − 1) + c with zero velocities and noise.
        let s = one_agent(Vec2::ZERO, 2.0);
        let v = point_risk(&s, Vec2::new(3.0, 4.0), &Probe::default())
            .unwrap()
            .unwrap();
        assert!((v - (1e4 - 2.0 * 24.0)).abs() < 1e-9);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(
            normalize_to_bytes(&[0.0, 1.0, 2.0, 3.0]).0,
            vec![0, 85, 170, 255]
        );
        assert_eq!(normalize_to_bytes(&[4.0; 6]).0, vec![0; 6]);
    }

    #[test]
    fn minimal_grid_and_raster_roundtrip() {
        let s = one_agent(Vec2::ZERO, 1.0);
        let g = compute_grid(
            &s,
            Rect::new(Vec2::new(-2.0, -1.0), Vec2::new(2.0, 3.0)).unwrap(),
            2,
            &Probe::default(),
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(g.values.len(), 4);
        assert_eq!(g.cell_center(0, 0), Vec2::new(-1.0, 2.0));
        assert_eq!(g.cell_center(1, 1), Vec2::new(1.0, 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("riskmap.pgm");
        export_raster(&g, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n2 2\n255\n".len() + 4);
        let meta = std::fs::read_to_string(dir.path().join("riskmap.meta.json-lines")).unwrap();
        assert!(meta.contains("\"norm_min\"") && meta.contains(&g.scene_hash));
    }

    #[test]
    fn sentinel_fills_agent_cell() {
        let s = one_agent(Vec2::ZERO, 1.0);
        let g = compute_grid(
            &s,
            Rect::new(Vec2::new(-1.5, -1.5), Vec2::new(1.5, 1.5)).unwrap(),
            3,
            &Probe::default(),
            Exec::Sequential,
        )
        .unwrap();
        let (_, hi) = g.min_max();
        assert_eq!(g.value(1, 1), hi);
        assert!(g.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let s = one_agent(Vec2::ZERO, 1.0);
        assert!(Rect::new(Vec2::ZERO, Vec2::new(0.0, 1.0)).is_err());
        let r = Rect::new(Vec2::ZERO, Vec2::new(1.0, 1.0)).unwrap();
        assert!(compute_grid(&s, r, 1, &Probe::default(), Exec::Sequential).is_err());
    }
}
