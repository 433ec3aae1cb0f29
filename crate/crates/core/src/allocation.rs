//! Pairwise responsibility weights from relative risk.
//!
//! Agent `i` takes `w_i = R_j / (R_i + R_j)` of the pair's CBF budget, so the
//! agent exposed to more risk gets the tighter constraint.

use crate::error::{Error, Result};

pub fn pairwise_weights(risk_i: f64, risk_j: f64) -> Result<(f64, f64)> {
    if !risk_i.is_finite() || !risk_j.is_finite() {
        return Err(Error::NonFinite { what: "risk" });
    }
    if risk_i < 0.0 || risk_j < 0.0 {
        return Err(Error::invalid(format!(
            "risks must be non-negative, got ({risk_i}, {risk_j})"
        )));
    }
    let total = risk_i + risk_j;
    if total == 0.0 {
        return Ok((0.5, 0.5));
    }
    let w_i = risk_j / total;
    // Derive the partner from w_i so the pair sums to one to the last ulp.
    Ok((w_i, 1.0 - w_i))
}

/// Dense `N×N` table of responsibility shares; `get(i, j)` is agent `i`'s
/// share of the budget for pair `(i, j)`. Diagonal entries are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<f64>,
}

impl WeightMatrix {
    pub fn uniform(n: usize, share: f64) -> Self {
        WeightMatrix {
            n,
            w: vec![share; n * n],
        }
    }

    /// Fixed split: the earlier agent in scene order takes `share`, the later
    /// one `1 − share`. With `share = 0.5` every agent gets an equal half.
    pub fn fixed_share(n: usize, share: f64) -> Self {
        let mut m = WeightMatrix::uniform(n, share);
        for i in 0..n {
            for j in 0..i {
                m.w[i * n + j] = 1.0 - share;
            }
        }
        m
    }

    pub fn from_risks(risks: &[f64]) -> Result<Self> {
        let n = risks.len();
        let mut m = WeightMatrix::uniform(n, 0.5);
        for i in 0..n {
            for j in (i + 1)..n {
                let (wi, wj) = pairwise_weights(risks[i], risks[j])?;
                m.w[i * n + j] = wi;
                m.w[j * n + i] = wj;
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    /// Exponential smoothing `β·prev + (1 − β)·self`. Linear, so pair sums
    /// stay at one.
    pub fn smoothed(&self, prev: &WeightMatrix, beta: f64) -> WeightMatrix {
        debug_assert_eq!(self.n, prev.n);
        let w = self
            .w
            .iter()
            .zip(&prev.w)
            .map(|(cur, old)| beta * old + (1.0 - beta) * cur)
            .collect();
        WeightMatrix { n: self.n, w }
    }
}
