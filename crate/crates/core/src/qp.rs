//! Minimum-deviation QPs.
//!
//! The per-agent problem is
//!
//! ```text
//! minimize ‖u − ū‖²   subject to   lower ≤ u ≤ upper,   a_k·u ≤ b_k
//! ```
//!
//! over `u ∈ ℝ²`. Its solution is the Euclidean projection of `ū` onto a
//! convex polygon, so the optimum is one of: `ū` itself, the projection of
//! `ū` onto one constraint line, or the intersection of two constraint lines
//! (box edges included). [`solve`] enumerates all of them and keeps the best
//! feasible one; ties go to the lexicographically smallest point.
//!
//! When the polygon is empty, a single shared slack `s ≥ 0` is added to every
//! half-space (`a_k·u ≤ b_k + s`), the smallest such `s` is found exactly,
//! and the projection is taken inside the relaxed set.
//!
//! [`dykstra_project`] handles the lifted `2N`-dimensional problem of the
//! centralized baseline.

use serde::{Deserialize, Serialize};

use crate::types::Vec2;

/// Half-space feasibility tolerance (absolute, in constraint units).
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairTag {
    pub i: u32,
    pub j: u32,
}

/// `a·u ≤ b` over one agent's planar control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearConstraint {
    pub a: Vec2,
    pub b: f64,
    pub tag: PairTag,
}

impl LinearConstraint {
    pub fn violation(&self, u: Vec2) -> f64 {
        self.a.dot(u) - self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    LowerX,
    UpperX,
    LowerY,
    UpperY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActiveConstraint {
    Pair(PairTag),
    Bound(BoundSide),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub nominal: Vec2,
    pub lower: Vec2,
    pub upper: Vec2,
    pub constraints: Vec<LinearConstraint>,
    /// Apply the shared-slack relaxation when the feasible set is empty.
    /// With `false`, such problems come back as `Infeasible`.
    pub relax: bool,
}

impl QpProblem {
    pub fn new(
        nominal: Vec2,
        lower: Vec2,
        upper: Vec2,
        constraints: Vec<LinearConstraint>,
    ) -> Self {
        QpProblem {
            nominal,
            lower,
            upper,
            constraints,
            relax: true,
        }
    }

    pub fn strict(mut self) -> Self {
        self.relax = false;
        self
    }

    pub fn objective(&self, u: Vec2) -> f64 {
        (u - self.nominal).norm_squared()
    }

    pub fn is_feasible(&self, u: Vec2, tol: f64) -> bool {
        u.x >= self.lower.x - tol
            && u.x <= self.upper.x + tol
            && u.y >= self.lower.y - tol
            && u.y <= self.upper.y + tol
            && self.constraints.iter().all(|c| c.violation(u) <= tol)
    }

    fn is_well_formed(&self) -> bool {
        self.nominal.is_finite()
            && self.lower.is_finite()
            && self.upper.is_finite()
            && self.lower.x <= self.upper.x
            && self.lower.y <= self.upper.y
            && self
                .constraints
                .iter()
                .all(|c| c.a.is_finite() && c.b.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    RelaxedFeasible,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::RelaxedFeasible => "relaxed",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpSolution {
    pub u: Vec2,
    pub status: QpStatus,
    pub slack_used: f64,
    pub active_set: Vec<ActiveConstraint>,
}

/// A line `a·u = b` bounding the feasible polygon.
#[derive(Debug, Clone, Copy)]
struct Line {
    a: Vec2,
    b: f64,
    id: ActiveConstraint,
}

fn box_lines(lower: Vec2, upper: Vec2) -> [Line; 4] {
    [
        Line {
            a: Vec2::new(-1.0, 0.0),
            b: -lower.x,
            id: ActiveConstraint::Bound(BoundSide::LowerX),
        },
        Line {
            a: Vec2::new(1.0, 0.0),
            b: upper.x,
            id: ActiveConstraint::Bound(BoundSide::UpperX),
        },
        Line {
            a: Vec2::new(0.0, -1.0),
            b: -lower.y,
            id: ActiveConstraint::Bound(BoundSide::LowerY),
        },
        Line {
            a: Vec2::new(0.0, 1.0),
            b: upper.y,
            id: ActiveConstraint::Bound(BoundSide::UpperY),
        },
    ]
}

fn intersect(l: &Line, m: &Line) -> Option<Vec2> {
    let det = l.a.x * m.a.y - l.a.y * m.a.x;
    let scale = l.a.norm() * m.a.norm();
    if det.abs() <= 1e-12 * scale {
        return None;
    }
    let x = (l.b * m.a.y - l.a.y * m.b) / det;
    let y = (l.a.x * m.b - l.b * m.a.x) / det;
    let p = Vec2::new(x, y);
    p.is_finite().then_some(p)
}

fn project_onto_line(p: Vec2, l: &Line) -> Vec2 {
    let nn = l.a.norm_squared();
    p - l.a * ((l.a.dot(p) - l.b) / nn)
}

/// Is `a` ordered strictly before `b` by (objective, x, y)?
fn better(obj_a: f64, a: Vec2, obj_b: f64, b: Vec2) -> bool {
    let tie = 1e-12 * (1.0 + obj_a.max(obj_b));
    if (obj_a - obj_b).abs() > tie {
        return obj_a < obj_b;
    }
    (a.x, a.y) < (b.x, b.y)
}

/// Exact projection onto `{lower ≤ u ≤ upper, a_k·u ≤ b_k}`, or `None` if
/// that set is empty.
fn project_polygon(nominal: Vec2, lower: Vec2, upper: Vec2, cons: &[(Vec2, f64)]) -> Option<Vec2> {
    let mut lines: Vec<Line> = box_lines(lower, upper).to_vec();
    for (k, &(a, b)) in cons.iter().enumerate() {
        if a.norm_squared() == 0.0 {
            // 0·u ≤ b: either vacuous or impossible.
            if b < -FEAS_TOL {
                return None;
            }
            continue;
        }
        lines.push(Line {
            a,
            b,
            id: ActiveConstraint::Pair(PairTag { i: k as u32, j: 0 }),
        });
    }
    let feasible = |u: Vec2| lines.iter().all(|l| l.a.dot(u) - l.b <= FEAS_TOL);

    let mut best: Option<(f64, Vec2)> = None;
    let mut consider = |u: Vec2| {
        if !feasible(u) {
            return;
        }
        let obj = (u - nominal).norm_squared();
        match best {
            Some((bo, bu)) if !better(obj, u, bo, bu) => {}
            _ => best = Some((obj, u)),
        }
    };

    if feasible(nominal) {
        return Some(nominal);
    }
    for l in &lines {
        consider(project_onto_line(nominal, l));
    }
    for (k, l) in lines.iter().enumerate() {
        for m in &lines[k + 1..] {
            if let Some(p) = intersect(l, m) {
                consider(p);
            }
        }
    }
    best.map(|(_, u)| u)
}

/// Smallest `s ≥ 0` such that some box point satisfies every `a_k·u ≤ b_k + s`.
///
/// `max_k (a_k·u − b_k)` is convex piecewise-linear, so its minimum over the
/// box sits at a corner, where two pieces tie on a box edge, or where three
/// pieces tie.
pub fn minimal_shared_slack(lower: Vec2, upper: Vec2, cons: &[(Vec2, f64)]) -> (f64, Vec2) {
    let worst = |u: Vec2| {
        cons.iter()
            .map(|&(a, b)| a.dot(u) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let in_box = |u: Vec2| {
        let t = 1e-12
            * (1.0
                + upper
                    .x
                    .abs()
                    .max(upper.y.abs())
                    .max(lower.x.abs())
                    .max(lower.y.abs()));
        u.x >= lower.x - t && u.x <= upper.x + t && u.y >= lower.y - t && u.y <= upper.y + t
    };

    let mut candidates = vec![
        lower,
        Vec2::new(upper.x, lower.y),
        Vec2::new(lower.x, upper.y),
        upper,
    ];
    let edges = box_lines(lower, upper);
    let tie = |k: usize, l: usize| Line {
        a: cons[k].0 - cons[l].0,
        b: cons[k].1 - cons[l].1,
        id: ActiveConstraint::Bound(BoundSide::LowerX),
    };
    for k in 0..cons.len() {
        for l in (k + 1)..cons.len() {
            let kl = tie(k, l);
            if kl.a.norm_squared() == 0.0 {
                continue;
            }
            for e in &edges {
                if let Some(p) = intersect(&kl, e) {
                    candidates.push(p);
                }
            }
            for m in (l + 1)..cons.len() {
                if let Some(p) = intersect(&kl, &tie(k, m)) {
                    candidates.push(p);
                }
            }
        }
    }

    let mut best = (f64::INFINITY, lower);
    for p in candidates.into_iter().filter(|&p| in_box(p)) {
        let p = p.clamp(lower, upper);
        let v = worst(p);
        if v < best.0 || (v == best.0 && (p.x, p.y) < (best.1.x, best.1.y)) {
            best = (v, p);
        }
    }
    (best.0.max(0.0), best.1)
}

fn active_set(u: Vec2, problem: &QpProblem, slack: f64) -> Vec<ActiveConstraint> {
    let mut active: Vec<ActiveConstraint> = box_lines(problem.lower, problem.upper)
        .iter()
        .filter(|l| (l.a.dot(u) - l.b).abs() <= FEAS_TOL)
        .map(|l| l.id)
        .collect();
    active.extend(
        problem
            .constraints
            .iter()
            .filter(|c| c.a.norm_squared() > 0.0)
            .filter(|c| (c.violation(u) - slack).abs() <= FEAS_TOL * (1.0 + c.b.abs()))
            .map(|c| ActiveConstraint::Pair(c.tag)),
    );
    active
}

pub fn solve(problem: &QpProblem) -> QpSolution {
    if !problem.is_well_formed() {
        let u = if problem.lower.is_finite() && problem.upper.is_finite() {
            (problem.lower + problem.upper) * 0.5
        } else {
            Vec2::ZERO
        };
        return QpSolution {
            u,
            status: QpStatus::Infeasible,
            slack_used: 0.0,
            active_set: vec![],
        };
    }
    let cons: Vec<(Vec2, f64)> = problem.constraints.iter().map(|c| (c.a, c.b)).collect();

    if let Some(u) = project_polygon(problem.nominal, problem.lower, problem.upper, &cons) {
        let u = u.clamp(problem.lower, problem.upper);
        return QpSolution {
            u,
            status: QpStatus::Optimal,
            slack_used: 0.0,
            active_set: active_set(u, problem, 0.0),
        };
    }

    let (slack, witness) = minimal_shared_slack(problem.lower, problem.upper, &cons);
    // Pad by a relative hair so the enumerated vertices pass the feasibility
    // test; the witness point is the fallback if rounding still rejects them.
    let pad = slack + 4.0 * FEAS_TOL * (1.0 + slack);
    let relaxed: Vec<(Vec2, f64)> = cons.iter().map(|&(a, b)| (a, b + pad)).collect();
    let u = project_polygon(problem.nominal, problem.lower, problem.upper, &relaxed)
        .unwrap_or(witness)
        .clamp(problem.lower, problem.upper);
    QpSolution {
        u,
        status: if problem.relax {
            QpStatus::RelaxedFeasible
        } else {
            QpStatus::Infeasible
        },
        slack_used: slack,
        active_set: active_set(u, problem, slack),
    }
}

/// Exhaustive grid-line scan over the box, used as a test oracle.
///
/// The box is cut by `resolution` vertical and `resolution` horizontal lines,
/// box edges included. On each line the feasible set is an interval, and the
/// point nearest `ū` on it is the clamp of `ū`'s coordinate into that
/// interval. The best of these `2 · resolution` candidates is returned. A
/// candidate counts only if it satisfies every half-space exactly.
pub fn brute_force_solve(problem: &QpProblem, resolution: usize) -> QpSolution {
    let res = resolution.max(2);
    let (lo, hi) = (problem.lower, problem.upper);
    let feasible = |u: Vec2| {
        u.x >= lo.x
            && u.x <= hi.x
            && u.y >= lo.y
            && u.y <= hi.y
            && problem.constraints.iter().all(|c| c.a.dot(u) <= c.b)
    };
    let line = |k: usize, base: f64, top: f64| {
        if k == res - 1 {
            top
        } else {
            base + k as f64 * (top - base) / (res - 1) as f64
        }
    };

    let mut best: Option<(f64, Vec2)> = None;
    for axis in [0usize, 1] {
        // axis 0: lines x = const, free coordinate y; axis 1 the reverse.
        let (fix_lo, fix_hi, free_lo, free_hi) = if axis == 0 {
            (lo.x, hi.x, lo.y, hi.y)
        } else {
            (lo.y, hi.y, lo.x, hi.x)
        };
        let point = |fixed: f64, free: f64| {
            if axis == 0 {
                Vec2::new(fixed, free)
            } else {
                Vec2::new(free, fixed)
            }
        };
        let target = if axis == 0 {
            problem.nominal.y
        } else {
            problem.nominal.x
        };
        for k in 0..res {
            let fixed = line(k, fix_lo, fix_hi);
            let (mut a, mut b) = (free_lo, free_hi);
            let mut empty = false;
            for c in &problem.constraints {
                let (cf, cx) = if axis == 0 {
                    (c.a.y, c.a.x)
                } else {
                    (c.a.x, c.a.y)
                };
                let rhs = c.b - cx * fixed;
                if cf > 0.0 {
                    b = b.min(rhs / cf);
                } else if cf < 0.0 {
                    a = a.max(rhs / cf);
                } else if rhs < 0.0 {
                    empty = true;
                }
            }
            if empty || a > b {
                continue;
            }
            let mut t = target.clamp(a, b);
            // Division rounding can leave an endpoint a few ulps outside.
            let mid = 0.5 * (a + b);
            let mut tries = 0;
            while !feasible(point(fixed, t)) && tries < 64 {
                t = if t < mid { t.next_up() } else { t.next_down() };
                tries += 1;
            }
            let u = point(fixed, t);
            if !feasible(u) {
                continue;
            }
            let obj = problem.objective(u);
            match best {
                Some((bo, bu)) if !better(obj, u, bo, bu) => {}
                _ => best = Some((obj, u)),
            }
        }
    }
    match best {
        Some((_, u)) => QpSolution {
            u,
            status: QpStatus::Optimal,
            slack_used: 0.0,
            active_set: vec![],
        },
        None => QpSolution {
            u: problem.nominal.clamp(lo, hi),
            status: QpStatus::Infeasible,
            slack_used: 0.0,
            active_set: vec![],
        },
    }
}

/// A half-space `a·u ≤ b` in `ℝⁿ`, stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseHalfspace {
    pub terms: Vec<(usize, f64)>,
    pub b: f64,
}

impl SparseHalfspace {
    pub fn value(&self, u: &[f64]) -> f64 {
        self.terms.iter().map(|&(k, a)| a * u[k]).sum::<f64>()
    }

    fn norm_squared(&self) -> f64 {
        self.terms.iter().map(|&(_, a)| a * a).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DykstraOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for DykstraOptions {
    fn default() -> Self {
        DykstraOptions {
            tolerance: 1e-8,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DykstraResult {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest remaining half-space violation (box is always exact).
    pub max_violation: f64,
}

/// Dykstra's cyclic projection of `start` onto `box ∩ {h_k}`.
///
/// Converged means the iterate moved less than `tolerance` over one full
/// cycle and no half-space is violated by more than `tolerance`.
pub fn dykstra_project(
    start: &[f64],
    lower: &[f64],
    upper: &[f64],
    halfspaces: &[SparseHalfspace],
    opts: DykstraOptions,
) -> DykstraResult {
    let n = start.len();
    let clamp = |x: &mut [f64]| {
        for k in 0..n {
            x[k] = x[k].clamp(lower[k], upper[k]);
        }
    };
    let norms: Vec<f64> = halfspaces
        .iter()
        .map(SparseHalfspace::norm_squared)
        .collect();
    let mut x = start.to_vec();
    // Dykstra correction terms: one per half-space (sparse) plus the box.
    let mut corr: Vec<Vec<f64>> = halfspaces
        .iter()
        .map(|h| vec![0.0; h.terms.len()])
        .collect();
    let mut box_corr = vec![0.0; n];
    let mut prev = x.clone();
    let mut y = vec![0.0; n];

    let max_violation = |x: &[f64]| {
        halfspaces
            .iter()
            .map(|h| h.value(x) - h.b)
            .fold(0.0f64, f64::max)
    };

    for it in 1..=opts.max_iterations {
        // x can sit still for a cycle while the corrections are still
        // shifting, so both must settle before stopping.
        let mut corr_change = 0.0f64;
        for (h, (c, &nn)) in halfspaces.iter().zip(corr.iter_mut().zip(&norms)) {
            if nn == 0.0 {
                continue;
            }
            // y = x + c restricted to the support; elsewhere c = 0.
            let mut dot = 0.0;
            for (t, &(k, a)) in h.terms.iter().enumerate() {
                dot += a * (x[k] + c[t]);
            }
            let step = ((dot - h.b) / nn).max(0.0);
            for (t, &(k, a)) in h.terms.iter().enumerate() {
                let yk = x[k] + c[t];
                let xk = yk - step * a;
                corr_change += (yk - xk - c[t]).powi(2);
                c[t] = yk - xk;
                x[k] = xk;
            }
        }
        for k in 0..n {
            y[k] = x[k] + box_corr[k];
        }
        x.copy_from_slice(&y);
        clamp(&mut x);
        for k in 0..n {
            corr_change += (y[k] - x[k] - box_corr[k]).powi(2);
            box_corr[k] = y[k] - x[k];
        }

        let moved = x
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if moved < opts.tolerance && corr_change.sqrt() < opts.tolerance {
            let viol = max_violation(&x);
            if viol <= opts.tolerance {
                return DykstraResult {
                    u: x,
                    iterations: it,
                    converged: true,
                    max_violation: viol,
                };
            }
        }
        prev.copy_from_slice(&x);
    }
    let viol = max_violation(&x);
    DykstraResult {
        u: x,
        iterations: opts.max_iterations,
        converged: false,
        max_violation: viol,
    }
}
