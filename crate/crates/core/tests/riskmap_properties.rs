use cbf_swarm::par::Exec;
use cbf_swarm::riskmap::{compute_grid, point_risk, Probe, Rect};
use cbf_swarm::types::{AgentState, NoiseModel, Scene, Vec2};
use proptest::prelude::*;

const C: f64 = 5e4;

fn agent(id: u32, p: (f64, f64), v: (f64, f64), gamma: f64) -> AgentState {
    AgentState::at_rest(id, Vec2::new(p.0, p.1), 2.0, gamma)
        .unwrap()
        .with_velocity(Vec2::new(v.0, v.1))
}

fn risk(scene: &Scene, p: Vec2) -> f64 {
    point_risk(scene, p, &Probe::default()).unwrap().unwrap()
}

fn square(half: f64) -> Rect {
    Rect::new(Vec2::new(-half, -half), Vec2::new(half, half)).unwrap()
}

#[test]
fn stationary_agent_risk_decays_along_every_ray() {
    let s = Scene::new(vec![agent(0, (1.0, -2.0), (0.0, 0.0), 1.0)], 0.95, C).unwrap();
    let centre = s.agents()[0].position;
    for k in 0..32 {
        let dir = Vec2::new(1.0, 0.0).rotated(k as f64 * std::f64::consts::TAU / 32.0);
        let mut prev = f64::INFINITY;
        for step in 1..=200 {
            let v = risk(&s, centre + dir * (0.1 * step as f64));
            assert!(v < prev, "ray {k}, step {step}");
            prev = v;
        }
    }
}

#[test]
fn heading_ray_is_riskier_than_the_perpendicular() {
    // The static agent sits on the diagonal, equidistant from both probes.
    let s = Scene::new(
        vec![
            agent(0, (0.0, 0.0), (3.0, 0.0), 1.0),
            agent(1, (-30.0, -30.0), (0.0, 0.0), 1.0),
        ],
        0.95,
        C,
    )
    .unwrap();
    for r in [1.0, 2.5, 5.0, 10.0, 20.0] {
        let ahead = risk(&s, Vec2::new(r, 0.0));
        let side = risk(&s, Vec2::new(0.0, r));
        // Only the velocity term differs: 2·r·|v|.
        assert!((ahead - side - 2.0 * r * 3.0).abs() < 1e-6 * C, "r = {r}");
        assert!(ahead > side);
    }
}

/// Radius at which risk along +x first drops to `level`, by bisection.
fn iso_radius(s: &Scene, level: f64) -> f64 {
    let (mut lo, mut hi) = (1e-6, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if risk(s, Vec2::new(mid, 0.0)) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn smaller_gamma_has_a_larger_iso_risk_radius() {
    let cautious = Scene::new(vec![agent(0, (0.0, 0.0), (0.0, 0.0), 0.3)], 0.95, C).unwrap();
    let bold = Scene::new(vec![agent(0, (0.0, 0.0), (0.0, 0.0), 1.5)], 0.95, C).unwrap();
    for level in [C - 10.0, C - 100.0, C - 1000.0] {
        let (rc, rb) = (iso_radius(&cautious, level), iso_radius(&bold, level));
        // r² = R² + (c − level)/γ for a stationary agent and probe.
        for (r, g) in [(rc, 0.3), (rb, 1.5)] {
            assert!(
                (r * r - (4.0 + (C - level) / g)).abs() < 1e-6,
                "level {level}, gamma {g}"
            );
        }
        assert!(rc > rb);
    }
}

#[test]
fn adding_an_agent_raises_every_cell() {
    let bounds = square(25.0);
    let two = vec![
        agent(0, (-8.0, 0.0), (1.0, 0.0), 1.0),
        agent(1, (8.0, 6.0), (-2.0, -1.0), 1.0),
    ];
    let mut three = two.clone();
    three.push(agent(2, (3.0, -10.0), (1.5, -1.5), 1.0));
    let c = cbf_swarm::types::default_loss_offset(&three, &bounds.corners());
    let g2 = compute_grid(
        &Scene::new(two, 0.95, c).unwrap(),
        bounds,
        200,
        &Probe::default(),
        Exec::Parallel,
    )
    .unwrap();
    let g3 = compute_grid(
        &Scene::new(three, 0.95, c).unwrap(),
        bounds,
        200,
        &Probe::default(),
        Exec::Parallel,
    )
    .unwrap();
    for (k, (a, b)) in g2.values.iter().zip(&g3.values).enumerate() {
        assert!(b > a, "cell {k}: {b} <= {a}");
    }
}

#[test]
fn mirrored_states_give_a_mirrored_grid() {
    let s = Scene::new(
        vec![
            agent(0, (-6.0, 1.0), (1.0, 0.5), 1.0),
            agent(1, (6.0, 1.0), (-1.0, 0.5), 1.0),
        ],
        0.95,
        C,
    )
    .unwrap();
    let g = compute_grid(&s, square(20.0), 64, &Probe::default(), Exec::Sequential).unwrap();
    for row in 0..g.height {
        for col in 0..g.width {
            let (a, b) = (g.value(row, col), g.value(row, g.width - 1 - col));
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "({row}, {col})");
        }
    }
}

#[test]
fn parallel_grid_is_bit_identical_to_sequential() {
    let s = Scene::new(
        vec![
            agent(0, (-3.0, 2.0), (1.0, 0.0), 1.0),
            agent(1, (4.0, -1.0), (0.0, 2.0), 0.5),
        ],
        0.9,
        C,
    )
    .unwrap();
    let seq = compute_grid(&s, square(10.0), 97, &Probe::default(), Exec::Sequential).unwrap();
    let par = compute_grid(&s, square(10.0), 97, &Probe::default(), Exec::Parallel).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn agent_on_a_cell_centre_takes_the_grid_max() {
    // 3×3 over [−3, 3]²: the centre cell is exactly at the origin.
    let s = Scene::new(
        vec![
            agent(0, (0.0, 0.0), (0.0, 0.0), 1.0),
            agent(1, (2.0, 2.0), (0.0, 0.0), 1.0),
        ],
        0.95,
        C,
    )
    .unwrap();
    let g = compute_grid(&s, square(3.0), 3, &Probe::default(), Exec::Sequential).unwrap();
    let (_, hi) = g.min_max();
    assert_eq!(g.value(1, 1), hi);
    assert!(g.values.iter().all(|v| v.is_finite()));
}

#[test]
fn noisy_agents_raise_the_risk_they_pose() {
    let quiet = Scene::new(vec![agent(0, (0.0, 0.0), (1.0, 0.0), 1.0)], 0.95, C).unwrap();
    let noisy_agent = quiet.agents()[0].with_noise(NoiseModel::isotropic(0.5).unwrap());
    let noisy = Scene::new(vec![noisy_agent], 0.95, C).unwrap();
    for p in [
        Vec2::new(3.0, 0.0),
        Vec2::new(-2.0, 4.0),
        Vec2::new(0.0, -7.0),
    ] {
        assert!(risk(&noisy, p) != risk(&quiet, p));
    }
}

fn arb_agent(id: u32) -> impl Strategy<Value = AgentState> {
    (
        -20.0..20.0f64,
        -20.0..20.0f64,
        -3.0..3.0f64,
        -3.0..3.0f64,
        0.5..3.0f64,
        0.1..2.0f64,
        0.0..0.5f64,
    )
        .prop_map(move |(x, y, vx, vy, r, g, sigma)| {
            AgentState::at_rest(id, Vec2::new(x, y), r, g)
                .unwrap()
                .with_velocity(Vec2::new(vx, vy))
                .with_noise(NoiseModel::isotropic(sigma).unwrap())
        })
}

proptest! {
    #[test]
    fn translation_leaves_point_risk_unchanged(
        a in arb_agent(0),
        b in arb_agent(1),
        px in -30.0..30.0f64,
        py in -30.0..30.0f64,
        tx in -100.0..100.0f64,
        ty in -100.0..100.0f64,
    ) {
        let p = Vec2::new(px, py);
        let t = Vec2::new(tx, ty);
        prop_assume!(a.position.distance(p) > 1e-3 && b.position.distance(p) > 1e-3);
        let s = Scene::new(vec![a, b], 0.95, C).unwrap();
        let moved = Scene::new(vec![a.with_position(a.position + t), b.with_position(b.position + t)], 0.95, C).unwrap();
        let (r0, r1) = (risk(&s, p), risk(&moved, p + t));
        // Only rounding in the translated coordinates differs.
        prop_assert!((r0 - r1).abs() <= 1e-9 * (C + r0.abs()), "{} vs {}", r0, r1);
    }
}
