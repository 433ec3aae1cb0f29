use std::path::PathBuf;

use cbf_swarm::control::{
    centralized_step, control_step, decentralized_step, pair_budget, Bounds, ControllerKind,
    StepOptions,
};
use cbf_swarm::qp::QpStatus;
use cbf_swarm::scenario::scenario_ramp_merge;
use cbf_swarm::types::{pair_gamma, pair_safety_radius, AgentState, NoiseModel, Scene, Vec2};
use cbf_swarm::CvarConvention;
use proptest::prelude::*;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/ramp_weights.csv")
}

/// `(step, w_2_1, w_2_3)` every 10 steps of the shipped ramp run.
fn fresh_ramp_weights() -> Vec<(usize, f64, f64)> {
    let log = scenario_ramp_merge().run().unwrap();
    log.steps
        .iter()
        .filter(|s| s.step % 10 == 0 && s.step <= 480)
        .map(|s| (s.step, s.weights.get(1, 0), s.weights.get(1, 2)))
        .collect()
}

fn read_golden() -> Vec<(usize, f64, f64)> {
    let mut r = csv::Reader::from_path(golden_path()).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (
                rec[0].parse().unwrap(),
                rec[1].parse().unwrap(),
                rec[2].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn ramp_weights_match_the_golden_log() {
    let fresh = fresh_ramp_weights();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let mut w = csv::Writer::from_path(golden_path()).unwrap();
        w.write_record(["step", "w_2_1", "w_2_3"]).unwrap();
        for (s, a, b) in &fresh {
            w.write_record([s.to_string(), a.to_string(), b.to_string()])
                .unwrap();
        }
        w.flush().unwrap();
    }
    let golden = read_golden();
    assert_eq!(golden.len(), fresh.len());
    for (g, f) in golden.iter().zip(&fresh) {
        assert_eq!(g.0, f.0);
        assert!(
            (g.1 - f.1).abs() < 1e-9 && (g.2 - f.2).abs() < 1e-9,
            "step {}: {g:?} vs {f:?}",
            g.0
        );
    }
}

#[test]
fn main_lane_vehicle_takes_a_shrinking_share_while_merging() {
    let golden = read_golden();
    let window: Vec<_> = golden.iter().filter(|r| r.0 >= 120).collect();
    assert!(window.len() > 30);
    for pair in window.windows(2) {
        assert!(pair[1].1 <= pair[0].1, "w_2_1 rose at step {}", pair[1].0);
        assert!(pair[1].2 <= pair[0].2, "w_2_3 rose at step {}", pair[1].0);
    }
    // The middle vehicle is the most exposed one: below an even split.
    assert!(window.iter().all(|r| r.1 < 0.5 && r.2 < 0.5));
}

/// `φ(Φ⁻¹(0.95)) / 0.05`, the standard-normal upper-tail CVaR at 95 %.
const Z_CVAR_95: f64 = 2.062_712_807_507_427_5;

fn budget_oracle(i: &AgentState, j: &AgentState) -> f64 {
    let d = i.position - j.position;
    let r = pair_safety_radius(i, j);
    let h = d.norm_squared() - r * r;
    // dᵀ(ε_j − ε_i) ~ N(dᵀ(μ_j − μ_i), dᵀ(Σ_i + Σ_j)d)
    let mean = d.dot(j.noise.mean - i.noise.mean);
    let var = i.noise.covariance.quad_form(d) + j.noise.covariance.quad_form(d);
    pair_gamma(i, j) * h - 2.0 * (mean + var.sqrt() * Z_CVAR_95)
}

fn head_on() -> (Scene, Vec<Vec2>) {
    let noise = NoiseModel::isotropic(0.2).unwrap();
    let a = AgentState::at_rest(0, Vec2::new(-4.0, 0.0), 1.0, 1.0)
        .unwrap()
        .with_noise(noise);
    let b = AgentState::at_rest(1, Vec2::new(4.0, 0.1), 1.5, 0.8)
        .unwrap()
        .with_noise(noise);
    (
        Scene::new(vec![a, b], 0.95, 500.0).unwrap(),
        vec![Vec2::new(2.0, 0.0), Vec2::new(-2.0, 0.0)],
    )
}

#[test]
fn budget_matches_the_closed_form() {
    let (s, _) = head_on();
    let [a, b] = [s.agents()[0], s.agents()[1]];
    let got = pair_budget(&a, &b, 0.95, CvarConvention::Conservative).unwrap();
    assert!(
        (got - budget_oracle(&a, &b)).abs() < 1e-9,
        "{got} vs {}",
        budget_oracle(&a, &b)
    );
    assert_eq!(
        got,
        pair_budget(&b, &a, 0.95, CvarConvention::Conservative).unwrap()
    );
    let literal = pair_budget(&a, &b, 0.95, CvarConvention::PaperLiteral).unwrap();
    assert!(literal > got);
}

#[test]
fn head_on_split_constraints_imply_the_joint_one() {
    let (s, nominals) = head_on();
    let bounds = Bounds::symmetric(3.0).unwrap();
    let step = decentralized_step(
        &s,
        &nominals,
        bounds,
        ControllerKind::RiskAwareDecentralized,
        StepOptions::default(),
    )
    .unwrap();
    let [a, b] = [s.agents()[0], s.agents()[1]];
    let (ua, ub) = (step.decisions[0].u_applied, step.decisions[1].u_applied);
    assert!(step
        .decisions
        .iter()
        .all(|d| d.qp_status == QpStatus::Optimal));
    // The nominals close the gap too fast, so both agents must give way.
    assert!(step.decisions.iter().all(|d| d.deviation > 1e-6));
    let lhs = (a.position - b.position).dot(ua - ub) * -2.0;
    assert!(lhs <= budget_oracle(&a, &b) + 1e-9);
    let (wa, wb) = (step.weights.get(0, 1), step.weights.get(1, 0));
    assert_eq!(wa + wb, 1.0);
    assert!((step.decisions[0].weights_used[0].1 - wa).abs() < 1e-15);
}

#[test]
fn fixed_share_gives_the_lower_id_its_share() {
    let (s, nominals) = head_on();
    let step = decentralized_step(
        &s,
        &nominals,
        Bounds::symmetric(3.0).unwrap(),
        ControllerKind::FixedShareDecentralized(0.3),
        StepOptions::default(),
    )
    .unwrap();
    assert_eq!(step.decisions[0].weights_used, vec![(1, 0.3)]);
    assert_eq!(step.decisions[1].weights_used, vec![(0, 0.7)]);
}

#[test]
fn centralized_two_agents_match_the_closed_form() {
    // With a wide box only the pair constraint can bind: u_i = ū_i − λA,
    // u_j = ū_j + λA, λ = (A(ū_i − ū_j) − b) / (2‖A‖²).
    let (s, nominals) = head_on();
    let [a, b] = [s.agents()[0], s.agents()[1]];
    let step = centralized_step(
        &s,
        &nominals,
        Bounds::symmetric(100.0).unwrap(),
        StepOptions::default(),
    )
    .unwrap();
    let row = (a.position - b.position) * -2.0;
    let bud = budget_oracle(&a, &b);
    let lambda = (row.dot(nominals[0] - nominals[1]) - bud) / (2.0 * row.norm_squared());
    assert!(lambda > 0.0);
    let (ua, ub) = (nominals[0] - row * lambda, nominals[1] + row * lambda);
    assert!((step.decisions[0].u_applied - ua).norm() < 1e-5);
    assert!((step.decisions[1].u_applied - ub).norm() < 1e-5);
}

fn arb_scene() -> impl Strategy<Value = (Scene, Vec<Vec2>)> {
    (2usize..6, any::<u64>()).prop_map(|(n, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut agents: Vec<AgentState> = Vec::new();
        while agents.len() < n {
            let p = Vec2::new(rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0));
            let r = rng.random_range(0.5..1.5);
            if agents
                .iter()
                .all(|a| a.position.distance(p) > a.safety_radius.max(r) + 0.5)
            {
                let sigma = rng.random_range(0.0..0.2);
                agents.push(
                    AgentState::at_rest(agents.len() as u32, p, r, rng.random_range(0.3..2.0))
                        .unwrap()
                        .with_noise(NoiseModel::isotropic(sigma).unwrap()),
                );
            }
        }
        let nominals = (0..n)
            .map(|_| Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let c = cbf_swarm::types::default_loss_offset(&agents, &[]);
        (Scene::new(agents, 0.95, c).unwrap(), nominals)
    })
}

fn total_deviation(nominals: &[Vec2], us: &[Vec2]) -> f64 {
    nominals
        .iter()
        .zip(us)
        .map(|(n, u)| (*u - *n).norm_squared())
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn optimal_pairs_satisfy_the_joint_constraint((scene, nominals) in arb_scene()) {
        let step = control_step(&scene, &nominals, Bounds::symmetric(3.0).unwrap(), ControllerKind::RiskAwareDecentralized, StepOptions::default()).unwrap();
        let agents = scene.agents();
        for i in 0..agents.len() {
            for j in (i + 1)..agents.len() {
                let (di, dj) = (&step.decisions[i], &step.decisions[j]);
                if di.qp_status == QpStatus::Optimal && dj.qp_status == QpStatus::Optimal {
                    let lhs = (agents[i].position - agents[j].position).dot(di.u_applied - dj.u_applied) * -2.0;
                    prop_assert!(lhs <= budget_oracle(&agents[i], &agents[j]) + 1e-9, "pair ({}, {})", i, j);
                }
            }
        }
    }

    #[test]
    fn centralized_never_deviates_more_than_decentralized((scene, nominals) in arb_scene()) {
        let bounds = Bounds::symmetric(3.0).unwrap();
        let dec = control_step(&scene, &nominals, bounds, ControllerKind::RiskAwareDecentralized, StepOptions::default()).unwrap();
        prop_assume!(dec.decisions.iter().all(|d| d.qp_status == QpStatus::Optimal));
        let cen = control_step(&scene, &nominals, bounds, ControllerKind::Centralized, StepOptions::default()).unwrap();
        prop_assert!(cen.decisions.iter().all(|d| d.qp_status == QpStatus::Optimal));
        let ud: Vec<Vec2> = dec.decisions.iter().map(|d| d.u_applied).collect();
        let uc: Vec<Vec2> = cen.decisions.iter().map(|d| d.u_applied).collect();
        prop_assert!(total_deviation(&nominals, &uc) <= total_deviation(&nominals, &ud) + 1e-6);
        let agents = scene.agents();
        for i in 0..agents.len() {
            prop_assert!(bounds.contains(uc[i]));
            for j in (i + 1)..agents.len() {
                let lhs = (agents[i].position - agents[j].position).dot(uc[i] - uc[j]) * -2.0;
                prop_assert!(lhs <= budget_oracle(&agents[i], &agents[j]) + 1e-6);
            }
        }
    }
}
