mod common;

use std::collections::VecDeque;

use common::rng;
use rand::Rng;
use rewardrank_core::shaping::{
    base_table, check_invariance, discounted_shaping, median_first_success, observation_divergence, q_learning,
    q_learning_study, shape, shaped_table, shaping_term, value_iteration, GridworldMDP, PotentialFn, QConfig, ACTIONS,
};

#[test]
fn shaping_telescopes_along_a_path() {
    let mut r = rng(21);
    for _ in 0..50 {
        let gamma = r.random_range(0.5..0.999);
        let phis: Vec<f64> = (0..21).map(|_| r.random_range(-5.0..5.0)).collect();
        let total = discounted_shaping(&phis, gamma).unwrap();
        let closed = gamma.powi(20) * phis[20] - phis[0];
        assert!((total - closed).abs() < 1e-10, "{total} vs {closed}");
    }
}

#[test]
fn constant_and_zero_potentials() {
    let gamma: f64 = 0.9;
    let c = 2.5;
    let total = discounted_shaping(&[c; 11], gamma).unwrap();
    assert!((total - c * (gamma.powi(10) - 1.0)).abs() < 1e-12);
    assert_eq!(discounted_shaping(&[0.0; 11], gamma).unwrap(), 0.0);
    assert_eq!(shape(0.7, 0.0, 0.0, gamma).unwrap(), 0.7);
    assert!(shaping_term(f64::NAN, 0.0, gamma).is_err());
}

#[test]
fn two_cell_chain_values() {
    let mdp = GridworldMDP::corners(2, 1).unwrap();
    let base = value_iteration(&mdp, &base_table(&mdp), 1e-12).unwrap();
    assert!((base.values[0] - 1.0).abs() < 1e-12);
    assert_eq!(base.values[1], 0.0);
    let phi = [0.3, 0.8];
    let shaped = value_iteration(&mdp, &shaped_table(&mdp, &phi).unwrap(), 1e-12).unwrap();
    assert!((shaped.values[0] - (1.0 - 0.3)).abs() < 1e-10);
    assert!((shaped.values[1] + 0.8).abs() < 1e-10);
    assert_eq!(shaped.policy[0], base.policy[0]);
}

fn bfs_distances(mdp: &GridworldMDP) -> Vec<usize> {
    let mut dist = vec![usize::MAX; mdp.num_states()];
    let mut queue = VecDeque::from([mdp.goal_state()]);
    dist[mdp.goal_state()] = 0;
    while let Some(s) = queue.pop_front() {
        for n in 0..mdp.num_states() {
            if dist[n] == usize::MAX && ACTIONS.iter().any(|&a| mdp.next(n, a) == s) {
                dist[n] = dist[s] + 1;
                queue.push_back(n);
            }
        }
    }
    dist
}

#[test]
fn value_iteration_matches_shortest_path_oracle() {
    let mdp = GridworldMDP::corners(5, 5).unwrap();
    let dist = bfs_distances(&mdp);
    let sol = value_iteration(&mdp, &base_table(&mdp), 1e-12).unwrap();
    for s in 0..mdp.num_states() {
        let expect = if dist[s] == 0 { 0.0 } else { mdp.gamma.powi(dist[s] as i32 - 1) };
        assert!((sol.values[s] - expect).abs() < 1e-8, "state {s}");
        if s != mdp.goal_state() {
            assert_eq!(dist[mdp.next(s, sol.policy[s])], dist[s] - 1, "state {s}");
        }
    }
}

#[test]
fn shaping_preserves_policy_and_shifts_values() {
    let mut r = rng(22);
    let mut checks = 0;
    for (w, h) in [(3, 3), (5, 5), (7, 4), (9, 9), (11, 6), (13, 13)] {
        let mdp = GridworldMDP::corners(w, h).unwrap();
        let far = (w + h - 2) as f64;
        let mut potentials = vec![
            PotentialFn::NegManhattan { scale: 1.0, offset: 0.0 }.values(&mdp).unwrap(),
            PotentialFn::NegManhattan { scale: far, offset: 1.0 }.values(&mdp).unwrap(),
        ];
        for _ in 0..10 {
            potentials.push((0..mdp.num_states()).map(|_| r.random_range(-1.0..1.0)).collect());
        }
        for phi in &potentials {
            let c = check_invariance(&mdp, phi, 1e-12).unwrap();
            assert_eq!(c.policy_agreement, 1.0, "{w}x{h}");
            assert!(c.max_value_residual <= 1e-8, "{w}x{h}: {}", c.max_value_residual);
            checks += 1;
        }
    }
    assert!(checks >= 60);
}

#[test]
fn adjacent_goal_is_learned_quickly() {
    let mdp = GridworldMDP::corners(2, 1).unwrap();
    let config = QConfig {
        episodes: 50,
        ..QConfig::default()
    };
    for seed in 0..20 {
        let curve = q_learning(&mdp, &base_table(&mdp), &config, seed).unwrap();
        assert!(curve.first_success.is_some_and(|e| e <= 50), "seed {seed}");
    }
}

#[test]
fn q_learning_is_reproducible() {
    let mdp = GridworldMDP::corners(5, 5).unwrap();
    let config = QConfig {
        episodes: 40,
        ..QConfig::default()
    };
    let a = q_learning(&mdp, &base_table(&mdp), &config, 3).unwrap();
    let b = q_learning(&mdp, &base_table(&mdp), &config, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn distance_potential_speeds_up_learning() {
    let mdp = GridworldMDP::corners(9, 9).unwrap();
    let config = QConfig::default();
    let seeds: Vec<u64> = (0..20).collect();
    let phi = PotentialFn::NegManhattan { scale: 16.0, offset: 1.0 }.values(&mdp).unwrap();
    let sparse = q_learning_study(&mdp, &base_table(&mdp), &config, &seeds).unwrap();
    let shaped = q_learning_study(&mdp, &shaped_table(&mdp, &phi).unwrap(), &config, &seeds).unwrap();
    let (ms, mh) = (
        median_first_success(&sparse, config.episodes),
        median_first_success(&shaped, config.episodes),
    );
    println!("median episodes to first success: sparse {ms}, shaped {mh}");
    assert!(mh < ms);
}

#[test]
fn noisy_observation_potential_can_change_the_policy() {
    let mdp = GridworldMDP::corners(7, 7).unwrap();
    let phi = PotentialFn::NegManhattan { scale: 12.0, offset: 1.0 }.values(&mdp).unwrap();
    let mut r = rng(23);
    let report = observation_divergence(&mdp, 10, 1e-10, |s| Ok(phi[s] + r.random_range(-0.5..0.5))).unwrap();
    println!("divergence: {report:?}");
    assert_eq!(report.probes, 10);
    assert!(report.diverged_probes > 0);
    let exact = observation_divergence(&mdp, 3, 1e-10, |s| Ok(phi[s])).unwrap();
    assert_eq!(exact.diverged_probes, 0);
}
