use std::sync::Arc;

use epose_core::env::ConstructionState;
use epose_core::eval::{exact_tsp, nearest_neighbor, optimality_gap, two_opt};
use epose_core::net::{checkpoint_bytes, model_from_bytes, Model, NetConfig};
use epose_core::routing::{
    generate_instance, instance_from_line, instance_to_line, tour_length, validate_solution, ProblemKind, Solution,
};
use epose_core::trainer::{compute_alpha_loss, soft_update, target_entropy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn any_kind() -> impl Strategy<Value = ProblemKind> {
    prop_oneof![Just(ProblemKind::Tsp), Just(ProblemKind::Cvrp), Just(ProblemKind::Sdvrp)]
}

/// Plays uniformly random feasible actions to the end of the episode,
/// checking the mask invariants at every step.
fn random_episode(kind: ProblemKind, n: usize, seed: u64) -> (ConstructionState, f64) {
    let inst = Arc::new(generate_instance(kind, n, seed).unwrap());
    let mut state = ConstructionState::reset(inst.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rewards = 0.0;
    let mut steps = 0;
    while !state.is_terminal() {
        let mask = state.feasible_mask().unwrap();
        let open: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        assert!(!open.is_empty(), "no feasible action before the end");
        assert_eq!(open.len(), state.num_feasible());
        for &j in &open {
            if kind == ProblemKind::Tsp || j != 0 {
                assert!(!state.visited()[j], "visited node {j} offered again");
            }
            if kind.is_vrp() && j != 0 {
                assert!(state.remaining_demand_units()[j] > 0);
                if kind == ProblemKind::Cvrp {
                    assert!(inst.demand_units()[j] <= state.remaining_capacity_units());
                }
            }
        }
        if kind.is_vrp() && state.current() == Some(0) && state.step_count() > 0 {
            assert!(!mask[0], "depot offered right after a depot visit");
        }
        let a = open[rng.random_range(0..open.len())];
        rewards += state.apply(a).unwrap();
        steps += 1;
        assert!(steps <= 4 * n + 4, "episode does not terminate");
    }
    (state, rewards)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_episodes_are_feasible_and_rewards_sum_to_minus_length(
        kind in any_kind(), n in 2usize..25, seed in any::<u64>()
    ) {
        let (state, rewards) = random_episode(kind, n, seed);
        let solution = state.solution().unwrap();
        let inst = state.instance();
        prop_assert!(validate_solution(inst, &solution).is_ok());
        let length = tour_length(inst, &solution).unwrap();
        prop_assert!((rewards + length).abs() <= 1e-9 * length.max(1.0));
        prop_assert!(state.feasible_mask().is_err());
        prop_assert_eq!(state.num_feasible(), 0);
    }

    #[test]
    fn tsp_length_ignores_rotation_and_direction(n in 3usize..30, seed in any::<u64>(), shift in 0usize..30) {
        let inst = generate_instance(ProblemKind::Tsp, n, seed).unwrap();
        let mut tour: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            tour.swap(i, rng.random_range(0..=i));
        }
        let base = Solution::new(&inst, tour.clone(), None).length();
        tour.rotate_left(shift % n);
        let rotated = Solution::new(&inst, tour.clone(), None).length();
        tour.reverse();
        let reversed = Solution::new(&inst, tour, None).length();
        prop_assert!((base - rotated).abs() <= 1e-12 * base);
        prop_assert!((base - reversed).abs() <= 1e-12 * base);
    }

    #[test]
    fn instances_survive_a_text_round_trip(kind in any_kind(), n in 2usize..60, seed in any::<u64>()) {
        let inst = generate_instance(kind, n, seed).unwrap();
        let back = instance_from_line(&instance_to_line(&inst)).unwrap();
        prop_assert_eq!(back, inst);
    }

    #[test]
    fn generation_is_a_function_of_its_arguments(kind in any_kind(), n in 2usize..40, seed in any::<u64>()) {
        prop_assert_eq!(generate_instance(kind, n, seed).unwrap(), generate_instance(kind, n, seed).unwrap());
        let inst = generate_instance(kind, n, seed).unwrap();
        prop_assert!(inst.coords().iter().all(|p| (0.0..1.0).contains(&p.x) && (0.0..1.0).contains(&p.y)));
        if kind.is_vrp() {
            prop_assert!(inst.demand_units()[1..].iter().all(|&d| (1..=9).contains(&d)));
        }
    }

    #[test]
    fn local_search_keeps_solutions_valid_and_never_lengthens(
        kind in any_kind(), n in 2usize..30, seed in any::<u64>()
    ) {
        let inst = generate_instance(kind, n, seed).unwrap();
        let start = nearest_neighbor(&inst).unwrap();
        prop_assert!(validate_solution(&inst, &start).is_ok());
        let improved = two_opt(&inst, &start);
        prop_assert!(validate_solution(&inst, &improved).is_ok());
        prop_assert!(improved.length() <= start.length() + 1e-12);
    }

    #[test]
    fn exact_tours_bound_heuristic_tours(n in 2usize..10, seed in any::<u64>()) {
        let inst = generate_instance(ProblemKind::Tsp, n, seed).unwrap();
        let exact = exact_tsp(&inst).unwrap();
        prop_assert!(validate_solution(&inst, &exact).is_ok());
        let heuristic = two_opt(&inst, &nearest_neighbor(&inst).unwrap());
        prop_assert!(exact.length() <= heuristic.length() + 1e-12);
        let gap = optimality_gap(heuristic.length(), exact.length()).unwrap();
        prop_assert!(gap >= -1e-9);
    }

    #[test]
    fn temperature_gradient_opposes_the_entropy_error(
        log_alpha in -6.0f64..2.0,
        counts in prop::collection::vec(2usize..30, 1..20),
        excess in -1.0f64..1.0,
    ) {
        let entropies: Vec<f64> = counts.iter().map(|&k| target_entropy(k, 0.98) + excess).collect();
        let (j, grad) = compute_alpha_loss(log_alpha, &entropies, &counts, 0.98).unwrap();
        prop_assert!((j - log_alpha.exp() * excess).abs() <= 1e-9);
        // A descent step lowers the temperature exactly when entropy is above target.
        prop_assert_eq!(grad > 0.0, excess > 0.0);
    }
}

#[test]
fn soft_update_stays_between_online_and_target() {
    let net = NetConfig {
        embed_dim: 8,
        encoder_layers: 1,
        heads: 2,
        ff_dim: 8,
        critic_layers: 1,
        critic_hidden: 4,
        ..NetConfig::default()
    };
    let mut model = Model::new(ProblemKind::Cvrp, net, 1, 0.03).unwrap();
    let q1 = model.params().group_ids(epose_core::net::Group::Q1);
    let q1t = model.params().group_ids(epose_core::net::Group::Q1Target);
    for &id in &q1 {
        model.params_mut().get_mut(id).value.mapv_inplace(|v| v + 1.0);
    }
    let before: Vec<_> = q1t.iter().map(|&id| model.params().get(id).value.clone()).collect();
    soft_update(&mut model, 0.25).unwrap();
    for ((&o, &t), old) in q1.iter().zip(&q1t).zip(&before) {
        let online = &model.params().get(o).value;
        let target = &model.params().get(t).value;
        let want = online * 0.25 + old * 0.75;
        assert!((target - &want).iter().all(|d| d.abs() < 1e-12));
    }
}

#[test]
fn checkpoint_bytes_restore_every_parameter() {
    let model = Model::new(ProblemKind::Sdvrp, NetConfig { embed_dim: 16, heads: 4, ..NetConfig::default() }, 3, 0.03)
        .unwrap();
    let bytes = checkpoint_bytes(&model);
    let back = model_from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint_bytes(&back), bytes);
    assert_eq!(back.kind(), ProblemKind::Sdvrp);
    assert_eq!(back.config(), model.config());
    for (a, b) in model.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        assert!((&a.value - &b.value).iter().all(|d| d.abs() <= 1e-6 * a.value.iter().fold(1.0f64, |m, v| m.max(v.abs()))));
    }
}
