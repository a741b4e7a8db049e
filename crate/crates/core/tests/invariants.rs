use consac::data::{generate_homography_scene, generate_line_scene, scene_from_json, scene_to_json, SynthHomographyConfig, SynthLineConfig};
use consac::eval::hungarian_assign;
use consac::sampler::{sample_minimal_set, sampling_distribution, stream_rng};
use consac::scoring::{cumulative_inlier_ratios, soft_inliers};
use consac::{Architecture, CostMatrix, ModelInstance, ModelKind, Network, Observation, ScoringParams, StateVector};
use proptest::prelude::*;

fn brute_force(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.rows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.cols() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost.get(row, c), best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
    best
}

fn line(a: f64, b: f64, c: f64) -> ModelInstance {
    ModelInstance::from_params(ModelKind::Line, &[a, b, c]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hungarian_is_optimal_for_wide_matrices(rows in 1usize..5, extra in 0usize..3, data in prop::collection::vec(0.0f64..10.0, 64)) {
        let cols = rows + extra;
        let cost = CostMatrix::from_fn(rows, cols, |r, c| data[r * cols + c]).unwrap();
        let (pairs, total) = hungarian_assign(&cost).unwrap();
        prop_assert_eq!(pairs.len(), rows);
        prop_assert!((total - brute_force(&cost)).abs() < 1e-12);
        let (tpairs, ttotal) = hungarian_assign(&CostMatrix::from_fn(cols, rows, |r, c| cost.get(c, r)).unwrap()).unwrap();
        prop_assert_eq!(tpairs.len(), rows);
        prop_assert!((ttotal - total).abs() < 1e-12);
    }

    #[test]
    fn sampling_distribution_is_normalized(weights in prop::collection::vec(0.0f64..1.0, 1..50)) {
        let p = sampling_distribution(&weights).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn minimal_sets_index_into_the_observations(weights in prop::collection::vec(0.0f64..1.0, 4..40), seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (idx, log_prob) = sample_minimal_set(&weights, 4, &mut rng).unwrap();
        prop_assert_eq!(idx.len(), 4);
        prop_assert!(idx.iter().all(|&i| i < weights.len()));
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), 4);
        prop_assert!(log_prob <= 0.0 && log_prob.is_finite());
    }

    #[test]
    fn state_entries_stay_in_unit_interval(updates in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..6)) {
        let mut state = StateVector::zeros(12);
        let mut previous = state.entries().to_vec();
        for u in &updates {
            state.absorb(u);
            for (i, (&now, &before)) in state.entries().iter().zip(&previous).enumerate() {
                prop_assert!(now >= before && now <= 1.0);
                prop_assert!(now >= u[i]);
            }
            previous = state.entries().to_vec();
        }
    }

    #[test]
    fn cumulative_ratios_are_bounded_and_monotone(params in prop::collection::vec(-1.0f64..1.0, 9), seed in 0u64..1000) {
        let scene = generate_line_scene(&SynthLineConfig::default(), seed).unwrap();
        let models: Vec<_> = params.chunks(3).filter(|c| c[0].abs() + c[1].abs() > 1e-3).map(|c| line(c[0], c[1], c[2])).collect();
        let scoring = ScoringParams::new(0.015).unwrap();
        let ratios = cumulative_inlier_ratios(&models, &scene.observations, &scoring);
        for w in ratios.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        prop_assert!(ratios.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }

    #[test]
    fn soft_inliers_decrease_with_distance(c in -0.5f64..0.5, tau in 1e-4f64..0.1) {
        let model = line(0.0, 1.0, c);
        let obs: Vec<_> = (0..10).map(|i| Observation::point(0.3, -c + 0.01 * i as f64)).collect();
        let s = soft_inliers(&model, &obs, &ScoringParams::new(tau).unwrap());
        for w in s.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn network_weights_are_a_distribution(seed in 0u64..50, n in 1usize..40) {
        let net = Network::new(Architecture { input_dim: 2, channels: 4, blocks: 1, batch_norm: true }, seed).unwrap();
        let scene = generate_line_scene(&SynthLineConfig::default(), seed).unwrap();
        let obs = &scene.observations[..n.min(scene.len())];
        let p = net.probabilities(obs, &StateVector::zeros(obs.len())).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn scenes_survive_a_json_round_trip(seed in any::<u64>()) {
        let lines = generate_line_scene(&SynthLineConfig::default(), seed).unwrap();
        prop_assert_eq!(&scene_from_json(&scene_to_json(&lines)).unwrap(), &lines);
        let planes = generate_homography_scene(&SynthHomographyConfig::default(), seed).unwrap();
        prop_assert_eq!(&scene_from_json(&scene_to_json(&planes)).unwrap(), &planes);
    }
}
