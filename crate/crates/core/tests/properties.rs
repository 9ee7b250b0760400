mod common;

use common::*;
use ctlearn_core::routing::RoutingStrategy;
use proptest::prelude::*;

fn routing() -> impl Strategy<Value = RoutingStrategy> {
    prop_oneof![
        Just(RoutingStrategy::tied()),
        Just(RoutingStrategy::fa()),
        Just(RoutingStrategy::dfa()),
        Just(RoutingStrategy::kp_layerwise()),
        Just(RoutingStrategy::kp_direct()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn breakpoints_land_exactly(mut bps in prop::collection::vec(0.001f64..0.999, 0..6)) {
        bps.sort_by(f64::total_cmp);
        bps.dedup();
        prop_assert_eq!(breakpoints_are_hit(&bps), Ok(()));
    }

    #[test]
    fn flatten_is_lossless(widths in prop::collection::vec(1usize..6, 2..5), r in routing(), seed in any::<u64>()) {
        prop_assert_eq!(flatten_round_trips(&small_net(&widths, r, seed)), Ok(()));
    }

    #[test]
    fn weights_decay_exponentially(tau_w in 0.2f64..5.0, tau_v in 0.2f64..5.0, seed in 0u64..100) {
        prop_assert_eq!(decay_is_exponential(tau_w, tau_v, 0.5, seed), Ok(()));
    }

    #[test]
    fn neuron_view_matches_layer_view(
        widths in prop::collection::vec(1usize..5, 3..5),
        r in routing(),
        seed in any::<u64>(),
        x0 in -1.0f64..1.0,
    ) {
        let net = small_net(&widths, r, seed);
        let x: Vec<f64> = (0..widths[0]).map(|i| x0 + 0.3 * i as f64).collect();
        let classes = *widths.last().unwrap();
        let mut target = vec![0.0; classes];
        target[seed as usize % classes] = 1.0;
        prop_assert_eq!(neurons_stack_to_layers(&net, &x, &target), Ok(()));
    }

    #[test]
    fn overlap_budget_identity(t in 0.005f64..0.5, ratio in -1.5f64..1.5, tau in 0.001f64..100.0) {
        prop_assert_eq!(budget_adds_up(t, ratio * t, tau), Ok(()));
        prop_assert_eq!(budget_adds_up(t, ratio * t, f64::INFINITY), Ok(()));
    }

    #[test]
    fn pooling_preserves_mean(pixels in prop::collection::vec(any::<u8>(), 784)) {
        prop_assert_eq!(pooling_keeps_mean(&pixels, 28, 4), Ok(()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn frozen_evaluation_has_no_side_effects(seed in 0u64..1000) {
        prop_assert_eq!(evaluation_is_pure(seed, 30), Ok(()));
    }

    #[test]
    fn identical_configs_give_identical_records(seed in 0u64..1000) {
        prop_assert_eq!(runs_are_deterministic(seed, 30), Ok(()));
    }
}
