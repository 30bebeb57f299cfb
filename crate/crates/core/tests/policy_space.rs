mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mixing_is_linear_in_the_weight(
        (pi, f) in (1usize..4).prop_flat_map(|d| (common::action(d), common::action(d))),
        l1 in 1e-6..1.0f64,
        l2 in 1e-6..1.0f64,
        w in common::window(2),
    ) {
        common::check_linearity(&pi, &f, l1, l2, &w)?;
    }

    #[test]
    fn empirical_distance_is_a_metric(
        (a, b, c) in (1usize..4).prop_flat_map(|d| (common::action(d), common::action(d), common::action(d))),
        s in common::sample_set(2),
    ) {
        common::check_metric(&a, &b, &c, &s)?;
    }
}
