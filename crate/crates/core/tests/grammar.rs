mod common;

use proptest::prelude::*;

use propel::dsl::{parse, parse_with_sensors, Program};

#[test]
fn track_program_survives_print_and_parse() {
    let p = parse_with_sensors(common::TRACK_PROGRAM, &[("TrackPos", 0), ("RPM", 1)]).unwrap();
    common::check_round_trip(&p).unwrap();
}

#[test]
fn garbage_is_rejected_with_a_position() {
    let err = parse("pid<0, 1, 2>").unwrap_err();
    assert!(err.to_string().contains("column"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_inverts_print(p in common::program(3, 2)) {
        common::check_round_trip(&p)?;
    }
}

proptest! {
    #[test]
    fn evaluation_is_pure(p in common::program(3, 1), w in common::window(3)) {
        let a = p.eval(&w, 1);
        let b = p.eval(&w, 1);
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn exactly_one_branch_is_taken(
        c in common::cond(3),
        a in common::program(3, 1),
        b in common::program(3, 1),
        w in common::window(3),
    ) {
        let ya = a.eval(&w, 1);
        let yb = b.eval(&w, 1);
        let y = Program::if_then_else(c.clone(), a, b).eval(&w, 1);
        let expected = if c.holds(w.newest()) { &ya } else { &yb };
        prop_assert_eq!(
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            expected.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
