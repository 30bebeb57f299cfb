//! Strategies and property checks shared by the property tests and the
//! acceptance target.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use propel::dsl::{parse, Comparator, Cond, PidConfig, Program};
use propel::policy::{empirical_distance, ConstantPolicy, MixedPolicy, ObservationWindow, Policy, StateSampleSet};

pub const TRACK_PROGRAM: &str = "if (s[TrackPos] < 0.011 and s[TrackPos] > −0.011) \
    then PID⟨RPM,0.45,3.54,0.03,53.39⟩ else PID⟨RPM,0.39,3.54,0.03,53.39⟩";

/// Finite floats: arbitrary bit patterns mixed with short decimals.
pub fn number() -> impl Strategy<Value = f64> {
    prop_oneof![
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
        (-10_000i64..10_000).prop_map(|v| v as f64 / 100.0),
    ]
}

pub fn cond(obs_dim: usize) -> impl Strategy<Value = Cond> {
    let atom = (0..obs_dim, any::<bool>(), number()).prop_map(|(sensor, less, threshold)| Cond::Atom {
        sensor,
        cmp: if less { Comparator::Less } else { Comparator::Greater },
        threshold,
    });
    atom.prop_recursive(3, 8, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Cond::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Cond::Or(Box::new(a), Box::new(b))),
            inner.prop_map(|a| Cond::Not(Box::new(a))),
        ]
    })
}

/// Well-typed programs over `obs_dim` sensors and `action_dim` outputs.
pub fn program(obs_dim: usize, action_dim: usize) -> impl Strategy<Value = Program> {
    let leaf = prop_oneof![
        prop::collection::vec(number(), action_dim).prop_map(Program::Const),
        (0..obs_dim, 0..action_dim, number(), number(), number(), number()).prop_map(
            |(sensor, output, target, kp, ki, kd)| Program::Pid(PidConfig { sensor, target, kp, ki, kd, output })
        ),
    ];
    leaf.prop_recursive(4, 24, 4, move |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 2..4).prop_map(Program::Add),
            (number(), inner.clone()).prop_map(|(c, p)| Program::Scale(c, Box::new(p))),
            (cond(obs_dim), inner.clone(), inner).prop_map(|(c, a, b)| Program::if_then_else(c, a, b)),
        ]
    })
}

pub fn window(obs_dim: usize) -> impl Strategy<Value = ObservationWindow> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, obs_dim), 10)
        .prop_map(|rows| ObservationWindow::from_samples(&rows, 0.05).unwrap())
}

pub fn sample_set(obs_dim: usize) -> impl Strategy<Value = StateSampleSet> {
    prop::collection::vec(prop::collection::vec(window(obs_dim), 1..6), 1..4).prop_map(|eps| {
        let mut s = StateSampleSet::new();
        eps.into_iter().for_each(|e| s.push_episode(e));
        s
    })
}

pub fn action(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0..100.0f64, dim)
}

pub fn check_round_trip(p: &Program) -> Result<(), TestCaseError> {
    let text = p.to_string();
    let back = parse(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
    prop_assert_eq!(&back, p, "text: {}", text);
    Ok(())
}

/// `h_l1(w) - h_l2(w) = (l1 - l2) f(w)` up to rounding of the two sums.
pub fn check_linearity(
    pi: &[f64],
    f: &[f64],
    l1: f64,
    l2: f64,
    w: &ObservationWindow,
) -> Result<(), TestCaseError> {
    let pp = ConstantPolicy(pi.to_vec());
    let fp = ConstantPolicy(f.to_vec());
    let h1 = MixedPolicy::new(&pp, &fp, l1).unwrap().act(w).unwrap();
    let h2 = MixedPolicy::new(&pp, &fp, l2).unwrap().act(w).unwrap();
    for i in 0..pi.len() {
        let lhs = h1[i] - h2[i];
        let rhs = (l1 - l2) * f[i];
        let scale = pi[i].abs() + (l1 * f[i]).abs() + (l2 * f[i]).abs();
        prop_assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * scale, "component {}: {} vs {}", i, lhs, rhs);
    }
    Ok(())
}

pub fn check_metric(a: &[f64], b: &[f64], c: &[f64], s: &StateSampleSet) -> Result<(), TestCaseError> {
    let (pa, pb, pc) = (ConstantPolicy(a.to_vec()), ConstantPolicy(b.to_vec()), ConstantPolicy(c.to_vec()));
    let d = |x: &ConstantPolicy, y: &ConstantPolicy| empirical_distance(x, y, s).unwrap();
    prop_assert_eq!(d(&pa, &pa), 0.0);
    prop_assert!(d(&pa, &pb) >= 0.0);
    prop_assert_eq!(d(&pa, &pb), d(&pb, &pa));
    let (ab, bc, ac) = (d(&pa, &pb), d(&pb, &pc), d(&pa, &pc));
    prop_assert!(ac <= ab + bc + 1e-12 * (ab + bc), "{} > {} + {}", ac, ab, bc);
    Ok(())
}
