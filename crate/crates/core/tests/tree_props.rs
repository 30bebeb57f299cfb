use proptest::prelude::*;

use propel::tree::{fit_tree, tree_mse, RegressionTree, TreeNode};

fn dataset() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..4, 1usize..3, 5usize..80).prop_flat_map(|(obs, act, n)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, obs), n),
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, act), n),
        )
    })
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// `(lo, hi)` interval on `feature` that keeps `x` on its routing path.
fn cell(tree: &RegressionTree, x: &[f64], feature: usize) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut node = &tree.root;
    while let TreeNode::Split { feature: f, threshold, left, right } = node {
        let go_left = x[*f] < *threshold;
        if *f == feature {
            if go_left {
                hi = hi.min(*threshold);
            } else {
                lo = lo.max(*threshold);
            }
        }
        node = if go_left { left } else { right };
    }
    (lo, hi)
}

proptest! {
    #[test]
    fn refitting_own_predictions_reproduces_them((xs, ys) in dataset(), depth in 0usize..5, min_leaf in 1usize..5) {
        let t = fit_tree(&refs(&xs), &refs(&ys), depth, min_leaf).unwrap();
        let own: Vec<Vec<f64>> = xs.iter().map(|x| t.predict(x).to_vec()).collect();
        let t2 = fit_tree(&refs(&xs), &refs(&own), depth, min_leaf).unwrap();
        for x in &xs {
            prop_assert_eq!(t.predict(x), t2.predict(x));
        }
    }

    #[test]
    fn training_error_does_not_grow_with_depth((xs, ys) in dataset(), depth in 0usize..5, min_leaf in 1usize..5) {
        let shallow = fit_tree(&refs(&xs), &refs(&ys), depth, min_leaf).unwrap();
        let deep = fit_tree(&refs(&xs), &refs(&ys), depth + 1, min_leaf).unwrap();
        let (a, b) = (tree_mse(&shallow, &refs(&xs), &refs(&ys)), tree_mse(&deep, &refs(&xs), &refs(&ys)));
        prop_assert!(b <= a + 1e-12 * a.abs().max(1.0), "depth {} mse {} vs depth {} mse {}", depth, a, depth + 1, b);
    }

    #[test]
    fn prediction_is_constant_inside_a_cell(
        (xs, ys) in dataset(),
        pick in any::<prop::sample::Index>(),
        feature in any::<prop::sample::Index>(),
        u in 0.0..1.0f64,
    ) {
        let t = fit_tree(&refs(&xs), &refs(&ys), 4, 2).unwrap();
        let x = pick.get(&xs).clone();
        let f = feature.index(x.len());
        let (lo, hi) = cell(&t, &x, f);
        let (lo, hi) = (lo.max(-10.0), hi.min(10.0));
        let mut moved = x.clone();
        moved[f] = lo + u * (hi - lo);
        if moved[f] >= hi {
            return Ok(());
        }
        prop_assert_eq!(t.predict(&x), t.predict(&moved));
    }
}
