use mlmc_dropout::ladder_alloc::{
    allocate, allocate_mean, cost, enumerate_fixed_cost, make_geometric_ladder, round_allocation, CostModel, Target,
    VarianceModel,
};
use mlmc_dropout::mlmc::{
    closure_level_weights, mean_level_weights, mlmc_estimate, pooled_variance_update, uncoupled_evals, FidelityLadder,
};
use mlmc_dropout::predictors::{AnalyticFamily, CountingEvaluator, MomentSet};
use proptest::prelude::*;

fn two_pass(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) }
}

fn kind() -> impl Strategy<Value = CostModel> {
    prop_oneof![Just(CostModel::Coupled), Just(CostModel::Uncoupled)]
}

fn target() -> impl Strategy<Value = Target> {
    prop_oneof![Just(Target::Mean), Just(Target::Variance)]
}

fn ladder() -> impl Strategy<Value = FidelityLadder> {
    (2usize..8, prop_oneof![Just(1.5f64), Just(2.0), Just(4.0)], 0u32..5)
        .prop_map(|(t0, r, l)| {
            let t_max = (t0 as f64 * r.powi(l as i32)).ceil() as usize + 1;
            make_geometric_ladder(t0, r, t_max).unwrap()
        })
}

proptest! {
    #[test]
    fn pooled_update_matches_two_pass(
        coarse in prop::collection::vec(-100.0f64..100.0, 2..200),
        block in prop::collection::vec(-100.0f64..100.0, 2..200),
    ) {
        let (yc, vc) = two_pass(&coarse);
        let (v, y) = pooled_variance_update(vc, yc, coarse.len(), &block).unwrap();
        let all: Vec<f64> = coarse.iter().chain(&block).copied().collect();
        let (y_ref, v_ref) = two_pass(&all);
        prop_assert!((y - y_ref).abs() <= 1e-12 * y_ref.abs().max(1.0));
        prop_assert!(rel(v, v_ref) <= 1e-12, "{v} vs {v_ref}");
    }

    #[test]
    fn rounded_allocation_is_feasible(lad in ladder(), kind in kind(), target in target(), c in 50.0f64..5000.0) {
        let floor: u64 = kind.weights(&lad).iter().map(|a| 2 * a).sum();
        let cont = allocate(&lad, c, kind, target, VarianceModel::Closure).unwrap();
        prop_assert!(rel(cont.cost(&lad), c) < 1e-12);
        match round_allocation(&cont, &lad, c, kind) {
            Ok(r) => {
                prop_assert!(r.ms.iter().all(|&m| m >= 2));
                prop_assert!(r.cost as f64 <= c);
                prop_assert_eq!(r.cost, cost(&lad, &r.ms, kind).unwrap());
                // no level is cheap enough to take one more replicate
                let slack = c - r.cost as f64;
                prop_assert!(kind.weights(&lad).iter().all(|&a| a as f64 > slack));
            }
            Err(_) => prop_assert!(floor as f64 > c),
        }
    }

    #[test]
    fn variance_allocation_is_invariant_to_scale(
        lad in ladder(), kind in kind(), kurt in 1.0f64..9.0, s in 1e-6f64..1e6,
    ) {
        let base = MomentSet::new(0.0, 1.0, kurt).unwrap();
        let scaled = MomentSet::new(3.0, s, kurt * s * s).unwrap();
        let a = allocate(&lad, 1000.0, kind, Target::Variance, VarianceModel::Moments(base)).unwrap();
        let b = allocate(&lad, 1000.0, kind, Target::Variance, VarianceModel::Moments(scaled)).unwrap();
        for (x, y) in a.ms.iter().zip(&b.ms) {
            prop_assert!(rel(*x, *y) < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn geometric_ladder_invariants(t0 in 2usize..20, r in 1.05f64..5.0, extra in 0usize..500) {
        let t_max = t0 + extra;
        let lad = make_geometric_ladder(t0, r, t_max).unwrap();
        let ts = lad.ts();
        prop_assert_eq!(ts[0], t0);
        prop_assert!(*ts.last().unwrap() <= t_max);
        prop_assert!(ts.windows(2).all(|w| w[1] >= w[0] + 2));
        for (l, w) in ts.windows(2).enumerate() {
            let raw = t0 as f64 * r.powi(l as i32 + 1);
            prop_assert!(w[1] as f64 >= raw * (1.0 - 1e-9));
        }
    }

    #[test]
    fn enumeration_reprices_to_the_budget(lad in ladder(), kind in kind(), c in 10u64..400) {
        prop_assume!(lad.len() <= 3);
        let mut prev: Option<Vec<usize>> = None;
        let mut n = 0;
        for ms in enumerate_fixed_cost(&lad, c, kind, 2).unwrap() {
            prop_assert_eq!(cost(&lad, &ms, kind).unwrap(), c);
            prop_assert!(ms.iter().all(|&m| m >= 2));
            if let Some(p) = &prev {
                prop_assert!(ms[1..] > p[1..]);
            }
            prev = Some(ms);
            n += 1;
        }
        let a = kind.weights(&lad);
        let brute = brute_force_count(&a, c);
        prop_assert_eq!(n, brute);
    }

    #[test]
    fn estimator_is_affine_equivariant(
        seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0,
        ms in prop::collection::vec(2usize..6, 3),
    ) {
        let lad = FidelityLadder::new(vec![2, 4, 8]).unwrap();
        let base = AnalyticFamily::GaussianLocation { mu: 0.5, sigma: 1.0 };
        let moved = AnalyticFamily::GaussianLocation { mu: 0.5 * scale + shift, sigma: scale };
        let a = mlmc_estimate(&base, &[0.0], &lad, &ms, seed).unwrap();
        let b = mlmc_estimate(&moved, &[0.0], &lad, &ms, seed).unwrap();
        prop_assert!((b.y_mlmc[0] - (a.y_mlmc[0] * scale + shift)).abs() < 1e-9 * (1.0 + scale + shift.abs()));
        prop_assert!(rel(b.v_mlmc[0], a.v_mlmc[0] * scale * scale) < 1e-8);
        prop_assert!(rel(b.s2_y[0], a.s2_y[0] * scale * scale) < 1e-8);
    }

    #[test]
    fn counted_evaluations_match_uncoupled_cost(seed in any::<u64>(), ms in prop::collection::vec(2usize..8, 1..4)) {
        let lad = FidelityLadder::new((0..ms.len()).map(|l| 3 << l).collect()).unwrap();
        let e = CountingEvaluator::new(AnalyticFamily::UniformScaledSineU { delta: 0.5 });
        let est = mlmc_estimate(&e, &[0.25], &lad, &ms, seed).unwrap();
        prop_assert_eq!(e.count(), uncoupled_evals(&lad, &ms));
        prop_assert_eq!(est.evals_performed, e.count());
    }
}

fn brute_force_count(a: &[u64], c: u64) -> usize {
    fn go(a: &[u64], left: u64) -> usize {
        match a {
            [] => usize::from(left == 0),
            [first, rest @ ..] => (2..).take_while(|m| m * first <= left).map(|m| go(rest, left - m * first)).sum(),
        }
    }
    go(a, c)
}

#[test]
fn level_weights_decrease_along_geometric_ladders() {
    for r in [1.5f64, 2.0, 4.0] {
        for t0 in 2..=16usize {
            let t_max = (t0 as f64 * r.powi(5)).ceil() as usize;
            let lad = make_geometric_ladder(t0, r, t_max).unwrap();
            assert!(lad.levels() <= 5);
            for ws in [mean_level_weights(&lad), closure_level_weights(&lad)] {
                assert!(ws[1..].windows(2).all(|w| w[1] <= w[0]), "r={r} t0={t0} {:?} {ws:?}", lad.ts());
            }
            let m = allocate_mean(&lad, 1000.0, CostModel::Uncoupled).unwrap();
            assert!(m.ms.windows(2).all(|w| w[1] <= w[0]), "r={r} t0={t0} {:?}", m.ms);
        }
    }
}
