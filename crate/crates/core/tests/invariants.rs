use proptest::prelude::*;
use ridgemc::diagnostics::{esjd, ks_distance, scaling_fit, Coords};
use ridgemc::manifold::{ambient_point, frame, tangent_normal_coords, ManifoldChart};
use ridgemc::rng::stream;
use ridgemc::rwm::{acceptance_log_ratio, run_chain};
use ridgemc::{AcceptFunction, BuiltinTargetId, ChainState, MultiscaleTarget, ProposalRule, StepMode, StepSize};

fn target_id() -> impl Strategy<Value = BuiltinTargetId> {
    prop_oneof![
        Just(BuiltinTargetId::GaussRidge),
        Just(BuiltinTargetId::CurvedRidge),
        (1usize..4).prop_map(|n_y| BuiltinTargetId::ProductRidge { n_y }),
    ]
}

proptest! {
    #[test]
    fn accept_functions_are_reversible(r in -30.0f64..30.0) {
        for f in [AcceptFunction::MetropolisHastings, AcceptFunction::Barker] {
            let lhs = r.exp() * f.value(-r);
            let rhs = f.value(r);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            prop_assert!((0.0..=1.0).contains(&rhs));
        }
    }

    #[test]
    fn log_ratio_is_antisymmetric(id in target_id(), x in -2.0f64..2.0, dx in -1.0f64..1.0, seed in any::<u64>()) {
        let t = MultiscaleTarget::builtin(id, 0.1).unwrap();
        let mut rng = stream(seed, 0);
        let (_, u) = t.sample_stationary(1, &mut rng).unwrap().remove(0);
        let du: Vec<f64> = u.iter().map(|v| 0.3 - 0.5 * v).collect();
        let fwd = acceptance_log_ratio(&t, &[x], &u, &[dx], &du).unwrap();
        let up: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + b).collect();
        let back_du: Vec<f64> = du.iter().map(|d| -d).collect();
        let back = acceptance_log_ratio(&t, &[x + dx], &up, &[-dx], &back_du).unwrap();
        prop_assert!((fwd + back).abs() < 1e-9);
    }

    #[test]
    fn ks_is_symmetric_and_bounded(a in prop::collection::vec(-5.0f64..5.0, 1..60), b in prop::collection::vec(-5.0f64..5.0, 1..60)) {
        let (d1, p1) = ks_distance(&a, &b).unwrap();
        let (d2, p2) = ks_distance(&b, &a).unwrap();
        prop_assert_eq!(d1, d2);
        prop_assert_eq!(p1, p2);
        prop_assert!((0.0..=1.0).contains(&d1));
        prop_assert!((0.0..=1.0).contains(&p1));
        prop_assert_eq!(ks_distance(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn chains_are_reproducible_and_esjd_nonnegative(id in target_id(), seed in any::<u64>(), ell in 0.2f64..3.0, unit in any::<bool>()) {
        let t = MultiscaleTarget::builtin(id, 0.2).unwrap();
        let mode = if unit { StepMode::Unit } else { StepMode::EpsilonScaled };
        let rule = ProposalRule::new(mode, StepSize::Constant(ell)).unwrap();
        let f = AcceptFunction::Barker;
        let init = ChainState::new(vec![0.3], vec![0.1; id.n_y()]);
        let a = run_chain(&t, &rule, &f, 200, init.clone(), 1, &mut stream(seed, 1)).unwrap();
        let b = run_chain(&t, &rule, &f, 200, init, 1, &mut stream(seed, 1)).unwrap();
        prop_assert_eq!(&a.states, &b.states);
        prop_assert!(a.accepted <= a.iterations);
        let e = esjd(&a, &Coords::All).unwrap();
        prop_assert!(e >= 0.0 && e.is_finite());
    }

    #[test]
    fn tangent_and_normal_blocks_are_complementary(x in -2.0f64..2.0, circle in any::<bool>()) {
        let chart = if circle { ManifoldChart::Circle } else { ManifoldChart::Parabola };
        let f = frame(chart, &[x]).unwrap();
        prop_assert!((&f.k * f.j.transpose()).amax() < 1e-10);
        let dr = chart.dr(&[x]);
        prop_assert!((&f.j * &dr).add_scalar(-1.0).amax() < 1e-12);
        prop_assert!((f.q.transpose() * &f.q).add_scalar(-1.0).amax() < 1e-12);
    }

    #[test]
    fn tube_coordinates_round_trip(x in -1.5f64..1.5, y in -0.05f64..0.05, circle in any::<bool>()) {
        let chart = if circle { ManifoldChart::Circle } else { ManifoldChart::Parabola };
        let w = ambient_point(chart, &[x], &[y]).unwrap();
        let (xp, yp) = tangent_normal_coords(chart, &w, &[x + 0.05]).unwrap();
        prop_assert!((xp[0] - x).abs() < 1e-8);
        prop_assert!((yp[0] - y).abs() < 1e-8);
    }

    #[test]
    fn power_laws_are_recovered(slope in -3.0f64..3.0, c in 0.1f64..10.0) {
        let pts: Vec<(f64, f64)> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&e: &f64| (e, c * e.powf(slope))).collect();
        let fit = scaling_fit(&pts).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-9);
    }
}
