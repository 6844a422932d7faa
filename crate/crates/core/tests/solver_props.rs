use drbsde_core::fixtures::{random_game, random_lower_problem, random_process};
use drbsde_core::{
    g_evaluate, pasting_construct, penalization_run, penalization_squeeze, sample_axiom_cases, solve_bsde,
    solve_drbsde, solve_rbsde, AdaptedProcess, Generator, Lattice, Scheme, Side, TerminalPayoff,
};
use proptest::prelude::*;

fn scheme(implicit: bool) -> Scheme {
    if implicit {
        Scheme::Implicit
    } else {
        Scheme::Explicit
    }
}

fn driver(kind: u8, a: f64, b: f64) -> Generator {
    match kind % 4 {
        0 => Generator::zero(),
        1 => Generator::sine(a, b),
        2 => Generator::linear(a, b),
        _ => Generator::abs_z(b.abs()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn bsde_comparison(n in 2usize..30, a in -1.0f64..0.5, b in -0.8f64..0.8, c in 0.0f64..0.5, seed in 0u64..1000) {
        let lat = Lattice::recombining(1.0, n).unwrap();
        let xi1 = TerminalPayoff::from_state_fn(lat, |x| (x + seed as f64).sin());
        let bump = random_process(&lat, 0.0, 0.3, seed);
        let xi2 = TerminalPayoff::new(lat, lat.terminal_nodes().map(|t| xi1.value_at_node(t) + bump.value(t)).collect()).unwrap();
        let g1 = Generator::sine(a, b);
        let g2 = Generator::new(
            "shifted",
            move |_, y, z| a * y + b * z[0].sin() + c,
            g1.constants().clone(),
            Default::default(),
        ).unwrap();
        prop_assume!(g1.monotone_guard(lat.dt(), Scheme::Explicit).holds);
        let y1 = solve_bsde(&lat, &xi1, &g1, Scheme::Explicit).unwrap();
        let y2 = solve_bsde(&lat, &xi2, &g2, Scheme::Explicit).unwrap();
        for node in 0..lat.node_count() {
            prop_assert!(y1.y().value(node) <= y2.y().value(node) + 1e-12);
        }
    }

    #[test]
    fn time_consistency(n in 2usize..7, kind in 0u8..4, a in -1.0f64..1.0, b in -1.0f64..1.0, seed in 0u64..500, implicit in any::<bool>()) {
        let lat = Lattice::full_tree(1.0, n).unwrap();
        let g = driver(kind, a, b);
        let sch = scheme(implicit);
        for case in sample_axiom_cases(&lat, 3, seed).unwrap() {
            let direct = g_evaluate(&lat, &case.nu, &case.tau, &case.xi, &g, sch).unwrap();
            let inner = g_evaluate(&lat, &case.gamma, &case.tau, &case.xi, &g, sch).unwrap();
            let outer = g_evaluate(&lat, &case.nu, &case.gamma, &inner, &g, sch).unwrap();
            for node in case.nu.first_stop_nodes() {
                prop_assert!((direct.value(node) - outer.value(node)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rbsde_obstacle_and_flat_off(n in 2usize..40, seed in 0u64..1000, kind in 0u8..4, implicit in any::<bool>()) {
        let lat = Lattice::recombining(1.0, n).unwrap();
        let (xi, lower) = random_lower_problem(&lat, seed).unwrap();
        let g = driver(kind, -0.5, 0.4);
        let s = solve_rbsde(&lat, &xi, &g, &lower, Side::Lower, scheme(implicit)).unwrap();
        for node in 0..lat.node_count() {
            prop_assert!(s.y().value(node) >= lower.value(node));
            prop_assert!(s.dk().value(node) >= 0.0);
        }
        prop_assert_eq!(s.flat_off_residuals(), (0.0, 0.0));
    }

    #[test]
    fn upper_is_negated_lower(n in 2usize..30, seed in 0u64..1000, kind in 0u8..4, a in -1.0f64..1.0, b in -1.0f64..1.0, implicit in any::<bool>()) {
        let lat = Lattice::recombining(1.0, n).unwrap();
        let (xi, lower) = random_lower_problem(&lat, seed).unwrap();
        // (-ξ, -L) is an upper problem
        let (xi_u, upper) = (xi.neg(), lower.neg());
        let g = driver(kind, a, b);
        let sch = scheme(implicit);
        let up = solve_rbsde(&lat, &xi_u, &g, &upper, Side::Upper, sch).unwrap();
        let lo = solve_rbsde(&lat, &xi_u.neg(), &g.negate_reflect(), &upper.neg(), Side::Lower, sch).unwrap();
        prop_assert!(up.y().max_abs_diff(&lo.y().neg()) <= 1e-12);
        prop_assert!(up.dj().max_abs_diff(lo.dk()) <= 1e-12);
    }

    #[test]
    fn rbsde_comparison_in_obstacle(n in 2usize..30, seed in 0u64..1000, lift in 0.0f64..0.3) {
        let lat = Lattice::recombining(1.0, n).unwrap();
        let (xi, lower) = random_lower_problem(&lat, seed).unwrap();
        let g = Generator::sine(-0.5, 0.4);
        let higher = AdaptedProcess::from_fn(lat, |node| {
            if lat.step_of(node) == n { lower.value(node) } else { lower.value(node) + lift }
        });
        let s1 = solve_rbsde(&lat, &xi, &g, &lower, Side::Lower, Scheme::Explicit).unwrap();
        let s2 = solve_rbsde(&lat, &xi, &g, &higher, Side::Lower, Scheme::Explicit).unwrap();
        for node in 0..lat.node_count() {
            prop_assert!(s1.y().value(node) <= s2.y().value(node) + 1e-12);
        }
    }

    #[test]
    fn drbsde_invariants(n in 2usize..9, seed in 0u64..1000, kind in 0u8..4, implicit in any::<bool>()) {
        let lat = Lattice::full_tree(0.25 * n as f64, n).unwrap();
        let game = random_game(&lat, driver(kind, -1.0, 0.5), seed).unwrap();
        let sch = scheme(implicit);
        let s = solve_drbsde(&lat, &game, sch).unwrap();
        for node in 0..lat.node_count() {
            let (y, l, u) = (s.y().value(node), game.lower().value(node), game.upper().value(node));
            let (dk, dj) = (s.dk().value(node), s.dj().value(node));
            prop_assert!(l <= y && y <= u);
            prop_assert!(dk >= 0.0 && dj >= 0.0 && dk * dj == 0.0);
            prop_assert_eq!(u.min(l.max(y + dk - dj)), l.max(u.min(y + dk - dj)));
        }
        prop_assert_eq!(s.flat_off_residuals(), (0.0, 0.0));
        let (pasted, ledger) = pasting_construct(&lat, &game, sch).unwrap();
        prop_assert!(pasted.y().max_abs_diff(s.y()) <= 1e-10);
        prop_assert!(ledger.max_depth() <= n + 1);
        let squeeze = penalization_squeeze(&lat, &game, 64.0, sch).unwrap();
        prop_assert_eq!(squeeze.violations, 0);
    }

    #[test]
    fn penalization_is_monotone_in_n(n in 2usize..24, seed in 0u64..1000, upper in any::<bool>()) {
        let lat = Lattice::recombining(1.0, n).unwrap();
        let (xi, lower) = random_lower_problem(&lat, seed).unwrap();
        let (xi, obstacle, side) = if upper { (xi.neg(), lower.neg(), Side::Upper) } else { (xi, lower, Side::Lower) };
        let schedule = [1.0, 4.0, 16.0, 64.0, 256.0];
        let (sols, rep) = penalization_run(&lat, &xi, &Generator::sine(-0.5, 0.3), &obstacle, side, &schedule, Scheme::Implicit).unwrap();
        prop_assert_eq!(rep.total_violations(), 0);
        for pair in sols.windows(2) {
            for node in 0..lat.node_count() {
                let (a, b) = (pair[0].y().value(node), pair[1].y().value(node));
                let ordered = if upper { b <= a } else { a <= b };
                prop_assert!(ordered);
            }
        }
    }
}

#[test]
fn explicit_and_implicit_converge_together() {
    let diffs: Vec<f64> = [16, 32, 64, 128]
        .into_iter()
        .map(|n| {
            let lat = Lattice::recombining(1.0, n).unwrap();
            let xi = TerminalPayoff::from_state_fn(lat, |x| x.sin() + 0.5);
            let g = Generator::sine(-1.0, 0.5);
            let e = solve_bsde(&lat, &xi, &g, Scheme::Explicit).unwrap().y0();
            let i = solve_bsde(&lat, &xi, &g, Scheme::Implicit).unwrap().y0();
            (e - i).abs()
        })
        .collect();
    for w in diffs.windows(2) {
        let r = w[1] / w[0];
        assert!((0.4..=0.6).contains(&r), "ratios from {diffs:?}");
    }
}

#[test]
fn constant_driver_is_deterministic_drift() {
    let lat = Lattice::recombining(3.0, 30).unwrap();
    let xi = TerminalPayoff::constant(lat, 2.0);
    let y = solve_bsde(&lat, &xi, &Generator::constant(0.5), Scheme::Implicit).unwrap();
    for node in 0..lat.node_count() {
        let t = lat.time(lat.step_of(node));
        assert!((y.y().value(node) - (2.0 + 0.5 * (3.0 - t))).abs() < 1e-12);
        assert_eq!(y.z().value(node), 0.0);
    }
}
