use chronofit::basis::{absorb_intercept, build_basis, BasisSpec, PenaltyOrder};
use chronofit::harness::{run_study_in_order, GeneratorKind, ModelVariant, StudyConfig};
use chronofit::model::{
    assemble, fit_at, FixedTerms, GroupFactor, ModelSpec, RandomTermSpec, SmoothTermSpec,
};
use chronofit::sim::{derive_seed, simulate, SimParams, TimeEffect};
use proptest::prelude::*;

fn small_amp(seed: u64) -> SimParams {
    SimParams {
        n_subjects: 6,
        n_trials: 30,
        ..SimParams::amp()
    }
    .with_seed(seed)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn simulation_is_a_function_of_the_seed(seed in any::<u64>()) {
        let a = simulate(&small_amp(seed)).unwrap();
        let b = simulate(&small_amp(seed)).unwrap();
        prop_assert_eq!(&a.data, &b.data);
        let c = simulate(&small_amp(seed.wrapping_add(1))).unwrap();
        prop_assert_ne!(a.data.fingerprint(), c.data.fingerprint());
    }

    #[test]
    fn derived_seeds_are_distinct(base in any::<u64>(), r in 0u64..10_000) {
        prop_assert_ne!(derive_seed(base, r), derive_seed(base, r + 1));
        prop_assert_eq!(derive_seed(base, r), derive_seed(base, r));
    }

    #[test]
    fn response_is_sum_of_latent_parts(seed in any::<u64>(), which in 0usize..4) {
        let params = match which {
            0 => small_amp(seed),
            1 => SimParams { n_subjects: 6, n_trials: 30, ..SimParams::ampabs() }.with_seed(seed),
            2 => SimParams { n_subjects: 6, n_trials: 30, ..SimParams::phase_power() }.with_seed(seed),
            _ => SimParams { n_subjects: 6, n_trials: 30, ..SimParams::wiggly_power() }.with_seed(seed),
        };
        let sim = simulate(&params).unwrap();
        for r in &sim.data.rows {
            let l = r.latent.unwrap();
            let total = l.fixed + l.intercept + l.slope + l.curve + l.noise;
            let scale = l.fixed.abs() + l.intercept.abs() + l.slope.abs() + l.curve.abs() + l.noise.abs();
            prop_assert!((total - r.response).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn centering_and_penalty_congruence(
        xs in prop::collection::vec(-3.0f64..5.0, 30..120),
        k in 5usize..16,
        m1 in any::<bool>(),
    ) {
        let m = if m1 { PenaltyOrder::One } else { PenaltyOrder::Two };
        let raw = build_basis(&xs, &BasisSpec::new(k, m)).unwrap();
        let c = absorb_intercept(&raw).unwrap();
        let n = xs.len() as f64;
        let top = raw.b.amax();
        for j in 0..c.ncols() {
            prop_assert!(c.b.column(j).sum().abs() <= 1e-8 * n * top);
        }
        let t = &c.transform;
        prop_assert!((&raw.b * t - &c.b).amax() <= 1e-10 * top);
        for (sr, sc) in raw.penalties.iter().zip(&c.penalties) {
            let congruent = t.transpose() * &sr.matrix * t;
            let norm = sr.matrix.amax().max(1.0);
            prop_assert!((congruent - &sc.matrix).amax() <= 1e-8 * norm);
            prop_assert!((&sc.matrix - sc.matrix.transpose()).amax() <= 1e-12 * norm);
            let eig = sc.matrix.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.min() >= -1e-8 * norm);
        }
        if m1 {
            let eig = raw.total_penalty().symmetric_eigen();
            prop_assert!(eig.eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn fits_are_scale_equivariant(seed in 0u64..1000, c in 0.05f64..40.0) {
        let data = simulate(&small_amp(seed)).unwrap().data;
        let spec = ModelSpec {
            fixed: FixedTerms::main_effects(),
            random: vec![
                RandomTermSpec::intercept(GroupFactor::Subject),
                RandomTermSpec::slope(GroupFactor::Subject, chronofit::model::CovariateExpr::SinTime),
            ],
            smooths: vec![],
        };
        let s1 = assemble(&spec, &data).unwrap();
        let s2 = assemble(&spec, &data.scaled(c)).unwrap();
        let x = [0.5, -2.0];
        let f1 = fit_at(&s1, &x, false).unwrap();
        let f2 = fit_at(&s2, &x, false).unwrap();
        for i in 0..3 {
            prop_assert!((f2.beta[i] - c * f1.beta[i]).abs() <= 1e-8 * c * f1.beta[i].abs().max(1.0));
            prop_assert!(rel(f2.se[i], c * f1.se[i]) <= 1e-8);
        }
        prop_assert!(rel(f2.sigma, c * f1.sigma) <= 1e-8);
        prop_assert!((f2.total_edf - f1.total_edf).abs() <= 1e-8 * f1.total_edf);
    }

    #[test]
    fn blocked_solution_equals_dense_solve(
        seed in 0u64..1000,
        x in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        // 10 subjects with 20 columns each plus 3 fixed columns.
        let params = SimParams { n_subjects: 10, n_trials: 30, ..SimParams::ampabs() }.with_seed(seed);
        let data = simulate(&params).unwrap().data;
        let spec = ModelSpec {
            fixed: FixedTerms::main_effects(),
            random: vec![],
            smooths: vec![SmoothTermSpec::factor_smooth(
                GroupFactor::Subject,
                BasisSpec::new(20, PenaltyOrder::One),
            )],
        };
        let sys = assemble(&spec, &data).unwrap();
        prop_assert_eq!(sys.n_coef(), 203);
        let sol = sys.solve(&x).unwrap();
        let xd = sys.dense_design();
        let a = xd.transpose() * &xd + sys.dense_penalty(&x);
        let theta = a.cholesky().unwrap().solve(&(xd.transpose() * &sys.y));
        let d = sys.n_dense();
        let q = sys.level_cols();
        let scale = theta.amax();
        for i in 0..d {
            prop_assert!((sol.theta_dense[i] - theta[i]).abs() <= 1e-8 * scale);
        }
        for l in 0..sys.n_levels() {
            for j in 0..q {
                prop_assert!((sol.theta_levels[l][j] - theta[d + l * q + j]).abs() <= 1e-8 * scale);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 4, ..ProptestConfig::default() })]

    #[test]
    fn replicate_order_is_irrelevant(order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut cfg = StudyConfig::new(
            GeneratorKind::AmpAbs,
            vec![ModelVariant::LmmMin, ModelVariant::LmmSine],
            5,
        );
        cfg.params.n_subjects = 6;
        cfg.params.n_trials = 20;
        let serial = run_study_in_order(&cfg, &(0..5).collect::<Vec<_>>()).unwrap();
        let shuffled = run_study_in_order(&cfg, &order).unwrap();
        prop_assert_eq!(serial, shuffled);
    }
}

#[test]
fn time_effect_none_gives_no_curve() {
    let p = SimParams {
        effect: TimeEffect::None,
        ..small_amp(3)
    };
    let d = simulate(&p).unwrap().data;
    assert!(d.rows.iter().all(|r| r.latent.unwrap().curve == 0.0));
}
