use chronofit::harness::{
    acf, appendix_demo, fit_variant, fit_with_bug, run_study, AppendixConfig, GeneratorKind,
    ModelVariant, SdEstimates, StudyConfig, VariantOptions,
};
use chronofit::model::FitOptions;
use chronofit::sim::{derive_seed, simulate, SimParams, TimeEffect};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn ampabs(seed: u64) -> chronofit::data::LongDataset {
    simulate(&SimParams::ampabs().with_seed(derive_seed(1, seed)))
        .unwrap()
        .data
}

#[test]
fn factor_smooth_and_by_smooth_agree() {
    let vo = VariantOptions::default();
    let fo = FitOptions::default();
    for s in 0..3 {
        let data = ampabs(s);
        let fs = fit_variant(ModelVariant::GammFs, &data, &vo, &fo).unwrap();
        let by = fit_variant(ModelVariant::GammBy, &data, &vo, &fo).unwrap();
        for i in 0..3 {
            assert!(rel(by.beta[i], fs.beta[i]) <= 1e-6, "beta {i}");
            assert!(rel(by.se[i], fs.se[i]) <= 1e-6, "se {i}");
        }
        let (a, b) = (SdEstimates::from_fit(&fs), SdEstimates::from_fit(&by));
        assert!(rel(b.sigma, a.sigma) <= 1e-6);
        assert!(rel(b.sigma_b.unwrap(), a.sigma_b.unwrap()) <= 1e-6);
        let top = fs.fitted.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in fs.fitted.iter().zip(&by.fitted) {
            assert!((x - y).abs() <= 1e-6 * top);
        }
    }
}

#[test]
fn uncentered_factor_smooth_loses_the_intercept_variance() {
    let vo = VariantOptions::default();
    let fo = FitOptions::default();
    let (mut fixed, mut buggy) = (0.0, 0.0);
    for s in 0..5 {
        let data = ampabs(s);
        let fs = fit_variant(ModelVariant::GammFs, &data, &vo, &fo).unwrap();
        let bug = fit_with_bug(ModelVariant::GammFs, &data, &vo, &fo).unwrap();
        fixed += SdEstimates::from_fit(&fs).sigma_b.unwrap();
        buggy += SdEstimates::from_fit(&bug).sigma_b.unwrap();
    }
    assert!(buggy / 5.0 < 0.2, "buggy mean {}", buggy / 5.0);
    assert!(buggy < fixed);
    let err = fit_with_bug(ModelVariant::LmmMin, &ampabs(0), &vo, &fo).unwrap_err();
    assert!(err.to_string().contains("GAMMfs"));
}

#[test]
fn without_time_effect_bug_and_fix_coincide() {
    let vo = VariantOptions::default();
    let fo = FitOptions::default();
    let params = SimParams {
        effect: TimeEffect::None,
        ..SimParams::ampabs()
    };
    let data = simulate(&params.with_seed(4)).unwrap().data;
    let fs = fit_variant(ModelVariant::GammFs, &data, &vo, &fo).unwrap();
    let bug = fit_with_bug(ModelVariant::GammFs, &data, &vo, &fo).unwrap();
    for i in 0..3 {
        assert!(
            (bug.beta[i] - fs.beta[i]).abs() <= 1e-4 * fs.beta[i].abs().max(fs.se[i]),
            "beta {i}: {} vs {}",
            bug.beta[i],
            fs.beta[i]
        );
        assert!(rel(bug.se[i], fs.se[i]) <= 1e-4, "se {i}");
    }
    assert!(rel(bug.sigma, fs.sigma) <= 1e-4);
}

#[test]
fn sine_model_recovers_its_variance_components() {
    let mut close = [0; 3];
    for s in 0..10 {
        let data = simulate(&SimParams::ampabs().with_seed(derive_seed(3, s)))
            .unwrap()
            .data;
        let fit = fit_variant(
            ModelVariant::LmmSine,
            &data,
            &VariantOptions::default(),
            &FitOptions::default(),
        )
        .unwrap();
        let sd = SdEstimates::from_fit(&fit);
        let got = [sd.sigma, sd.sigma_b.unwrap(), sd.sigma_alpha.unwrap()];
        for (i, (g, t)) in got.iter().zip([10.0, 1.0, 32.0]).enumerate() {
            if rel(*g, t) <= 0.2 {
                close[i] += 1;
            }
        }
    }
    assert!(close.iter().all(|c| *c >= 7), "{close:?} of 10");
}

#[test]
fn minimal_model_absorbs_the_sines_into_the_residual() {
    let data = ampabs(7);
    let fit = fit_variant(
        ModelVariant::LmmMin,
        &data,
        &VariantOptions::default(),
        &FitOptions::default(),
    )
    .unwrap();
    assert!(fit.sigma > 15.0, "sigma {}", fit.sigma);
}

#[test]
fn factor_smooth_on_phase_data_recovers_the_between_effect() {
    let mut covered = 0;
    for s in 0..10 {
        let data = simulate(&SimParams::phase().with_seed(derive_seed(4, s)))
            .unwrap()
            .data;
        let fit = fit_variant(
            ModelVariant::GammFs,
            &data,
            &VariantOptions::default(),
            &FitOptions::default(),
        )
        .unwrap();
        let b = fit.coef("Factor_BetweenY").unwrap();
        if (b.estimate - 2.0).abs() <= 2.0 * b.se {
            covered += 1;
        }
    }
    assert!(covered >= 8, "{covered} of 10");
}

#[test]
fn sine_model_residuals_are_white() {
    let mut white = 0;
    for s in 0..20 {
        let data = simulate(&SimParams::amp().with_seed(derive_seed(5, s)))
            .unwrap()
            .data;
        let fit = fit_variant(
            ModelVariant::LmmSine,
            &data,
            &VariantOptions::default(),
            &FitOptions::default(),
        )
        .unwrap();
        let r = acf(&fit.residuals, 40).unwrap();
        let bound = 4.0 / (fit.residuals.len() as f64).sqrt();
        if r[1..].iter().all(|v| v.abs() <= bound) {
            white += 1;
        }
    }
    assert!(white >= 18, "{white} of 20");
}

#[test]
fn appendix_without_shift_recovers_both_sds() {
    let cfg = AppendixConfig {
        shift: 0.0,
        ..AppendixConfig::default()
    };
    let report = appendix_demo(&cfg).unwrap();
    let fit = &report.centered;
    assert!(rel(fit.intercept_sd, 1.0) <= 0.1, "{}", fit.intercept_sd);
    assert!(rel(fit.slope_sd, 0.1) <= 0.1, "{}", fit.slope_sd);
    let (v, m) = (&report.v0, &report.v0_monte_carlo);
    for i in 0..2 {
        for j in 0..2 {
            let scale = (v[(i, i)] * v[(j, j)]).sqrt();
            assert!((m[(i, j)] - v[(i, j)]).abs() <= 0.05 * scale, "{i},{j}");
        }
    }
}

#[test]
fn appendix_without_slope_variance_ignores_the_shift() {
    let cfg = AppendixConfig {
        sigma_b: 0.0,
        mc_draws: 5,
        ..AppendixConfig::default()
    };
    let report = appendix_demo(&cfg).unwrap();
    let a = report.centered.intercept_sd;
    for fit in [&report.shifted_independent, &report.shifted_correlated] {
        assert!(
            rel(fit.intercept_sd, a) <= 0.05,
            "{} vs {a}",
            fit.intercept_sd
        );
    }
}

#[test]
fn power_grows_with_the_within_effect() {
    let mut rates = Vec::new();
    for beta_w in [0.0, 1.0, 2.0, 3.0] {
        let mut cfg = StudyConfig::new(GeneratorKind::AmpAbs, vec![ModelVariant::LmmSine], 200);
        cfg.params.beta_w = beta_w;
        let s = run_study(&cfg).unwrap();
        rates.push(s.rate(ModelVariant::LmmSine, "Factor_WithinB", 1).unwrap());
    }
    let inversions: Vec<f64> = rates
        .windows(2)
        .filter(|w| w[1] < w[0])
        .map(|w| w[0] - w[1])
        .collect();
    assert!(
        inversions.len() <= 1 && inversions.iter().all(|d| *d <= 0.02),
        "{rates:?}"
    );
    assert!(rates[3] > rates[0] + 0.5, "{rates:?}");
}
