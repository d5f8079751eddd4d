//! Reparameterization bias of independent random intercepts and slopes.
//!
//! Data follow `y = a_g + b_g (x - mean x) + e` with independent `a` and `b`.
//! Shifting `x` by `c` turns the pair into `(a - c b, b)`, whose covariance
//! is no longer diagonal; an independent-effects fit on the shifted covariate
//! then misestimates both standard deviations.

use std::fmt;

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Between, LongDataset, Row, Within};
use crate::error::{Error, Result};
use crate::model::{
    assemble, fit_reml, CovariateExpr, FitResult, FixedTerms, GroupFactor, ModelSpec,
    RandomTermSpec, VarRole,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AppendixConfig {
    pub n: usize,
    pub groups: usize,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub sigma_eps: f64,
    pub shift: f64,
    /// Number of independent sets of `groups` effect pairs pooled in the
    /// Monte-Carlo covariance check.
    pub mc_draws: usize,
    pub seed: u64,
}

impl Default for AppendixConfig {
    fn default() -> Self {
        AppendixConfig {
            n: 20_000,
            groups: 2_000,
            sigma_a: 1.0,
            sigma_b: 0.1,
            sigma_eps: 0.1,
            shift: 4.0,
            mc_draws: 50,
            seed: 98,
        }
    }
}

impl AppendixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 2 || self.n < 2 * self.groups {
            return Err(Error::Parameter(format!(
                "need at least two groups and two observations per group (n={}, groups={})",
                self.n, self.groups
            )));
        }
        if self.n % self.groups != 0 {
            return Err(Error::Parameter(format!(
                "n={} is not divisible by groups={}",
                self.n, self.groups
            )));
        }
        if self.groups > u32::MAX as usize {
            return Err(Error::Parameter("too many groups".into()));
        }
        let sds = [self.sigma_a, self.sigma_b, self.sigma_eps];
        if sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.sigma_eps <= 0.0 {
            return Err(Error::Parameter(
                "standard deviations must be finite and nonnegative, with sigma_eps > 0".into(),
            ));
        }
        if !self.shift.is_finite() {
            return Err(Error::Parameter("shift must be finite".into()));
        }
        if self.mc_draws == 0 {
            return Err(Error::Parameter("mc_draws must be at least 1".into()));
        }
        Ok(())
    }
}

/// Estimates from one of the three fits.
#[derive(Debug, Clone, PartialEq)]
pub struct AppendixFit {
    pub label: &'static str,
    pub formula: String,
    pub intercept_sd: f64,
    pub slope_sd: f64,
    pub residual_sd: f64,
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppendixReport {
    pub config: AppendixConfig,
    pub x_mean: f64,
    pub centered: AppendixFit,
    pub shifted_independent: AppendixFit,
    pub shifted_correlated: AppendixFit,
    pub v0: Matrix2<f64>,
    pub v0_monte_carlo: Matrix2<f64>,
}

impl AppendixReport {
    pub fn target_intercept_sd(&self) -> f64 {
        self.v0[(0, 0)].sqrt()
    }

    pub fn target_slope_sd(&self) -> f64 {
        self.v0[(1, 1)].sqrt()
    }

    /// Implied correlation; zero when either variance vanishes.
    pub fn target_correlation(&self) -> f64 {
        let d = (self.v0[(0, 0)] * self.v0[(1, 1)]).sqrt();
        if d > 0.0 {
            self.v0[(0, 1)] / d
        } else {
            0.0
        }
    }

    /// Largest entrywise relative deviation of the Monte-Carlo covariance
    /// from the closed form, over the nonzero entries.
    pub fn monte_carlo_max_rel_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (t, m) in self.v0.iter().zip(self.v0_monte_carlo.iter()) {
            if *t != 0.0 {
                worst = worst.max(((m - t) / t).abs());
            }
        }
        worst
    }
}

/// Covariance of `(a - c b, b)` for independent `a`, `b`.
pub fn analytic_v0(sigma_a: f64, sigma_b: f64, x_mean: f64) -> Matrix2<f64> {
    let vb = sigma_b * sigma_b;
    Matrix2::new(
        sigma_a * sigma_a + x_mean * x_mean * vb,
        -x_mean * vb,
        -x_mean * vb,
        vb,
    )
}

/// Generate the grouped data; `time` holds the shifted covariate.
pub fn appendix_data(cfg: &AppendixConfig) -> Result<LongDataset> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let x: Vec<f64> = (0..cfg.n).map(|_| rng.random::<f64>() - 0.5).collect();
    let x_mean = x.iter().sum::<f64>() / cfg.n as f64;
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let a: Vec<f64> = (0..cfg.groups).map(|_| cfg.sigma_a * normal()).collect();
    let b: Vec<f64> = (0..cfg.groups).map(|_| cfg.sigma_b * normal()).collect();
    let mut trial = vec![0u32; cfg.groups];
    let rows = (0..cfg.n)
        .map(|i| {
            let g = i % cfg.groups;
            trial[g] += 1;
            let xc = x[i] - x_mean;
            Row {
                subject: g as u32 + 1,
                trial: trial[g],
                time: x[i] + cfg.shift,
                within: Within::A,
                between: Between::X,
                response: a[g] + b[g] * xc + cfg.sigma_eps * normal(),
                latent: None,
            }
        })
        .collect();
    Ok(LongDataset::new(rows))
}

fn fit_summary(
    label: &'static str,
    terms: &[RandomTermSpec],
    slope: CovariateExpr,
    fit: &FitResult,
) -> AppendixFit {
    let sd = |role: &VarRole| fit.varcomp_by_role(role).map_or(0.0, |v| v.sd);
    let random: Vec<String> = terms.iter().map(|t| t.name()).collect();
    AppendixFit {
        label,
        formula: format!("y ~ 1 + {}", random.join(" + ")),
        intercept_sd: sd(&VarRole::Intercept),
        slope_sd: sd(&VarRole::Slope(slope.name())),
        residual_sd: fit.sigma,
        correlation: fit.correlations.first().map(|c| c.1),
    }
}

fn independent_terms(expr: CovariateExpr) -> [RandomTermSpec; 2] {
    [
        RandomTermSpec::intercept(GroupFactor::Subject),
        RandomTermSpec::slope(GroupFactor::Subject, expr),
    ]
}

fn fit_terms(data: &LongDataset, terms: &[RandomTermSpec]) -> Result<FitResult> {
    let spec = ModelSpec {
        fixed: FixedTerms::intercept_only(),
        random: terms.to_vec(),
        smooths: vec![],
    };
    fit_reml(&assemble(&spec, data)?)
}

fn monte_carlo_v0(cfg: &AppendixConfig, x_mean: f64) -> Matrix2<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let total = cfg.mc_draws * cfg.groups;
    let mut sum = [0.0f64; 2];
    let mut cross = Matrix2::zeros();
    let mut pairs = Vec::with_capacity(total);
    for _ in 0..total {
        let za: f64 = StandardNormal.sample(&mut rng);
        let zb: f64 = StandardNormal.sample(&mut rng);
        let (a, b) = (cfg.sigma_a * za, cfg.sigma_b * zb);
        let p = [a - x_mean * b, b];
        sum[0] += p[0];
        sum[1] += p[1];
        pairs.push(p);
    }
    let mean = [sum[0] / total as f64, sum[1] / total as f64];
    for p in &pairs {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        for i in 0..2 {
            for j in 0..2 {
                cross[(i, j)] += d[i] * d[j];
            }
        }
    }
    cross / (total - 1) as f64
}

/// Fit the centered, shifted-independent and shifted-correlated models.
pub fn appendix_demo(cfg: &AppendixConfig) -> Result<AppendixReport> {
    let data = appendix_data(cfg)?;
    let x_mean = data.times().iter().sum::<f64>() / data.len() as f64;

    let centered_expr = CovariateExpr::TimeOffset(x_mean);
    let centered_terms = independent_terms(centered_expr);
    let shifted_terms = independent_terms(CovariateExpr::Time);
    let corr_terms = [RandomTermSpec::correlated(
        GroupFactor::Subject,
        CovariateExpr::Time,
    )];
    let centered = fit_terms(&data, &centered_terms)?;
    let shifted = fit_terms(&data, &shifted_terms)?;
    let correlated = fit_terms(&data, &corr_terms)?;

    Ok(AppendixReport {
        config: cfg.clone(),
        x_mean,
        centered: fit_summary(
            "centered, independent",
            &centered_terms,
            centered_expr,
            &centered,
        ),
        shifted_independent: fit_summary(
            "shifted, independent",
            &shifted_terms,
            CovariateExpr::Time,
            &shifted,
        ),
        shifted_correlated: fit_summary(
            "shifted, correlated",
            &corr_terms,
            CovariateExpr::Time,
            &correlated,
        ),
        v0: analytic_v0(cfg.sigma_a, cfg.sigma_b, x_mean),
        v0_monte_carlo: monte_carlo_v0(cfg, x_mean),
    })
}

impl fmt::Display for AppendixReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "Random intercept and slope reparameterization")?;
        writeln!(
            f,
            "n = {}, groups = {}, sigma_a = {}, sigma_b = {}, sigma_eps = {}, shift = {}, seed = {}",
            c.n, c.groups, c.sigma_a, c.sigma_b, c.sigma_eps, c.shift, c.seed
        )?;
        writeln!(f, "mean of x = {:.5}", self.x_mean)?;
        writeln!(f)?;
        writeln!(
            f,
            "{:<24} {:>10} {:>10} {:>10} {:>10}",
            "fit", "Intercept", "Slope", "Corr", "Residual"
        )?;
        for fit in [
            &self.centered,
            &self.shifted_independent,
            &self.shifted_correlated,
        ] {
            let corr = fit
                .correlation
                .map_or_else(|| "-".to_string(), |r| format!("{r:.5}"));
            writeln!(
                f,
                "{:<24} {:>10.5} {:>10.5} {:>10} {:>10.5}",
                fit.label, fit.intercept_sd, fit.slope_sd, corr, fit.residual_sd
            )?;
        }
        for fit in [
            &self.centered,
            &self.shifted_independent,
            &self.shifted_correlated,
        ] {
            writeln!(f, "  {}: {}", fit.label, fit.formula)?;
        }
        writeln!(f)?;
        writeln!(f, "Targets on the shifted scale")?;
        writeln!(
            f,
            "  intercept sd  sqrt(sigma_a^2 + xbar^2 sigma_b^2) = {:.5}",
            self.target_intercept_sd()
        )?;
        writeln!(
            f,
            "  slope sd      sigma_b                            = {:.5}",
            self.target_slope_sd()
        )?;
        writeln!(
            f,
            "  correlation   -xbar sigma_b / intercept sd       = {:.5}",
            self.target_correlation()
        )?;
        writeln!(f)?;
        writeln!(
            f,
            "V0 closed form       [{:>10.6} {:>10.6}; {:>10.6} {:>10.6}]",
            self.v0[(0, 0)],
            self.v0[(0, 1)],
            self.v0[(1, 0)],
            self.v0[(1, 1)]
        )?;
        writeln!(
            f,
            "V0 Monte Carlo       [{:>10.6} {:>10.6}; {:>10.6} {:>10.6}]",
            self.v0_monte_carlo[(0, 0)],
            self.v0_monte_carlo[(0, 1)],
            self.v0_monte_carlo[(1, 0)],
            self.v0_monte_carlo[(1, 1)]
        )?;
        writeln!(
            f,
            "max relative deviation = {:.4} over {} draws of {} groups",
            self.monte_carlo_max_rel_error(),
            c.mc_draws,
            c.groups
        )
    }
}
