//! The five competing model formulations.

use std::fmt;
use std::str::FromStr;

use crate::basis::{BasisSpec, Difference, PenaltyOrder};
use crate::data::LongDataset;
use crate::error::{Error, Result};
use crate::model::spec::NAME_WITHIN;
use crate::model::{
    assemble_with, fit_reml_with, AssemblyOptions, CovariateExpr, FitOptions, FitResult,
    FixedTerms, GroupFactor, ModelSpec, RandomTermSpec, SmoothTermSpec, VarRole,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelVariant {
    LmmSine,
    GammFs,
    GammBy,
    LmmMin,
    LmmMax,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::LmmSine,
        ModelVariant::GammFs,
        ModelVariant::GammBy,
        ModelVariant::LmmMin,
        ModelVariant::LmmMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::LmmSine => "LMMsine",
            ModelVariant::GammFs => "GAMMfs",
            ModelVariant::GammBy => "GAMMby",
            ModelVariant::LmmMin => "LMMmin",
            ModelVariant::LmmMax => "LMMmax",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown model `{s}` (expected one of LMMsine, GAMMfs, GAMMby, LMMmin, LMMmax)"
                ))
            })
    }
}

/// Structural switches that depend on the generating model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantOptions {
    /// Include the treatment interaction as a fixed effect.
    pub interaction: bool,
    /// Add an independent by-subject slope for the within treatment to the
    /// smooth models.
    pub within_slope: bool,
    /// Basis dimension of the by-subject smooths.
    pub k: usize,
    /// Difference order of the smooths' wiggliness penalty.
    pub difference: Difference,
}

impl Default for VariantOptions {
    fn default() -> Self {
        VariantOptions {
            interaction: false,
            within_slope: false,
            k: 20,
            difference: Difference::First,
        }
    }
}

/// Model specification of a variant.
pub fn variant_spec(variant: ModelVariant, opts: &VariantOptions) -> ModelSpec {
    let fixed = if opts.interaction {
        FixedTerms::with_interaction()
    } else {
        FixedTerms::main_effects()
    };
    let subject = GroupFactor::Subject;
    let basis = BasisSpec::new(opts.k, PenaltyOrder::One).with_difference(opts.difference);
    let within_slope = || RandomTermSpec::slope(subject, CovariateExpr::WithinIsB);
    let (mut random, smooths) = match variant {
        ModelVariant::LmmSine => (
            vec![
                RandomTermSpec::intercept(subject),
                RandomTermSpec::slope(subject, CovariateExpr::SinTime),
            ],
            vec![],
        ),
        ModelVariant::LmmMin => (vec![RandomTermSpec::intercept(subject)], vec![]),
        ModelVariant::LmmMax => (
            vec![RandomTermSpec::correlated(
                subject,
                CovariateExpr::WithinIsB,
            )],
            vec![],
        ),
        ModelVariant::GammFs => (vec![], vec![SmoothTermSpec::factor_smooth(subject, basis)]),
        ModelVariant::GammBy => (
            vec![RandomTermSpec::intercept(subject)],
            vec![SmoothTermSpec::by_smooth(subject, basis, Some(1))],
        ),
    };
    if opts.within_slope && matches!(variant, ModelVariant::GammFs | ModelVariant::GammBy) {
        random.push(within_slope());
    }
    ModelSpec {
        fixed,
        random,
        smooths,
    }
}

/// Fit one variant to a dataset.
pub fn fit_variant(
    variant: ModelVariant,
    data: &LongDataset,
    opts: &VariantOptions,
    fit_opts: &FitOptions,
) -> Result<FitResult> {
    let sys = assemble_with(
        &variant_spec(variant, opts),
        data,
        AssemblyOptions::default(),
    )?;
    fit_reml_with(&sys, fit_opts)
}

/// Factor-smooth fit with the intercept orthogonalization skipped.
pub fn fit_with_bug(
    variant: ModelVariant,
    data: &LongDataset,
    opts: &VariantOptions,
    fit_opts: &FitOptions,
) -> Result<FitResult> {
    if variant != ModelVariant::GammFs {
        return Err(Error::Parameter(format!(
            "the uncentered construction only applies to GAMMfs, not {variant}"
        )));
    }
    let options = AssemblyOptions {
        legacy_uncentered_factor_smooth: true,
    };
    let sys = assemble_with(&variant_spec(variant, opts), data, options)?;
    fit_reml_with(&sys, fit_opts)
}

/// Standard deviations reported for a fitted variant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SdEstimates {
    pub sigma: f64,
    pub sigma_b: Option<f64>,
    pub sigma_bw: Option<f64>,
    pub sigma_alpha: Option<f64>,
    pub sigma_t: Option<f64>,
}

impl SdEstimates {
    pub fn from_fit(fit: &FitResult) -> Self {
        let sd = |role: &VarRole| fit.varcomp_by_role(role).map(|v| v.sd);
        SdEstimates {
            sigma: fit.sigma,
            sigma_b: sd(&VarRole::Intercept),
            sigma_bw: sd(&VarRole::Slope(NAME_WITHIN.into())),
            sigma_alpha: sd(&VarRole::Slope(CovariateExpr::SinTime.name())),
            sigma_t: sd(&VarRole::SmoothCurvature),
        }
    }

    /// `(label, value)` pairs in reporting order.
    pub fn labeled(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("sigma", Some(self.sigma)),
            ("sigma_b", self.sigma_b),
            ("sigma_bw", self.sigma_bw),
            ("sigma_alpha", self.sigma_alpha),
            ("sigma_t", self.sigma_t),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::assemble;

    #[test]
    fn names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("LMMfoo".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn structural_options() {
        let o = VariantOptions {
            interaction: true,
            within_slope: true,
            ..VariantOptions::default()
        };
        let fs = variant_spec(ModelVariant::GammFs, &o);
        assert!(fs.fixed.interaction);
        assert_eq!(fs.random.len(), 1);
        let max = variant_spec(ModelVariant::LmmMax, &o);
        assert_eq!(max.random.len(), 1);
        let data = crate::model::testutil::toy_data(4, 40);
        let sys = assemble(&variant_spec(ModelVariant::GammBy, &o), &data).unwrap();
        // intercept, within slope, then 19 smooth columns per subject
        assert_eq!(sys.level_cols(), 21);
        assert_eq!(sys.n_params(), 4);
    }

    #[test]
    fn bug_path_only_for_factor_smooths() {
        let data = crate::model::testutil::toy_data(4, 40);
        let r = fit_with_bug(
            ModelVariant::GammBy,
            &data,
            &VariantOptions::default(),
            &FitOptions::default(),
        );
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
