//! Replicated power and Type-I studies.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::variants::{fit_variant, ModelVariant, SdEstimates, VariantOptions};
use crate::model::FitOptions;
use crate::sim::{derive_seed, simulate, SimParams, TimeEffect};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    Amp,
    AmpAbs,
    Phase,
    Wiggly,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Amp => "amp",
            GeneratorKind::AmpAbs => "amp_abs",
            GeneratorKind::Phase => "phase",
            GeneratorKind::Wiggly => "wiggly",
        }
    }

    /// Default generating parameters for the generator's study setting.
    pub fn default_params(self) -> SimParams {
        match self {
            GeneratorKind::Amp => SimParams::amp(),
            GeneratorKind::AmpAbs => SimParams::amp_power(),
            GeneratorKind::Phase => SimParams::phase_power(),
            GeneratorKind::Wiggly => SimParams::wiggly_power(),
        }
    }

    pub fn matches(self, effect: &TimeEffect) -> bool {
        match self {
            GeneratorKind::Amp => matches!(effect, TimeEffect::Amplitude { abs: false, .. }),
            GeneratorKind::AmpAbs => matches!(effect, TimeEffect::Amplitude { abs: true, .. }),
            GeneratorKind::Phase => matches!(effect, TimeEffect::Phase { .. }),
            GeneratorKind::Wiggly => matches!(effect, TimeEffect::Wiggly { .. }),
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "amp" => Ok(GeneratorKind::Amp),
            "amp_abs" | "ampabs" => Ok(GeneratorKind::AmpAbs),
            "phase" => Ok(GeneratorKind::Phase),
            "wiggly" => Ok(GeneratorKind::Wiggly),
            _ => Err(Error::Parameter(format!(
                "unknown generator `{s}` (expected amp, amp_abs, phase or wiggly)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub generator: GeneratorKind,
    pub params: SimParams,
    pub n_reps: usize,
    pub alphas: Vec<f64>,
    pub models: Vec<ModelVariant>,
    /// Zero out all treatment effects (Type-I runs).
    pub null_mode: bool,
    pub base_seed: u64,
}

impl StudyConfig {
    pub fn new(generator: GeneratorKind, models: Vec<ModelVariant>, n_reps: usize) -> Self {
        StudyConfig {
            generator,
            params: generator.default_params(),
            n_reps,
            alphas: vec![0.05, 0.01],
            models,
            null_mode: false,
            base_seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_reps == 0 {
            return Err(Error::Study("n_reps must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Study("no models selected".into()));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Study(
                "significance levels must lie in (0, 1)".into(),
            ));
        }
        if !self.generator.matches(&self.params.effect) {
            return Err(Error::Study(format!(
                "generator {} does not match time effect {:?}",
                self.generator, self.params.effect
            )));
        }
        self.params.validate()
    }

    /// Structural choices for the fitted models, fixed by the generating
    /// model before any nulling.
    pub fn variant_options(&self) -> VariantOptions {
        VariantOptions {
            interaction: self.params.beta_bw != 0.0,
            within_slope: matches!(self.generator, GeneratorKind::Phase | GeneratorKind::Wiggly),
            ..VariantOptions::default()
        }
    }

    pub fn replicate_params(&self, r: usize) -> SimParams {
        let p = if self.null_mode {
            self.params.nulled()
        } else {
            self.params.clone()
        };
        p.with_seed(derive_seed(self.base_seed, r as u64))
    }
}

/// One model's outcome on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub p: Vec<f64>,
    pub sds: SdEstimates,
    pub fitted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub fingerprint: [u8; 32],
    /// In the order of `StudyConfig::models`; `Err` holds the failure message.
    pub outcomes: Vec<std::result::Result<ModelRecord, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefSummary {
    pub model: ModelVariant,
    pub coef: String,
    pub mean: f64,
    /// Count of replicates significant at each configured alpha.
    pub n_significant: Vec<usize>,
    pub variance: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdSummary {
    pub model: ModelVariant,
    pub name: &'static str,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub generator: GeneratorKind,
    pub null_mode: bool,
    pub n_reps: usize,
    pub base_seed: u64,
    pub alphas: Vec<f64>,
    pub models: Vec<ModelVariant>,
    pub coefs: Vec<CoefSummary>,
    pub sds: Vec<SdSummary>,
    /// Failed fits per model, in `models` order.
    pub failures: Vec<usize>,
    pub replicates: Vec<ReplicateRecord>,
}

impl StudySummary {
    pub fn coef(&self, model: ModelVariant, coef: &str) -> Option<&CoefSummary> {
        self.coefs
            .iter()
            .find(|c| c.model == model && c.coef == coef)
    }

    pub fn sd(&self, model: ModelVariant, name: &str) -> Option<f64> {
        self.sds
            .iter()
            .find(|s| s.model == model && s.name == name)
            .map(|s| s.mean)
    }

    /// Rejection rate for a coefficient at the `alpha_index`-th level,
    /// relative to the successful replicates.
    pub fn rate(&self, model: ModelVariant, coef: &str, alpha_index: usize) -> Option<f64> {
        self.coef(model, coef)
            .map(|c| c.n_significant[alpha_index] as f64 / c.n_ok.max(1) as f64)
    }

    pub fn failures_for(&self, model: ModelVariant) -> usize {
        self.models
            .iter()
            .position(|m| *m == model)
            .map_or(0, |i| self.failures[i])
    }
}

fn run_replicate(cfg: &StudyConfig, r: usize) -> Result<ReplicateRecord> {
    let params = cfg.replicate_params(r);
    let data = simulate(&params)?.data;
    let fingerprint = data.fingerprint();
    let vopts = cfg.variant_options();
    let fopts = FitOptions::default();
    let mut outcomes = Vec::with_capacity(cfg.models.len());
    for &m in &cfg.models {
        if data.fingerprint() != fingerprint {
            return Err(Error::Study(format!(
                "replicate {r}: dataset changed before fitting {m}"
            )));
        }
        outcomes.push(
            fit_variant(m, &data, &vopts, &fopts)
                .map(|fit| ModelRecord {
                    sds: SdEstimates::from_fit(&fit),
                    names: fit.names.clone(),
                    beta: fit.beta.clone(),
                    se: fit.se.clone(),
                    p: fit.p.clone(),
                    fitted: fit.fitted.clone(),
                })
                .map_err(|e| e.to_string()),
        );
    }
    Ok(ReplicateRecord {
        index: r,
        seed: params.seed,
        fingerprint,
        outcomes,
    })
}

/// Run every replicate in parallel and summarize.
pub fn run_study(cfg: &StudyConfig) -> Result<StudySummary> {
    let order: Vec<usize> = (0..cfg.n_reps).collect();
    run_study_in_order(cfg, &order)
}

/// As [`run_study`], dispatching replicates in the given order. The summary
/// does not depend on the order.
pub fn run_study_in_order(cfg: &StudyConfig, order: &[usize]) -> Result<StudySummary> {
    cfg.validate()?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..cfg.n_reps).collect::<Vec<_>>() {
        return Err(Error::Study("replicate order must be a permutation".into()));
    }
    let mut records: Vec<ReplicateRecord> = order
        .par_iter()
        .map(|&r| run_replicate(cfg, r))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.index);
    summarize(cfg, records)
}

fn summarize(cfg: &StudyConfig, records: Vec<ReplicateRecord>) -> Result<StudySummary> {
    let mut coefs = Vec::new();
    let mut sds = Vec::new();
    let mut failures = Vec::new();
    for (mi, &model) in cfg.models.iter().enumerate() {
        let ok: Vec<&ModelRecord> = records
            .iter()
            .filter_map(|r| r.outcomes[mi].as_ref().ok())
            .collect();
        failures.push(records.len() - ok.len());
        if ok.is_empty() {
            let reason = records
                .iter()
                .find_map(|r| r.outcomes[mi].as_ref().err().cloned())
                .unwrap_or_default();
            return Err(Error::Study(format!(
                "all {} replicates failed for {model}: {reason}",
                records.len()
            )));
        }
        let n_ok = ok.len();
        for (ci, name) in ok[0].names.iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|m| m.beta[ci]).collect();
            let mean = est.iter().sum::<f64>() / n_ok as f64;
            let variance = if n_ok > 1 {
                est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_ok - 1) as f64
            } else {
                0.0
            };
            let n_significant = cfg
                .alphas
                .iter()
                .map(|&a| ok.iter().filter(|m| m.p[ci] < a).count())
                .collect();
            coefs.push(CoefSummary {
                model,
                coef: name.clone(),
                mean,
                n_significant,
                variance,
                n_ok,
            });
        }
        for (k, (label, first)) in ok[0].sds.labeled().into_iter().enumerate() {
            if first.is_none() {
                continue;
            }
            let vals: Vec<f64> = ok.iter().filter_map(|m| m.sds.labeled()[k].1).collect();
            sds.push(SdSummary {
                model,
                name: label,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
            });
        }
    }
    Ok(StudySummary {
        generator: cfg.generator,
        null_mode: cfg.null_mode,
        n_reps: cfg.n_reps,
        base_seed: cfg.base_seed,
        alphas: cfg.alphas.clone(),
        models: cfg.models.clone(),
        coefs,
        sds,
        failures,
        replicates: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StudyConfig {
        let mut cfg = StudyConfig::new(
            GeneratorKind::AmpAbs,
            vec![ModelVariant::LmmSine, ModelVariant::LmmMin],
            6,
        );
        cfg.params.n_subjects = 8;
        cfg.params.n_trials = 20;
        cfg
    }

    #[test]
    fn replicate_order_does_not_matter() {
        let cfg = small();
        let a = run_study(&cfg).unwrap();
        let b = run_study_in_order(&cfg, &[5, 2, 0, 4, 1, 3]).unwrap();
        assert_eq!(a, b);
        assert!(run_study_in_order(&cfg, &[0, 0, 1, 2, 3, 4]).is_err());
    }

    #[test]
    fn summary_shape() {
        let s = run_study(&small()).unwrap();
        assert_eq!(s.coefs.len(), 6);
        for c in &s.coefs {
            assert!(c.n_significant.iter().all(|&n| n <= s.n_reps));
            assert!(c.variance >= 0.0);
        }
        let fp = s.replicates[0].fingerprint;
        assert!(s.replicates.iter().skip(1).all(|r| r.fingerprint != fp));
        assert!(s.sd(ModelVariant::LmmSine, "sigma_alpha").is_some());
        assert!(s.sd(ModelVariant::LmmMin, "sigma_alpha").is_none());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small();
        cfg.models.clear();
        assert!(matches!(run_study(&cfg), Err(Error::Study(_))));
        let mut cfg = small();
        cfg.generator = GeneratorKind::Phase;
        assert!(matches!(run_study(&cfg), Err(Error::Study(_))));
    }

    #[test]
    fn null_mode_zeroes_effects() {
        let mut cfg = small();
        cfg.null_mode = true;
        let p = cfg.replicate_params(3);
        assert_eq!((p.beta_w, p.beta_b, p.beta_bw), (0.0, 0.0, 0.0));
        assert_eq!(p.seed, derive_seed(cfg.base_seed, 3));
    }
}
