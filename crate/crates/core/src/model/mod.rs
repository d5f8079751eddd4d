//! Model assembly, restricted-likelihood estimation and fit summaries.

pub mod fit;
pub mod optimize;
pub mod spec;
pub mod system;

pub use fit::{
    coefficient_table, edf_and_varcomp, fit_at, fit_reml, fit_reml_with, smooth_term_test,
    CoefCovariance, Coefficient, FitOptions, FitResult, SmoothTest, TermEdf, VarComp,
};
pub use optimize::{maximize, OptimOptions, OptimOutcome};
pub use spec::{
    assemble, assemble_with, AssemblyOptions, CovariateExpr, FixedTerms, GroupFactor, ModelSpec,
    Placement, RandomForm, RandomTermSpec, SmoothTermSpec, TermInfo, TermKind, VarRole,
};
pub use system::{Evaluation, PenalizedSystem, Solution};

#[cfg(test)]
pub(crate) mod testutil {
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    use crate::data::{Between, LongDataset, Row, Within};

    /// Blocked two-group design with a smooth deterministic response.
    pub(crate) fn toy_data(subjects: u32, trials: u32) -> LongDataset {
        let mut rows = Vec::new();
        for s in 1..=subjects {
            for t in 0..trials {
                let time = 2.0 * std::f64::consts::PI * t as f64 / (trials - 1) as f64;
                rows.push(Row {
                    subject: s,
                    trial: t + 1,
                    time,
                    within: if t < trials / 2 { Within::A } else { Within::B },
                    between: if s <= subjects / 2 {
                        Between::X
                    } else {
                        Between::Y
                    },
                    response: (s as f64 * 0.37 + t as f64 * 0.11).sin() * 3.0 + time.sin(),
                    latent: None,
                });
            }
        }
        LongDataset::new(rows)
    }

    /// Random intercepts, random sine amplitudes and Gaussian noise.
    pub(crate) fn noisy_data(subjects: u32, trials: u32, seed: u64) -> LongDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut d = toy_data(subjects, trials);
        let mut per_subject = Vec::new();
        for _ in 0..subjects {
            per_subject.push((std.sample(&mut rng), 2.0 * std.sample(&mut rng)));
        }
        for r in &mut d.rows {
            let (b, a) = per_subject[(r.subject - 1) as usize];
            let fixed = if r.within == Within::B { 1.0 } else { 0.0 }
                + if r.between == Between::Y { 0.5 } else { 0.0 };
            r.response = fixed + b + a * r.time.sin() + std.sample(&mut rng);
        }
        d
    }
}
