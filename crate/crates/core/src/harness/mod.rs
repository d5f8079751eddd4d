//! Replicated studies, the reparameterization demonstration and diagnostics.

pub mod acf;
pub mod appendix;
pub mod study;
pub mod variants;

pub use acf::acf;
pub use appendix::{
    analytic_v0, appendix_data, appendix_demo, AppendixConfig, AppendixFit, AppendixReport,
};
pub use study::{
    run_study, run_study_in_order, CoefSummary, GeneratorKind, ModelRecord, ReplicateRecord,
    SdSummary, StudyConfig, StudySummary,
};
pub use variants::{
    fit_variant, fit_with_bug, variant_spec, ModelVariant, SdEstimates, VariantOptions,
};
