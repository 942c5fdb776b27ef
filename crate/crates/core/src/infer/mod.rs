//! Outcome model, contrasts and pooling across imputations.

mod design;
mod mixed;
mod primary;
mod rubin;

pub use design::{build_analysis_data, build_design, AnalysisData, AnalysisRecord, Design};
pub use mixed::{collinear_columns, MixedFit, MixedModel};
pub use primary::{
    covariate_drift, fit_mixed_lpm, fit_replicates, naive_did, pool_fits, run_primary_analysis, CovariateDrift,
    NaiveDid, PooledInference, PooledRow, PrimaryAnalysis,
};
pub use rubin::{cell_means, did_contrasts, rubin_combine, Contrasts, PooledEstimate};
