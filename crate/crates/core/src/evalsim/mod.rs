//! Evaluation: the adjusted Rand index, the two simulation studies and the
//! replicated study runner.

mod ari;
mod simulate;
mod study;

pub use ari::adjusted_rand_index;
pub use simulate::{
    class_means, generator_basis, simulate_study, LabeledDataset, SimConfig, Study, COEF_COV,
    COEF_VAR, D_GEN, K_TRUE, NOISE_SD,
};
pub use study::{
    mean_and_se, run_replicate, run_study, Method, StudyCell, StudyReport, StudyRow,
    GMM_MAX_ITER, GMM_RESTARTS, STUDY_RESTARTS,
};
