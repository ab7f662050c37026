//! Local sensitivity: discrepancy curves `ĝ(δ)`, oracle stability margins,
//! the learned margin predictor, and the law-of-total-variance split.

pub mod dataset;
pub mod decomposition;
pub mod oracle;
pub mod predictor;

pub use dataset::{build_margin_dataset, representative_prompt, MarginDataset, MarginItem, PromptChoice};
pub use decomposition::{variance_decomposition, VarianceDecomposition, VarianceMap};
pub use oracle::{
    discrepancy, estimate_g, g_curve, margin_from_curve, oracle_margin, Discrepancy, GPoint, MarginRecord, MarginValue,
    OracleConfig, DEFAULT_GRID, DEFAULT_SAMPLES_PER_LEVEL, DEFAULT_TAU,
};
pub use predictor::{margin_predict, margin_train, MarginConfig, MarginExample, MarginModel, MarginTrainOutcome};
