//! Prompt ambiguity: the conditional MDN over reparameterized prompts, its
//! predictive moments and `U_amb`, unconditional GMMs with BIC selection,
//! and the first-order (delta-method) variance diagnostic.

pub mod delta;
pub mod gmm;
pub mod mdn;
pub mod mixture;

pub use delta::delta_method_variance;
pub use gmm::{gmm_em_fit, select_k, GmmConfig, GmmFit, GmmModel, SelectKOutcome};
pub use mdn::{mdn_forward, mdn_train, MdnConfig, MdnModel, MdnTrainOutcome};
pub use mixture::{ambiguity_score, mdn_nll, mixture_moments, sample_prompts, MixtureParams, PROMPT_DIM};
