//! Exact Gaussian-process inference on (possibly learned) embeddings.

pub mod fit;
pub mod kernel;
pub mod posterior;

pub use fit::{fit_gp_hyperparameters, log_marginal_likelihood_with_grad};
pub use kernel::{
    combination_kernel, gram_matrix, normalized_kernel, GramMatrix, KernelParameters, DEFAULT_COMPONENTS,
    DEFAULT_JITTER,
};
pub use posterior::{
    gp_posterior, linear_mean, log_marginal_likelihood, log_predictive_density, points_matrix, EmbeddedObservations,
    GaussianPosterior, MeanParameters, ObservationSet,
};
