//! Model fitting: the inner Gaussian approximation, the Laplace marginal,
//! hyperparameter optimisation, the MCMC reference sampler and the classic
//! SVD Lee-Carter fit.

pub mod classic;
pub mod fit;
pub mod inner;
pub mod laplace;
pub mod mcmc;
pub mod optimize;
pub mod solver;

pub use classic::{classic_lc_dataset, classic_lc_fit, ClassicFit};
pub use fit::{fit, fit_dataset, ConvergenceReport, FitResult, FitSettings, Summary};
pub use inner::{inner_fit, GaussianApprox, InnerSettings};
pub use laplace::{marginal_log_posterior, MarginalEvaluation};
pub use optimize::{optimize_hyper, HyperOptimum, OptimizerSettings};
pub use mcmc::{mcmc_fit, BlockAcceptance, McmcChain, McmcSettings};
