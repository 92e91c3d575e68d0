//! Non-Gaussian search families updated with the same local-parameter
//! natural-gradient recipe: a Wishart over SPD matrices, a finite mixture of
//! Gaussians, univariate minimal exponential families, and matrix Gaussians
//! for layer weights with a Kronecker-factored precision.

pub mod matgauss;
pub mod mog;
pub mod uef;
pub mod wishart;

pub use matgauss::{
    matgauss_gn_step, matgauss_mean_vector, matgauss_means, matgauss_sample, matgauss_sample_from_z, matgauss_update, MatGaussConfig, MatGaussState,
};
pub use mog::{mog_mc_step, mog_negative_elbo, mog_responsibilities, MoGComponent, MoGState};
pub use uef::{softplus, softplus_deriv, uef_step, uef_step_euclidean, ExponentialRate, GaussianMeanPrecision, Link, UefFamily, UEFState};
pub use wishart::{
    bartlett_from_omega, bartlett_sample, multivariate_trigamma, trigamma, wishart_step, LogDetTrace, SpdObjective,
    WishartState,
};
