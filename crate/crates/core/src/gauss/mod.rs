//! Gaussian special functions, the Solow-Joe orthant approximation and
//! chi-square tail probabilities.

mod chisq;
mod normal;
mod oracle;
mod sj;

pub use chisq::{chisq_quantile, chisq_sf, weighted_chisq_sf, MixtureSpec};
pub use normal::{bvn_cdf, bvn_cdf_partials, std_normal_cdf, std_normal_pdf};
pub use oracle::{mvncdf_oracle, psd_factor};
pub use sj::{all_orderings, sj_mvncdf, PermutationMode, SjConfig, SjGradient, SjWorkspace, DEFAULT_CLAMP_EPSILON};
