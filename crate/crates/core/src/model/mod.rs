//! Mixed panel probit model family: data layout, parameter packing and the
//! moments of the pairwise choice probabilities.

mod dataset;
mod moments;
mod spec;

pub use dataset::PanelDataset;
pub use moments::{build_pair_moments, PairMoments};
pub(crate) use moments::{check_compatible, MomentBuf, MomentEngine};
pub use spec::{omega, pack, unpack, CholeskyEntry, ModelSpec, Restriction, Theta};
