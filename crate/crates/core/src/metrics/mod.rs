//! Feature-distribution metrics: Fréchet distance, kernel distances, paired
//! cosine similarity and per-dimension Gaussian MI.

mod frechet;
mod kernel;
mod paired;

pub use frechet::{frechet_distance, sqrtm_psd, summarize, summarize_matrix, GaussianSummary, EIGEN_CLAMP};
pub use kernel::{
    kernel_distance, kernel_distance_matrix, median_heuristic_distance, KernelConfig,
    MEDIAN_SUBSAMPLE,
};
pub use paired::{cosine_similarity_paired, mi_1d_gauss, CosineResult, Mi1dResult, RHO_CLAMP};
