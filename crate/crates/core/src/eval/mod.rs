//! Segmentation and benchmark metrics, scoring harness and PCA rendering.

mod benchmark;
mod metrics;
mod pca;

pub use benchmark::{run_benchmark, GroundingModel, MetricReport, Response, SampleScore, TaskScores, MAX_NEW_TOKENS};
pub use metrics::{
    boundary_band, boundary_iou, ciou, extract_choice, giou, mcq_accuracy, meteor_alignment, meteor_lite,
    perbench_overall, METEOR_ALPHA, METEOR_GAMMA, METEOR_THETA,
};
pub use pca::{pca, pca_feature_image, Pca, POWER_ITERS, POWER_TOL};
