//! Image metrics, identification and the evaluation report.

pub mod metrics;
pub mod report;

pub use metrics::{
    build_probe_sets, embedding, nearest_identity, psnr, rank1, rank1_embeddings, ssim_metric,
    ProbeSets, MAX_PROBE_SET, PSNR_CAP,
};
pub use report::{
    evaluate_model, fit_views, frontalize_probes, score_groups, EvalReport, EvalRequest, EvalRow,
    Protocol, Scored, PROBE_YAW_RANGE,
};
