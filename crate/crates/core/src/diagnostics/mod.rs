//! Reconstruction metrics and latent-space analyses.

pub mod ltd;
pub mod metrics;
pub mod pca;
pub mod probe;

pub use ltd::{ltd_from_latents, ltd_profile, Histogram, LtdProfile};
pub use metrics::{psnr, ssim, PSNR_CAP_DB};
pub use pca::{pca_rgb, PcaBasis, PcaRgb};
pub use probe::{encode_means, epe, flow_pairs, flow_probe, prediction_error, FlowProbe, FlowProbeConfig, ProbeReport};
