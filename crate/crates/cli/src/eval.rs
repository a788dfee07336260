//! Metric computation shared by the evaluation commands.

use candle_core::{DType, Tensor};
use pvvae_core::diagnostics::{encode_means, flow_probe, ltd_from_latents, prediction_error, psnr, ssim, LtdProfile, ProbeReport};
use pvvae_core::diffusion::{frechet_proxy, train_flow, FlowCheckpoint, FlowModelConfig, LatentStats};
use pvvae_core::model::LatentSequence;
use pvvae_core::predictive::{partition_groups, PredictiveVae};
use pvvae_core::rng::seeded;
use pvvae_core::{Error, Result, VaeModel, VideoClip};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::Corpus;

pub const METRICS_FILE: &str = "metrics.json";

/// The metrics report. Every key is always present; metrics a command does
/// not compute are `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ltd: Option<LtdProfile>,
    pub prediction_mse: Option<f64>,
    pub epe: Option<f64>,
    pub frechet_proxy: Option<f64>,
}

impl Metrics {
    pub const KEYS: [&'static str; 6] = ["psnr", "ssim", "ltd", "prediction_mse", "epe", "frechet_proxy"];

    /// Whether every metric has a value.
    pub fn is_complete(&self) -> bool {
        self.psnr.is_some()
            && self.ssim.is_some()
            && self.ltd.is_some()
            && self.prediction_mse.is_some()
            && self.epe.is_some()
            && self.frechet_proxy.is_some()
    }

    pub fn merge(&mut self, other: Metrics) {
        self.psnr = other.psnr.or(self.psnr);
        self.ssim = other.ssim.or(self.ssim);
        self.ltd = other.ltd.or(self.ltd.take());
        self.prediction_mse = other.prediction_mse.or(self.prediction_mse);
        self.epe = other.epe.or(self.epe);
        self.frechet_proxy = other.frechet_proxy.or(self.frechet_proxy);
    }
}

/// Validation clips, capped by `eval.max_clips`.
pub fn eval_clips<'a>(corpus: &'a Corpus, cfg: &RunConfig) -> &'a [VideoClip] {
    let clips = &corpus.eval_split().clips;
    &clips[..cfg.eval.max_clips.unwrap_or(clips.len()).min(clips.len())]
}

pub fn reconstruct_clip(vae: &VaeModel, clip: &VideoClip) -> Result<VideoClip> {
    let x = clip.to_tensor(vae.dtype(), vae.device())?;
    VideoClip::from_tensor(&vae.reconstruct(&x)?)
}

/// Mean PSNR and SSIM of mean-path reconstructions. With `self_eval` each
/// clip is scored against itself.
pub fn recon_metrics(vae: Option<&VaeModel>, clips: &[VideoClip]) -> Result<Metrics> {
    if clips.is_empty() {
        return Err(Error::Input("no clips to evaluate".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for clip in clips {
        let recon = match vae {
            Some(m) => reconstruct_clip(m, clip)?,
            None => clip.clone(),
        };
        p += psnr(clip, &recon)?;
        s += ssim(clip, &recon)?;
    }
    let n = clips.len() as f64;
    Ok(Metrics {
        psnr: Some(p / n),
        ssim: Some(s / n),
        ..Metrics::default()
    })
}

/// Dropped groups scored by the prediction error.
pub fn predict_groups(frames: usize, p_t: usize, cfg: &RunConfig) -> Result<usize> {
    let g = partition_groups(frames - 1, p_t)?;
    Ok(cfg.eval.predict_groups.unwrap_or((g - 1) / 2))
}

/// LTD profile, dropped-frame prediction MSE and flow-probe EPE.
pub fn latent_metrics(model: &PredictiveVae, corpus: &Corpus, cfg: &RunConfig) -> Result<(Metrics, ProbeReport)> {
    let vae = &model.vae;
    let vcfg = vae.config();
    let clips = eval_clips(corpus, cfg);
    if clips.is_empty() {
        return Err(Error::Input("no clips to evaluate".into()));
    }
    let val_latents = encode_means(vae, clips)?;
    let ltd = ltd_from_latents(&val_latents, &cfg.eval.ltd_intervals)?;

    let k = predict_groups(clips[0].frames, vcfg.p_t, cfg)?;
    let prediction_mse = if k == 0 {
        None
    } else {
        let mut rng = seeded(cfg.seed ^ 0x9ED1C7);
        let mut sum = 0.0;
        for c in clips {
            sum += prediction_error(model, c, k, &mut rng)?;
        }
        Some(sum / clips.len() as f64)
    };

    let train_latents = encode_means(vae, &corpus.train.clips)?;
    let val_flows = &corpus.eval_split().flows[..clips.len()];
    let (_, report) = flow_probe(&train_latents, &corpus.train.flows, &val_latents, val_flows, vcfg.p_t, vcfg.p_s, &cfg.probe)?;
    Ok((
        Metrics {
            ltd: Some(ltd),
            prediction_mse,
            epe: Some(report.val_epe),
            ..Metrics::default()
        },
        report,
    ))
}

/// Trains the latent flow model on posterior means of `clips`.
pub fn fit_flow(vae: &VaeModel, clips: &[VideoClip], cfg: &FlowModelConfig) -> Result<FlowCheckpoint> {
    let latents = encode_means(vae, clips)?;
    let z = Tensor::cat(&latents, 0)?.to_dtype(DType::F32)?;
    let stats = LatentStats::fit(&z)?;
    let (model, losses) = train_flow(&stats.normalize(&z)?, cfg)?;
    Ok(FlowCheckpoint {
        config: cfg.clone(),
        stats,
        model,
        losses,
    })
}

/// Samples `n` latents and decodes them to clips.
pub fn generate(flow: &FlowCheckpoint, vae: &VaeModel, n: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let mut rng = seeded(seed ^ 0x6E4);
    let z = flow.sample(n, &mut rng)?.to_dtype(vae.dtype())?;
    let mut out = Vec::with_capacity(n);
    const CHUNK: usize = 4;
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let x = vae.decode(&LatentSequence::new(z.narrow(0, start, len)?)?)?;
        for i in 0..len {
            out.push(VideoClip::from_tensor(&x.narrow(0, i, 1)?)?);
        }
    }
    Ok(out)
}

/// Frechet proxy between `n` generated clips and the first `n` corpus clips.
pub fn gen_metrics(flow: &FlowCheckpoint, vae: &VaeModel, corpus: &Corpus, n: usize, seed: u64) -> Result<(Metrics, Vec<VideoClip>)> {
    let real = corpus.first(n)?;
    let generated = generate(flow, vae, n, seed)?;
    let fp = frechet_proxy(&real, &generated, seed)?;
    Ok((
        Metrics {
            frechet_proxy: Some(fp),
            ..Metrics::default()
        },
        generated,
    ))
}

/// Every metric for one trained model, including a freshly trained flow.
pub fn full_metrics(model: &PredictiveVae, corpus: &Corpus, cfg: &RunConfig) -> Result<(Metrics, FlowCheckpoint)> {
    let mut m = recon_metrics(Some(&model.vae), eval_clips(corpus, cfg))?;
    m.merge(latent_metrics(model, corpus, cfg)?.0);
    let flow = fit_flow(&model.vae, &corpus.train.clips, &cfg.flow)?;
    m.merge(gen_metrics(&flow, &model.vae, corpus, cfg.eval.n_generated, cfg.seed)?.0);
    Ok((m, flow))
}
