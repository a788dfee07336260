//! Partial-to-complete reconstruction.
//!
//! A clip of `1 + T` frames is split into `G = 1 + T / p_t` groups (the
//! first frame alone, then `p_t` frames per group). Each step drops the last
//! `k ~ U{0, ..., floor((G-1) r)}` groups, encodes only the retained prefix,
//! pads the observed latents back to `G` frames and decodes the full clip.

use std::ops::RangeInclusive;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reparameterize, LatentPosterior, LatentSequence, PaddingConfig, PaddingStrategy, VaeConfig, VaeModel};
use crate::params::ParamStore;
use crate::rng::{normal_tensor, SeededRng};

/// Number of groups for a clip with `t_plus` = frame count minus one.
pub fn partition_groups(t_plus: usize, p_t: usize) -> Result<usize> {
    if p_t == 0 || t_plus % p_t != 0 {
        return Err(Error::Input(format!(
            "T = {t_plus} is not divisible by p_t = {p_t}"
        )));
    }
    Ok(1 + t_plus / p_t)
}

/// 1-indexed frames covered by 1-indexed group `g`.
pub fn group_frames(g: usize, p_t: usize) -> RangeInclusive<usize> {
    match g {
        0 => panic!("groups are 1-indexed"),
        1 => 1..=1,
        g => (2 + (g - 2) * p_t)..=(1 + (g - 1) * p_t),
    }
}

/// Largest droppable group count, `floor((G-1) r)`.
pub fn max_droppable(groups: usize, max_ratio: f64) -> usize {
    let r = max_ratio.clamp(0.0, 1.0);
    ((groups.saturating_sub(1)) as f64 * r).floor() as usize
}

/// `k ~ U{0, ..., floor((G-1) r)}`.
pub fn sample_drop(groups: usize, max_ratio: f64, rng: &mut SeededRng) -> usize {
    let hi = max_droppable(groups, max_ratio);
    if hi == 0 {
        0
    } else {
        rng.random_range(0..=hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropPlan {
    pub groups: usize,
    pub dropped: usize,
    pub max_ratio: f64,
    pub observed_frames: usize,
    pub observed_latents: usize,
}

impl DropPlan {
    pub fn new(groups: usize, dropped: usize, max_ratio: f64, p_t: usize) -> Result<Self> {
        if groups == 0 || dropped >= groups {
            return Err(Error::Input(format!(
                "cannot drop {dropped} of {groups} groups; the first frame is always kept"
            )));
        }
        Ok(Self {
            groups,
            dropped,
            max_ratio,
            observed_frames: 1 + (groups - 1 - dropped) * p_t,
            observed_latents: groups - dropped,
        })
    }

    pub fn sample(groups: usize, max_ratio: f64, p_t: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::new(groups, sample_drop(groups, max_ratio, rng), max_ratio, p_t)
    }
}

/// Keeps the first `1 + T - k p_t` frames of `x: (B, 1+T, H, W, C)`.
pub fn truncate_clip(x: &Tensor, k: usize, p_t: usize) -> Result<Tensor> {
    let frames = x.dim(1)?;
    let groups = partition_groups(frames - 1, p_t)?;
    if k >= groups {
        return Err(Error::Input(format!(
            "k = {k} out of range for {groups} groups"
        )));
    }
    if k == 0 {
        return Ok(x.clone());
    }
    Ok(x.narrow(1, 0, frames - k * p_t)?)
}

/// Source of the latent frames that stand in for dropped groups.
#[derive(Debug, Clone)]
pub struct LatentPadding {
    pub strategy: PaddingStrategy,
    pub sigma: f64,
    /// `(1, 1, h, w, c)`, learnable mode only.
    pub token: Option<Var>,
}

pub const PADDING_TOKEN: &str = "padding.token";

impl LatentPadding {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            strategy: PaddingStrategy::Gaussian,
            sigma,
            token: None,
        }
    }

    /// Registers a zero-initialized token of shape `(1, h, w, c)` in `store`
    /// when the strategy is learnable.
    pub fn new(cfg: &PaddingConfig, latent_hw: (usize, usize), c: usize, store: &mut ParamStore) -> Result<Self> {
        let token = match cfg.strategy {
            PaddingStrategy::Gaussian => None,
            PaddingStrategy::Learnable => {
                Some(store.zeros(PADDING_TOKEN, &[1, 1, latent_hw.0, latent_hw.1, c])?)
            }
        };
        Ok(Self {
            strategy: cfg.strategy,
            sigma: cfg.sigma,
            token,
        })
    }

    /// `k` padding frames shaped like `z_obs` frames.
    pub fn padding_frames(&self, like: &Tensor, k: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let (b, _, h, w, c) = like.dims5()?;
        match self.strategy {
            PaddingStrategy::Gaussian => {
                let eps = normal_tensor(rng, &[b, k, h, w, c], like.dtype(), like.device())?;
                Ok((eps * self.sigma)?)
            }
            PaddingStrategy::Learnable => {
                let token = self
                    .token
                    .as_ref()
                    .ok_or_else(|| Error::Config("learnable padding without a token".into()))?;
                if token.dims() != [1, 1, h, w, c] {
                    return Err(Error::Config(format!(
                        "padding token {:?} does not match latent frames ({h}, {w}, {c})",
                        token.dims()
                    )));
                }
                Ok(token.as_tensor().broadcast_as((b, k, h, w, c))?.contiguous()?)
            }
        }
    }
}

/// Appends `k` padding frames to `z_obs`.
pub fn pad_latents(
    z_obs: &LatentSequence,
    k: usize,
    padding: &LatentPadding,
    rng: &mut SeededRng,
) -> Result<LatentSequence> {
    if k == 0 {
        return Ok(z_obs.clone());
    }
    let pad = padding.padding_frames(&z_obs.data, k, rng)?;
    LatentSequence::new(Tensor::cat(&[&z_obs.data, &pad], 1)?)
}

#[derive(Debug, Clone)]
pub struct PredictiveOutput {
    pub recon: Tensor,
    pub posterior: LatentPosterior,
    pub plan: DropPlan,
}

/// Samples a drop plan with ratio `r` and runs [`predictive_forward_with`].
pub fn predictive_forward(
    model: &VaeModel,
    clip: &Tensor,
    max_ratio: f64,
    padding: &LatentPadding,
    rng: &mut SeededRng,
) -> Result<PredictiveOutput> {
    let p_t = model.config().p_t;
    let groups = partition_groups(clip.dim(1)? - 1, p_t)?;
    let plan = DropPlan::sample(groups, max_ratio, p_t, rng)?;
    predictive_forward_with(model, clip, plan, padding, rng)
}

/// Encodes only the observed prefix of `clip`, samples, pads and decodes
/// the full-length clip.
pub fn predictive_forward_with(
    model: &VaeModel,
    clip: &Tensor,
    plan: DropPlan,
    padding: &LatentPadding,
    rng: &mut SeededRng,
) -> Result<PredictiveOutput> {
    let p_t = model.config().p_t;
    let observed = truncate_clip(clip, plan.dropped, p_t)?;
    let posterior = model.encode(&observed)?;
    let z_obs = reparameterize(&posterior, rng)?;
    let z = pad_latents(&z_obs, plan.dropped, padding, rng)?;
    let recon = model.decode(&z)?;
    Ok(PredictiveOutput {
        recon,
        posterior,
        plan,
    })
}

/// The trainable pair: autoencoder plus latent padding, sharing one
/// parameter store (`encoder.*`, `decoder.*`, `padding.*`).
#[derive(Debug, Clone)]
pub struct PredictiveVae {
    pub vae: VaeModel,
    pub padding: LatentPadding,
    pub latent_hw: (usize, usize),
}

impl PredictiveVae {
    pub fn new(cfg: &VaeConfig, resolution: (usize, usize), dtype: DType, device: &Device) -> Result<Self> {
        let (_, h, w) = cfg.latent_dims(1, resolution.0, resolution.1)?;
        let mut vae = VaeModel::new(cfg, dtype, device)?;
        let padding = LatentPadding::new(&cfg.padding, (h, w), cfg.c_latent, vae.params_mut())?;
        Ok(Self {
            vae,
            padding,
            latent_hw: (h, w),
        })
    }

    pub fn params(&self) -> &ParamStore {
        self.vae.params()
    }

    pub fn forward(&self, clip: &Tensor, max_ratio: f64, rng: &mut SeededRng) -> Result<PredictiveOutput> {
        predictive_forward(&self.vae, clip, max_ratio, &self.padding, rng)
    }

    pub fn forward_with_drop(&self, clip: &Tensor, dropped: usize, rng: &mut SeededRng) -> Result<PredictiveOutput> {
        let p_t = self.vae.config().p_t;
        let groups = partition_groups(clip.dim(1)? - 1, p_t)?;
        let plan = DropPlan::new(groups, dropped, 0.0, p_t)?;
        predictive_forward_with(&self.vae, clip, plan, &self.padding, rng)
    }
}
