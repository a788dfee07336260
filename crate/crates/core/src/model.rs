//! Causal spatiotemporal VAE.
//!
//! The encoder runs `log2(p_t)` spatiotemporal downsampling stages followed
//! by spatial-only stages until `p_s` is reached; the decoder mirrors it
//! (spatial upsampling first, spatiotemporal last). Every convolution is
//! causal in time and normalization is per frame, so latent frame `g`
//! depends only on pixel frames `1 ..= 1 + (g-1) * p_t`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::nn::{upsample_spatial, upsample_temporal, CausalConv3d, FrameGroupNorm, ResBlock};
use crate::params::ParamStore;
use crate::rng::{normal_tensor, seeded, SeededRng};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingStrategy {
    Gaussian,
    Learnable,
}

impl std::str::FromStr for PaddingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "learnable" => Ok(Self::Learnable),
            other => Err(Error::Config(format!("unknown padding strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for PaddingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Learnable => "learnable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PaddingConfig {
    pub strategy: PaddingStrategy,
    /// Standard deviation of gaussian padding.
    pub sigma: f64,
}

impl Default for PaddingConfig {
    fn default() -> Self {
        Self {
            strategy: PaddingStrategy::Learnable,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub p_t: usize,
    pub p_s: usize,
    pub c_latent: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub blocks_per_stage: usize,
    pub padding: PaddingConfig,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl VaeConfig {
    /// Desk-scale default: 4x temporal, 8x spatial, 8 latent channels.
    pub fn toy() -> Self {
        Self {
            p_t: 4,
            p_s: 8,
            c_latent: 8,
            base_channels: 32,
            channel_mult: vec![1, 2, 4],
            blocks_per_stage: 1,
            padding: PaddingConfig::default(),
            seed: 0,
        }
    }

    /// Compression ratios of the full-size model (4x temporal, 16x spatial,
    /// 64 channels). Widths are free parameters.
    pub fn full_size(base_channels: usize) -> Self {
        Self {
            p_t: 4,
            p_s: 16,
            c_latent: 64,
            base_channels,
            channel_mult: vec![1, 2, 4, 4],
            blocks_per_stage: 1,
            padding: PaddingConfig::default(),
            seed: 0,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channel_mult.len()
    }

    /// Number of leading stages that also halve time.
    pub fn temporal_stages(&self) -> usize {
        self.p_t.trailing_zeros() as usize
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.num_stages();
        if stages == 0 {
            return Err(Error::Config("channel_mult must list at least one stage".into()));
        }
        if self.channel_mult.iter().any(|&m| m == 0) || self.base_channels == 0 || self.c_latent == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !self.p_s.is_power_of_two() || self.p_s.trailing_zeros() as usize != stages {
            return Err(Error::Config(format!(
                "p_s = {} cannot be factored into {stages} spatial 2x stages",
                self.p_s
            )));
        }
        if !self.p_t.is_power_of_two() || self.temporal_stages() > stages {
            return Err(Error::Config(format!(
                "p_t = {} cannot be factored into at most {stages} temporal 2x stages",
                self.p_t
            )));
        }
        if !(self.padding.sigma.is_finite() && self.padding.sigma >= 0.0) {
            return Err(Error::Config("padding sigma must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Latent `(t+1, h, w)` for a clip of `frames x height x width`.
    pub fn latent_dims(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        if frames == 0 || (frames - 1) % self.p_t != 0 {
            return Err(Error::Dimension(format!(
                "clip has {frames} frames; frames - 1 must be divisible by p_t = {}",
                self.p_t
            )));
        }
        if height % self.p_s != 0 || width % self.p_s != 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "resolution {height}x{width} is not divisible by p_s = {}",
                self.p_s
            )));
        }
        Ok((1 + (frames - 1) / self.p_t, height / self.p_s, width / self.p_s))
    }
}

/// A `(1+T) x H x W x 3` clip with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Informational only.
    pub frame_rate: f32,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * 3 || frames == 0 {
            return Err(Error::Dimension(format!(
                "clip data of length {} does not match {frames}x{height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
            frame_rate: 8.0,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    /// Frames `start .. start + len` as a new clip.
    pub fn frames_range(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames || len == 0 {
            return Err(Error::Input(format!(
                "frame range {start}..{} outside a {}-frame clip",
                start + len,
                self.frames
            )));
        }
        let fl = self.frame_len();
        Self::new(len, self.height, self.width, self.data[start * fl..(start + len) * fl].to_vec())
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 3]
    }

    /// `(1, T, H, W, 3)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.frames, self.height, self.width, 3), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(1, T, H, W, 3)` or `(T, H, W, 3)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            5 if t.dim(0)? == 1 => t.squeeze(0)?,
            4 => t.clone(),
            _ => {
                return Err(Error::Dimension(format!(
                    "expected a single clip tensor, got {:?}",
                    t.dims()
                )))
            }
        };
        let (f, h, w, c) = t.dims4()?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Self::new(f, h, w, data)
    }
}

/// Diagonal Gaussian posterior, tensors `(B, 1+t, h, w, c)`.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl LatentPosterior {
    pub fn len(&self) -> Result<usize> {
        Ok(self.mean.dim(1)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            logvar: self.logvar.detach(),
        }
    }
}

/// Latent sequence `(B, 1+t, h, w, c)`.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub data: Tensor,
}

impl LatentSequence {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 5 || data.dim(1)? == 0 {
            return Err(Error::Dimension(format!(
                "latent sequence must be (B, L>=1, h, w, c), got {:?}",
                data.dims()
            )));
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.data.dim(1)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    blocks: Vec<ResBlock>,
    down: CausalConv3d,
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: CausalConv3d,
    stages: Vec<EncoderStage>,
    mid: ResBlock,
    norm_out: FrameGroupNorm,
    conv_out: CausalConv3d,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    temporal: bool,
    up: CausalConv3d,
    blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: CausalConv3d,
    mid: ResBlock,
    stages: Vec<DecoderStage>,
    norm_out: FrameGroupNorm,
    conv_out: CausalConv3d,
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    cfg: VaeConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

/// Builds the model with deterministic initialization from `cfg.seed`.
pub fn build_model(cfg: &VaeConfig, dtype: DType, device: &Device) -> Result<VaeModel> {
    VaeModel::new(cfg, dtype, device)
}

impl VaeModel {
    pub fn new(cfg: &VaeConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = seeded(cfg.seed);
        let ch = cfg.stage_channels();
        let n_t = cfg.temporal_stages();
        let k3 = ConvGeometry::new([3, 3, 3], [1, 1, 1]);
        let s = &mut store;

        let conv_in = CausalConv3d::new(s, "encoder.conv_in", 3, ch[0], k3, &mut rng)?;
        let mut stages = Vec::new();
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..cfg.blocks_per_stage {
                blocks.push(ResBlock::new(s, &format!("encoder.stage{i}.block{j}"), prev, c, &mut rng)?);
                prev = c;
            }
            let st = if i < n_t { 2 } else { 1 };
            let down = CausalConv3d::new(
                s,
                &format!("encoder.stage{i}.down"),
                prev,
                c,
                ConvGeometry::new([3, 3, 3], [st, 2, 2]),
                &mut rng,
            )?;
            prev = c;
            stages.push(EncoderStage { blocks, down });
        }
        let encoder = Encoder {
            conv_in,
            stages,
            mid: ResBlock::new(s, "encoder.mid", prev, prev, &mut rng)?,
            norm_out: FrameGroupNorm::new(s, "encoder.norm_out", prev)?,
            conv_out: CausalConv3d::new(s, "encoder.conv_out", prev, 2 * cfg.c_latent, k3, &mut rng)?,
        };

        let top = *ch.last().expect("validated non-empty");
        let dec_in = CausalConv3d::new(s, "decoder.conv_in", cfg.c_latent, top, k3, &mut rng)?;
        let dec_mid = ResBlock::new(s, "decoder.mid", top, top, &mut rng)?;
        let mut prev = top;
        let mut dstages = Vec::new();
        for i in (0..ch.len()).rev() {
            let c = ch[i];
            let up = CausalConv3d::new(s, &format!("decoder.stage{i}.up"), prev, c, k3, &mut rng)?;
            let mut blocks = Vec::new();
            for j in 0..cfg.blocks_per_stage {
                blocks.push(ResBlock::new(s, &format!("decoder.stage{i}.block{j}"), c, c, &mut rng)?);
            }
            prev = c;
            dstages.push(DecoderStage {
                temporal: i < n_t,
                up,
                blocks,
            });
        }
        let decoder = Decoder {
            conv_in: dec_in,
            mid: dec_mid,
            stages: dstages,
            norm_out: FrameGroupNorm::new(s, "decoder.norm_out", prev)?,
            conv_out: CausalConv3d::new(s, "decoder.conv_out", prev, 3, k3, &mut rng)?,
        };

        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Posterior over latents for `x: (B, 1+T, H, W, 3)`.
    pub fn encode(&self, x: &Tensor) -> Result<LatentPosterior> {
        let (_, f, h, w, c) = x.dims5().map_err(|_| {
            Error::Dimension(format!("encoder input must be (B,T,H,W,3), got {:?}", x.dims()))
        })?;
        if c != 3 {
            return Err(Error::Dimension(format!("encoder input has {c} channels, expected 3")));
        }
        self.cfg.latent_dims(f, h, w)?;
        let e = &self.encoder;
        let mut hdn = e.conv_in.forward(x)?;
        for stage in &e.stages {
            for b in &stage.blocks {
                hdn = b.forward(&hdn)?;
            }
            hdn = stage.down.forward(&hdn)?;
        }
        hdn = e.mid.forward(&hdn)?;
        let out = e.conv_out.forward(&e.norm_out.forward_silu(&hdn)?)?;
        let c = self.cfg.c_latent;
        let mean = out.narrow(4, 0, c)?;
        let logvar = out.narrow(4, c, c)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(LatentPosterior { mean, logvar })
    }

    /// Inference encode: the posterior is detached so no autograd graph
    /// outlives the call.
    pub fn encode_clip(&self, clip: &VideoClip) -> Result<LatentPosterior> {
        let p = self.encode(&clip.to_tensor(self.dtype(), self.device())?)?;
        Ok(LatentPosterior {
            mean: p.mean.detach().contiguous()?,
            logvar: p.logvar.detach().contiguous()?,
        })
    }

    /// Decodes `z: (B, L, h, w, c)` to `(B, 1 + (L-1) p_t, h p_s, w p_s, 3)`.
    pub fn decode(&self, z: &LatentSequence) -> Result<Tensor> {
        let (_, _, _, _, c) = z.data.dims5()?;
        if c != self.cfg.c_latent {
            return Err(Error::Dimension(format!(
                "latent has {c} channels, model expects {}",
                self.cfg.c_latent
            )));
        }
        let peak: f64 = z.data.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar()?;
        if !peak.is_finite() {
            return Err(Error::Numeric("non-finite latent passed to the decoder".into()));
        }
        let d = &self.decoder;
        let mut hdn = d.conv_in.forward(&z.data)?;
        hdn = d.mid.forward(&hdn)?;
        for stage in &d.stages {
            if stage.temporal {
                hdn = upsample_temporal(&hdn)?;
            }
            hdn = upsample_spatial(&hdn)?;
            hdn = stage.up.forward(&hdn)?;
            for b in &stage.blocks {
                hdn = b.forward(&hdn)?;
            }
        }
        let out = d.conv_out.forward(&d.norm_out.forward_silu(&hdn)?)?;
        Ok(out.tanh()?)
    }

    /// Deterministic autoencoding through the posterior mean.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let post = self.encode(x)?;
        self.decode(&LatentSequence::new(post.mean)?)
    }
}

/// `z = mean + exp(logvar / 2) * eps`, `eps ~ N(0, I)` from `rng`.
pub fn reparameterize(post: &LatentPosterior, rng: &mut SeededRng) -> Result<LatentSequence> {
    if post.mean.dims() != post.logvar.dims() {
        return Err(Error::Dimension(format!(
            "posterior mean {:?} and logvar {:?} differ in shape",
            post.mean.dims(),
            post.logvar.dims()
        )));
    }
    let eps = normal_tensor(rng, post.mean.dims(), post.mean.dtype(), post.mean.device())?;
    let std = (&post.logvar * 0.5)?.exp()?;
    LatentSequence::new((&post.mean + std.mul(&eps)?)?)
}
