//! Staged training: image pretraining (frames as single-frame clips),
//! predictive video training, and decoder fine-tuning with a frozen encoder.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    gan_losses, hinge_d_loss, kl_loss, mse_loss, perceptual_loss, temporal_diff_loss, total_loss, LossReport,
    LossTensors, LossWeights, PatchDiscriminator, RandomConvPyramid,
};
use crate::model::{reparameterize, VaeConfig};
use crate::optim::{clip_grad_norm, learning_rate, AdamW, AdamWConfig};
use crate::predictive::{pad_latents, partition_groups, truncate_clip, DropPlan, PredictiveVae, PADDING_TOKEN};
use crate::rng::{seeded, RngState, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ImagePretrain,
    VideoPredictive,
    DecoderFinetune,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_pretrain" => Ok(Self::ImagePretrain),
            "video_predictive" => Ok(Self::VideoPredictive),
            "decoder_finetune" => Ok(Self::DecoderFinetune),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ImagePretrain => "image_pretrain",
            Self::VideoPredictive => "video_predictive",
            Self::DecoderFinetune => "decoder_finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub max_drop_ratio: f64,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub loss: LossWeights,
    /// Base width of the patch discriminator.
    pub disc_channels: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::VideoPredictive,
            steps: 2000,
            batch_size: 4,
            learning_rate: 5e-5,
            warmup_steps: 100,
            max_drop_ratio: 1.0,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            loss: LossWeights::toy(),
            disc_channels: 16,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_drop_ratio) {
            return Err(Error::Config(format!(
                "max_drop_ratio must lie in [0, 1], got {}",
                self.max_drop_ratio
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Drop ratio actually used: fine-tuning never drops frames.
    pub fn effective_drop_ratio(&self) -> f64 {
        match self.stage {
            Stage::VideoPredictive => self.max_drop_ratio,
            Stage::ImagePretrain | Stage::DecoderFinetune => 0.0,
        }
    }
}

/// The four ablation configurations, expressed purely as config changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Plain reconstruction, no frame dropping.
    Baseline,
    /// Predictive reconstruction, r = 1.
    Pr,
    /// Predictive reconstruction plus the temporal-difference term.
    PrMotion,
    /// `PrMotion` followed by decoder fine-tuning.
    PrMotionFt,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "pr" => Ok(Self::Pr),
            "pr_motion" => Ok(Self::PrMotion),
            "pr_motion_ft" => Ok(Self::PrMotionFt),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Pr => "pr",
            Self::PrMotion => "pr_motion",
            Self::PrMotionFt => "pr_motion_ft",
        })
    }
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::Pr, Preset::PrMotion, Preset::PrMotionFt];

    /// Rewrites the drop ratio and motion weight of a video-stage config.
    pub fn apply(self, cfg: &mut TrainConfig) {
        let (r, diff) = match self {
            Preset::Baseline => (0.0, 0.0),
            Preset::Pr => (1.0, 0.0),
            Preset::PrMotion | Preset::PrMotionFt => (1.0, 1.0),
        };
        cfg.max_drop_ratio = r;
        cfg.loss.lambda_diff = diff;
    }

    pub fn finetunes_decoder(self) -> bool {
        self == Preset::PrMotionFt
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub step: u64,
    pub global_step: u64,
    /// Dropped groups per clip, in sampling order.
    pub dropped: Vec<usize>,
    pub lr: f64,
    pub grad_norm: f64,
    pub report: LossReport,
}

/// Mean of `mse + diff` over the first and last `window` entries.
pub fn smoothed_reconstruction(log: &[StepLog], window: usize) -> Option<(f64, f64)> {
    if log.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(log.len());
    let mean = |s: &[StepLog]| s.iter().map(|l| l.report.reconstruction()).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}

/// Stacks clips into `(B, T, H, W, 3)`.
pub fn batch_tensor(clips: &[&crate::model::VideoClip], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = clips
        .iter()
        .map(|c| c.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Model, discriminator, optimizers and RNG for a staged run.
pub struct Trainer {
    pub model: PredictiveVae,
    pub disc: PatchDiscriminator,
    cfg: TrainConfig,
    gen_opt: AdamW,
    disc_opt: AdamW,
    extractor: Option<RandomConvPyramid>,
    rng: SeededRng,
    step: u64,
    global_step: u64,
    history: Vec<StepLog>,
}

fn generator_vars(model: &PredictiveVae, stage: Stage) -> Vec<(String, candle_core::Var)> {
    match stage {
        Stage::DecoderFinetune => model.params().with_prefix("decoder."),
        Stage::ImagePretrain => model
            .params()
            .all()
            .into_iter()
            .filter(|(n, _)| n != PADDING_TOKEN)
            .collect(),
        Stage::VideoPredictive => model.params().all(),
    }
}

impl Trainer {
    /// Fresh model with deterministic initialization.
    pub fn new(vae: &VaeConfig, resolution: (usize, usize), cfg: TrainConfig) -> Result<Self> {
        let model = PredictiveVae::new(vae, resolution, DType::F32, &Device::Cpu)?;
        Self::from_model(model, cfg)
    }

    pub fn from_model(model: PredictiveVae, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dev = model.params().device().clone();
        let dtype = model.params().dtype();
        let disc = PatchDiscriminator::new(cfg.disc_channels, model.vae.config().seed ^ 0xD15C, dtype, &dev)?;
        let gen_opt = AdamW::new(generator_vars(&model, cfg.stage), cfg.optimizer.clone())?;
        let disc_opt = AdamW::new(disc.params().all(), cfg.optimizer.clone())?;
        let extractor = Self::make_extractor(&cfg, dtype, &dev)?;
        Ok(Self {
            rng: seeded(cfg.seed),
            model,
            disc,
            gen_opt,
            disc_opt,
            extractor,
            cfg,
            step: 0,
            global_step: 0,
            history: Vec::new(),
        })
    }

    fn make_extractor(cfg: &TrainConfig, dtype: DType, dev: &Device) -> Result<Option<RandomConvPyramid>> {
        if cfg.loss.lambda_lpips > 0.0 {
            Ok(Some(RandomConvPyramid::default_for(cfg.seed ^ 0x1F, dtype, dev)?))
        } else {
            Ok(None)
        }
    }

    /// Switches to a new stage. Optimizer moments restart; the
    /// discriminator, RNG stream and global step carry over.
    pub fn begin_stage(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        let dev = self.model.params().device().clone();
        let dtype = self.model.params().dtype();
        self.gen_opt = AdamW::new(generator_vars(&self.model, cfg.stage), cfg.optimizer.clone())?;
        self.disc_opt = AdamW::new(self.disc.params().all(), cfg.optimizer.clone())?;
        self.extractor = Self::make_extractor(&cfg, dtype, &dev)?;
        self.cfg = cfg;
        self.step = 0;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    /// Whether the adversarial term is on for the next step. Fine-tuning
    /// keeps it on regardless of `gan_start_step`.
    pub fn gan_active(&self) -> bool {
        let w = &self.cfg.loss;
        match self.cfg.stage {
            Stage::DecoderFinetune => w.lambda_gan > 0.0,
            _ => w.gan_active(self.global_step),
        }
    }

    fn sample_batch(&mut self, data: &Dataset) -> Result<Tensor> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Input("training dataset is empty".into()));
        }
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let dtype = self.model.params().dtype();
        let dev = self.model.params().device().clone();
        match self.cfg.stage {
            Stage::ImagePretrain => {
                let mut frames = Vec::with_capacity(idx.len());
                for i in idx {
                    let clip = &data.clips[i];
                    let f = self.rng.random_range(0..clip.frames);
                    frames.push(clip.frames_range(f, 1)?.to_tensor(dtype, &dev)?);
                }
                Ok(Tensor::cat(&frames, 0)?)
            }
            _ => {
                let clips: Vec<_> = idx.iter().map(|&i| &data.clips[i]).collect();
                batch_tensor(&clips, dtype, &dev)
            }
        }
    }

    /// One generator (and, when active, discriminator) update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let x = self.sample_batch(data)?;
        let p_t = self.model.vae.config().p_t;
        let groups = partition_groups(x.dim(1)? - 1, p_t)?;
        let ratio = self.cfg.effective_drop_ratio();
        let dropped: Vec<usize> = (0..x.dim(0)?)
            .map(|_| DropPlan::sample(groups, ratio, p_t, &mut self.rng).map(|p| p.dropped))
            .collect::<Result<_>>()?;

        // Clips sharing a drop count go through the autoencoder together.
        // Every loss is a mean over elements, so the regrouped batch order
        // does not change its value.
        let mut by_k: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (i, &k) in dropped.iter().enumerate() {
            by_k.entry(k).or_default().push(i as u32);
        }
        let (mut targets, mut recons) = (Vec::new(), Vec::new());
        let (mut kl_sum, mut kl_count) = (None::<Tensor>, 0usize);
        for (&k, idx) in &by_k {
            let xs = if idx.len() == x.dim(0)? {
                x.clone()
            } else {
                x.index_select(&Tensor::new(idx.as_slice(), x.device())?, 0)?
            };
            let observed = truncate_clip(&xs, k, p_t)?;
            let mut posterior = self.model.vae.encode(&observed)?;
            if self.cfg.stage == Stage::DecoderFinetune {
                posterior = posterior.detach();
            }
            let z_obs = reparameterize(&posterior, &mut self.rng)?;
            let z = pad_latents(&z_obs, k, &self.model.padding, &mut self.rng)?;
            recons.push(self.model.vae.decode(&z)?);
            let n = posterior.mean.elem_count();
            let weighted = (kl_loss(&posterior)? * n as f64)?;
            kl_sum = Some(match kl_sum {
                Some(acc) => (acc + weighted)?,
                None => weighted,
            });
            kl_count += n;
            targets.push(xs);
        }
        let x = Tensor::cat(&targets, 0)?;
        let recon = Tensor::cat(&recons, 0)?;
        let kl = (kl_sum.expect("non-empty batch") / kl_count as f64)?;

        let w = self.cfg.loss.clone();
        let gan_on = self.gan_active();
        let (gan_g, gan_d) = if gan_on {
            let (g, d) = gan_losses(&self.disc, &recon, &x)?;
            (Some(g), Some(d))
        } else {
            (None, None)
        };
        let lpips = match &self.extractor {
            Some(e) => Some(perceptual_loss(e, &recon, &x)?),
            None => None,
        };
        let terms = LossTensors {
            mse: mse_loss(&recon, &x)?,
            diff: temporal_diff_loss(&recon, &x)?,
            kl,
            lpips,
            gan_g,
        };
        // Fine-tuning gates the GAN on its own; pass a step that opens the gate.
        let gate_step = if gan_on { u64::MAX } else { 0 };
        let total = terms.total(&w, gate_step)?;
        let gan_d_val = match &gan_d {
            Some(d) => d.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            None => 0.0,
        };
        let comps = terms.components(gan_d_val)?;
        let mut report = total_loss(&w, &comps, gate_step)?;
        report.step = self.global_step;
        let total_val = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total_val.is_finite() || !report.total.is_finite() {
            return Err(Error::TrainingAborted {
                step: self.global_step,
                reason: format!("non-finite loss: {report:?}"),
            });
        }

        let lr = learning_rate(self.cfg.learning_rate, self.step, self.cfg.warmup_steps, self.cfg.steps);
        let mut grads = total.backward()?;
        let grad_norm = clip_grad_norm(&mut grads, self.gen_opt.vars(), self.cfg.grad_clip).map_err(|e| {
            Error::TrainingAborted {
                step: self.global_step,
                reason: format!("{e}; losses {report:?}"),
            }
        })?;
        self.gen_opt.step(&grads, lr)?;

        if gan_on {
            let d_loss = hinge_d_loss(&self.disc.forward(&x)?, &self.disc.forward(&recon.detach())?)?;
            let mut dg = d_loss.backward()?;
            clip_grad_norm(&mut dg, self.disc_opt.vars(), self.cfg.grad_clip)?;
            self.disc_opt.step(&dg, lr)?;
        }

        let entry = StepLog {
            stage: self.cfg.stage,
            step: self.step,
            global_step: self.global_step,
            dropped,
            lr,
            grad_norm,
            report,
        };
        self.step += 1;
        self.global_step += 1;
        self.history.push(entry.clone());
        Ok(entry)
    }

    /// Runs the remaining steps of the current stage, checkpointing to
    /// `ckpt_dir` every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, data: &Dataset, ckpt_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        let mut out = Vec::new();
        while self.step < self.cfg.steps {
            let entry = self.train_step(data)?;
            if entry.step % 50 == 0 {
                log::info!(
                    "{} step {} loss {:.5} mse {:.5} diff {:.5} k {:?}",
                    entry.stage,
                    entry.step,
                    entry.report.total,
                    entry.report.mse,
                    entry.report.diff,
                    entry.dropped
                );
            }
            out.push(entry);
            if let Some(dir) = ckpt_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < self.cfg.steps {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.save(dir)?;
        }
        Ok(out)
    }

    /// `begin_stage(cfg)` followed by [`Trainer::run`].
    pub fn train_stage(&mut self, data: &Dataset, cfg: TrainConfig, ckpt_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        self.begin_stage(cfg)?;
        self.run(data, ckpt_dir)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let (gen_step, gen_state) = self.gen_opt.state()?;
        let (disc_step, disc_state) = self.disc_opt.state()?;
        Ok(Checkpoint {
            version: checkpoint::CHECKPOINT_VERSION,
            vae: self.model.vae.config().clone(),
            resolution: self.resolution(),
            train: self.cfg.clone(),
            step: self.step,
            global_step: self.global_step,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
            params: self.model.params().snapshot()?,
            disc_params: self.disc.params().snapshot()?,
            gen_opt_step: gen_step,
            gen_opt: gen_state,
            disc_opt_step: disc_step,
            disc_opt: disc_state,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let p_s = self.model.vae.config().p_s;
        (self.model.latent_hw.0 * p_s, self.model.latent_hw.1 * p_s)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.to_checkpoint()?)
    }

    /// Rebuilds the exact training state stored in `ck`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ck.vae, ck.resolution, ck.train.clone())?;
        t.model.params().load(&ck.params)?;
        t.disc.params().load(&ck.disc_params)?;
        t.gen_opt.load_state(ck.gen_opt_step, &ck.gen_opt)?;
        t.disc_opt.load_state(ck.disc_opt_step, &ck.disc_opt)?;
        t.rng = ck.rng.restore()?;
        t.step = ck.step;
        t.global_step = ck.global_step;
        t.history = ck.history.clone();
        Ok(t)
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(dir)?)
    }

    /// Starts a new stage from the weights in `ck`, possibly under a
    /// different autoencoder config (e.g. another padding strategy).
    /// Parameters absent from `ck` keep their fresh initialization; the
    /// discriminator, RNG stream and global step carry over, optimizers
    /// start fresh.
    pub fn warm_start(ck: &Checkpoint, vae: &VaeConfig, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(vae, ck.resolution, cfg)?;
        let fresh = t.model.params().load_matching(&ck.params)?;
        if !fresh.is_empty() {
            log::info!("warm start keeps fresh values for {fresh:?}");
        }
        t.disc.params().load(&ck.disc_params)?;
        t.rng = ck.rng.restore()?;
        t.global_step = ck.global_step;
        Ok(t)
    }
}

/// Step counts for the three stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub image_steps: u64,
    pub video_steps: u64,
    pub finetune_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            image_steps: 2000,
            video_steps: 2000,
            finetune_steps: 1000,
        }
    }
}

/// Stage configs derived from a base config for `preset`.
pub fn stage_configs(base: &TrainConfig, preset: Preset, schedule: Schedule) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    if schedule.image_steps > 0 {
        out.push(TrainConfig {
            stage: Stage::ImagePretrain,
            steps: schedule.image_steps,
            max_drop_ratio: 0.0,
            ..base.clone()
        });
    }
    let mut video = TrainConfig {
        stage: Stage::VideoPredictive,
        steps: schedule.video_steps,
        ..base.clone()
    };
    preset.apply(&mut video);
    out.push(video.clone());
    if preset.finetunes_decoder() && schedule.finetune_steps > 0 {
        out.push(TrainConfig {
            stage: Stage::DecoderFinetune,
            steps: schedule.finetune_steps,
            max_drop_ratio: 0.0,
            ..video
        });
    }
    out
}
