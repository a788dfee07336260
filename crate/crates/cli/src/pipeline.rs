//! Staged training plans and dataset loading.

use std::path::Path;

use pvvae_core::checkpoint::{self, Checkpoint};
use pvvae_core::data::{Dataset, Split};
use pvvae_core::model::PaddingStrategy;
use pvvae_core::trainer::{Preset, Schedule, Stage, StepLog, TrainConfig, Trainer};
use pvvae_core::{Error, Result, VaeConfig};
use serde::{Deserialize, Serialize};

/// Train split, validation split, and both together in index order.
pub struct Corpus {
    pub train: Dataset,
    pub val: Dataset,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let train = Dataset::load(dir, Split::Train)?;
        let val = Dataset::load(dir, Split::Val)?;
        if train.is_empty() {
            return Err(Error::Input(format!("corpus {} has no training clips", dir.display())));
        }
        let shape = train.clips[0].shape();
        if train.clips.iter().chain(&val.clips).any(|c| c.shape() != shape) {
            return Err(Error::Dimension("corpus clips differ in shape".into()));
        }
        Ok(Self { train, val })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let c = &self.train.clips[0];
        (c.height, c.width)
    }

    /// Validation split, or the training split when there is none.
    pub fn eval_split(&self) -> &Dataset {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }

    /// The first `n` clips over both splits.
    pub fn first(&self, n: usize) -> Result<Vec<pvvae_core::VideoClip>> {
        let all: Vec<_> = self.train.clips.iter().chain(&self.val.clips).take(n).cloned().collect();
        if all.len() < n {
            return Err(Error::Input(format!("corpus holds {} clips, {n} requested", all.len())));
        }
        Ok(all)
    }
}

/// Configs of the three stages for `preset` (or the base config as is).
pub fn stage_config(base: &TrainConfig, preset: Option<Preset>, schedule: Schedule, stage: Stage) -> TrainConfig {
    let mut video = TrainConfig {
        stage: Stage::VideoPredictive,
        steps: schedule.video_steps,
        ..base.clone()
    };
    if let Some(p) = preset {
        p.apply(&mut video);
    }
    match stage {
        Stage::ImagePretrain => TrainConfig {
            stage,
            steps: schedule.image_steps,
            max_drop_ratio: 0.0,
            ..base.clone()
        },
        Stage::VideoPredictive => video,
        Stage::DecoderFinetune => TrainConfig {
            stage,
            steps: schedule.finetune_steps,
            max_drop_ratio: 0.0,
            ..video
        },
    }
}

/// Ordered stages of a full run. Fine-tuning is included when the preset
/// asks for it, or (without a preset) when it has a nonzero step budget.
pub fn stage_plan(base: &TrainConfig, preset: Option<Preset>, schedule: Schedule) -> Vec<TrainConfig> {
    let mut stages = Vec::new();
    if schedule.image_steps > 0 {
        stages.push(Stage::ImagePretrain);
    }
    stages.push(Stage::VideoPredictive);
    let ft = match preset {
        Some(p) => p.finetunes_decoder(),
        None => true,
    };
    if ft && schedule.finetune_steps > 0 {
        stages.push(Stage::DecoderFinetune);
    }
    stages.into_iter().map(|s| stage_config(base, preset, schedule, s)).collect()
}

fn stage_rank(s: Stage) -> u8 {
    match s {
        Stage::ImagePretrain => 0,
        Stage::VideoPredictive => 1,
        Stage::DecoderFinetune => 2,
    }
}

/// Runs `stages` in order, each starting with fresh optimizers.
pub fn run_stages(trainer: &mut Trainer, data: &Dataset, stages: &[TrainConfig], ckpt: Option<&Path>) -> Result<Vec<StepLog>> {
    let mut log = Vec::new();
    for cfg in stages {
        log.extend(trainer.train_stage(data, cfg.clone(), ckpt)?);
    }
    Ok(log)
}

/// Finishes the stage stored in `dir`, then the later stages of `plan`.
pub fn resume_plan(dir: &Path, data: &Dataset, plan: &[TrainConfig], ckpt: Option<&Path>) -> Result<(Trainer, Vec<StepLog>)> {
    let mut trainer = Trainer::resume(dir)?;
    let current = trainer.config().stage;
    let mut log = trainer.run(data, ckpt)?;
    let later: Vec<TrainConfig> = plan
        .iter()
        .filter(|c| stage_rank(c.stage) > stage_rank(current))
        .cloned()
        .collect();
    log.extend(run_stages(&mut trainer, data, &later, ckpt)?);
    Ok((trainer, log))
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub preset: Preset,
    pub max_drop_ratio: Option<f64>,
    pub padding: Option<PaddingStrategy>,
}

impl Variant {
    pub fn preset(p: Preset) -> Self {
        Self {
            name: format!("preset_{p}"),
            preset: p,
            max_drop_ratio: None,
            padding: None,
        }
    }

    pub fn drop_ratio(base: Preset, r: f64) -> Self {
        Self {
            name: format!("drop_ratio_{r}"),
            preset: base,
            max_drop_ratio: Some(r),
            padding: None,
        }
    }

    pub fn padding(base: Preset, s: PaddingStrategy) -> Self {
        Self {
            name: format!("padding_{s}"),
            preset: base,
            max_drop_ratio: None,
            padding: Some(s),
        }
    }

    pub fn vae_config(&self, base: &VaeConfig) -> VaeConfig {
        let mut v = base.clone();
        if let Some(s) = self.padding {
            v.padding.strategy = s;
        }
        v
    }

    /// Video stage (and fine-tuning when the preset has it).
    pub fn stages(&self, base: &TrainConfig, schedule: Schedule) -> Vec<TrainConfig> {
        let sched = Schedule { image_steps: 0, ..schedule };
        let mut plan = stage_plan(base, Some(self.preset), sched);
        if let Some(r) = self.max_drop_ratio {
            for c in plan.iter_mut().filter(|c| c.stage == Stage::VideoPredictive) {
                c.max_drop_ratio = r;
            }
        }
        plan
    }

    /// Trains this variant from the weights in `init`.
    pub fn train(&self, init: &Checkpoint, base: &TrainConfig, schedule: Schedule, data: &Dataset, ckpt: Option<&Path>) -> Result<Trainer> {
        let stages = self.stages(base, schedule);
        let mut trainer = Trainer::warm_start(init, &self.vae_config(&init.vae), stages[0].clone())?;
        run_stages(&mut trainer, data, &stages, ckpt)?;
        Ok(trainer)
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    checkpoint::load(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_shape_the_plan() {
        let base = TrainConfig::default();
        let sched = Schedule::default();
        let plan = stage_plan(&base, Some(Preset::Baseline), sched);
        assert_eq!(plan.iter().map(|c| c.stage).collect::<Vec<_>>(), [Stage::ImagePretrain, Stage::VideoPredictive]);
        assert_eq!(plan[1].max_drop_ratio, 0.0);
        assert_eq!(plan[1].loss.lambda_diff, 0.0);
        let plan = stage_plan(&base, Some(Preset::PrMotionFt), sched);
        assert_eq!(plan.len(), 3);
        assert_eq!(plan[1].max_drop_ratio, 1.0);
        assert_eq!(plan[1].loss.lambda_diff, 1.0);
        assert_eq!(plan[2].stage, Stage::DecoderFinetune);
        assert_eq!(plan[2].steps, sched.finetune_steps);
    }

    #[test]
    fn ratio_variant_overrides_video_stage_only() {
        let v = Variant::drop_ratio(Preset::PrMotion, 0.5);
        let plan = v.stages(&TrainConfig::default(), Schedule::default());
        assert_eq!(plan.len(), 1);
        assert_eq!(plan[0].max_drop_ratio, 0.5);
    }
}
