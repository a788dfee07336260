//! Dropped-frame prediction error and an optical-flow probe on latents.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::data::FlowField;
use crate::error::{Error, Result};
use crate::model::{VaeModel, VideoClip};
use crate::nn::CausalConv3d;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::predictive::{partition_groups, predictive_forward_with, DropPlan, PredictiveVae};
use crate::rng::{seeded, SeededRng};

/// Pixel MSE on the frames dropped by a forced plan with `k` groups.
pub fn prediction_error(model: &PredictiveVae, clip: &VideoClip, k: usize, rng: &mut SeededRng) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("prediction error needs k >= 1 dropped groups".into()));
    }
    let p_t = model.vae.config().p_t;
    let groups = partition_groups(clip.frames - 1, p_t)?;
    let plan = DropPlan::new(groups, k, 1.0, p_t)?;
    let x = clip.to_tensor(model.params().dtype(), model.params().device())?;
    let out = predictive_forward_with(&model.vae, &x, plan, &model.padding, rng)?;
    let start = plan.observed_frames;
    let len = clip.frames - start;
    let diff = (out.recon.narrow(1, start, len)? - x.narrow(1, start, len)?)?;
    Ok(diff.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar()?)
}

/// Posterior means `(1, L, h, w, c)` for each clip.
pub fn encode_means(model: &VaeModel, clips: &[VideoClip]) -> Result<Vec<Tensor>> {
    clips.iter().map(|c| Ok(model.encode_clip(c)?.mean)).collect()
}

/// Mean end-point error between two `(..., 2)` flow arrays.
pub fn epe(pred: &[f32], truth: &[f32]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() % 2 != 0 || pred.is_empty() {
        return Err(Error::Dimension(format!(
            "flow arrays of length {} and {} are not comparable",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() / 2;
    let sum: f64 = pred
        .chunks(2)
        .zip(truth.chunks(2))
        .map(|(p, t)| {
            let dx = p[0] as f64 - t[0] as f64;
            let dy = p[1] as f64 - t[1] as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowProbeConfig {
    pub hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FlowProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Two 3x3 convs on a pair of adjacent latent frames, then pixel shuffle
/// to the `p_t` flow fields between them at full resolution. The output
/// conv starts at zero, so an untrained probe predicts zero flow.
#[derive(Debug, Clone)]
pub struct FlowProbe {
    conv1: CausalConv3d,
    conv2: CausalConv3d,
    store: ParamStore,
    p_t: usize,
    p_s: usize,
}

impl FlowProbe {
    pub fn new(c: usize, p_t: usize, p_s: usize, hidden: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = seeded(seed);
        let g = ConvGeometry::new([1, 3, 3], [1, 1, 1]);
        let conv1 = CausalConv3d::new(&mut store, "probe.conv1", 2 * c, hidden, g, &mut rng)?;
        let conv2 = CausalConv3d::zeros(&mut store, "probe.conv2", hidden, p_t * p_s * p_s * 2, g)?;
        Ok(Self {
            conv1,
            conv2,
            store,
            p_t,
            p_s,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `pairs: (N, 1, h, w, 2c)` -> flow `(N, p_t, h p_s, w p_s, 2)`.
    pub fn forward(&self, pairs: &Tensor) -> Result<Tensor> {
        let (n, _, h, w, _) = pairs.dims5()?;
        let y = self.conv2.forward(&self.conv1.forward(pairs)?.silu()?)?;
        let (p_t, p_s) = (self.p_t, self.p_s);
        let y = y.reshape(vec![n, h, w, p_t, p_s, p_s, 2])?;
        let y = y.permute(vec![0, 3, 1, 4, 2, 5, 6])?.contiguous()?;
        Ok(y.reshape((n, p_t, h * p_s, w * p_s, 2))?)
    }
}

/// Stacks `(z_j, z_{j+1})` channel-wise for every adjacent latent pair and
/// gathers the matching ground-truth flows `(pairs, p_t, H, W, 2)`.
pub fn flow_pairs(latents: &[Tensor], flows: &[FlowField], p_t: usize, p_s: usize) -> Result<(Tensor, Tensor)> {
    if latents.len() != flows.len() || latents.is_empty() {
        return Err(Error::Input("flow probe needs one flow field per latent sequence".into()));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (z, f) in latents.iter().zip(flows) {
        let z = if z.rank() == 5 { z.squeeze(0)? } else { z.clone() };
        let (l, h, w, _) = z.dims4()?;
        if f.steps != (l - 1) * p_t || f.height != h * p_s || f.width != w * p_s {
            return Err(Error::Dimension(format!(
                "flow ({}, {}, {}) does not match latents ({l}, {h}, {w}) at p_t={p_t}, p_s={p_s}",
                f.steps, f.height, f.width
            )));
        }
        let flow = Tensor::from_slice(&f.data, (l - 1, p_t, f.height, f.width, 2), z.device())?
            .to_dtype(z.dtype())?;
        for j in 0..l - 1 {
            inputs.push(Tensor::cat(&[z.get(j)?, z.get(j + 1)?], 2)?.unsqueeze(0)?.unsqueeze(0)?);
            targets.push(flow.get(j)?.unsqueeze(0)?);
        }
    }
    Ok((Tensor::cat(&inputs, 0)?, Tensor::cat(&targets, 0)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub final_train_epe: f64,
    pub val_epe: f64,
    /// EPE of predicting zero flow everywhere on the same pairs.
    pub zero_flow_epe: f64,
}

/// Differentiable mean end-point error over `(..., 2)` flows. Training on
/// the evaluation metric keeps the probe from trading EPE for MSE by
/// smearing small flows over static pixels.
fn epe_loss(pred: &Tensor, truth: &Tensor) -> Result<Tensor> {
    let sq = (pred - truth)?.sqr()?.sum_keepdim(pred.rank() - 1)?;
    Ok((sq + 1e-6)?.sqrt()?.mean_all()?)
}

/// Per-channel standardization of probe inputs with train-set statistics.
fn standardize_pairs(train: &Tensor, val: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = train.dim(4)?;
    let rows = train.reshape(((), c))?;
    let mean = rows.mean_keepdim(0)?;
    let std = (rows.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)? + 1e-8)?.sqrt()?;
    let apply = |x: &Tensor| -> Result<Tensor> {
        Ok(x.reshape(((), c))?.broadcast_sub(&mean)?.broadcast_div(&std)?.reshape(x.dims())?)
    };
    Ok((apply(train)?, apply(val)?))
}

/// Trains a fresh probe head on `train` latents/flows, reports EPE on `val`.
#[allow(clippy::too_many_arguments)]
pub fn flow_probe(
    train_latents: &[Tensor],
    train_flows: &[FlowField],
    val_latents: &[Tensor],
    val_flows: &[FlowField],
    p_t: usize,
    p_s: usize,
    cfg: &FlowProbeConfig,
) -> Result<(FlowProbe, ProbeReport)> {
    let (xt, yt) = flow_pairs(train_latents, train_flows, p_t, p_s)?;
    let (xv, yv) = flow_pairs(val_latents, val_flows, p_t, p_s)?;
    let (xt, xv) = standardize_pairs(&xt.detach(), &xv.detach())?;
    let c = xt.dim(4)? / 2;
    let probe = FlowProbe::new(c, p_t, p_s, cfg.hidden, cfg.seed, xt.dtype(), xt.device())?;
    let mut opt = AdamW::new(
        probe.params().all(),
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    )?;
    let mut rng = seeded(cfg.seed ^ 0x9E37);
    let n = xt.dim(0)?;
    let mut last = f64::NAN;
    for _ in 0..cfg.steps {
        let idx: Vec<u32> = (0..cfg.batch_size.min(n)).map(|_| rng.random_range(0..n as u32)).collect();
        let idx = Tensor::new(idx.as_slice(), xt.device())?;
        let pred = probe.forward(&xt.index_select(&idx, 0)?)?;
        let loss = epe_loss(&pred, &yt.index_select(&idx, 0)?)?;
        last = loss.to_dtype(DType::F64)?.to_scalar()?;
        if !last.is_finite() {
            return Err(Error::Numeric("flow probe diverged".into()));
        }
        opt.step(&loss.backward()?, cfg.learning_rate)?;
    }
    let mut pred_all = Vec::new();
    for i in 0..xv.dim(0)? {
        pred_all.extend(probe.forward(&xv.narrow(0, i, 1)?)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    }
    let truth: Vec<f32> = yv.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let val_epe = epe(&pred_all, &truth)?;
    let zero_flow_epe = epe(&vec![0.0; truth.len()], &truth)?;
    Ok((
        probe,
        ProbeReport {
            train_pairs: n,
            val_pairs: xv.dim(0)?,
            final_train_epe: last,
            val_epe,
            zero_flow_epe,
        },
    ))
}
