//! Training objective:
//! `total = rec * (mse + diff_w * diff) + lpips * perceptual + gan * g_adv + kl * kl`,
//! with the adversarial term gated on `step >= gan_start_step`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::model::LatentPosterior;
use crate::nn::CausalConv3d;
use crate::params::ParamStore;
use crate::rng::{seeded, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    /// Multiplier on the temporal-difference term inside the reconstruction
    /// bracket. 1.0 is the motion-aware objective, 0.0 disables it.
    pub lambda_diff: f64,
    pub lambda_lpips: f64,
    pub lambda_gan: f64,
    pub lambda_kl: f64,
    pub gan_start_step: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_diff: 1.0,
            lambda_lpips: 0.1,
            lambda_gan: 0.05,
            lambda_kl: 1e-6,
            gan_start_step: 5000,
        }
    }
}

impl LossWeights {
    /// Defaults with the perceptual term off (no pretrained extractor ships).
    pub fn toy() -> Self {
        Self {
            lambda_lpips: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_diff", self.lambda_diff),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_gan", self.lambda_gan),
            ("lambda_kl", self.lambda_kl),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn gan_active(&self, step: u64) -> bool {
        self.lambda_gan > 0.0 && step >= self.gan_start_step
    }
}

/// Scalar loss terms of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mse: f64,
    pub diff: f64,
    pub lpips: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub diff: f64,
    pub lpips: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub kl: f64,
    pub total: f64,
    pub step: u64,
}

impl LossReport {
    pub fn reconstruction(&self) -> f64 {
        self.mse + self.diff
    }
}

pub fn total_loss(weights: &LossWeights, c: &LossComponents, step: u64) -> Result<LossReport> {
    weights.validate()?;
    let gan = if step >= weights.gan_start_step {
        weights.lambda_gan * c.gan_g
    } else {
        0.0
    };
    let total = weights.lambda_rec * (c.mse + weights.lambda_diff * c.diff)
        + weights.lambda_lpips * c.lpips
        + gan
        + weights.lambda_kl * c.kl;
    Ok(LossReport {
        mse: c.mse,
        diff: c.diff,
        lpips: c.lpips,
        gan_g: c.gan_g,
        gan_d: c.gan_d,
        kl: c.kl,
        total,
        step,
    })
}

/// Differentiable counterparts of [`LossComponents`] for one forward pass.
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub mse: Tensor,
    pub diff: Tensor,
    pub kl: Tensor,
    pub lpips: Option<Tensor>,
    pub gan_g: Option<Tensor>,
}

impl LossTensors {
    /// Weighted total, same formula as [`total_loss`]. Terms with zero weight
    /// or absent tensors drop out of the graph.
    pub fn total(&self, w: &LossWeights, step: u64) -> Result<Tensor> {
        let mut total = ((&self.mse + (&self.diff * w.lambda_diff)?)? * w.lambda_rec)?;
        total = (total + (&self.kl * w.lambda_kl)?)?;
        if let (Some(l), true) = (&self.lpips, w.lambda_lpips > 0.0) {
            total = (total + (l * w.lambda_lpips)?)?;
        }
        if let (Some(g), true) = (&self.gan_g, step >= w.gan_start_step && w.lambda_gan > 0.0) {
            total = (total + (g * w.lambda_gan)?)?;
        }
        Ok(total)
    }

    pub fn components(&self, gan_d: f64) -> Result<LossComponents> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossComponents {
            mse: s(&self.mse)?,
            diff: s(&self.diff)?,
            kl: s(&self.kl)?,
            lpips: self.lpips.as_ref().map(s).transpose()?.unwrap_or(0.0),
            gan_g: self.gan_g.as_ref().map(s).transpose()?.unwrap_or(0.0),
            gan_d,
        })
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared error over every element (all frames, dropped ones included).
pub fn mse_loss(recon: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(recon, target)?;
    Ok((recon - target)?.sqr()?.mean_all()?)
}

/// MSE between adjacent-frame differences along dim 1 of `(B, T, ...)`.
/// Zero for single-frame inputs.
pub fn temporal_diff_loss(recon: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(recon, target)?;
    let t = recon.dim(1)?;
    if t < 2 {
        return Ok(Tensor::zeros((), recon.dtype(), recon.device())?);
    }
    let delta = |x: &Tensor| -> Result<Tensor> { Ok((x.narrow(1, 1, t - 1)? - x.narrow(1, 0, t - 1)?)?) };
    Ok((delta(recon)? - delta(target)?)?.sqr()?.mean_all()?)
}

/// Mean over elements of `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn kl_loss(post: &LatentPosterior) -> Result<Tensor> {
    check_same(&post.mean, &post.logvar)?;
    let per = ((post.mean.sqr()? + post.logvar.exp()?)? - &post.logvar)?;
    Ok(((per - 1.0)? * 0.5)?.mean_all()?)
}

/// Per-frame feature extractor for the perceptual term. Must be frozen.
pub trait FeatureExtractor {
    /// `(B, T, H, W, 3) -> multi-scale features`.
    fn features(&self, clip: &Tensor) -> Result<Vec<Tensor>>;
}

/// Fixed, seeded random conv pyramid (1x3x3 kernels, stride 2 per scale).
#[derive(Debug, Clone)]
pub struct RandomConvPyramid {
    convs: Vec<CausalConv3d>,
    store: ParamStore,
}

impl RandomConvPyramid {
    pub fn new(seed: u64, widths: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = seeded(seed);
        let mut convs = Vec::new();
        let mut prev = 3;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(CausalConv3d::new(
                &mut store,
                &format!("pyramid.{i}"),
                prev,
                w,
                ConvGeometry::new([1, 3, 3], [1, 2, 2]),
                &mut rng,
            )?);
            prev = w;
        }
        Ok(Self { convs, store })
    }

    pub fn default_for(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::new(seed, &[16, 32, 32], dtype, device)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }
}

impl FeatureExtractor for RandomConvPyramid {
    fn features(&self, clip: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = clip.clone();
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Mean over scales of the mean squared feature difference.
pub fn perceptual_loss(extractor: &dyn FeatureExtractor, recon: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(recon, target)?;
    let fa = extractor.features(recon)?;
    let fb = extractor.features(&target.detach())?;
    if fa.is_empty() {
        return Ok(Tensor::zeros((), recon.dtype(), recon.device())?);
    }
    let n = fa.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let d = (a - b)?.sqr()?.mean_all()?;
        acc = Some(match acc {
            Some(s) => (s + d)?,
            None => d,
        });
    }
    Ok((acc.expect("non-empty") / n)?)
}

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// 4-layer strided 3D conv patch critic.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    convs: Vec<CausalConv3d>,
    store: ParamStore,
}

impl PatchDiscriminator {
    pub fn new(width: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = seeded(seed);
        let layers = [
            (3, width, [1, 2, 2]),
            (width, 2 * width, [2, 2, 2]),
            (2 * width, 4 * width, [2, 2, 2]),
            (4 * width, 1, [1, 1, 1]),
        ];
        let mut convs = Vec::new();
        for (i, (cin, cout, stride)) in layers.into_iter().enumerate() {
            convs.push(CausalConv3d::new(
                &mut store,
                &format!("disc.conv{i}"),
                cin,
                cout,
                ConvGeometry::new([3, 3, 3], stride),
                &mut rng,
            )?);
        }
        Ok(Self { convs, store })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Patch logits for `(B, T, H, W, 3)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i != last {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }
}

/// `E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))]`.
pub fn hinge_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = (1.0 - real_logits)?.relu()?.mean_all()?;
    let fake = (fake_logits + 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// `-E[D(fake)]`.
pub fn hinge_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

/// `(gan_g, gan_d)`. The discriminator term sees a detached reconstruction,
/// so generator gradients only flow through `gan_g`.
pub fn gan_losses(disc: &PatchDiscriminator, recon: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor)> {
    check_same(recon, target)?;
    let fake = disc.forward(recon)?;
    let g = hinge_g_loss(&fake)?;
    let d = hinge_d_loss(&disc.forward(&target.detach())?, &disc.forward(&recon.detach())?)?;
    Ok((g, d))
}

/// Fresh standard-normal noise of `like`'s shape, used by tests and probes.
pub fn noise_like(like: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
    crate::rng::normal_tensor(rng, like.dims(), like.dtype(), like.device())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn dev() -> Device {
        Device::Cpu
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    fn filled(shape: &[usize], v: f64) -> Tensor {
        (Tensor::ones(shape, DType::F64, &dev()).unwrap() * v).unwrap()
    }

    #[test]
    fn mse_examples() {
        let mut rng = seeded(0);
        let a = normal_tensor(&mut rng, &[1, 3, 4, 4, 3], DType::F64, &dev()).unwrap();
        assert_eq!(scalar(&mse_loss(&a, &a).unwrap()), 0.0);
        let b = (&a + 0.5).unwrap();
        assert!((scalar(&mse_loss(&b, &a).unwrap()) - 0.25).abs() < 1e-12);

        let c = normal_tensor(&mut rng, &[1, 3, 4, 4, 3], DType::F64, &dev()).unwrap();
        let av: Vec<f64> = a.flatten_all().unwrap().to_vec1().unwrap();
        let cv: Vec<f64> = c.flatten_all().unwrap().to_vec1().unwrap();
        let mut oracle = 0.0;
        for i in 0..av.len() {
            oracle += (av[i] - cv[i]) * (av[i] - cv[i]);
        }
        oracle /= av.len() as f64;
        assert!((scalar(&mse_loss(&a, &c).unwrap()) - oracle).abs() < 1e-10);
        assert!(mse_loss(&a, &c.narrow(1, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn diff_loss_examples() {
        let target = Tensor::new(&[0f64, 1.0], &dev()).unwrap().reshape((1, 2, 1, 1, 1)).unwrap();
        let recon = Tensor::new(&[0f64, 0.0], &dev()).unwrap().reshape((1, 2, 1, 1, 1)).unwrap();
        assert_eq!(scalar(&temporal_diff_loss(&recon, &target).unwrap()), 1.0);
        let a = filled(&[1, 4, 2, 2, 3], 0.3);
        let b = filled(&[1, 4, 2, 2, 3], -0.7);
        assert_eq!(scalar(&temporal_diff_loss(&a, &b).unwrap()), 0.0);
        let single = filled(&[1, 1, 2, 2, 3], 0.3);
        assert_eq!(scalar(&temporal_diff_loss(&single, &(&single * 2.0).unwrap()).unwrap()), 0.0);
    }

    #[test]
    fn kl_examples() {
        let post = |mu: f64, lv: f64| LatentPosterior {
            mean: filled(&[1, 2, 2, 2, 4], mu),
            logvar: filled(&[1, 2, 2, 2, 4], lv),
        };
        assert!(scalar(&kl_loss(&post(0.0, 0.0)).unwrap()).abs() < 1e-12);
        assert!((scalar(&kl_loss(&post(1.0, 0.0)).unwrap()) - 0.5).abs() < 1e-12);
        let expect = 0.5 * (std::f64::consts::E - 2.0);
        assert!((scalar(&kl_loss(&post(0.0, 1.0)).unwrap()) - expect).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        let ones = filled(&[1, 2, 2, 2, 1], 1.0);
        let neg = filled(&[1, 2, 2, 2, 1], -1.0);
        let zero = filled(&[1, 2, 2, 2, 1], 0.0);
        assert_eq!(scalar(&hinge_d_loss(&ones, &neg).unwrap()), 0.0);
        assert_eq!(scalar(&hinge_d_loss(&zero, &zero).unwrap()), 2.0);
        assert_eq!(scalar(&hinge_g_loss(&zero).unwrap()), 0.0);
        assert_eq!(scalar(&hinge_g_loss(&filled(&[1, 1, 1, 1, 1], 0.75)).unwrap()), -0.75);
    }

    #[test]
    fn total_examples() {
        let zero = LossWeights {
            lambda_rec: 0.0,
            lambda_diff: 0.0,
            lambda_lpips: 0.0,
            lambda_gan: 0.0,
            lambda_kl: 0.0,
            gan_start_step: 0,
        };
        let c = LossComponents {
            mse: 0.2,
            diff: 0.1,
            lpips: 3.0,
            gan_g: -2.0,
            gan_d: 1.0,
            kl: 5.0,
        };
        assert_eq!(total_loss(&zero, &c, 10).unwrap().total, 0.0);
        let rec_only = LossWeights {
            lambda_rec: 1.0,
            lambda_diff: 1.0,
            ..zero.clone()
        };
        assert!((total_loss(&rec_only, &c, 10).unwrap().total - 0.3).abs() < 1e-15);
        let gated = LossWeights {
            lambda_gan: 0.5,
            gan_start_step: 100,
            ..rec_only
        };
        let before = total_loss(&gated, &c, 99).unwrap().total;
        let other = LossComponents { gan_g: 40.0, ..c };
        assert_eq!(before, total_loss(&gated, &other, 99).unwrap().total);
        assert!((total_loss(&gated, &c, 100).unwrap().total - (0.3 - 1.0)).abs() < 1e-12);
        let bad = LossWeights {
            lambda_kl: -1.0,
            ..LossWeights::default()
        };
        assert!(total_loss(&bad, &c, 0).is_err());
    }

    #[test]
    fn perceptual_zero_at_identity_for_any_seed() {
        let mut rng = seeded(9);
        let a = normal_tensor(&mut rng, &[1, 2, 16, 16, 3], DType::F64, &dev()).unwrap();
        let b = normal_tensor(&mut rng, &[1, 2, 16, 16, 3], DType::F64, &dev()).unwrap();
        let e1 = RandomConvPyramid::default_for(1, DType::F64, &dev()).unwrap();
        let e2 = RandomConvPyramid::default_for(2, DType::F64, &dev()).unwrap();
        assert_eq!(scalar(&perceptual_loss(&e1, &a, &a).unwrap()), 0.0);
        assert_eq!(scalar(&perceptual_loss(&e2, &a, &a).unwrap()), 0.0);
        let d1 = scalar(&perceptual_loss(&e1, &a, &b).unwrap());
        let d2 = scalar(&perceptual_loss(&e2, &a, &b).unwrap());
        assert!(d1 > 0.0 && d2 > 0.0 && d1 != d2);
    }

    #[test]
    fn tensor_total_matches_report() {
        let mut rng = seeded(4);
        let a = normal_tensor(&mut rng, &[1, 5, 4, 4, 3], DType::F64, &dev()).unwrap();
        let b = normal_tensor(&mut rng, &[1, 5, 4, 4, 3], DType::F64, &dev()).unwrap();
        let post = LatentPosterior {
            mean: normal_tensor(&mut rng, &[1, 2, 2, 2, 4], DType::F64, &dev()).unwrap(),
            logvar: normal_tensor(&mut rng, &[1, 2, 2, 2, 4], DType::F64, &dev()).unwrap(),
        };
        let terms = LossTensors {
            mse: mse_loss(&a, &b).unwrap(),
            diff: temporal_diff_loss(&a, &b).unwrap(),
            kl: kl_loss(&post).unwrap(),
            lpips: None,
            gan_g: Some(Tensor::new(0.3f64, &dev()).unwrap()),
        };
        let w = LossWeights {
            gan_start_step: 0,
            ..LossWeights::toy()
        };
        let t = scalar(&terms.total(&w, 7).unwrap());
        let r = total_loss(&w, &terms.components(0.0).unwrap(), 7).unwrap();
        assert!((t - r.total).abs() < 1e-12);
    }
}
