//! Small rectified-flow generator over standardized VAE latents, and a
//! Frechet distance on random projections of clip statistics.
//!
//! Time convention: `u = 0` is pure noise, `u = 1` is data,
//! `z_u = (1 - u) z0 + u z1`, velocity target `z1 - z0`.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VideoClip;
use crate::nn::Linear;
use crate::optim::{clip_grad_norm, learning_rate, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::{normal_tensor, normal_vec, seeded, uniform_tensor, SeededRng};
use crate::tensor_io::{read_tensor, write_tensor};

pub const TIME_CONVENTION: &str = "u=0 noise, u=1 data; z_u=(1-u)z0+u*z1; target z1-z0";

/// Per-channel standardization of latents `(N, L, h, w, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn fit(latents: &Tensor) -> Result<Self> {
        let c = *latents.dims().last().ok_or_else(|| Error::Dimension("scalar latents".into()))?;
        let rows = latents.to_dtype(DType::F64)?.reshape(((), c))?;
        let n = rows.dim(0)?;
        if n < 2 {
            return Err(Error::Degenerate("need at least two latent positions".into()));
        }
        let mean_t = rows.mean(0)?;
        let var_t = rows.broadcast_sub(&mean_t)?.sqr()?.sum(0)?.affine(1.0 / (n - 1) as f64, 0.0)?;
        let mean: Vec<f64> = mean_t.to_vec1()?;
        let std: Vec<f64> = var_t.sqrt()?.to_vec1()?;
        if let Some(i) = std.iter().position(|&s| !(s > 1e-12) || !s.is_finite()) {
            return Err(Error::Degenerate(format!("latent channel {i} has zero variance")));
        }
        Ok(Self { mean, std })
    }

    fn vectors(&self, like: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.mean.len();
        let m = Tensor::from_slice(&self.mean, c, like.device())?.to_dtype(like.dtype())?;
        let s = Tensor::from_slice(&self.std, c, like.device())?.to_dtype(like.dtype())?;
        Ok((m, s))
    }

    pub fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        let (m, s) = self.vectors(z)?;
        Ok(z.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        let (m, s) = self.vectors(z)?;
        Ok(z.broadcast_mul(&s)?.broadcast_add(&m)?)
    }
}

/// `v(z_u, u)` for a batch `z: (B, ...)`, `u: (B,)`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, u: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowModelConfig {
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub sampler_steps: usize,
    pub seed: u64,
}

impl Default for FlowModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            depth: 3,
            time_dim: 32,
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 50,
            sampler_steps: 100,
            seed: 0,
        }
    }
}

/// Sinusoidal embedding of `u in [0, 1]`, `(B,) -> (B, dim)`.
pub fn time_embedding(u: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 1000.0 * (-(1000f64.ln()) * i as f64 / half.max(1) as f64).exp())
        .collect();
    let f = Tensor::from_vec(freqs, (1, half), u.device())?.to_dtype(u.dtype())?;
    let arg = u.unsqueeze(1)?.broadcast_mul(&f)?;
    Ok(Tensor::cat(&[arg.sin()?, arg.cos()?], 1)?)
}

/// MLP velocity network over flattened latents.
#[derive(Debug, Clone)]
pub struct MlpVelocity {
    layers: Vec<Linear>,
    store: ParamStore,
    latent_shape: Vec<usize>,
    time_dim: usize,
}

impl MlpVelocity {
    /// `latent_shape` is one sample's `(L, h, w, c)`.
    pub fn new(latent_shape: &[usize], cfg: &FlowModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.depth == 0 || cfg.hidden == 0 {
            return Err(Error::Config("flow model depth and width must be positive".into()));
        }
        let d: usize = latent_shape.iter().product();
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = seeded(cfg.seed);
        let mut layers = Vec::new();
        let mut prev = d + cfg.time_dim;
        for i in 0..cfg.depth {
            layers.push(Linear::new(&mut store, &format!("flow.layer{i}"), prev, cfg.hidden, &mut rng)?);
            prev = cfg.hidden;
        }
        layers.push(Linear::zeros(&mut store, "flow.out", prev, d)?);
        Ok(Self {
            layers,
            store,
            latent_shape: latent_shape.to_vec(),
            time_dim: cfg.time_dim,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }
}

impl VelocityField for MlpVelocity {
    fn velocity(&self, z: &Tensor, u: &Tensor) -> Result<Tensor> {
        let b = z.dim(0)?;
        let flat = z.reshape((b, ()))?;
        let mut h = Tensor::cat(&[flat, time_embedding(u, self.time_dim)?], 1)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i != last {
                h = h.silu()?;
            }
        }
        Ok(h.reshape(z.dims())?)
    }
}

/// `(1 - u) z0 + u z1` with `u: (B,)` broadcast over sample dims.
pub fn interpolate(z0: &Tensor, z1: &Tensor, u: &Tensor) -> Result<Tensor> {
    let mut shape = vec![u.dim(0)?];
    shape.extend(std::iter::repeat(1).take(z0.rank() - 1));
    let u = u.reshape(shape)?;
    let one_minus = (1.0 - &u)?;
    Ok((z0.broadcast_mul(&one_minus)? + z1.broadcast_mul(&u)?)?)
}

/// Loss for given noise and times: `mean |v(z_u, u) - (z1 - z0)|^2`.
pub fn rf_loss_with(model: &dyn VelocityField, z1: &Tensor, z0: &Tensor, u: &Tensor) -> Result<Tensor> {
    let zu = interpolate(z0, z1, u)?;
    let target = (z1 - z0)?;
    Ok((model.velocity(&zu, u)? - target)?.sqr()?.mean_all()?)
}

/// Draws `z0 ~ N(0, I)` and `u ~ U(0, 1)` from `rng`.
pub fn rf_loss(model: &dyn VelocityField, z1: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
    let z0 = normal_tensor(rng, z1.dims(), z1.dtype(), z1.device())?;
    let u = uniform_tensor(rng, &[z1.dim(0)?], z1.dtype(), z1.device())?;
    let finite: f64 = z1.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar()?;
    if !finite.is_finite() {
        return Err(Error::Numeric("non-finite data latent".into()));
    }
    rf_loss_with(model, z1, &z0, &u)
}

/// Euler integration from `z0` over `steps` uniform steps, `u_i = i / steps`.
pub fn euler_integrate(model: &dyn VelocityField, z0: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Input("sampler needs at least one step".into()));
    }
    let b = z0.dim(0)?;
    let dt = 1.0 / steps as f64;
    let mut z = z0.clone();
    for i in 0..steps {
        let u = Tensor::full(i as f64 * dt, b, z0.device())?.to_dtype(z0.dtype())?;
        z = (&z + (model.velocity(&z, &u)? * dt)?)?.detach();
    }
    Ok(z)
}

/// Samples `shape` (including batch) starting from fresh Gaussian noise.
pub fn euler_sample(model: &dyn VelocityField, shape: &[usize], steps: usize, rng: &mut SeededRng, dtype: DType, device: &Device) -> Result<Tensor> {
    let z0 = normal_tensor(rng, shape, dtype, device)?;
    euler_integrate(model, &z0, steps)
}

/// Trains a fresh velocity network on standardized latents `(N, L, h, w, c)`.
/// Returns the model and per-step losses.
pub fn train_flow(data: &Tensor, cfg: &FlowModelConfig) -> Result<(MlpVelocity, Vec<f64>)> {
    let n = data.dim(0)?;
    if n == 0 {
        return Err(Error::Input("no latents to train on".into()));
    }
    let data = data.detach();
    let model = MlpVelocity::new(&data.dims()[1..], cfg, data.dtype(), data.device())?;
    let mut opt = AdamW::new(
        model.params().all(),
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    )?;
    let vars = model.params().all();
    let mut rng = seeded(cfg.seed ^ 0xF10);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let idx: Vec<u32> = (0..cfg.batch_size.min(n).max(1)).map(|_| rng.random_range(0..n as u32)).collect();
        let z1 = data.index_select(&Tensor::new(idx.as_slice(), data.device())?, 0)?;
        let loss = rf_loss(&model, &z1, &mut rng)?;
        let v: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
        if !v.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: "non-finite rectified-flow loss".into(),
            });
        }
        losses.push(v);
        let mut grads = loss.backward()?;
        clip_grad_norm(&mut grads, &vars, 1.0)?;
        opt.step(&grads, learning_rate(cfg.learning_rate, step, cfg.warmup_steps, cfg.steps))?;
    }
    Ok((model, losses))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlowManifest {
    version: u32,
    config: FlowModelConfig,
    latent_shape: Vec<usize>,
    stats: LatentStats,
    time_convention: String,
    params: Vec<String>,
    losses: Vec<f64>,
}

pub const FLOW_CHECKPOINT_VERSION: u32 = 1;

/// A trained generator plus the statistics needed to map its samples back
/// to VAE latents.
#[derive(Debug, Clone)]
pub struct FlowCheckpoint {
    pub config: FlowModelConfig,
    pub stats: LatentStats,
    pub model: MlpVelocity,
    pub losses: Vec<f64>,
}

impl FlowCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join("params");
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let snap = self.model.params().snapshot()?;
        for (name, t) in &snap {
            write_tensor(pdir.join(format!("{name}.pvt")), t)?;
        }
        let m = FlowManifest {
            version: FLOW_CHECKPOINT_VERSION,
            config: self.config.clone(),
            latent_shape: self.model.latent_shape.clone(),
            stats: self.stats.clone(),
            time_convention: TIME_CONVENTION.into(),
            params: snap.keys().cloned().collect(),
            losses: self.losses.clone(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: FlowManifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.version != FLOW_CHECKPOINT_VERSION {
            return Err(Error::format(&path, format!("unknown flow checkpoint version {}", m.version)));
        }
        let model = MlpVelocity::new(&m.latent_shape, &m.config, DType::F32, &Device::Cpu)?;
        let mut stored = std::collections::BTreeMap::new();
        for name in &m.params {
            stored.insert(name.clone(), read_tensor(dir.join("params").join(format!("{name}.pvt")))?);
        }
        model.params().load(&stored)?;
        Ok(Self {
            config: m.config,
            stats: m.stats,
            model,
            losses: m.losses,
        })
    }

    /// `n` latents `(n, L, h, w, c)` in VAE scale.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let mut shape = vec![n];
        shape.extend(&self.model.latent_shape);
        let dev = self.model.params().device().clone();
        let z = euler_sample(&self.model, &shape, self.config.sampler_steps, rng, DType::F32, &dev)?;
        self.stats.denormalize(&z)
    }
}

pub const FRECHET_DIM: usize = 64;
pub const FRECHET_MIN_SAMPLES: usize = FRECHET_DIM + 1;
const POOL: usize = 4;

/// Per-clip statistics: 4x4-pooled frame means and 4x4-pooled absolute
/// temporal differences, per channel.
pub fn clip_statistics(clip: &VideoClip) -> Vec<f64> {
    let (f, h, w) = (clip.frames, clip.height, clip.width);
    let pooled = |frame: &dyn Fn(usize, usize, usize) -> f64| -> Vec<f64> {
        let mut out = vec![0f64; POOL * POOL * 3];
        let mut cnt = vec![0usize; POOL * POOL];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * POOL / h) * POOL + x * POOL / w;
                cnt[cell] += 1;
                for c in 0..3 {
                    out[cell * 3 + c] += frame(y, x, c);
                }
            }
        }
        for (i, v) in out.iter_mut().enumerate() {
            *v /= cnt[i / 3].max(1) as f64;
        }
        out
    };
    let px = |t: usize, y: usize, x: usize, c: usize| clip.data[((t * h + y) * w + x) * 3 + c] as f64;
    let mut feats = Vec::new();
    for t in 0..f {
        feats.extend(pooled(&|y, x, c| px(t, y, x, c)));
    }
    for t in 1..f {
        feats.extend(pooled(&|y, x, c| (px(t, y, x, c) - px(t - 1, y, x, c)).abs()));
    }
    feats
}

/// `D x F` Gaussian projection scaled by `1/sqrt(F)`.
fn projection(seed: u64, out_dim: usize, in_dim: usize) -> DMatrix<f64> {
    let mut rng = seeded(seed);
    let scale = 1.0 / (in_dim as f64).sqrt();
    DMatrix::from_row_slice(
        out_dim,
        in_dim,
        &normal_vec(&mut rng, out_dim * in_dim).into_iter().map(|v| v * scale).collect::<Vec<_>>(),
    )
}

/// Sample mean and (n-1)-normalized covariance of the rows of `x`.
pub fn gaussian_fit(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ah = sym_sqrt(a);
    let inner = &ah * b * &ah;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`, evaluated symmetrically.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let mean_term = (mu1 - mu2).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(s1, s2) + trace_sqrt_product(s2, s1));
    (mean_term + s1.trace() + s2.trace() - 2.0 * cross).max(0.0)
}

/// Frechet distance between Gaussian fits of projected features (rows).
pub fn frechet_from_features(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension("feature dimensions differ".into()));
    }
    let min = a.ncols() + 1;
    if a.nrows() < min || b.nrows() < min {
        return Err(Error::Input(format!(
            "need at least {min} samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let (m1, s1) = gaussian_fit(a);
    let (m2, s2) = gaussian_fit(b);
    Ok(frechet_distance(&m1, &s1, &m2, &s2))
}

/// Desk-scale stand-in for FVD on two clip sets of identical shape.
pub fn frechet_proxy(real: &[VideoClip], generated: &[VideoClip], seed: u64) -> Result<f64> {
    if real.len() < FRECHET_MIN_SAMPLES || generated.len() < FRECHET_MIN_SAMPLES {
        return Err(Error::Input(format!(
            "frechet proxy needs at least {FRECHET_MIN_SAMPLES} clips per set, got {} and {}",
            real.len(),
            generated.len()
        )));
    }
    let shape = real[0].shape();
    if real.iter().chain(generated).any(|c| c.shape() != shape) {
        return Err(Error::Dimension("all clips must share one shape".into()));
    }
    let feats = |set: &[VideoClip]| -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = set.iter().map(clip_statistics).collect();
        let f = rows[0].len();
        DMatrix::from_row_iterator(rows.len(), f, rows.into_iter().flatten())
    };
    let fa = feats(real);
    let fb = feats(generated);
    let p = projection(seed, FRECHET_DIM, fa.ncols());
    let pa = fa * p.transpose();
    let pb = fb * p.transpose();
    frechet_from_features(&pa, &pb)
}
