//! AdamW with decoupled weight decay, global-norm gradient clipping and
//! the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{from_stored, to_stored};
use crate::tensor_io::StoredTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `lr_base * (s + 1) / warmup` for `s < warmup`, then cosine from
/// `lr_base` down to `lr_base / 10` at `s = total`.
pub fn learning_rate(base: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - warmup) as f64 / span as f64).min(1.0)
    };
    let floor = base / 10.0;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[(String, Var)], max_norm: f64) -> Result<f64> {
    let mut sq = 0f64;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, v) in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// AdamW over a fixed, named set of variables.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    vars: Vec<(String, Var)>,
    moments: Vec<Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let moments = vars
            .iter()
            .map(|(_, v)| -> Result<Moments> {
                Ok(Moments {
                    m: v.as_tensor().zeros_like()?,
                    v: v.as_tensor().zeros_like()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            vars,
            moments,
            step: 0,
        })
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Variables without a gradient are
    /// left untouched (their moments do not advance either).
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((_, var), mom) in self.vars.iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Variable gradients can still reference the forward graph; a
            // moment built from them would keep every past step alive.
            let g = g.detach().to_dtype(var.dtype())?;
            let m = ((&mom.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&mom.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * c.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            mom.m = m;
            mom.v = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>`.
    pub fn state(&self) -> Result<(u64, BTreeMap<String, StoredTensor>)> {
        let mut out = BTreeMap::new();
        for ((name, _), mom) in self.vars.iter().zip(&self.moments) {
            out.insert(format!("m.{name}"), to_stored(&mom.m)?);
            out.insert(format!("v.{name}"), to_stored(&mom.v)?);
        }
        Ok((self.step, out))
    }

    pub fn load_state(&mut self, step: u64, state: &BTreeMap<String, StoredTensor>) -> Result<()> {
        for ((name, var), mom) in self.vars.iter().zip(self.moments.iter_mut()) {
            let get = |key: String| -> Result<Tensor> {
                let s = state
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("optimizer state lacks `{key}`")))?;
                let t = from_stored(s, var.dtype(), var.device())?;
                if t.dims() != var.dims() {
                    return Err(Error::ParamShape {
                        name: key,
                        expected: var.dims().to_vec(),
                        found: t.dims().to_vec(),
                    });
                }
                Ok(t)
            };
            mom.m = get(format!("m.{name}"))?;
            mom.v = get(format!("v.{name}"))?;
        }
        self.step = step;
        Ok(())
    }
}
