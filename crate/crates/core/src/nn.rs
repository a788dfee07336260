//! Building blocks for the video autoencoder and the auxiliary networks.
//! All video tensors are channels-last `(B, T, H, W, C)`.

use candle_core::{Tensor, Var};

use crate::conv::{causal_conv3d_bias, ConvGeometry};
use crate::error::Result;
use crate::norm::frame_group_norm;
use crate::params::ParamStore;
use crate::rng::SeededRng;

#[derive(Debug, Clone)]
pub struct CausalConv3d {
    weight: Var,
    bias: Var,
    geom: ConvGeometry,
}

impl CausalConv3d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeometry,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let fan_in = geom.kernel.iter().product::<usize>() * cin;
        let weight = store.normal(
            &format!("{name}.weight"),
            &[fan_in, cout],
            (1.0 / fan_in as f64).sqrt(),
            rng,
        )?;
        let bias = store.zeros(&format!("{name}.bias"), &[cout])?;
        Ok(Self { weight, bias, geom })
    }

    /// Zero weights and bias: the layer starts as the constant 0.
    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, geom: ConvGeometry) -> Result<Self> {
        let fan_in = geom.kernel.iter().product::<usize>() * cin;
        let weight = store.zeros(&format!("{name}.weight"), &[fan_in, cout])?;
        let bias = store.zeros(&format!("{name}.bias"), &[cout])?;
        Ok(Self { weight, bias, geom })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        causal_conv3d_bias(x, &self.weight, &self.bias, self.geom)
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }
}

/// Group count with at least two channels per group where possible.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8)
        .rev()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

/// Group normalization applied independently to every frame, so it never
/// mixes information across time.
#[derive(Debug, Clone)]
pub struct FrameGroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
    eps: f64,
}

impl FrameGroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(&format!("{name}.gamma"), &[channels])?,
            beta: store.zeros(&format!("{name}.beta"), &[channels])?,
            groups: norm_groups(channels),
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        frame_group_norm(x, &self.gamma, &self.beta, self.groups, self.eps, false)
    }

    /// `silu(norm(x))` in one pass.
    pub fn forward_silu(&self, x: &Tensor) -> Result<Tensor> {
        frame_group_norm(x, &self.gamma, &self.beta, self.groups, self.eps, true)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: FrameGroupNorm,
    conv1: CausalConv3d,
    norm2: FrameGroupNorm,
    conv2: CausalConv3d,
    shortcut: Option<CausalConv3d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut SeededRng) -> Result<Self> {
        let k3 = ConvGeometry::new([3, 3, 3], [1, 1, 1]);
        let shortcut = if cin != cout {
            Some(CausalConv3d::new(store, &format!("{name}.shortcut"), cin, cout, ConvGeometry::pointwise(), rng)?)
        } else {
            None
        };
        Ok(Self {
            norm1: FrameGroupNorm::new(store, &format!("{name}.norm1"), cin)?,
            conv1: CausalConv3d::new(store, &format!("{name}.conv1"), cin, cout, k3, rng)?,
            norm2: FrameGroupNorm::new(store, &format!("{name}.norm2"), cout)?,
            conv2: CausalConv3d::new(store, &format!("{name}.conv2"), cout, cout, k3, rng)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward_silu(x)?)?;
        let h = self.conv2.forward(&self.norm2.forward_silu(&h)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample_spatial(x: &Tensor) -> Result<Tensor> {
    let (b, t, h, w, c) = x.dims5()?;
    let y = x
        .reshape((b * t, h, 1, w, 1, c))?
        .broadcast_as((b * t, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, t, 2 * h, 2 * w, c))?;
    Ok(y)
}

/// 2x temporal upsampling that keeps the leading frame single:
/// `1 + n` frames become `1 + 2n`.
pub fn upsample_temporal(x: &Tensor) -> Result<Tensor> {
    let (b, t, h, w, c) = x.dims5()?;
    if t == 1 {
        return Ok(x.clone());
    }
    let first = x.narrow(1, 0, 1)?;
    let rest = x
        .narrow(1, 1, t - 1)?
        .reshape((b, t - 1, 1, h * w * c))?
        .broadcast_as((b, t - 1, 2, h * w * c))?
        .contiguous()?
        .reshape((b, 2 * (t - 1), h, w, c))?;
    Ok(Tensor::cat(&[&first, &rest], 1)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            weight: store.normal(&format!("{name}.weight"), &[din, dout], (1.0 / din as f64).sqrt(), rng)?,
            bias: store.zeros(&format!("{name}.bias"), &[dout])?,
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: store.zeros(&format!("{name}.weight"), &[din, dout])?,
            bias: store.zeros(&format!("{name}.bias"), &[dout])?,
        })
    }

    /// `x: (N, din) -> (N, dout)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}
