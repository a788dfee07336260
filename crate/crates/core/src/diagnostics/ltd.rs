//! Latent temporal distance: mean dimension-normalized L2 distance between
//! latent frames `z_i` and `z_{i+d}` for a set of intervals `d`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{VaeModel, VideoClip};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let hi = values.iter().cloned().fold(0.0f64, f64::max);
        let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 / bins as f64 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtdProfile {
    pub intervals: Vec<usize>,
    pub mean_distance: Vec<f64>,
    /// `mean_distance / mean_distance[interval 1]`; all ones when the
    /// interval-1 distance is zero.
    pub normalized: Vec<f64>,
    pub histogram: Histogram,
}

impl LtdProfile {
    pub fn normalized_at(&self, interval: usize) -> Option<f64> {
        self.intervals.iter().position(|&d| d == interval).map(|i| self.normalized[i])
    }

    /// Whether the normalized profile increases strictly along its intervals.
    pub fn strictly_increasing(&self) -> bool {
        self.normalized.windows(2).all(|w| w[1] > w[0])
    }
}

fn frames_of(z: &Tensor) -> Result<Vec<Vec<f64>>> {
    let z = match z.rank() {
        5 if z.dim(0)? == 1 => z.squeeze(0)?,
        4 => z.clone(),
        _ => {
            return Err(Error::Dimension(format!(
                "expected latents (L, h, w, c), got {:?}",
                z.dims()
            )))
        }
    };
    let l = z.dim(0)?;
    let flat = z.to_dtype(DType::F64)?.reshape((l, ()))?;
    Ok(flat.to_vec2()?)
}

/// Profile over precomputed latents, each `(L, h, w, c)` or `(1, L, h, w, c)`.
/// Interval 1 is always included.
pub fn ltd_from_latents(latents: &[Tensor], intervals: &[usize]) -> Result<LtdProfile> {
    let mut iv: Vec<usize> = intervals.to_vec();
    iv.push(1);
    iv.sort_unstable();
    iv.dedup();
    if iv[0] == 0 {
        return Err(Error::Input("LTD intervals must be positive".into()));
    }
    if latents.is_empty() {
        return Err(Error::Input("LTD needs at least one latent sequence".into()));
    }
    let mut sums = vec![0f64; iv.len()];
    let mut counts = vec![0usize; iv.len()];
    let mut adjacent = Vec::new();
    for z in latents {
        let frames = frames_of(z)?;
        let l = frames.len();
        let max = *iv.last().expect("non-empty");
        if max >= l {
            return Err(Error::Input(format!(
                "interval {max} exceeds latent length {l}"
            )));
        }
        let scale = (frames[0].len() as f64).sqrt();
        for (j, &d) in iv.iter().enumerate() {
            for i in 0..l - d {
                let dist = frames[i]
                    .iter()
                    .zip(&frames[i + d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    / scale;
                sums[j] += dist;
                counts[j] += 1;
                if d == 1 {
                    adjacent.push(dist);
                }
            }
        }
    }
    let mean_distance: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let base = mean_distance[0];
    let normalized = if base > 0.0 {
        mean_distance.iter().map(|m| m / base).collect()
    } else {
        vec![1.0; iv.len()]
    };
    Ok(LtdProfile {
        intervals: iv,
        mean_distance,
        normalized,
        histogram: Histogram::new(&adjacent, HISTOGRAM_BINS),
    })
}

/// Profile of the encoder posterior means over `clips`.
pub fn ltd_profile(model: &VaeModel, clips: &[VideoClip], intervals: &[usize]) -> Result<LtdProfile> {
    let latents = clips
        .iter()
        .map(|c| Ok(model.encode_clip(c)?.mean))
        .collect::<Result<Vec<_>>>()?;
    ltd_from_latents(&latents, intervals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn seq(values: &[f64]) -> Tensor {
        // One scalar channel per frame, replicated over a 2x2 grid.
        let data: Vec<f64> = values.iter().flat_map(|&v| [v; 4]).collect();
        Tensor::from_vec(data, (values.len(), 2, 2, 1), &Device::Cpu).unwrap()
    }

    #[test]
    fn linear_trajectory() {
        let p = ltd_from_latents(&[seq(&[0.0, 1.0, 2.0, 3.0, 4.0])], &[2, 3, 4]).unwrap();
        assert_eq!(p.intervals, vec![1, 2, 3, 4]);
        assert_eq!(p.mean_distance, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.normalized, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(p.strictly_increasing());
        assert_eq!(p.histogram.counts.iter().sum::<usize>(), 4);
    }

    #[test]
    fn constant_and_errors() {
        let p = ltd_from_latents(&[seq(&[0.5; 5])], &[1, 2]).unwrap();
        assert_eq!(p.mean_distance, vec![0.0, 0.0]);
        assert_eq!(p.normalized, vec![1.0, 1.0]);
        assert!(ltd_from_latents(&[seq(&[0.0; 3])], &[3]).is_err());
        assert!(ltd_from_latents(&[seq(&[0.0; 3])], &[0]).is_err());
    }
}
