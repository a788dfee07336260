//! Synthetic video corpus: shapes translating over a static background,
//! with exact per-pixel forward flow.
//!
//! Positions and velocities are integers and shapes wrap toroidally, so
//! frame `i + 1` is frame `i` with every shape shifted by its velocity and
//! the flow labels are exact at shape edges.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VideoClip;
use crate::rng::seeded;
use crate::tensor_io::{read_tensor, write_tensor, StoredTensor, LAYOUT_THWC};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center `(x, y)` in frame 0.
    pub origin: (i64, i64),
    /// `(half_w, half_h)`; circles use the first entry as radius.
    pub half_extent: (i64, i64),
    pub color: [f32; 3],
    /// Pixels per frame, `(vx, vy)`.
    pub velocity: (i64, i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Background {
    Solid { color: [f32; 3] },
    NoiseTexture { base: [f32; 3], amplitude: f32, cell: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub background: Background,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Forward flow `(T, H, W, 2)` in pixels/frame, channel order `(dx, dy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn at(&self, t: usize, y: usize, x: usize) -> [f32; 2] {
        let i = ((t * self.height + y) * self.width + x) * 2;
        [self.data[i], self.data[i + 1]]
    }

    pub fn to_stored(&self) -> Result<StoredTensor> {
        StoredTensor::new(vec![self.steps, self.height, self.width, 2], LAYOUT_THWC, self.data.clone())
    }

    pub fn from_stored(s: &StoredTensor) -> Result<Self> {
        match s.shape.as_slice() {
            &[t, h, w, 2] => Ok(Self {
                steps: t,
                height: h,
                width: w,
                data: s.data.clone(),
            }),
            other => Err(Error::Dimension(format!("flow tensor must be (T,H,W,2), got {other:?}"))),
        }
    }
}

/// Sampling ranges for random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRanges {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_half_extent: i64,
    pub max_half_extent: i64,
    /// Largest absolute velocity component; clamped to `min(H, W) / 4`.
    pub max_speed: i64,
    /// Probability of a noise-texture background instead of a solid one.
    pub texture_prob: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            frames: 17,
            height: 64,
            width: 64,
            min_shapes: 1,
            max_shapes: 3,
            min_half_extent: 4,
            max_half_extent: 12,
            max_speed: 3,
            texture_prob: 0.5,
        }
    }
}

impl SceneRanges {
    /// Default ranges scaled to another resolution and length.
    pub fn for_resolution(frames: usize, res: usize) -> Self {
        let d = Self::default();
        let scale = |v: i64| ((v * res as i64) / 64).max(1);
        Self {
            frames,
            height: res,
            width: res,
            min_half_extent: scale(d.min_half_extent).max(2),
            max_half_extent: scale(d.max_half_extent).max(3),
            max_speed: scale(d.max_speed),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene frames and resolution must be positive".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        if self.min_half_extent < 1 || self.min_half_extent > self.max_half_extent {
            return Err(Error::Config("invalid shape size range".into()));
        }
        if self.max_speed < 0 || !(0.0..=1.0).contains(&self.texture_prob) {
            return Err(Error::Config("invalid speed or texture probability".into()));
        }
        Ok(())
    }

    fn speed_limit(&self) -> i64 {
        self.max_speed.min((self.height.min(self.width) / 4) as i64)
    }
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [0; 3].map(|_: i32| rng.random_range(-0.9f32..0.9))
}

impl SceneSpec {
    /// Random scene drawn from `ranges`, fully determined by `seed`.
    pub fn random(ranges: &SceneRanges, seed: u64) -> Result<Self> {
        ranges.validate()?;
        let mut rng = seeded(seed);
        let n = rng.random_range(ranges.min_shapes..=ranges.max_shapes);
        let vmax = ranges.speed_limit();
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Circle
            } else {
                ShapeKind::Rectangle
            };
            let a = rng.random_range(ranges.min_half_extent..=ranges.max_half_extent);
            let b = match kind {
                ShapeKind::Circle => a,
                ShapeKind::Rectangle => rng.random_range(ranges.min_half_extent..=ranges.max_half_extent),
            };
            // Every shape moves so clips always carry motion.
            let velocity = if vmax == 0 {
                (0, 0)
            } else {
                let sign = if rng.random_bool(0.5) { 1 } else { -1 };
                let vx = sign * rng.random_range(1..=vmax);
                let vy = rng.random_range(-vmax..=vmax);
                if rng.random_bool(0.5) {
                    (vx, vy)
                } else {
                    (vy, vx)
                }
            };
            shapes.push(ShapeSpec {
                kind,
                origin: (
                    rng.random_range(0..ranges.width as i64),
                    rng.random_range(0..ranges.height as i64),
                ),
                half_extent: (a, b),
                color: random_color(&mut rng),
                velocity,
            });
        }
        let background = if rng.random_bool(ranges.texture_prob) {
            Background::NoiseTexture {
                base: random_color(&mut rng),
                amplitude: 0.4,
                cell: (ranges.height.min(ranges.width) / 8).max(2),
                seed: rng.random(),
            }
        } else {
            Background::Solid {
                color: random_color(&mut rng),
            }
        };
        Ok(Self {
            shapes,
            background,
            frames: ranges.frames,
            height: ranges.height,
            width: ranges.width,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene frames and resolution must be positive".into()));
        }
        let limit = (self.height.min(self.width) / 4) as i64;
        for s in &self.shapes {
            if s.velocity.0.abs() > limit || s.velocity.1.abs() > limit {
                return Err(Error::Config(format!(
                    "shape velocity {:?} exceeds the bound of {limit} pixels/frame",
                    s.velocity
                )));
            }
            if s.half_extent.0 < 0 || s.half_extent.1 < 0 {
                return Err(Error::Config("negative shape extent".into()));
            }
        }
        Ok(())
    }

    /// Center of shape `s` at 0-based frame `t`, wrapped into the frame.
    pub fn center(&self, s: usize, t: usize) -> (i64, i64) {
        let sh = &self.shapes[s];
        let t = t as i64;
        (
            (sh.origin.0 + sh.velocity.0 * t).rem_euclid(self.width as i64),
            (sh.origin.1 + sh.velocity.1 * t).rem_euclid(self.height as i64),
        )
    }
}

/// Signed toroidal offset of `p` from `c` on a ring of size `n`, in `(-n/2, n/2]`.
fn ring_offset(p: i64, c: i64, n: i64) -> i64 {
    let d = (p - c).rem_euclid(n);
    if d > n / 2 {
        d - n
    } else {
        d
    }
}

fn covers(shape: &ShapeSpec, dx: i64, dy: i64) -> bool {
    let (a, b) = shape.half_extent;
    match shape.kind {
        ShapeKind::Circle => dx * dx + dy * dy <= a * a,
        ShapeKind::Rectangle => dx.abs() <= a && dy.abs() <= b,
    }
}

/// Smooth periodic noise: a coarse random grid bilinearly upsampled with wrap.
fn texture(h: usize, w: usize, base: [f32; 3], amplitude: f32, cell: usize, seed: u64) -> Vec<f32> {
    let gh = h.div_ceil(cell).max(1);
    let gw = w.div_ceil(cell).max(1);
    let mut rng = seeded(seed);
    let grid: Vec<f32> = (0..gh * gw * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let g = |y: usize, x: usize, c: usize| grid[((y % gh) * gw + (x % gw)) * 3 + c];
    let mut out = vec![0f32; h * w * 3];
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            for c in 0..3 {
                let top = g(y0, x0, c) * (1.0 - tx) + g(y0, x0 + 1, c) * tx;
                let bot = g(y0 + 1, x0, c) * (1.0 - tx) + g(y0 + 1, x0 + 1, c) * tx;
                let n = top * (1.0 - ty) + bot * ty;
                out[(y * w + x) * 3 + c] = (base[c] + amplitude * n).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

/// Renders the clip and its forward flow (later shapes are drawn on top and
/// own the flow at overlaps).
pub fn generate_clip(spec: &SceneSpec) -> Result<(VideoClip, FlowField)> {
    spec.validate()?;
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    let bg = match &spec.background {
        Background::Solid { color } => (0..h * w).flat_map(|_| *color).collect::<Vec<f32>>(),
        Background::NoiseTexture {
            base,
            amplitude,
            cell,
            seed,
        } => texture(h, w, *base, *amplitude, (*cell).max(1), *seed),
    };
    let mut pixels = Vec::with_capacity(f * h * w * 3);
    let steps = f - 1;
    let mut flow = vec![0f32; steps * h * w * 2];
    for t in 0..f {
        let centers: Vec<(i64, i64)> = (0..spec.shapes.len()).map(|s| spec.center(s, t)).collect();
        for y in 0..h {
            for x in 0..w {
                let mut owner = None;
                for (s, shape) in spec.shapes.iter().enumerate().rev() {
                    let (cx, cy) = centers[s];
                    let dx = ring_offset(x as i64, cx, w as i64);
                    let dy = ring_offset(y as i64, cy, h as i64);
                    if covers(shape, dx, dy) {
                        owner = Some(s);
                        break;
                    }
                }
                match owner {
                    Some(s) => {
                        pixels.extend_from_slice(&spec.shapes[s].color);
                        if t < steps {
                            let i = ((t * h + y) * w + x) * 2;
                            flow[i] = spec.shapes[s].velocity.0 as f32;
                            flow[i + 1] = spec.shapes[s].velocity.1 as f32;
                        }
                    }
                    None => pixels.extend_from_slice(&bg[(y * w + x) * 3..(y * w + x) * 3 + 3]),
                }
            }
        }
    }
    let mut clip = VideoClip::new(f, h, w, pixels)?;
    clip.frame_rate = 8.0;
    Ok((
        clip,
        FlowField {
            steps,
            height: h,
            width: w,
            data: flow,
        },
    ))
}

/// `generate_clip(SceneSpec::random(ranges, seed))`.
pub fn generate_random_clip(ranges: &SceneRanges, seed: u64) -> Result<(VideoClip, FlowField)> {
    generate_clip(&SceneSpec::random(ranges, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub clip: String,
    pub flow: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub base_seed: u64,
    pub ranges: SceneRanges,
    pub entries: Vec<ManifestEntry>,
}

/// Number of validation clips for a corpus of `n`: the last tenth by index,
/// at least one whenever `n >= 2`.
pub fn val_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (n / 10).max(1)
    }
}

/// Writes `clip_{i:05}.pvt`, `flow_{i:05}.pvt` and `manifest.json` to `dir`.
pub fn generate_corpus(dir: &Path, n: usize, base_seed: u64, ranges: &SceneRanges) -> Result<CorpusManifest> {
    if n == 0 {
        return Err(Error::Input("corpus size must be at least 1".into()));
    }
    ranges.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first_val = n - val_count(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base_seed.wrapping_add(i as u64);
        let (clip, flow) = generate_random_clip(ranges, seed)?;
        let clip_name = format!("clip_{i:05}.pvt");
        let flow_name = format!("flow_{i:05}.pvt");
        write_tensor(dir.join(&clip_name), &clip_to_stored(&clip)?)?;
        write_tensor(dir.join(&flow_name), &flow.to_stored()?)?;
        entries.push(ManifestEntry {
            index: i,
            seed,
            clip: clip_name,
            flow: flow_name,
            split: if i >= first_val { Split::Val } else { Split::Train },
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        base_seed,
        ranges: ranges.clone(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn clip_to_stored(clip: &VideoClip) -> Result<StoredTensor> {
    StoredTensor::new(clip.shape().to_vec(), LAYOUT_THWC, clip.data.clone())
}

pub fn clip_from_stored(s: &StoredTensor) -> Result<VideoClip> {
    match s.shape.as_slice() {
        &[f, h, w, 3] => VideoClip::new(f, h, w, s.data.clone()),
        other => Err(Error::Dimension(format!("clip tensor must be (T,H,W,3), got {other:?}"))),
    }
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CorpusManifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Clips (and flows) of one split, in index order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub clips: Vec<VideoClip>,
    pub flows: Vec<FlowField>,
}

impl Dataset {
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut clips = Vec::new();
        let mut flows = Vec::new();
        for e in manifest.entries.iter().filter(|e| e.split == split) {
            clips.push(clip_from_stored(&read_tensor(dir.join(&e.clip))?)?);
            flows.push(FlowField::from_stored(&read_tensor(dir.join(&e.flow))?)?);
        }
        Ok(Self {
            root: dir.to_path_buf(),
            clips,
            flows,
        })
    }

    /// In-memory dataset, e.g. for tests.
    pub fn from_clips(clips: Vec<VideoClip>, flows: Vec<FlowField>) -> Self {
        Self {
            root: PathBuf::new(),
            clips,
            flows,
        }
    }

    /// Generates `n` clips with seeds `base_seed + i` without touching disk.
    pub fn synthetic(n: usize, base_seed: u64, ranges: &SceneRanges) -> Result<Self> {
        let mut clips = Vec::with_capacity(n);
        let mut flows = Vec::with_capacity(n);
        for i in 0..n {
            let (c, f) = generate_random_clip(ranges, base_seed.wrapping_add(i as u64))?;
            clips.push(c);
            flows.push(f);
        }
        Ok(Self::from_clips(clips, flows))
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_circle(v: (i64, i64)) -> SceneSpec {
        SceneSpec {
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Circle,
                origin: (10, 20),
                half_extent: (4, 4),
                color: [0.8, -0.2, 0.1],
                velocity: v,
            }],
            background: Background::Solid { color: [-0.5, -0.5, -0.5] },
            frames: 17,
            height: 32,
            width: 48,
            seed: 0,
        }
    }

    fn pixel(clip: &VideoClip, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = ((t * clip.height + y) * clip.width + x) * 3;
        [clip.data[i], clip.data[i + 1], clip.data[i + 2]]
    }

    #[test]
    fn circle_center_follows_velocity() {
        let spec = one_circle((2, 0));
        let (clip, flow) = generate_clip(&spec).unwrap();
        for t in 0..17 {
            let cx = (10 + 2 * t as i64).rem_euclid(48) as usize;
            assert_eq!(spec.center(0, t), (cx as i64, 20));
            assert_eq!(pixel(&clip, t, 20, cx), [0.8, -0.2, 0.1]);
            let xs: Vec<usize> = (0..48).filter(|&x| pixel(&clip, t, 20, x)[0] == 0.8).collect();
            assert_eq!(xs.len(), 9);
            if t < 16 {
                assert_eq!(flow.at(t, 20, cx), [2.0, 0.0]);
            }
        }
    }

    #[test]
    fn empty_scene_is_static() {
        let mut spec = one_circle((0, 0));
        spec.shapes.clear();
        let (clip, flow) = generate_clip(&spec).unwrap();
        for t in 1..clip.frames {
            assert_eq!(clip.frame(t), clip.frame(0));
        }
        assert!(flow.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn brightness_constancy_under_flow() {
        let ranges = SceneRanges::for_resolution(9, 32);
        for seed in 0..6 {
            let mut spec = SceneSpec::random(&ranges, seed).unwrap();
            spec.background = Background::Solid { color: [0.0; 3] };
            spec.shapes.truncate(1);
            let (clip, flow) = generate_clip(&spec).unwrap();
            for t in 0..clip.frames - 1 {
                for y in 0..32 {
                    for x in 0..32 {
                        let [dx, dy] = flow.at(t, y, x);
                        let nx = (x as i64 + dx as i64).rem_euclid(32) as usize;
                        let ny = (y as i64 + dy as i64).rem_euclid(32) as usize;
                        // Background pixels the shape moves onto are occluded.
                        let occluded = (dx, dy) == (0.0, 0.0) && pixel(&clip, t + 1, ny, nx) == spec.shapes[0].color;
                        if !occluded {
                            assert_eq!(pixel(&clip, t + 1, ny, nx), pixel(&clip, t, y, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let ranges = SceneRanges::for_resolution(17, 32);
        let a = generate_random_clip(&ranges, 11).unwrap();
        let b = generate_random_clip(&ranges, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.0.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a.0, generate_random_clip(&ranges, 12).unwrap().0);
    }

    #[test]
    fn velocity_bound_enforced() {
        let spec = one_circle((9, 0));
        assert!(generate_clip(&spec).is_err());
    }

    #[test]
    fn split_sizes() {
        assert_eq!(val_count(100), 10);
        assert_eq!(val_count(1), 0);
        assert_eq!(val_count(5), 1);
    }
}
