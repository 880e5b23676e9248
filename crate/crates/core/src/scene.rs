//! Synthetic backbone features standing in for a CNN trunk.
//!
//! A scene is a `D x H x W` map at the model stride with a handful of boxes
//! drawn into it. Channels, in order:
//!
//! | channels | content |
//! |---|---|
//! | 1 | objectness: fraction of the pixel covered by some object |
//! | 4 | left, right, top and bottom edges, one map pixel wide, anti-aliased |
//! | S | class signature times a positional wave `cos(pi (a u + b v) / 2)`, with `u`, `v` the within-box coordinates in `[-1, 1]` |
//! | C | context ring: one-hot class cue in the band around each object |
//! | C | scene cue: class histogram of the scene, constant over the map |
//!
//! Clutter is added everywhere: gaussian noise box-filtered over
//! `noise_scale x noise_scale` map pixels, so like the response of a real
//! trunk it is correlated over a fixed footprint whatever the object size.
//! Box geometry is rasterized with exact area coverage, so sub-pixel offsets
//! stay visible to a regressor.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::eval::read_records;
use crate::geometry::{CenterBox, DetectionRecord};
use crate::rng::stream;

/// Positional wave frequencies `(a, b)` of the signature channels, cycled.
const WAVES: [(f64, f64); 6] = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (2.0, 0.0), (0.0, 2.0)];
const PLACEMENT_TRIES: usize = 50;
/// Objectness and the four edges come before the signature channels.
const SIG_BASE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Pixels per feature-map cell.
    pub stride: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Width over height of each aspect mode; a mode is drawn uniformly per object.
    pub aspect_modes: Vec<f64>,
    /// Standard deviation of the log aspect ratio around its mode.
    pub aspect_jitter: f64,
    /// Range of `sqrt(area)` in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Objects overlapping an earlier one by more than this IoU are redrawn.
    pub max_overlap: f64,
    pub signature_dims: usize,
    /// Length of the class-specific part of each signature; the shared part has length 1.
    pub signature_separation: f64,
    pub signature_seed: u64,
    /// Standard deviation of the clutter at every map pixel.
    pub noise: f64,
    /// Side in map pixels of the square footprint the clutter is correlated over.
    pub noise_scale: usize,
    /// Append two channels holding the within-box coordinates `u`, `v`.
    pub coordinates: bool,
    pub context_strength: f64,
    /// Width of the context band relative to the object size.
    pub context_ring: f64,
    pub global_strength: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 3,
            image_width: 192,
            image_height: 192,
            stride: 4,
            train_scenes: 2000,
            test_scenes: 500,
            min_objects: 1,
            max_objects: 3,
            aspect_modes: vec![1.0, 0.4, 2.5],
            aspect_jitter: 0.1,
            min_size: 40.0,
            max_size: 80.0,
            max_overlap: 0.3,
            signature_dims: 6,
            signature_separation: 0.5,
            signature_seed: 0,
            noise: 0.5,
            noise_scale: 3,
            coordinates: false,
            context_strength: 1.0,
            context_ring: 1.5,
            global_strength: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.stride == 0 || self.image_width < self.stride || self.image_height < self.stride {
            return bad(format!(
                "image {}x{} too small for stride {}",
                self.image_width, self.image_height, self.stride
            ));
        }
        if self.min_objects > self.max_objects {
            return bad(format!(
                "object range {}..={} is empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.aspect_modes.is_empty() || self.aspect_modes.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return bad(format!("aspect modes {:?} must be positive", self.aspect_modes));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad(format!("size range {}..{} is invalid", self.min_size, self.max_size));
        }
        let largest = self.aspect_modes.iter().map(|a| {
            let r = a * (3.0 * self.aspect_jitter).exp();
            let r_lo = a * (-3.0 * self.aspect_jitter).exp();
            (self.max_size * r.sqrt()).max(self.max_size / r_lo.sqrt())
        });
        let limit = self.image_width.min(self.image_height) as f64;
        if let Some(too_big) = largest.into_iter().find(|&s| s > limit) {
            return bad(format!("objects up to {too_big:.1} px do not fit a {limit} px image"));
        }
        for (name, v) in [
            ("aspect_jitter", self.aspect_jitter),
            ("noise", self.noise),
            ("context_strength", self.context_strength),
            ("global_strength", self.global_strength),
            ("signature_separation", self.signature_separation),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.noise_scale == 0 {
            return bad("noise_scale must be >= 1".into());
        }
        if !(self.context_ring >= 1.0) {
            return bad(format!("context_ring {} must be >= 1", self.context_ring));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad(format!("max_overlap {} must lie in [0, 1]", self.max_overlap));
        }
        Ok(())
    }

    pub fn map_width(&self) -> usize {
        self.image_width / self.stride
    }

    pub fn map_height(&self) -> usize {
        self.image_height / self.stride
    }

    pub fn channels(&self) -> usize {
        SIG_BASE + self.signature_dims + 2 * self.num_classes + 2 * usize::from(self.coordinates)
    }

    /// `signatures()[c - 1]` is the signature of class `c`: a shared unit
    /// direction plus a class-specific offset of length `signature_separation`.
    pub fn signatures(&self) -> Vec<Vec<f64>> {
        let s = self.signature_dims;
        let mut rng = stream(self.signature_seed, "signatures", 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let unit = |rng: &mut crate::rng::StreamRng| {
            let v: Vec<f64> = (0..s).map(|_| normal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let shared = unit(&mut rng);
        (0..self.num_classes)
            .map(|_| {
                let own = unit(&mut rng);
                shared
                    .iter()
                    .zip(&own)
                    .map(|(a, b)| a + self.signature_separation * b)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub features: Array3<f32>,
    /// Boxes in pixels with classes in `[1, C]`.
    pub gts: Vec<(CenterBox, usize)>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn gt_records(&self, image_id: usize) -> Vec<DetectionRecord> {
        self.gts
            .iter()
            .map(|&(bbox, class_id)| DetectionRecord {
                image_id,
                class_id,
                score: 1.0,
                bbox,
            })
            .collect()
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn draw_object<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> (CenterBox, usize) {
    let class = rng.gen_range(1..=spec.num_classes);
    let mode = spec.aspect_modes[rng.gen_range(0..spec.aspect_modes.len())];
    let ratio = if spec.aspect_jitter > 0.0 {
        let log_jitter: f64 = Normal::new(0.0, spec.aspect_jitter)
            .expect("validated jitter")
            .sample(rng);
        mode * log_jitter.exp()
    } else {
        mode
    };
    let size = rng.gen_range(spec.min_size..=spec.max_size);
    let wd = size * ratio.sqrt();
    let ht = size / ratio.sqrt();
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    let wd = wd.min(w);
    let ht = ht.min(h);
    let x = rng.gen_range(wd / 2.0..=w - wd / 2.0);
    let y = rng.gen_range(ht / 2.0..=h - ht / 2.0);
    (CenterBox { x, y, wd, ht }, class)
}

/// Draws one scene; identical `(spec, seed)` give identical scenes.
pub fn generate_scene(spec: &DatasetSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = stream(seed, "scene", 0);
    let n_obj = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut gts: Vec<(CenterBox, usize)> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        for _ in 0..PLACEMENT_TRIES {
            let cand = draw_object(spec, &mut rng);
            if gts.iter().all(|(g, _)| g.iou(&cand.0) <= spec.max_overlap) {
                gts.push(cand);
                break;
            }
        }
    }
    let (mh, mw) = (spec.map_height(), spec.map_width());
    let c = spec.num_classes;
    let sdim = spec.signature_dims;
    let mut f = Array3::<f32>::zeros((spec.channels(), mh, mw));
    let sigs = spec.signatures();
    let st = spec.stride as f64;
    let sig_base = SIG_BASE;
    let ring_base = sig_base + sdim;
    let scene_base = ring_base + c;

    for &(g, class) in &gts {
        let (x0, x1) = ((g.x - g.wd / 2.0) / st, (g.x + g.wd / 2.0) / st);
        let (y0, y1) = ((g.y - g.ht / 2.0) / st, (g.y + g.ht / 2.0) / st);
        let (cx, cy) = (g.x / st, g.y / st);
        let (hw, hh) = (g.wd / st / 2.0, g.ht / st / 2.0);
        let (rw, rh) = (hw * spec.context_ring, hh * spec.context_ring);
        let sig = &sigs[class - 1];
        for py in 0..mh {
            let (p0, p1) = (py as f64, py as f64 + 1.0);
            let cov_y = overlap(p0, p1, y0, y1);
            let ring_y = overlap(p0, p1, cy - rh, cy + rh);
            let v = ((py as f64 + 0.5 - cy) / hh).clamp(-1.0, 1.0);
            for px in 0..mw {
                let (q0, q1) = (px as f64, px as f64 + 1.0);
                let cov_x = overlap(q0, q1, x0, x1);
                let cover = cov_x * cov_y;
                let ring = overlap(q0, q1, cx - rw, cx + rw) * ring_y - cover;
                if ring > 0.0 {
                    f[[ring_base + class - 1, py, px]] += (spec.context_strength * ring) as f32;
                }
                if cover <= 0.0 && cov_x <= 0.0 && cov_y <= 0.0 {
                    continue;
                }
                // edges: one-pixel bands centered on each side, limited to the box extent
                let edge_x = |e: f64| overlap(q0, q1, e - 0.5, e + 0.5) * cov_y;
                let edge_y = |e: f64| overlap(p0, p1, e - 0.5, e + 0.5) * cov_x;
                f[[1, py, px]] += edge_x(x0) as f32;
                f[[2, py, px]] += edge_x(x1) as f32;
                f[[3, py, px]] += edge_y(y0) as f32;
                f[[4, py, px]] += edge_y(y1) as f32;
                if cover <= 0.0 {
                    continue;
                }
                let u = ((px as f64 + 0.5 - cx) / hw).clamp(-1.0, 1.0);
                f[[0, py, px]] += cover as f32;
                if spec.coordinates {
                    f[[scene_base + c, py, px]] += (cover * u) as f32;
                    f[[scene_base + c + 1, py, px]] += (cover * v) as f32;
                }
                for (s, &sv) in sig.iter().enumerate() {
                    let (a, b) = WAVES[s % WAVES.len()];
                    let wave = (std::f64::consts::PI * (a * u + b * v) / 2.0).cos();
                    f[[sig_base + s, py, px]] += (cover * sv * wave) as f32;
                }
            }
        }
    }
    if !gts.is_empty() {
        let n = gts.len() as f64;
        for cls in 1..=c {
            let share = gts.iter().filter(|(_, k)| *k == cls).count() as f64 / n;
            f.index_axis_mut(ndarray::Axis(0), scene_base + cls - 1)
                .fill((spec.global_strength * share) as f32);
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let k = spec.noise_scale;
        let mut nrng = stream(seed, "noise", 0);
        let (d, h, w) = f.dim();
        let raw = Array3::from_shape_simple_fn((d, h + k - 1, w + k - 1), || normal.sample(&mut nrng));
        // k x k window sums, scaled back to unit variance per pixel
        let norm = 1.0 / k as f64;
        for c in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += raw[[c, y + dy, x + dx]];
                        }
                    }
                    f[[c, y, x]] += (acc * norm) as f32;
                }
            }
        }
    }
    Ok(SyntheticScene { features: f, gts, seed })
}

/// Train or test portion of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Indexed access to scenes, shared by training and detection.
pub trait SceneSource: Sync {
    fn len(&self) -> usize;
    fn scene(&self, index: usize) -> Result<SyntheticScene>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-scene seed of scene `index` in `split`.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut r = stream(seed, split.name(), index as u64);
    r.gen()
}

/// Scenes generated on demand; nothing is held in memory.
#[derive(Debug, Clone)]
pub struct GeneratedScenes {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub split: Split,
}

impl GeneratedScenes {
    pub fn new(spec: &DatasetSpec, seed: u64, split: Split) -> Result<Self> {
        spec.validate()?;
        Ok(GeneratedScenes {
            spec: spec.clone(),
            seed,
            split,
        })
    }
}

impl SceneSource for GeneratedScenes {
    fn len(&self) -> usize {
        match self.split {
            Split::Train => self.spec.train_scenes,
            Split::Test => self.spec.test_scenes,
        }
    }

    fn scene(&self, index: usize) -> Result<SyntheticScene> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange(format!("scene {index} of {}", self.len())));
        }
        generate_scene(&self.spec, scene_seed(self.seed, self.split, index))
    }
}

pub const GT_FILE: &str = "gts.txt";

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.ckpt")
}

/// Writes a scene as a one-tensor checkpoint.
pub fn save_scene(path: &Path, scene: &SyntheticScene) -> Result<()> {
    let mut ck = Checkpoint::default();
    let shape = scene.features.shape().to_vec();
    let data = scene.features.iter().copied().collect();
    ck.push(Tensor::new("features", shape, data)?)?;
    ck.save(path)
}

/// Scenes persisted by [`save_scene`] plus a split-wide ground truth file.
#[derive(Debug, Clone)]
pub struct SceneDir {
    pub dir: PathBuf,
    count: usize,
    gts: Vec<Vec<(CenterBox, usize)>>,
}

impl SceneDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let gt_path = dir.join(GT_FILE);
        let records = read_records(&gt_path)?;
        let mut count = 0;
        while dir.join(scene_file_name(count)).exists() {
            count += 1;
        }
        let mut gts = vec![Vec::new(); count];
        for r in records {
            let slot = gts.get_mut(r.image_id).ok_or_else(|| {
                Error::InvalidSpec(format!(
                    "{} refers to scene {} but only {count} scenes exist",
                    gt_path.display(),
                    r.image_id
                ))
            })?;
            slot.push((r.bbox, r.class_id));
        }
        Ok(SceneDir {
            dir: dir.to_path_buf(),
            count,
            gts,
        })
    }
}

impl SceneSource for SceneDir {
    fn len(&self) -> usize {
        self.count
    }

    fn scene(&self, index: usize) -> Result<SyntheticScene> {
        let path = self.dir.join(scene_file_name(index));
        let ck = Checkpoint::load(&path)?;
        let t = ck.require("features")?;
        let [d, h, w] = t.shape[..] else {
            return Err(Error::shape("3-d features", format!("{:?}", t.shape)));
        };
        let features =
            Array3::from_shape_vec((d, h, w), t.data.clone()).map_err(|e| Error::shape(format!("{d}x{h}x{w}"), e))?;
        Ok(SyntheticScene {
            features,
            gts: self.gts[index].clone(),
            seed: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CornerBox;

    fn quiet() -> DatasetSpec {
        DatasetSpec {
            noise: 0.0,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = DatasetSpec::default();
        assert_eq!(generate_scene(&spec, 9).unwrap(), generate_scene(&spec, 9).unwrap());
        assert_ne!(generate_scene(&spec, 9).unwrap(), generate_scene(&spec, 10).unwrap());
    }

    #[test]
    fn zero_objects_is_pure_noise() {
        let spec = DatasetSpec {
            min_objects: 0,
            max_objects: 0,
            ..DatasetSpec::default()
        };
        let s = generate_scene(&spec, 1).unwrap();
        assert!(s.gts.is_empty());
        let n = s.features.len() as f64;
        let mean = s.features.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.features.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(
            mean.abs() < 0.01 && (var.sqrt() - spec.noise).abs() < 0.01,
            "{mean} {var}"
        );
    }

    #[test]
    fn clutter_is_correlated_over_its_footprint() {
        let spec = DatasetSpec {
            min_objects: 0,
            max_objects: 0,
            noise_scale: 3,
            ..DatasetSpec::default()
        };
        let s = generate_scene(&spec, 2).unwrap();
        let (d, h, w) = s.features.dim();
        let corr = |dx: usize| {
            let (mut xy, mut xx) = (0.0, 0.0);
            for c in 0..d {
                for y in 0..h {
                    for x in 0..w - dx {
                        let a = s.features[[c, y, x]] as f64;
                        xy += a * s.features[[c, y, x + dx]] as f64;
                        xx += a * a;
                    }
                }
            }
            xy / xx
        };
        // overlap of two 3-wide windows shifted by dx is (3 - dx) / 3
        assert!((corr(1) - 2.0 / 3.0).abs() < 0.03, "{}", corr(1));
        assert!((corr(2) - 1.0 / 3.0).abs() < 0.03, "{}", corr(2));
        assert!(corr(3).abs() < 0.03, "{}", corr(3));
    }

    #[test]
    fn gts_inside_image_with_valid_classes() {
        let spec = DatasetSpec::default();
        let img = CornerBox::new(0.0, 0.0, spec.image_width as f64, spec.image_height as f64).unwrap();
        for seed in 0..200 {
            let s = generate_scene(&spec, seed).unwrap();
            assert!(s.gts.len() <= spec.max_objects);
            for (g, c) in &s.gts {
                assert!((1..=spec.num_classes).contains(c));
                let gc = g.to_corner();
                assert!(gc.x >= -1e-9 && gc.y >= -1e-9);
                assert!(gc.right() <= img.right() + 1e-9 && gc.bottom() <= img.bottom() + 1e-9);
            }
        }
    }

    #[test]
    fn objectness_integrates_to_box_area() {
        let spec = DatasetSpec {
            min_objects: 1,
            max_objects: 1,
            ..quiet()
        };
        let s = generate_scene(&spec, 4).unwrap();
        let (g, _) = s.gts[0];
        let st = spec.stride as f64;
        let total: f64 = s
            .features
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .map(|&v| v as f64)
            .sum();
        assert!((total - g.area() / (st * st)).abs() < 1e-3, "{total}");
        // the left edge band integrates to the side length, less any part cut by the map border
        let x0 = (g.x - g.wd / 2.0) / st;
        let band = (x0 + 0.5).min(spec.map_width() as f64) - (x0 - 0.5).max(0.0);
        let left: f64 = s
            .features
            .index_axis(ndarray::Axis(0), 1)
            .iter()
            .map(|&v| v as f64)
            .sum();
        assert!((left - band * g.ht / st).abs() < 1e-3);
    }

    #[test]
    fn signature_block_identifies_class_without_noise() {
        // hand-set template: the box indicator on the wave-free signature channel
        // reads back sig[0] of the drawn class exactly
        let spec = DatasetSpec {
            min_objects: 1,
            max_objects: 1,
            ..quiet()
        };
        let sigs = spec.signatures();
        let st = spec.stride as f64;
        for seed in 0..30 {
            let s = generate_scene(&spec, seed).unwrap();
            let (g, class) = s.gts[0];
            let total: f64 = s
                .features
                .index_axis(ndarray::Axis(0), SIG_BASE)
                .iter()
                .map(|&v| v as f64)
                .sum();
            let read = total / (g.area() / (st * st));
            let best = (0..spec.num_classes)
                .min_by(|&a, &b| (sigs[a][0] - read).abs().total_cmp(&(sigs[b][0] - read).abs()))
                .unwrap();
            assert_eq!(best + 1, class);
            assert!((read - sigs[class - 1][0]).abs() < 1e-4);
        }
    }

    #[test]
    fn ring_and_scene_cues_match_classes() {
        let spec = quiet();
        let c = spec.num_classes;
        for seed in 0..20 {
            let s = generate_scene(&spec, seed).unwrap();
            let ring_base = SIG_BASE + spec.signature_dims;
            for cls in 1..=c {
                let ring: f64 = s
                    .features
                    .index_axis(ndarray::Axis(0), ring_base + cls - 1)
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                let present = s.gts.iter().any(|(_, k)| *k == cls);
                assert_eq!(ring > 0.0, present);
                let cue = s.features[[ring_base + c + cls - 1, 0, 0]] as f64;
                let share = s.gts.iter().filter(|(_, k)| *k == cls).count() as f64 / s.gts.len() as f64;
                assert!((cue - spec.global_strength * share).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn generated_source_is_indexable() {
        let spec = DatasetSpec {
            train_scenes: 3,
            ..DatasetSpec::default()
        };
        let src = GeneratedScenes::new(&spec, 5, Split::Train).unwrap();
        assert_eq!(src.len(), 3);
        assert!(src.scene(3).is_err());
        let test = GeneratedScenes::new(&spec, 5, Split::Test).unwrap();
        assert_ne!(src.scene(0).unwrap(), test.scene(0).unwrap());
    }

    #[test]
    fn scene_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::default();
        let mut gts = String::new();
        let scenes: Vec<_> = (0..3).map(|i| generate_scene(&spec, i).unwrap()).collect();
        for (i, s) in scenes.iter().enumerate() {
            save_scene(&dir.path().join(scene_file_name(i)), s).unwrap();
            for r in s.gt_records(i) {
                gts.push_str(&format!("{r}\n"));
            }
        }
        std::fs::write(dir.path().join(GT_FILE), gts).unwrap();
        let src = SceneDir::open(dir.path()).unwrap();
        assert_eq!(src.len(), 3);
        let back = src.scene(1).unwrap();
        assert_eq!(back.features, scenes[1].features);
        for ((a, ca), (b, cb)) in back.gts.iter().zip(&scenes[1].gts) {
            assert_eq!(ca, cb);
            assert!((a.x - b.x).abs() < 1e-3 * b.x.abs().max(1.0));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            DatasetSpec {
                num_classes: 0,
                ..DatasetSpec::default()
            },
            DatasetSpec {
                min_objects: 4,
                ..DatasetSpec::default()
            },
            DatasetSpec {
                aspect_modes: vec![],
                ..DatasetSpec::default()
            },
            DatasetSpec {
                max_size: 400.0,
                ..DatasetSpec::default()
            },
            DatasetSpec {
                noise: -1.0,
                ..DatasetSpec::default()
            },
        ] {
            assert!(matches!(generate_scene(&bad, 0), Err(Error::InvalidSpec(_))));
        }
    }
}
