//! Procedural calibrated scenes: primitives on a ground plane, surface point
//! samples, a ring of cameras, rendered label/feature images and corrupted
//! pseudo-label images.

mod noise;
mod render;
mod serial;

pub use noise::{corrupt_labels, dilate, CorruptionReport, NoiseModel};
pub use render::{render_label_image, render_view, Primitive, RenderedView, SceneObject, NO_INSTANCE};
pub use serial::{load_scene, save_scene, scene_from_json, scene_to_json};

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{ClassId, ClassVocabulary, FeatureImage};
use crate::error::{Error, Result};
use crate::geometry::{Calibration, LabelGrid, PointCloud};

/// Channels of the rendered feature images: intensity, depth/10, height, hit.
pub const IMAGE_CHANNELS: usize = 4;
/// Per-point network inputs: x/extent, y/extent, z, intensity.
pub const POINT_FEATURES: usize = 4;

const PLACEMENT_TRIES: usize = 1000;
const OBJECT_GAP: f64 = 0.3;

/// Geometry template for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Ground,
    Box {
        half: [f64; 2],
        height: [f64; 2],
    },
    Cylinder {
        radius: [f64; 2],
        height: [f64; 2],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    pub class: String,
    pub shape: Shape,
    /// Mean synthetic return intensity of the class.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Half-width of the square workspace (meters).
    pub extent: f64,
    pub object_count: [usize; 2],
    pub palette: Vec<Archetype>,
    pub ground_points: usize,
    pub points_per_object: [usize; 2],
    pub cameras: usize,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub focal: f64,
    pub image_size: usize,
    pub intensity_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let arch = |class: &str, shape, intensity| Archetype {
            class: class.to_string(),
            shape,
            intensity,
        };
        Self {
            extent: 5.0,
            object_count: [4, 8],
            palette: vec![
                arch("ground", Shape::Ground, 0.1),
                arch(
                    "box-a",
                    Shape::Box {
                        half: [0.3, 0.5],
                        height: [1.2, 1.8],
                    },
                    0.3,
                ),
                arch(
                    "cylinder-a",
                    Shape::Cylinder {
                        radius: [0.2, 0.35],
                        height: [1.5, 2.2],
                    },
                    0.5,
                ),
                arch(
                    "box-b",
                    Shape::Box {
                        half: [0.6, 0.9],
                        height: [0.4, 0.7],
                    },
                    0.7,
                ),
                arch(
                    "cylinder-b",
                    Shape::Cylinder {
                        radius: [0.6, 0.9],
                        height: [0.5, 0.9],
                    },
                    0.9,
                ),
            ],
            ground_points: 4000,
            points_per_object: [400, 800],
            cameras: 4,
            ring_radius: 9.0,
            ring_height: 3.0,
            focal: 80.0,
            image_size: 128,
            intensity_noise: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<()> {
        if self.cameras == 0 {
            return Err(Error::config("scene.cameras must be at least 1"));
        }
        if self.image_size == 0 || self.focal <= 0.0 {
            return Err(Error::config("scene.image_size and scene.focal must be positive"));
        }
        if self.object_count[0] > self.object_count[1] || self.points_per_object[0] > self.points_per_object[1] {
            return Err(Error::config("scene ranges must be [min, max] with min <= max"));
        }
        if self.ring_radius <= self.extent * std::f64::consts::SQRT_2 {
            return Err(Error::config("scene.ring_radius must place cameras outside the workspace"));
        }
        let mut grounds = 0;
        for a in &self.palette {
            if vocab.id_of(&a.class).is_none() {
                return Err(Error::config(format!("palette class '{}' is not in the vocabulary", a.class)));
            }
            let ranges: &[[f64; 2]] = match &a.shape {
                Shape::Ground => {
                    grounds += 1;
                    &[]
                }
                Shape::Box { half, height } => &[*half, *height],
                Shape::Cylinder { radius, height } => &[*radius, *height],
            };
            if ranges.iter().any(|r| !(r[0] > 0.0 && r[0] <= r[1])) {
                return Err(Error::config(format!("palette '{}' has an invalid size range", a.class)));
            }
        }
        if grounds != 1 {
            return Err(Error::config("scene.palette needs exactly one ground archetype"));
        }
        for name in vocab.names() {
            if !self.palette.iter().any(|a| &a.class == name) {
                return Err(Error::config(format!("class '{name}' has no shape archetype")));
            }
        }
        Ok(())
    }
}

/// Whether base-class 3D annotations are available for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    #[default]
    BaseAnnotated,
    AnnotationFree,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    /// `gt_labels` holds every point's true class; `base_mask` marks points
    /// whose label may be used for training.
    pub cloud: PointCloud,
    pub point_instances: Vec<usize>,
    pub calibrations: Vec<Calibration>,
    pub images: Vec<FeatureImage>,
    pub gt_labels: Vec<LabelGrid>,
    pub gt_instances: Vec<LabelGrid>,
    pub pseudo_labels: Vec<LabelGrid>,
    pub corruption: Vec<CorruptionReport>,
}

impl SyntheticScene {
    pub fn num_points(&self) -> usize {
        self.cloud.len()
    }

    pub fn gt(&self) -> &[ClassId] {
        self.cloud.gt_labels.as_deref().unwrap_or(&[])
    }

    pub fn base_mask(&self) -> &[bool] {
        self.cloud.base_mask.as_deref().unwrap_or(&[])
    }

    /// Row-major N×[`POINT_FEATURES`] network inputs.
    pub fn point_inputs(&self, extent: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cloud.len() * POINT_FEATURES);
        for (p, &i) in self.cloud.coords.iter().zip(&self.cloud.intensity) {
            out.extend_from_slice(&[p.x / extent, p.y / extent, p.z, i]);
        }
        out
    }

    pub fn apply_mode(&mut self, mode: DatasetMode, vocab: &ClassVocabulary) {
        let gt = self.gt().to_vec();
        self.cloud.base_mask = Some(match mode {
            DatasetMode::BaseAnnotated => gt.iter().map(|&c| vocab.is_base(c)).collect(),
            DatasetMode::AnnotationFree => vec![false; gt.len()],
        });
    }
}

/// Seed for the `index`-th scene of a named split.
pub fn scene_seed(master: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn place_objects(
    spec: &SceneSpec,
    vocab: &ClassVocabulary,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SceneObject>> {
    let ground = spec
        .palette
        .iter()
        .find(|a| a.shape == Shape::Ground)
        .ok_or_else(|| Error::config("no ground archetype"))?;
    let mut objects = vec![SceneObject {
        class: vocab.id_of(&ground.class).expect("validated"),
        shape: Primitive::Ground { extent: spec.extent },
    }];
    let kinds: Vec<&Archetype> = spec.palette.iter().filter(|a| a.shape != Shape::Ground).collect();
    if kinds.is_empty() {
        return Ok(objects);
    }
    let count = rng.gen_range(spec.object_count[0]..=spec.object_count[1]);
    for _ in 0..count {
        let arch = kinds[rng.gen_range(0..kinds.len())];
        let class = vocab.id_of(&arch.class).expect("validated");
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let mut shape = match &arch.shape {
                Shape::Box { half, height } => Primitive::Box {
                    center: [0.0, 0.0],
                    half: [uniform(rng, *half), uniform(rng, *half)],
                    height: uniform(rng, *height),
                    yaw: rng.gen_range(0.0..PI),
                },
                Shape::Cylinder { radius, height } => Primitive::Cylinder {
                    center: [0.0, 0.0],
                    radius: uniform(rng, *radius),
                    height: uniform(rng, *height),
                },
                Shape::Ground => unreachable!(),
            };
            let r = shape.footprint_radius();
            let room = spec.extent - r;
            if room <= 0.0 {
                continue;
            }
            let c = [rng.gen_range(-room..room), rng.gen_range(-room..room)];
            let clear = objects[1..].iter().all(|o| {
                let oc = centre(&o.shape);
                (oc[0] - c[0]).hypot(oc[1] - c[1]) > r + o.shape.footprint_radius() + OBJECT_GAP
            });
            if clear {
                match &mut shape {
                    Primitive::Box { center, .. } | Primitive::Cylinder { center, .. } => *center = c,
                    Primitive::Ground { .. } => unreachable!(),
                }
                objects.push(SceneObject { class, shape });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {} of {count} after {PLACEMENT_TRIES} tries",
                objects.len()
            )));
        }
    }
    Ok(objects)
}

fn centre(p: &Primitive) -> [f64; 2] {
    match p {
        Primitive::Ground { .. } => [0.0, 0.0],
        Primitive::Box { center, .. } | Primitive::Cylinder { center, .. } => *center,
    }
}

/// Uniform samples over the exposed surface (no bottom faces).
fn sample_surface(shape: &Primitive, n: usize, rng: &mut ChaCha8Rng, occluders: &[SceneObject]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(n);
    match shape {
        Primitive::Ground { extent } => {
            while out.len() < n {
                let x = rng.gen_range(-extent..*extent);
                let y = rng.gen_range(-extent..*extent);
                if occluders.iter().any(|o| o.shape.covers_xy(x, y)) {
                    continue;
                }
                out.push(Vector3::new(x, y, 0.0));
            }
        }
        Primitive::Box {
            center,
            half,
            height,
            yaw,
        } => {
            // faces: top, ±x sides, ±y sides
            let areas = [
                4.0 * half[0] * half[1],
                2.0 * half[1] * height,
                2.0 * half[1] * height,
                2.0 * half[0] * height,
                2.0 * half[0] * height,
            ];
            let total: f64 = areas.iter().sum();
            let (s, c) = yaw.sin_cos();
            for _ in 0..n {
                let mut pick = rng.gen_range(0.0..total);
                let mut face = 0;
                while face < 4 && pick >= areas[face] {
                    pick -= areas[face];
                    face += 1;
                }
                let a = rng.gen_range(-1.0..1.0);
                let b = rng.gen_range(0.0..1.0);
                let (lx, ly, z) = match face {
                    0 => (a * half[0], rng.gen_range(-1.0..1.0) * half[1], *height),
                    1 => (half[0], a * half[1], b * height),
                    2 => (-half[0], a * half[1], b * height),
                    3 => (a * half[0], half[1], b * height),
                    _ => (a * half[0], -half[1], b * height),
                };
                out.push(Vector3::new(center[0] + c * lx - s * ly, center[1] + s * lx + c * ly, z));
            }
        }
        Primitive::Cylinder {
            center,
            radius,
            height,
        } => {
            let side = 2.0 * PI * radius * height;
            let top = PI * radius * radius;
            for _ in 0..n {
                let theta = rng.gen_range(0.0..2.0 * PI);
                if rng.gen_range(0.0..side + top) < side {
                    let z = rng.gen_range(0.0..*height);
                    out.push(Vector3::new(center[0] + radius * theta.cos(), center[1] + radius * theta.sin(), z));
                } else {
                    let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                    out.push(Vector3::new(center[0] + r * theta.cos(), center[1] + r * theta.sin(), *height));
                }
            }
        }
    }
    out
}

fn ring_cameras(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Calibration>> {
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..spec.cameras)
        .map(|k| {
            let a = phase + 2.0 * PI * k as f64 / spec.cameras as f64;
            let eye = Vector3::new(spec.ring_radius * a.cos(), spec.ring_radius * a.sin(), spec.ring_height);
            Calibration::look_at(eye, Vector3::new(0.0, 0.0, 0.5), spec.focal, spec.image_size, spec.image_size)
        })
        .collect()
}

/// Builds one scene. Base-class points are marked as annotated.
pub fn generate_scene(
    spec: &SceneSpec,
    noise: &NoiseModel,
    vocab: &ClassVocabulary,
    seed: u64,
) -> Result<SyntheticScene> {
    spec.validate(vocab)?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(spec, vocab, &mut rng)?;
    let intensity_of: Vec<f64> = (0..vocab.len())
        .map(|c| {
            spec.palette
                .iter()
                .find(|a| a.class == vocab.name(c))
                .map_or(0.0, |a| a.intensity)
        })
        .collect();
    let jitter = Normal::new(0.0, spec.intensity_noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;

    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    for (inst, obj) in objects.iter().enumerate() {
        let n = match obj.shape {
            Primitive::Ground { .. } => spec.ground_points,
            _ => rng.gen_range(spec.points_per_object[0]..=spec.points_per_object[1]),
        };
        let pts = sample_surface(&obj.shape, n, &mut rng, &objects[1..]);
        labels.extend(std::iter::repeat_n(obj.class, pts.len()));
        instances.extend(std::iter::repeat_n(inst, pts.len()));
        coords.extend(pts);
    }
    let intensity: Vec<f64> = labels
        .iter()
        .map(|&c| intensity_of[c] + jitter.sample(&mut rng))
        .collect();
    let base_mask = labels.iter().map(|&c| vocab.is_base(c)).collect();
    let cloud = PointCloud {
        coords,
        intensity,
        gt_labels: Some(labels),
        base_mask: Some(base_mask),
    };

    let calibrations = ring_cameras(spec, &mut rng)?;
    let mut images = Vec::new();
    let mut gt_labels = Vec::new();
    let mut gt_instances = Vec::new();
    let mut pseudo_labels = Vec::new();
    let mut corruption = Vec::new();
    for cal in &calibrations {
        let view = render_view(&objects, cal, vocab.ignore());
        let mut img = FeatureImage::zeros(cal.width, cal.height, IMAGE_CHANNELS);
        for (i, &inst) in view.instances.data.iter().enumerate() {
            if inst == NO_INSTANCE {
                continue;
            }
            let px = &mut img.data[i * IMAGE_CHANNELS..(i + 1) * IMAGE_CHANNELS];
            px[0] = intensity_of[objects[inst].class] + jitter.sample(&mut rng);
            px[1] = view.depth[i] / 10.0;
            px[2] = view.hits[i].z;
            px[3] = 1.0;
        }
        let (pseudo, report) = corrupt_labels(&objects, cal, vocab, noise, rng.gen())?;
        images.push(img);
        gt_labels.push(view.labels);
        gt_instances.push(view.instances);
        pseudo_labels.push(pseudo);
        corruption.push(report);
    }
    Ok(SyntheticScene {
        seed,
        objects,
        cloud,
        point_instances: instances,
        calibrations,
        images,
        gt_labels,
        gt_instances,
        pseudo_labels,
        corruption,
    })
}

/// One scene per seed, with base annotations set according to `mode`.
pub fn make_dataset(
    spec: &SceneSpec,
    noise: &NoiseModel,
    vocab: &ClassVocabulary,
    mode: DatasetMode,
    seeds: &[u64],
) -> Result<Vec<SyntheticScene>> {
    seeds
        .iter()
        .map(|&s| {
            let mut scene = generate_scene(spec, noise, vocab, s)?;
            scene.apply_mode(mode, vocab);
            Ok(scene)
        })
        .collect()
}

/// Like [`make_dataset`], generating scenes on up to `workers` threads.
pub fn make_dataset_parallel(
    spec: &SceneSpec,
    noise: &NoiseModel,
    vocab: &ClassVocabulary,
    mode: DatasetMode,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<SyntheticScene>> {
    let workers = workers.max(1).min(seeds.len().max(1));
    if workers == 1 {
        return make_dataset(spec, noise, vocab, mode, seeds);
    }
    let chunk = seeds.len().div_ceil(workers);
    let parts: Vec<Result<Vec<SyntheticScene>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| s.spawn(move || make_dataset(spec, noise, vocab, mode, part)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scene worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
