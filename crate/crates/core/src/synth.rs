//! Synthetic labeled scenes rendered into the on-disk dataset layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Point3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::fusion::{class_color, Mesh};
use crate::ingest::{
    encode_depth, write_depth_png, write_detections, write_intrinsics, write_trajectory, Detection, DetectionSet,
    MaskEncoding, ASSOCIATION_FILE, CAMERA_FILE, TRAJECTORY_FILE,
};
use crate::raster::{DepthMap, Raster};

pub const SCENE_FILE: &str = "scene.json";
pub const GT_SAMPLES_FILE: &str = "gt_samples.ply";
pub const GT_DIR: &str = "gt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    /// Square patch of side `2 * half_size` centered at `point`.
    Plane { point: [f64; 3], normal: [f64; 3], half_size: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub class_id: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Waypoint>,
    pub frames: usize,
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default = "default_interval")]
    pub frame_interval: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_interval() -> f64 {
    1.0 / 30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Standard deviation of additive depth noise, meters.
    pub depth_sigma: f64,
    pub flip_probability: f64,
    /// Class substituted for each class when a detection is flipped.
    pub confusions: BTreeMap<u16, u16>,
    pub correct_score: ScoreRange,
    pub flipped_score: ScoreRange,
    /// Instances covering fewer pixels are not detected.
    pub min_detection_pixels: usize,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depth_sigma: 0.0,
            flip_probability: 0.0,
            confusions: BTreeMap::new(),
            correct_score: ScoreRange { min: 0.92, max: 0.99 },
            flipped_score: ScoreRange { min: 0.6, max: 0.88 },
            min_detection_pixels: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
        }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub camera: CameraSpec,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
    /// Number of class ids, including the unannotated class 0.
    pub num_classes: usize,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    #[serde(default = "default_spacing")]
    pub sample_spacing: f64,
}

fn default_depth_scale() -> f64 {
    crate::ingest::DEFAULT_DEPTH_SCALE
}

fn default_spacing() -> f64 {
    0.01
}

fn bad(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.camera.intrinsics()?;
        if self.trajectory.frames == 0 {
            return Err(bad("trajectory.frames", "at least one frame is required"));
        }
        if self.trajectory.waypoints.is_empty() {
            return Err(bad("trajectory.waypoints", "at least one waypoint is required"));
        }
        if !(self.trajectory.frame_interval > 0.0) {
            return Err(bad("trajectory.frame_interval", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(bad("num_classes", "need at least one class besides 0"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.class_id == 0 || p.class_id as usize >= self.num_classes {
                return Err(bad("primitives.class_id", format!("primitive {i} has class {}", p.class_id)));
            }
            let ok = match &p.shape {
                Shape::Box { min, max } => (0..3).all(|a| min[a] < max[a]),
                Shape::Plane { normal, half_size, .. } => {
                    Vector3::from(*normal).norm() > 1e-12 && *half_size > 0.0
                }
                Shape::Sphere { radius, .. } => *radius > 0.0,
            };
            if !ok {
                return Err(Error::DegenerateGeometry(format!("primitive {i}")));
            }
        }
        let n = &self.noise;
        if !(n.depth_sigma >= 0.0) {
            return Err(bad("noise.depth_sigma", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&n.flip_probability) {
            return Err(bad("noise.flip_probability", "must lie in [0, 1]"));
        }
        for (name, r) in [("noise.correct_score", n.correct_score), ("noise.flipped_score", n.flipped_score)] {
            if !(0.0 <= r.min && r.min <= r.max && r.max <= 1.0) {
                return Err(bad(name, format!("invalid range [{}, {}]", r.min, r.max)));
            }
        }
        for p in self.primitives.iter().filter(|_| n.flip_probability > 0.0) {
            let c = self.confusable(p.class_id);
            if c == p.class_id || c as usize >= self.num_classes || c == 0 {
                return Err(bad("noise.confusions", format!("class {} has no usable confusable class", p.class_id)));
            }
        }
        if !(self.depth_scale > 0.0) {
            return Err(bad("depth_scale", "must be positive"));
        }
        if !(self.sample_spacing > 0.0) {
            return Err(bad("sample_spacing", "must be positive"));
        }
        Ok(())
    }

    /// Class a flipped detection of `class` reports.
    pub fn confusable(&self, class: u16) -> u16 {
        if let Some(&c) = self.noise.confusions.get(&class) {
            return c;
        }
        let k = (self.num_classes - 1) as u16;
        if k < 2 {
            return class;
        }
        class % k + 1
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 * self.trajectory.frame_interval
    }

    /// Camera-from-world pose of a frame, interpolated along the waypoints.
    pub fn pose(&self, frame: usize) -> Result<Pose> {
        let w = &self.trajectory.waypoints;
        let (eye, target) = if w.len() == 1 || self.trajectory.frames == 1 {
            (Vector3::from(w[0].eye), Vector3::from(w[0].target))
        } else {
            let s = frame as f64 / (self.trajectory.frames - 1) as f64 * (w.len() - 1) as f64;
            let i = (s.floor() as usize).min(w.len() - 2);
            let f = s - i as f64;
            let lerp = |a: [f64; 3], b: [f64; 3]| Vector3::from(a) * (1.0 - f) + Vector3::from(b) * f;
            (lerp(w[i].eye, w[i + 1].eye), lerp(w[i].target, w[i + 1].target))
        };
        Pose::look_at(Point3::from(eye), Point3::from(target), Vector3::from(self.trajectory.up))
    }

    /// Class of the primitive whose surface is nearest to `p`.
    pub fn label_at(&self, p: &Point3<f64>) -> u16 {
        self.primitives
            .iter()
            .map(|pr| (surface_distance(&pr.shape, p), pr.class_id))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map_or(0, |(_, c)| c)
    }

    /// Three objects on a floor, viewed along a sweeping arc.
    pub fn three_objects() -> Self {
        let prim = |shape, class_id| Primitive { shape, class_id };
        Self {
            primitives: vec![
                prim(
                    Shape::Plane {
                        point: [0.0, 0.0, 0.0],
                        normal: [0.0, 0.0, 1.0],
                        half_size: 2.5,
                    },
                    1,
                ),
                prim(
                    Shape::Box {
                        min: [-1.1, -0.3, 0.0],
                        max: [-0.4, 0.3, 0.45],
                    },
                    2,
                ),
                prim(
                    Shape::Sphere {
                        center: [0.25, 0.1, 0.3],
                        radius: 0.3,
                    },
                    3,
                ),
                prim(
                    Shape::Box {
                        min: [0.8, -0.25, 0.0],
                        max: [1.2, 0.25, 0.8],
                    },
                    4,
                ),
            ],
            camera: CameraSpec::default(),
            trajectory: TrajectorySpec {
                waypoints: vec![
                    Waypoint {
                        eye: [-1.6, -2.2, 1.4],
                        target: [-0.6, 0.0, 0.2],
                    },
                    Waypoint {
                        eye: [0.0, -2.6, 1.5],
                        target: [0.1, 0.0, 0.25],
                    },
                    Waypoint {
                        eye: [1.6, -2.2, 1.4],
                        target: [0.8, 0.0, 0.3],
                    },
                ],
                frames: 80,
                up: default_up(),
                frame_interval: default_interval(),
            },
            noise: NoiseModel {
                confusions: BTreeMap::from([(1, 2), (2, 4), (3, 2), (4, 2)]),
                ..NoiseModel::default()
            },
            seed: 0,
            num_classes: 5,
            depth_scale: default_depth_scale(),
            sample_spacing: default_spacing(),
        }
    }

    /// A single fronto-parallel wall seen by a slowly translating camera.
    pub fn plane_wall() -> Self {
        Self {
            primitives: vec![Primitive {
                shape: Shape::Plane {
                    point: [0.0, 0.0, 0.0],
                    normal: [0.0, -1.0, 0.0],
                    half_size: 3.0,
                },
                class_id: 1,
            }],
            camera: CameraSpec::default(),
            trajectory: TrajectorySpec {
                waypoints: vec![
                    Waypoint {
                        eye: [-0.2, -1.5, 0.0],
                        target: [-0.2, 0.0, 0.0],
                    },
                    Waypoint {
                        eye: [0.2, -1.4, 0.1],
                        target: [0.2, 0.0, 0.1],
                    },
                ],
                frames: 20,
                up: default_up(),
                frame_interval: default_interval(),
            },
            noise: NoiseModel::default(),
            seed: 0,
            num_classes: 2,
            depth_scale: default_depth_scale(),
            sample_spacing: default_spacing(),
        }
    }
}

fn inside(shape: &Shape, p: &Point3<f64>) -> bool {
    match shape {
        Shape::Box { min, max } => (0..3).all(|a| p[a] > min[a] && p[a] < max[a]),
        Shape::Sphere { center, radius } => (p - Point3::from(*center)).norm() < *radius,
        Shape::Plane { .. } => false,
    }
}

/// Closed containment, so surfaces resting on a solid count as covered.
fn inside_or_on(shape: &Shape, p: &Point3<f64>) -> bool {
    const EPS: f64 = 1e-9;
    match shape {
        Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] - EPS && p[a] <= max[a] + EPS),
        Shape::Sphere { center, radius } => (p - Point3::from(*center)).norm() <= radius + EPS,
        Shape::Plane { .. } => false,
    }
}

fn plane_basis(normal: &[f64; 3]) -> (Unit<Vector3<f64>>, Vector3<f64>, Vector3<f64>) {
    let n = Unit::new_normalize(Vector3::from(*normal));
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (n, e1, e2)
}

/// Unsigned distance from `p` to a primitive's surface.
pub fn surface_distance(shape: &Shape, p: &Point3<f64>) -> f64 {
    match shape {
        Shape::Sphere { center, radius } => ((p - Point3::from(*center)).norm() - radius).abs(),
        Shape::Box { min, max } => {
            let c = (Vector3::from(*min) + Vector3::from(*max)) * 0.5;
            let h = (Vector3::from(*max) - Vector3::from(*min)) * 0.5;
            let q = (p.coords - c).abs() - h;
            let outside = q.map(|x| x.max(0.0)).norm();
            let inner = q.x.max(q.y).max(q.z).min(0.0);
            (outside + inner).abs()
        }
        Shape::Plane {
            point,
            normal,
            half_size,
        } => {
            let (n, e1, e2) = plane_basis(normal);
            let d = p - Point3::from(*point);
            let a = (d.dot(&e1).abs() - half_size).max(0.0);
            let b = (d.dot(&e2).abs() - half_size).max(0.0);
            let h = d.dot(&n);
            (a * a + b * b + h * h).sqrt()
        }
    }
}

/// Smallest positive ray parameter at which `o + t d` meets the shape.
fn intersect(shape: &Shape, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = o - Point3::from(*center);
            let a = d.dot(d);
            let b = oc.dot(d);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            [(-b - s) / a, (-b + s) / a].into_iter().find(|&t| t > 0.0)
        }
        Shape::Box { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
            (t0 <= t1 && t0 > 0.0).then_some(t0)
        }
        Shape::Plane {
            point,
            normal,
            half_size,
        } => {
            let (n, e1, e2) = plane_basis(normal);
            let denom = d.dot(&n);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = (Point3::from(*point) - o).dot(&n) / denom;
            if !(t > 0.0) {
                return None;
            }
            let rel = o + d * t - Point3::from(*point);
            (rel.dot(&e1).abs() <= *half_size && rel.dot(&e2).abs() <= *half_size).then_some(t)
        }
    }
}

/// One rendered view with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub index: usize,
    pub id: String,
    pub timestamp: f64,
    /// Camera-from-world.
    pub pose: Pose,
    pub depth: DepthMap,
    /// Primitive index + 1 of the visible surface; 0 for background.
    pub instances: Raster<u16>,
    pub classes: Raster<u16>,
}

pub fn frame_id(index: usize) -> String {
    format!("frame_{index:06}")
}

fn frame_rng(seed: u64, frame: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 * 4 + stream);
    rng
}

/// Raycasts one frame. Depth noise is drawn from a per-frame stream, so
/// frames can be rendered in any order.
pub fn render_frame(spec: &SceneSpec, index: usize) -> Result<RenderedFrame> {
    let k = spec.camera.intrinsics()?;
    let pose = spec.pose(index)?;
    let wc = pose.inverse();
    let eye = Point3::from(wc.translation);
    for (i, p) in spec.primitives.iter().enumerate() {
        if inside(&p.shape, &eye) {
            return Err(Error::CameraInsidePrimitive([eye.x, eye.y, eye.z], i));
        }
    }
    let (w, h) = (k.width, k.height);
    let hits: Vec<(f32, u16)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let dir = wc.transform_vector(&Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0));
            let mut best: Option<(f64, u16)> = None;
            for (pi, p) in spec.primitives.iter().enumerate() {
                if let Some(t) = intersect(&p.shape, &eye, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, pi as u16 + 1));
                    }
                }
            }
            best.map_or((0.0, 0), |(t, id)| (t as f32, id))
        })
        .collect();
    let mut depth = Raster::from_vec(w, h, hits.iter().map(|x| x.0).collect())?;
    let instances = Raster::from_vec(w, h, hits.iter().map(|x| x.1).collect())?;
    let classes = instances.map(|&id| if id == 0 { 0 } else { spec.primitives[id as usize - 1].class_id });
    if spec.noise.depth_sigma > 0.0 {
        let mut rng = frame_rng(spec.seed, index, 0);
        let normal = Normal::new(0.0, spec.noise.depth_sigma).map_err(|e| bad("noise.depth_sigma", e.to_string()))?;
        for d in depth.data_mut() {
            let n = normal.sample(&mut rng) as f32;
            if *d > 0.0 {
                *d = (*d + n).max(1e-4);
            }
        }
    }
    Ok(RenderedFrame {
        index,
        id: frame_id(index),
        timestamp: spec.timestamp(index),
        pose,
        depth,
        instances,
        classes,
    })
}

pub fn render(spec: &SceneSpec) -> Result<Vec<RenderedFrame>> {
    spec.validate()?;
    (0..spec.trajectory.frames)
        .into_par_iter()
        .map(|i| render_frame(spec, i))
        .collect()
}

/// Per-instance detections with label flips drawn from the noise model.
pub fn corrupt_detections(spec: &SceneSpec, frame: &RenderedFrame) -> DetectionSet {
    let mut rng = frame_rng(spec.seed, frame.index, 1);
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &id in frame.instances.data() {
        if id != 0 {
            *counts.entry(id).or_default() += 1;
        }
    }
    let noise = &spec.noise;
    let mut detections = Vec::new();
    for (&id, &count) in &counts {
        let flip = rng.random_bool(noise.flip_probability);
        let range = if flip { noise.flipped_score } else { noise.correct_score };
        let score = if range.max > range.min {
            rng.random_range(range.min..=range.max)
        } else {
            range.min
        };
        if count < noise.min_detection_pixels {
            continue;
        }
        let gt_class = spec.primitives[id as usize - 1].class_id;
        detections.push(Detection {
            class_id: if flip { spec.confusable(gt_class) } else { gt_class },
            score: score as f32,
            mask: frame.instances.map(|&x| x == id),
        });
    }
    DetectionSet {
        frame_id: frame.id.clone(),
        detections,
    }
}

/// Surface samples of every primitive with their classes; samples inside
/// or on another solid are dropped.
pub fn gt_samples(spec: &SceneSpec) -> Mesh {
    let s = spec.sample_spacing;
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (i, p) in spec.primitives.iter().enumerate() {
        let mut local = Vec::new();
        match &p.shape {
            Shape::Sphere { center, radius } => {
                let n = ((4.0 * std::f64::consts::PI * radius * radius) / (s * s)).ceil() as usize;
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                for k in 0..n {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * k as f64;
                    local.push(Point3::from(*center) + Vector3::new(r * phi.cos(), r * phi.sin(), z) * *radius);
                }
            }
            Shape::Box { min, max } => {
                for axis in 0..3 {
                    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                    let na = ((max[a] - min[a]) / s).ceil() as usize;
                    let nb = ((max[b] - min[b]) / s).ceil() as usize;
                    for face in [min[axis], max[axis]] {
                        for ia in 0..=na {
                            for ib in 0..=nb {
                                let mut q = [0.0; 3];
                                q[axis] = face;
                                q[a] = min[a] + (max[a] - min[a]) * ia as f64 / na as f64;
                                q[b] = min[b] + (max[b] - min[b]) * ib as f64 / nb as f64;
                                local.push(Point3::from(q));
                            }
                        }
                    }
                }
            }
            Shape::Plane {
                point,
                normal,
                half_size,
            } => {
                let (_, e1, e2) = plane_basis(normal);
                let n = (2.0 * half_size / s).ceil() as usize;
                for ia in 0..=n {
                    for ib in 0..=n {
                        let a = -half_size + 2.0 * half_size * ia as f64 / n as f64;
                        let b = -half_size + 2.0 * half_size * ib as f64 / n as f64;
                        local.push(Point3::from(*point) + e1 * a + e2 * b);
                    }
                }
            }
        }
        for q in local {
            let buried = spec
                .primitives
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && inside_or_on(&o.shape, &q));
            if !buried {
                pts.push(q);
                labels.push(p.class_id);
            }
        }
    }
    Mesh::point_cloud(pts, Some(labels))
}

/// Summary of a written dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub frames: usize,
    pub gt_samples: usize,
    pub detections: usize,
    pub flipped: usize,
}

fn class_rgb(classes: &Raster<u16>) -> RgbImage {
    RgbImage::from_fn(classes.width() as u32, classes.height() as u32, |u, v| {
        match *classes.get(u as usize, v as usize) {
            0 => Rgb([0, 0, 0]),
            c => Rgb(class_color(c)),
        }
    })
}

/// Renders the scene and writes the dataset layout read by the ingest module.
pub fn write_dataset(spec: &SceneSpec, root: &Path, encoding: MaskEncoding) -> Result<SynthSummary> {
    spec.validate()?;
    let k = spec.camera.intrinsics()?;
    for dir in ["rgb", "depth", GT_DIR] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let spec_path = root.join(SCENE_FILE);
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&spec_path, json + "\n").map_err(|e| Error::io(&spec_path, e))?;
    write_intrinsics(&root.join(CAMERA_FILE), &k)?;

    let frames = render(spec)?;
    let mut assoc = String::from("# rgb_timestamp rgb depth_timestamp depth\n");
    let mut poses = Vec::with_capacity(frames.len());
    let mut summary = SynthSummary {
        frames: frames.len(),
        gt_samples: 0,
        detections: 0,
        flipped: 0,
    };
    for f in &frames {
        let rgb_rel = format!("rgb/{}.png", f.id);
        let depth_rel = format!("depth/{}.png", f.id);
        let rgb_path = root.join(&rgb_rel);
        class_rgb(&f.classes).save(&rgb_path).map_err(|source| Error::Image {
            path: rgb_path.clone(),
            source,
        })?;
        write_depth_png(&root.join(&depth_rel), &encode_depth(&f.depth, spec.depth_scale))?;
        write_depth_png(&root.join(GT_DIR).join(format!("{}_class.png", f.id)), &f.classes)?;
        write_depth_png(&root.join(GT_DIR).join(format!("{}_instance.png", f.id)), &f.instances)?;
        let dets = corrupt_detections(spec, f);
        summary.detections += dets.detections.len();
        summary.flipped += dets
            .detections
            .iter()
            .zip(detected_gt_classes(spec, f))
            .filter(|(d, gt)| d.class_id != *gt)
            .count();
        write_detections(root, &dets, encoding)?;
        assoc.push_str(&format!("{:?} {rgb_rel} {:?} {depth_rel}\n", f.timestamp, f.timestamp));
        poses.push((f.timestamp, f.pose));
    }
    let assoc_path = root.join(ASSOCIATION_FILE);
    fs::write(&assoc_path, assoc).map_err(|e| Error::io(&assoc_path, e))?;
    write_trajectory(&root.join(TRAJECTORY_FILE), &poses)?;
    let samples = gt_samples(spec);
    summary.gt_samples = samples.vertices.len();
    samples.write_ply(&root.join(GT_SAMPLES_FILE))?;
    Ok(summary)
}

/// Ground-truth classes of the instances that pass the detection size filter, in detection order.
fn detected_gt_classes(spec: &SceneSpec, frame: &RenderedFrame) -> Vec<u16> {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for &id in frame.instances.data() {
        if id != 0 {
            *counts.entry(id).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= spec.noise.min_detection_pixels)
        .map(|(id, _)| spec.primitives[id as usize - 1].class_id)
        .collect()
}
