//! Sparse semantic object map and per-keyframe label propagation.
//!
//! Every map object carries a class, a weight in `[0, 1]` and a sparse cloud
//! of world-frame support points. On each keyframe the objects are splatted
//! into the image, matched one-to-one against the filtered detector
//! instances by mask IoU, and the match outcome either confirms the object,
//! corrects the frame label, or erodes the object until it is dropped.
//! Confident instances that match nothing seed new objects.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, unproject_unchecked, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::raster::{DepthMap, Mask, Raster};
use crate::segment2d::{FilteredSeg, InstanceRecord};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Largest splat half-width, pixels.
const MAX_SPLAT_HALF_WIDTH: i64 = 32;

pub type ObjectId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Reprojection IoU that must be exceeded for a match.
    pub t_iou: f64,
    /// Detection probability needed to confirm, contradict or create an object.
    pub t_p1: f64,
    /// Object weight below which the object is deleted.
    pub t_p2: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            t_iou: 0.4,
            t_p1: 0.9,
            t_p2: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemMapConfig {
    pub thresholds: Thresholds,
    pub delta_up: f64,
    pub delta_down: f64,
    /// Cap on support points seeded for a new object.
    pub max_support: usize,
}

impl Default for SemMapConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            delta_up: 0.05,
            delta_down: 0.05,
            max_support: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub position: [f64; 3],
    /// Surface extent represented by this point, meters. Zero for an
    /// isolated point, which splats as 3x3 pixels.
    pub footprint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticObject {
    pub id: ObjectId,
    pub class_id: u16,
    pub weight: f64,
    pub support: Vec<SupportPoint>,
    pub last_seen: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    FromDetector,
    CorrectedByMap { object: ObjectId },
    NewObject { object: ObjectId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistentInstance {
    pub class_id: u16,
    pub probability: f64,
    pub pixel_count: usize,
    pub detector_class: u16,
    pub detector_probability: f64,
    pub provenance: Provenance,
    /// Object this instance was paired with by IoU, if any.
    pub matched_object: Option<ObjectId>,
}

/// Filtered segmentation with labels after map correction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistentMasks {
    pub keyframe: u64,
    /// Instance raster, unchanged from the filtered segmentation.
    pub labels: Raster<u32>,
    pub instances: Vec<ConsistentInstance>,
}

impl ConsistentMasks {
    /// Passes a segmentation through without consulting any map.
    pub fn from_filtered(keyframe: u64, seg: &FilteredSeg) -> Self {
        Self {
            keyframe,
            labels: seg.labels.clone(),
            instances: seg.instances.iter().map(ConsistentInstance::from_record).collect(),
        }
    }

    pub fn instance_at(&self, u: usize, v: usize) -> Option<&ConsistentInstance> {
        match *self.labels.get(u, v) {
            0 => None,
            id => self.instances.get(id as usize - 1),
        }
    }

    pub fn class_raster(&self) -> Raster<u16> {
        self.labels.map(|&l| match l {
            0 => 0,
            id => self.instances[id as usize - 1].class_id,
        })
    }
}

impl ConsistentInstance {
    fn from_record(r: &InstanceRecord) -> Self {
        Self {
            class_id: r.class_id,
            probability: r.probability,
            pixel_count: r.pixel_count,
            detector_class: r.class_id,
            detector_probability: r.probability,
            provenance: Provenance::FromDetector,
            matched_object: None,
        }
    }
}

/// Inputs of one propagation step.
#[derive(Debug, Clone, Copy)]
pub struct Keyframe<'a> {
    pub id: u64,
    pub seg: &'a FilteredSeg,
    pub depth: &'a DepthMap,
    /// Camera-from-world.
    pub pose: &'a Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSemanticMap {
    pub config: SemMapConfig,
    objects: BTreeMap<ObjectId, SemanticObject>,
    next_id: ObjectId,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    map: SparseSemanticMap,
}

/// Union of splats of the support points that land in the image.
pub fn reproject_object(obj: &SemanticObject, camera_from_world: &Pose, k: &Intrinsics) -> Mask {
    let mut region = Raster::filled(k.width, k.height, false);
    let (w, h) = (k.width as i64, k.height as i64);
    for sp in &obj.support {
        let p = nalgebra::Point3::from(sp.position);
        let Some(px) = project(k, camera_from_world, &p) else {
            continue;
        };
        let (iu, iv) = k.pixel_of(px.u, px.v).expect("projected inside raster");
        let spacing = sp.footprint * k.fx.max(k.fy) / px.depth;
        let half = (((spacing - 1.0) / 2.0).ceil() as i64).clamp(1, MAX_SPLAT_HALF_WIDTH);
        let (iu, iv) = (iu as i64, iv as i64);
        for v in (iv - half).max(0)..=(iv + half).min(h - 1) {
            for u in (iu - half).max(0)..=(iu + half).min(w - 1) {
                region.set(u as usize, v as usize, true);
            }
        }
    }
    region
}

/// Intersection over union of two equally sized masks; 0 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU of a region against every instance of a label raster.
fn instance_ious(region: &Mask, seg: &FilteredSeg) -> Vec<f64> {
    let mut inter = vec![0usize; seg.instances.len()];
    let mut area = 0usize;
    for (&r, &l) in region.data().iter().zip(seg.labels.data()) {
        if r {
            area += 1;
            if l != 0 {
                inter[l as usize - 1] += 1;
            }
        }
    }
    inter
        .iter()
        .zip(&seg.instances)
        .map(|(&i, inst)| {
            let union = area + inst.pixel_count - i;
            if union == 0 {
                0.0
            } else {
                i as f64 / union as f64
            }
        })
        .collect()
}

/// Seeds support points on a regular pixel grid over an instance.
pub fn seed_support(
    seg: &FilteredSeg,
    instance: usize,
    depth: &DepthMap,
    camera_from_world: &Pose,
    k: &Intrinsics,
    max_points: usize,
) -> Vec<SupportPoint> {
    let id = instance as u32 + 1;
    let (w, h) = (seg.width(), seg.height());
    let valid = |u: usize, v: usize| *seg.labels.get(u, v) == id && depth.depth_at(u, v).is_some();
    let mut count = 0usize;
    for v in 0..h {
        for u in 0..w {
            count += valid(u, v) as usize;
        }
    }
    if count == 0 || max_points == 0 {
        return Vec::new();
    }
    let stride = ((count as f64 / max_points as f64).sqrt().ceil() as usize).max(1);
    let mut pixels = Vec::new();
    for v in (0..h).step_by(stride) {
        for u in (0..w).step_by(stride) {
            if valid(u, v) {
                pixels.push((u, v));
            }
        }
    }
    if pixels.is_empty() {
        // grid missed a thin instance; fall back to its first pixel
        if let Some(p) = (0..w * h).map(|p| (p % w, p / w)).find(|&(u, v)| valid(u, v)) {
            pixels.push(p);
        }
    }
    if pixels.len() > max_points {
        let n = pixels.len();
        pixels = (0..max_points).map(|i| pixels[i * n / max_points]).collect();
    }
    let world_from_camera = camera_from_world.inverse();
    let focal = k.fx.max(k.fy);
    pixels
        .into_iter()
        .map(|(u, v)| {
            let d = depth.depth_at(u, v).expect("valid depth") as f64;
            let pc = unproject_unchecked(k, u as f64, v as f64, d);
            let pw = world_from_camera.transform_point(&pc);
            SupportPoint {
                position: [pw.x, pw.y, pw.z],
                footprint: if stride > 1 { stride as f64 * d / focal } else { 0.0 },
            }
        })
        .collect()
}

impl SparseSemanticMap {
    pub fn new(config: SemMapConfig) -> Self {
        Self {
            config,
            objects: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn objects(&self) -> impl Iterator<Item = &SemanticObject> {
        self.objects.values()
    }

    pub fn get(&self, id: ObjectId) -> Option<&SemanticObject> {
        self.objects.get(&id)
    }

    pub fn next_id(&self) -> ObjectId {
        self.next_id
    }

    /// Inserts an object with a fresh id and returns that id.
    pub fn insert(&mut self, class_id: u16, weight: f64, support: Vec<SupportPoint>, last_seen: u64) -> Result<ObjectId> {
        if support.is_empty() {
            return Err(Error::Empty("object support"));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidParameter {
                name: "weight",
                reason: format!("{weight} outside [0, 1]"),
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.objects.insert(
            id,
            SemanticObject {
                id,
                class_id,
                weight,
                support,
                last_seen,
            },
        );
        Ok(id)
    }

    /// Runs one keyframe through the map, returning the corrected masks.
    pub fn propagate(&mut self, frame: Keyframe<'_>, k: &Intrinsics) -> Result<ConsistentMasks> {
        let seg = frame.seg;
        if seg.width() != k.width || seg.height() != k.height {
            return Err(Error::dims(
                format!("{}x{}", k.width, k.height),
                format!("{}x{}", seg.width(), seg.height()),
            ));
        }
        seg.labels.ensure_same_shape(frame.depth)?;
        let th = self.config.thresholds;

        let snapshot: Vec<&SemanticObject> = self.objects.values().collect();
        let ious: Vec<Vec<f64>> = snapshot
            .par_iter()
            .map(|obj| instance_ious(&reproject_object(obj, frame.pose, k), seg))
            .collect();

        let mut candidates: Vec<(f64, ObjectId, usize)> = Vec::new();
        for (obj, row) in snapshot.iter().zip(&ious) {
            for (j, &iou) in row.iter().enumerate() {
                if iou > th.t_iou {
                    candidates.push((iou, obj.id, j));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut out = ConsistentMasks::from_filtered(frame.id, seg);
        let mut instance_taken = vec![false; seg.instances.len()];
        let mut object_taken = BTreeMap::new();
        for (_, oid, j) in candidates {
            if instance_taken[j] || object_taken.contains_key(&oid) {
                continue;
            }
            instance_taken[j] = true;
            object_taken.insert(oid, j);
        }

        for (&oid, &j) in &object_taken {
            let inst = &mut out.instances[j];
            let obj = self.objects.get_mut(&oid).expect("matched object exists");
            inst.matched_object = Some(oid);
            obj.last_seen = frame.id;
            let confident = inst.detector_probability >= th.t_p1;
            let same_class = inst.detector_class == obj.class_id;
            match (same_class, confident) {
                (true, true) => {
                    obj.weight = (obj.weight + self.config.delta_up).min(1.0);
                }
                (false, true) => {
                    obj.weight = (obj.weight - self.config.delta_down).max(0.0);
                    if obj.weight >= th.t_p2 {
                        inst.class_id = obj.class_id;
                        inst.provenance = Provenance::CorrectedByMap { object: oid };
                    }
                }
                (true, false) => {
                    inst.probability = obj.weight;
                }
                (false, false) => {
                    // a hesitant detection overlapping a trusted object takes the object's label
                    if obj.weight >= th.t_p2 {
                        inst.class_id = obj.class_id;
                        inst.probability = obj.weight;
                        inst.provenance = Provenance::CorrectedByMap { object: oid };
                    }
                }
            }
        }
        self.objects.retain(|_, o| o.weight >= th.t_p2);

        for (j, taken) in instance_taken.iter().enumerate() {
            let inst = &out.instances[j];
            if *taken || inst.detector_probability <= th.t_p1 {
                continue;
            }
            let support = seed_support(seg, j, frame.depth, frame.pose, k, self.config.max_support);
            if support.is_empty() {
                continue;
            }
            let id = self.insert(inst.detector_class, inst.detector_probability, support, frame.id)?;
            out.instances[j].provenance = Provenance::NewObject { object: id };
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION,
            map: self.clone(),
        };
        let text = serde_json::to_string(&checkpoint).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::data(
                path,
                format!("unsupported checkpoint version {}", checkpoint.version),
            ));
        }
        let map = checkpoint.map;
        for obj in map.objects.values() {
            if obj.support.is_empty() || !(0.0..=1.0).contains(&obj.weight) || obj.id >= map.next_id {
                return Err(Error::data(path, format!("object {} violates map invariants", obj.id)));
            }
        }
        Ok(map)
    }
}
