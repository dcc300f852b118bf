//! Per-frame geometric segmentation from depth and its intersection with
//! detector masks.
//!
//! The geometric side marks normal-angle and depth-gap edges, then keeps
//! 4-connected regions of smooth surface as instances. A detector label
//! survives at a pixel only where the geometric coverage map is set, so
//! noisy mask borders that bleed onto depth edges or background are cut.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{unproject_unchecked, Intrinsics};
use crate::error::{Error, Result};
use crate::ingest::DetectionSet;
use crate::raster::{DepthMap, Mask, Raster};

pub type NormalMap = Raster<Option<Vector3<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentParams {
    /// Maximum angle between neighboring normals inside one surface, degrees.
    pub edge_angle_deg: f64,
    /// Depth gap between neighbors, relative to the pixel depth, that breaks a surface.
    pub depth_gap_rel: f64,
    /// Smallest region kept as an instance, pixels.
    pub min_area: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            edge_angle_deg: 20.0,
            depth_gap_rel: 0.04,
            min_area: 200,
        }
    }
}

/// Binary coverage map plus the instance-id raster it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeomSegmentation {
    /// 1 where a pixel belongs to some geometric instance.
    pub covered: Mask,
    /// Instance id per pixel, 0 for background.
    pub instances: Raster<u32>,
    pub num_instances: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_id: u16,
    pub probability: f64,
    pub pixel_count: usize,
    /// Index of the originating detection in its [`DetectionSet`].
    pub detection: usize,
}

/// Detector labels restricted to geometrically covered pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredSeg {
    /// `0` for unlabeled pixels, `i + 1` for pixels of `instances[i]`.
    pub labels: Raster<u32>,
    pub instances: Vec<InstanceRecord>,
}

impl FilteredSeg {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            labels: Raster::filled(width, height, 0),
            instances: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn instance_mask(&self, index: usize) -> Mask {
        let id = index as u32 + 1;
        self.labels.map(|&l| l == id)
    }

    pub fn is_labeled(&self, u: usize, v: usize) -> bool {
        *self.labels.get(u, v) != 0
    }

    /// Instance record at a pixel, if labeled.
    pub fn instance_at(&self, u: usize, v: usize) -> Option<&InstanceRecord> {
        match *self.labels.get(u, v) {
            0 => None,
            id => self.instances.get(id as usize - 1),
        }
    }

    /// Class id raster with `0` for unlabeled pixels.
    pub fn class_raster(&self) -> Raster<u16> {
        self.labels.map(|&l| match l {
            0 => 0,
            id => self.instances[id as usize - 1].class_id,
        })
    }
}

/// Per-pixel normals from central differences of back-projected neighbors.
///
/// A normal is produced only where the pixel and its four neighbors carry
/// valid depth. Normals point towards the camera.
pub fn compute_normals(depth: &DepthMap, k: &Intrinsics) -> NormalMap {
    let (w, h) = (depth.width(), depth.height());
    let point = |u: usize, v: usize| -> Option<Vector3<f64>> {
        depth
            .depth_at(u, v)
            .map(|d| unproject_unchecked(k, u as f64, v as f64, d as f64).coords)
    };
    let rows: Vec<Vec<Option<Vector3<f64>>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    if u == 0 || v == 0 || u + 1 >= w || v + 1 >= h {
                        return None;
                    }
                    let center = point(u, v)?;
                    let du = point(u + 1, v)? - point(u - 1, v)?;
                    let dv = point(u, v + 1)? - point(u, v - 1)?;
                    let n = du.cross(&dv);
                    let norm = n.norm();
                    if !(norm > 0.0) || !norm.is_finite() {
                        return None;
                    }
                    let n = n / norm;
                    Some(if n.dot(&center) > 0.0 { -n } else { n })
                })
                .collect()
        })
        .collect();
    Raster::from_vec(w, h, rows.into_iter().flatten().collect()).expect("raster size")
}

/// Splits the frame into smooth-surface instances separated by normal and depth edges.
pub fn geometric_segment(normals: &NormalMap, depth: &DepthMap, params: &SegmentParams) -> Result<GeomSegmentation> {
    normals.ensure_same_shape(depth)?;
    let (w, h) = (depth.width(), depth.height());
    let cos_limit = params.edge_angle_deg.to_radians().cos();

    // smooth[p]: valid normal and no edge towards any 4-neighbor
    let smooth: Vec<bool> = (0..h)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..w).map(move |u| {
                let Some(n) = normals.get(u, v) else {
                    return false;
                };
                let Some(d) = depth.depth_at(u, v) else {
                    return false;
                };
                let gap_limit = params.depth_gap_rel * d as f64;
                neighbors4(u, v, w, h).all(|(qu, qv)| {
                    let Some(dq) = depth.depth_at(qu, qv) else {
                        return false;
                    };
                    if ((dq - d) as f64).abs() > gap_limit {
                        return false;
                    }
                    match normals.get(qu, qv) {
                        Some(nq) => n.dot(nq) >= cos_limit,
                        None => true,
                    }
                })
            })
        })
        .collect();

    let mut instances = Raster::filled(w, h, 0u32);
    let mut visited = vec![false; w * h];
    let mut next_id = 1u32;
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if !smooth[start] || visited[start] {
            continue;
        }
        component.clear();
        visited[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (u, v) = (p % w, p / w);
            for (qu, qv) in neighbors4(u, v, w, h) {
                let q = qv * w + qu;
                if smooth[q] && !visited[q] {
                    visited[q] = true;
                    queue.push_back(q);
                }
            }
        }
        if component.len() >= params.min_area {
            for &p in &component {
                instances.data_mut()[p] = next_id;
            }
            next_id += 1;
        }
    }
    let covered = instances.map(|&id| id != 0);
    Ok(GeomSegmentation {
        covered,
        instances,
        num_instances: next_id - 1,
    })
}

fn neighbors4(u: usize, v: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let left = (u > 0).then(|| (u - 1, v));
    let right = (u + 1 < w).then(|| (u + 1, v));
    let up = (v > 0).then(|| (u, v - 1));
    let down = (v + 1 < h).then(|| (u, v + 1));
    [left, right, up, down].into_iter().flatten()
}

/// Keeps detector labels only on geometrically covered pixels.
///
/// Where detections overlap, the higher score wins, then the lower class id,
/// then the earlier detection. Detections left with no pixels are dropped.
pub fn filter_semantic(detections: &DetectionSet, geom: &GeomSegmentation) -> Result<FilteredSeg> {
    let (w, h) = (geom.covered.width(), geom.covered.height());
    for (i, det) in detections.detections.iter().enumerate() {
        if !det.mask.same_shape(&geom.covered) {
            return Err(Error::dims(
                format!("{w}x{h}"),
                format!("{}x{} (detection {i})", det.mask.width(), det.mask.height()),
            ));
        }
    }
    let mut order: Vec<usize> = (0..detections.detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections.detections[a], &detections.detections[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.class_id.cmp(&db.class_id))
            .then(a.cmp(&b))
    });

    // owner[p] = detection index + 1 of the winning detection
    let mut owner = vec![0usize; w * h];
    for &d in order.iter().rev() {
        let mask = detections.detections[d].mask.data();
        for (p, slot) in owner.iter_mut().enumerate() {
            if mask[p] && geom.covered.data()[p] {
                *slot = d + 1;
            }
        }
    }
    let mut counts = vec![0usize; detections.detections.len()];
    for &o in &owner {
        if o != 0 {
            counts[o - 1] += 1;
        }
    }
    let mut remap = vec![0u32; detections.detections.len()];
    let mut instances = Vec::new();
    for (d, det) in detections.detections.iter().enumerate() {
        if counts[d] == 0 {
            continue;
        }
        instances.push(InstanceRecord {
            class_id: det.class_id,
            probability: det.score as f64,
            pixel_count: counts[d],
            detection: d,
        });
        remap[d] = instances.len() as u32;
    }
    let labels = Raster::from_vec(
        w,
        h,
        owner.into_iter().map(|o| if o == 0 { 0 } else { remap[o - 1] }).collect(),
    )?;
    Ok(FilteredSeg { labels, instances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Detection;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap()
    }

    fn plane_depth(k: &Intrinsics, normal: Vector3<f64>, offset: f64) -> DepthMap {
        // plane n.x = offset; ray x = d * ((u-cx)/fx, (v-cy)/fy, 1)
        Raster::from_fn(k.width, k.height, |u, v| {
            let ray = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            (offset / normal.dot(&ray)) as f32
        })
    }

    #[test]
    fn fronto_parallel_normals() {
        let depth = Raster::filled(80, 60, 1.5f32);
        let normals = compute_normals(&depth, &k());
        let n = normals.get(40, 30).unwrap();
        assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-3);
        assert!(normals.get(0, 10).is_none());
        let valid = normals.data().iter().flatten().count();
        assert_eq!(valid, 78 * 58);
        for n in normals.data().iter().flatten() {
            assert!((n.norm() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn invalid_depth_neighbors_invalidate_normals() {
        let mut depth = Raster::filled(80, 60, 1.0f32);
        depth.set(20, 20, 0.0);
        let normals = compute_normals(&depth, &k());
        assert!(normals.get(20, 20).is_none());
        assert!(normals.get(19, 20).is_none());
        assert!(normals.get(21, 20).is_none());
        assert!(normals.get(20, 19).is_none());
        assert!(normals.get(20, 21).is_none());
        assert!(normals.get(19, 19).is_some());
    }

    #[test]
    fn tilted_plane_matches_analytic_normal() {
        let tilt = 30f64.to_radians();
        // plane through (0,0,2) tilted about the x axis, facing the camera
        let n = Vector3::new(0.0, tilt.sin(), -tilt.cos());
        let offset = n.dot(&Vector3::new(0.0, 0.0, 2.0));
        let depth = plane_depth(&k(), n, offset);
        let normals = compute_normals(&depth, &k());
        for est in normals.data().iter().flatten() {
            assert!((est - n).norm() < 1e-2, "{est:?} vs {n:?}");
        }
    }

    #[test]
    fn depth_step_splits_two_instances() {
        let depth = Raster::from_fn(80, 60, |u, _| if u < 40 { 1.0f32 } else { 2.0 });
        let normals = compute_normals(&depth, &k());
        let seg = geometric_segment(&normals, &depth, &SegmentParams::default()).unwrap();
        assert_eq!(seg.num_instances, 2);
        assert_ne!(seg.instances.get(10, 30), seg.instances.get(70, 30));
    }

    #[test]
    fn single_plane_single_instance() {
        let depth = Raster::filled(80, 60, 1.0f32);
        let normals = compute_normals(&depth, &k());
        let seg = geometric_segment(&normals, &depth, &SegmentParams::default()).unwrap();
        assert_eq!(seg.num_instances, 1);
        assert_eq!(seg.covered.count(), normals.data().iter().flatten().count());
    }

    #[test]
    fn instance_count_monotone_in_min_area() {
        let depth = Raster::from_fn(80, 60, |u, v| {
            if u < 20 {
                1.0f32
            } else if v < 15 {
                1.5
            } else if u < 60 {
                2.0
            } else {
                3.0
            }
        });
        let normals = compute_normals(&depth, &k());
        let mut last = u32::MAX;
        for min_area in [1, 50, 200, 500, 1000, 2000, 5000] {
            let params = SegmentParams {
                min_area,
                ..Default::default()
            };
            let seg = geometric_segment(&normals, &depth, &params).unwrap();
            assert!(seg.num_instances <= last);
            last = seg.num_instances;
            // id > 0 iff covered
            for (id, c) in seg.instances.data().iter().zip(seg.covered.data()) {
                assert_eq!(*id > 0, *c);
            }
        }
        let rerun = geometric_segment(&normals, &depth, &SegmentParams::default()).unwrap();
        assert_eq!(rerun, geometric_segment(&normals, &depth, &SegmentParams::default()).unwrap());
    }

    fn geom_left_half() -> GeomSegmentation {
        let instances = Raster::from_fn(20, 10, |u, _| if u < 10 { 1 } else { 0 });
        GeomSegmentation {
            covered: instances.map(|&i| i != 0),
            instances,
            num_instances: 1,
        }
    }

    fn det(class_id: u16, score: f32, f: impl FnMut(usize, usize) -> bool) -> Detection {
        Detection {
            class_id,
            score,
            mask: Raster::from_fn(20, 10, f),
        }
    }

    #[test]
    fn detection_outside_coverage_is_removed() {
        let dets = DetectionSet {
            frame_id: "0".into(),
            detections: vec![det(3, 0.9, |u, _| u >= 12)],
        };
        let out = filter_semantic(&dets, &geom_left_half()).unwrap();
        assert!(out.instances.is_empty());
        assert!(out.labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn detection_inside_coverage_is_kept() {
        let dets = DetectionSet {
            frame_id: "0".into(),
            detections: vec![det(3, 0.9, |u, v| u < 5 && v < 5)],
        };
        let out = filter_semantic(&dets, &geom_left_half()).unwrap();
        assert_eq!(out.instances.len(), 1);
        assert_eq!(out.instances[0].pixel_count, 25);
        assert_eq!(out.instance_mask(0), dets.detections[0].mask);
    }

    #[test]
    fn straddling_detection_is_intersected() {
        let dets = DetectionSet {
            frame_id: "0".into(),
            detections: vec![det(3, 0.9, |u, v| (5..15).contains(&u) && v % 2 == 0)],
        };
        let geom = geom_left_half();
        let out = filter_semantic(&dets, &geom).unwrap();
        let mut brute = 0;
        for v in 0..10 {
            for u in 0..20 {
                let expected = *dets.detections[0].mask.get(u, v) && *geom.covered.get(u, v);
                brute += expected as usize;
                assert_eq!(out.is_labeled(u, v), expected);
            }
        }
        assert_eq!(out.instances[0].pixel_count, brute);
    }

    #[test]
    fn overlaps_resolved_by_score_then_class() {
        let geom = geom_left_half();
        let dets = DetectionSet {
            frame_id: "0".into(),
            detections: vec![
                det(7, 0.8, |u, _| u < 8),
                det(5, 0.95, |u, _| u < 4),
                det(2, 0.8, |u, _| u < 6),
            ],
        };
        let out = filter_semantic(&dets, &geom).unwrap();
        assert_eq!(out.instance_at(1, 1).unwrap().class_id, 5);
        assert_eq!(out.instance_at(5, 1).unwrap().class_id, 2);
        assert_eq!(out.instance_at(7, 1).unwrap().class_id, 7);
        assert!(out.instance_at(9, 1).is_none());
    }

    #[test]
    fn mask_shape_mismatch_rejected() {
        let dets = DetectionSet {
            frame_id: "0".into(),
            detections: vec![Detection {
                class_id: 1,
                score: 0.5,
                mask: Raster::filled(3, 3, true),
            }],
        };
        assert!(filter_semantic(&dets, &geom_left_half()).is_err());
    }
}
