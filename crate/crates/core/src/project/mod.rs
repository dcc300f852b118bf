//! Multi-view feature projection onto surface voxels.
//!
//! Surface voxels are observed in each keyframe through a visibility mask;
//! the feature vector at the projected pixel becomes that voxel's per-view
//! entry. Views are stacked, aggregated by sparse convolutions with a
//! max-pool over views, and concatenated with point-cloud features.

mod dot;
mod features;
mod vote;

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::camera::{project, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::fusion::{Mesh, VoxelGrid, VoxelIndex};
use crate::raster::{DepthMap, Mask};

pub use dot::{aggregate_dot, DoTLayer, DoTWeights, AGGREGATED_CHANNELS, PYRAMID_CHANNELS};
pub use features::{level_shape, FeatureImage, SparseFeatures, VoxelFeatureStack, MAX_FEATURE_HEIGHT, MAX_FEATURE_WIDTH};
pub use vote::{
    class_probability_image, label_vote_fusion, ClassProbabilityProvider, FeatureProvider, FileFeatureProvider,
};

/// Visibility tolerance in voxels.
pub const DEFAULT_OCCLUSION_VOXELS: f64 = 1.5;

/// Surface voxels, each represented by one point inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPoints {
    pub grid: VoxelGrid,
    pub coords: Vec<VoxelIndex>,
    pub points: Vec<Point3<f64>>,
}

impl VoxelPoints {
    /// Unique voxels containing at least one mesh vertex, in ascending
    /// order, each represented by the centroid of its vertices so the point
    /// lies on the surface.
    pub fn from_mesh(mesh: &Mesh, grid: &VoxelGrid) -> Self {
        let mut sums: BTreeMap<VoxelIndex, (Vector3<f64>, usize)> = BTreeMap::new();
        for v in &mesh.vertices {
            let e = sums.entry(grid.containing(v)).or_insert((Vector3::zeros(), 0));
            e.0 += v.coords;
            e.1 += 1;
        }
        let (coords, points) = sums
            .into_iter()
            .map(|(g, (sum, n))| (g, Point3::from(sum / n as f64)))
            .unzip();
        Self {
            grid: *grid,
            coords,
            points,
        }
    }

    /// Voxels represented by their centers.
    pub fn from_coords(grid: &VoxelGrid, coords: Vec<VoxelIndex>) -> Self {
        let points = coords.iter().map(|&g| grid.center(g)).collect();
        Self {
            grid: *grid,
            coords,
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn lookup(&self) -> HashMap<VoxelIndex, usize> {
        self.coords.iter().enumerate().map(|(i, &g)| (g, i)).collect()
    }

    /// Keys per-point distributions by voxel coordinate.
    pub fn distribution_map(&self, dists: &[Option<Vec<f32>>]) -> HashMap<VoxelIndex, Vec<f32>> {
        self.coords
            .iter()
            .zip(dists)
            .filter_map(|(g, d)| d.as_ref().map(|d| (*g, d.clone())))
            .collect()
    }
}

/// Per-point visibility in one view, with the pixel that witnessed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionMask {
    pub width: usize,
    pub height: usize,
    hits: Vec<Option<u32>>,
}

impl IntersectionMask {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn get(&self, n: usize) -> bool {
        self.hits[n].is_some()
    }

    /// Contributing pixel `(u, v)` of a visible point.
    pub fn pixel(&self, n: usize) -> Option<(usize, usize)> {
        self.hits[n].map(|i| (i as usize % self.width, i as usize / self.width))
    }

    pub fn count(&self) -> usize {
        self.hits.iter().filter(|h| h.is_some()).count()
    }

    pub fn all_false(n: usize, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            hits: vec![None; n],
        }
    }
}

/// Marks the points that project inside the image, agree with the observed
/// depth within `eps_occ` meters, and land on a labeled pixel.
pub fn intersection_mask(
    points: &[Point3<f64>],
    camera_from_world: &Pose,
    k: &Intrinsics,
    depth: &DepthMap,
    labeled: &Mask,
    eps_occ: f64,
) -> Result<IntersectionMask> {
    depth.ensure_same_shape(labeled)?;
    if depth.width() != k.width || depth.height() != k.height {
        return Err(Error::dims(
            format!("{}x{}", k.width, k.height),
            format!("{}x{}", depth.width(), depth.height()),
        ));
    }
    let hits = points
        .par_iter()
        .map(|p| {
            let px = project(k, camera_from_world, p)?;
            let (u, v) = k.pixel_of(px.u, px.v)?;
            let d = depth.depth_at(u, v)?;
            if (px.depth - d as f64).abs() > eps_occ || !*labeled.get(u, v) {
                return None;
            }
            Some(depth.index(u, v) as u32)
        })
        .collect();
    Ok(IntersectionMask {
        width: k.width,
        height: k.height,
        hits,
    })
}

/// Copies, for every visible point, the feature vector at its projected
/// location on the level raster.
pub fn project_features(
    feat: &FeatureImage,
    mask: &IntersectionMask,
    points: &[Point3<f64>],
    camera_from_world: &Pose,
    k: &Intrinsics,
) -> Result<SparseFeatures> {
    let (w, h) = level_shape(k, feat.level)?;
    if feat.width != w || feat.height != h {
        return Err(Error::dims(
            format!("{w}x{h} raster for level {}", feat.level),
            format!("{}x{}", feat.width, feat.height),
        ));
    }
    if mask.len() != points.len() {
        return Err(Error::dims(points.len(), mask.len()));
    }
    let sx = w as f64 / k.width as f64;
    let sy = h as f64 / k.height as f64;
    let mut out = SparseFeatures::empty(feat.level, feat.channels, points.len());
    for (n, p) in points.iter().enumerate() {
        if !mask.get(n) {
            continue;
        }
        let Some(px) = project(k, camera_from_world, p) else {
            continue;
        };
        let (lu, lv) = level_pixel(px.u, px.v, sx, sy, w, h);
        out.push(n as u32, &feat.pixel(lu, lv));
    }
    Ok(out)
}

/// Nearest level-raster pixel for full-resolution coordinates.
pub(crate) fn level_pixel(u: f64, v: f64, sx: f64, sy: f64, w: usize, h: usize) -> (usize, usize) {
    let lu = ((u + 0.5) * sx).floor().clamp(0.0, (w - 1) as f64);
    let lv = ((v + 0.5) * sy).floor().clamp(0.0, (h - 1) as f64);
    (lu as usize, lv as usize)
}

/// Stacks per-view slabs over the same point set.
pub fn stack_views(slabs: Vec<SparseFeatures>) -> Result<VoxelFeatureStack> {
    VoxelFeatureStack::new(slabs)
}

/// Concatenates point-cloud features and aggregated view features per voxel.
///
/// Voxels present on only one side are zero-filled on the other.
pub fn fuse_embeddings(f3d: &SparseFeatures, hat: &SparseFeatures) -> Result<SparseFeatures> {
    if f3d.n_points != hat.n_points {
        return Err(Error::dims(f3d.n_points, hat.n_points));
    }
    let ca = f3d.channels;
    let c = ca + hat.channels;
    let mut out = SparseFeatures::empty(hat.level, c, f3d.n_points);
    let (mut i, mut j) = (0, 0);
    let (a, b) = (f3d.indices(), hat.indices());
    let mut row = vec![0f32; c];
    while i < a.len() || j < b.len() {
        let n = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        row.iter_mut().for_each(|x| *x = 0.0);
        if a.get(i) == Some(&n) {
            row[..ca].copy_from_slice(f3d.row(i));
            i += 1;
        }
        if b.get(j) == Some(&n) {
            row[ca..].copy_from_slice(hat.row(j));
            j += 1;
        }
        out.push(n, &row);
    }
    Ok(out)
}
