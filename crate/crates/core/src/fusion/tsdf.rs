use std::collections::{HashMap, HashSet};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{unproject_unchecked, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::raster::DepthMap;

/// Voxels per block edge.
pub const BLOCK_SIDE: i32 = 8;
pub const BLOCK_VOXELS: usize = (BLOCK_SIDE * BLOCK_SIDE * BLOCK_SIDE) as usize;

pub type VoxelIndex = [i32; 3];
pub type BlockIndex = [i32; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsdfConfig {
    /// Voxel edge length, meters.
    pub voxel_size: f64,
    /// Truncation distance in meters; `None` means four voxels.
    pub truncation: Option<f64>,
    pub max_weight: f32,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            truncation: None,
            max_weight: 128.0,
        }
    }
}

impl TsdfConfig {
    pub fn truncation_distance(&self) -> f64 {
        self.truncation.unwrap_or(4.0 * self.voxel_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::InvalidParameter {
                name: "voxel_size",
                reason: format!("must be positive, got {}", self.voxel_size),
            });
        }
        let tau = self.truncation_distance();
        if !(tau >= self.voxel_size) || !tau.is_finite() {
            return Err(Error::InvalidParameter {
                name: "truncation",
                reason: format!("must be at least one voxel, got {tau}"),
            });
        }
        if !(self.max_weight >= 1.0) {
            return Err(Error::InvalidParameter {
                name: "max_weight",
                reason: format!("must be at least 1, got {}", self.max_weight),
            });
        }
        Ok(())
    }
}

/// Geometry of the voxel lattice: voxel `g` spans
/// `[origin + g * size, origin + (g + 1) * size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub voxel_size: f64,
}

impl VoxelGrid {
    pub fn center(&self, g: VoxelIndex) -> Point3<f64> {
        Point3::new(
            self.origin[0] + (g[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (g[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (g[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    pub fn containing(&self, p: &Point3<f64>) -> VoxelIndex {
        [
            ((p.x - self.origin[0]) / self.voxel_size).floor() as i32,
            ((p.y - self.origin[1]) / self.voxel_size).floor() as i32,
            ((p.z - self.origin[2]) / self.voxel_size).floor() as i32,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub tsdf: Box<[f32]>,
    pub weight: Box<[f32]>,
}

impl Block {
    fn new() -> Self {
        Self {
            tsdf: vec![1.0; BLOCK_VOXELS].into_boxed_slice(),
            weight: vec![0.0; BLOCK_VOXELS].into_boxed_slice(),
        }
    }

    fn is_untouched(&self) -> bool {
        self.weight.iter().all(|&w| w == 0.0)
    }
}

#[inline]
pub fn block_of(g: VoxelIndex) -> BlockIndex {
    [
        g[0].div_euclid(BLOCK_SIDE),
        g[1].div_euclid(BLOCK_SIDE),
        g[2].div_euclid(BLOCK_SIDE),
    ]
}

#[inline]
fn offset_in_block(g: VoxelIndex) -> usize {
    let l = [
        g[0].rem_euclid(BLOCK_SIDE),
        g[1].rem_euclid(BLOCK_SIDE),
        g[2].rem_euclid(BLOCK_SIDE),
    ];
    ((l[2] * BLOCK_SIDE + l[1]) * BLOCK_SIDE + l[0]) as usize
}

#[inline]
pub fn voxel_in_block(b: BlockIndex, offset: usize) -> VoxelIndex {
    let o = offset as i32;
    [
        b[0] * BLOCK_SIDE + o % BLOCK_SIDE,
        b[1] * BLOCK_SIDE + (o / BLOCK_SIDE) % BLOCK_SIDE,
        b[2] * BLOCK_SIDE + o / (BLOCK_SIDE * BLOCK_SIDE),
    ]
}

/// Sparse block-hashed truncated signed distance volume.
///
/// Values are normalized by the truncation distance, so `|tsdf| <= 1`.
/// Only blocks that received at least one observation are stored.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    grid: VoxelGrid,
    truncation: f64,
    max_weight: f32,
    blocks: HashMap<BlockIndex, Block>,
}

impl TsdfVolume {
    pub fn new(config: &TsdfConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            grid: VoxelGrid {
                origin: [0.0; 3],
                voxel_size: config.voxel_size,
            },
            truncation: config.truncation_distance(),
            max_weight: config.max_weight,
            blocks: HashMap::new(),
        })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn voxel_size(&self) -> f64 {
        self.grid.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Block keys in ascending order.
    pub fn sorted_block_keys(&self) -> Vec<BlockIndex> {
        let mut keys: Vec<_> = self.blocks.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub fn block(&self, key: BlockIndex) -> Option<&Block> {
        self.blocks.get(&key)
    }

    /// `(tsdf, weight)` of an observed voxel.
    #[inline]
    pub fn voxel(&self, g: VoxelIndex) -> Option<(f32, f32)> {
        let block = self.blocks.get(&block_of(g))?;
        let o = offset_in_block(g);
        let w = block.weight[o];
        (w > 0.0).then(|| (block.tsdf[o], w))
    }

    /// Observed voxels in ascending block order.
    pub fn observed_voxels(&self) -> impl Iterator<Item = (VoxelIndex, f32, f32)> + '_ {
        self.sorted_block_keys().into_iter().flat_map(move |key| {
            let block = &self.blocks[&key];
            (0..BLOCK_VOXELS)
                .filter(move |&o| block.weight[o] > 0.0)
                .map(move |o| (voxel_in_block(key, o), block.tsdf[o], block.weight[o]))
        })
    }

    /// Writes a signed distance observation directly into one voxel.
    pub fn set_voxel(&mut self, g: VoxelIndex, sdf: f64, weight: f32) {
        let block = self.blocks.entry(block_of(g)).or_insert_with(Block::new);
        let o = offset_in_block(g);
        block.tsdf[o] = (sdf / self.truncation).clamp(-1.0, 1.0) as f32;
        block.weight[o] = weight.min(self.max_weight);
    }

    /// Fills the truncation band of an analytic signed distance field inside
    /// the axis-aligned box `[min, max]`.
    pub fn fill_from_sdf(&mut self, min: Point3<f64>, max: Point3<f64>, sdf: impl Fn(&Point3<f64>) -> f64 + Sync) {
        let lo = self.grid.containing(&min);
        let hi = self.grid.containing(&max);
        let grid = self.grid;
        let tau = self.truncation;
        let hits: Vec<(VoxelIndex, f64)> = (lo[2]..=hi[2])
            .into_par_iter()
            .flat_map_iter(|z| {
                let sdf = &sdf;
                (lo[1]..=hi[1]).flat_map(move |y| {
                    (lo[0]..=hi[0]).filter_map(move |x| {
                        let g = [x, y, z];
                        let d = sdf(&grid.center(g));
                        (d.abs() <= tau).then_some((g, d))
                    })
                })
            })
            .collect();
        for (g, d) in hits {
            self.set_voxel(g, d, 1.0);
        }
    }

    /// Fuses one depth frame observed from a camera-from-world pose.
    ///
    /// Every voxel whose projective signed distance to the observed depth
    /// lies within the truncation band is updated by a weight-1 running
    /// average; voxels outside the band are left untouched.
    pub fn integrate(&mut self, depth: &DepthMap, camera_from_world: &Pose, k: &Intrinsics) -> Result<()> {
        if depth.width() != k.width || depth.height() != k.height {
            return Err(Error::dims(
                format!("{}x{}", k.width, k.height),
                format!("{}x{}", depth.width(), depth.height()),
            ));
        }
        let world_from_camera = camera_from_world.inverse();
        let keys = self.frame_blocks(depth, &world_from_camera, k);

        let mut work: Vec<(BlockIndex, Block)> = keys
            .iter()
            .map(|key| (*key, self.blocks.remove(key).unwrap_or_else(Block::new)))
            .collect();
        let grid = self.grid;
        let tau = self.truncation;
        let max_weight = self.max_weight;
        work.par_iter_mut().for_each(|(key, block)| {
            for o in 0..BLOCK_VOXELS {
                let center = grid.center(voxel_in_block(*key, o));
                let pc = camera_from_world.transform_point(&center);
                if !(pc.z > 0.0) {
                    continue;
                }
                let u = k.fx * pc.x / pc.z + k.cx;
                let v = k.fy * pc.y / pc.z + k.cy;
                let Some((iu, iv)) = k.pixel_of(u, v) else {
                    continue;
                };
                let Some(d) = depth.depth_at(iu, iv) else {
                    continue;
                };
                let sdf = d as f64 - pc.z;
                if sdf.abs() > tau {
                    continue;
                }
                let obs = (sdf / tau) as f32;
                let w = block.weight[o];
                block.tsdf[o] = ((block.tsdf[o] * w + obs) / (w + 1.0)).clamp(-1.0, 1.0);
                block.weight[o] = (w + 1.0).min(max_weight);
            }
        });
        for (key, block) in work {
            if !block.is_untouched() {
                self.blocks.insert(key, block);
            }
        }
        Ok(())
    }

    /// Blocks crossed by the truncation band of every valid depth pixel.
    fn frame_blocks(&self, depth: &DepthMap, world_from_camera: &Pose, k: &Intrinsics) -> Vec<BlockIndex> {
        let tau = self.truncation;
        let grid = self.grid;
        let sets: Vec<HashSet<BlockIndex>> = (0..depth.height())
            .into_par_iter()
            .map(|v| {
                let mut set = HashSet::new();
                let mut last = None;
                for u in 0..depth.width() {
                    let Some(d) = depth.depth_at(u, v) else {
                        continue;
                    };
                    let d = d as f64;
                    let near = (d - tau).max(1e-6);
                    let a = world_from_camera.transform_point(&unproject_unchecked(k, u as f64, v as f64, near));
                    let b = world_from_camera.transform_point(&unproject_unchecked(k, u as f64, v as f64, d + tau));
                    traverse_blocks(&grid, &a, &b, |key| {
                        if last != Some(key) {
                            set.insert(key);
                            last = Some(key);
                        }
                    });
                }
                set
            })
            .collect();
        let mut all: Vec<BlockIndex> = sets.into_iter().flatten().collect::<HashSet<_>>().into_iter().collect();
        all.sort_unstable();
        all
    }

    /// Trilinear-free lookup of the signed distance (meters) at the voxel containing `p`.
    pub fn sdf_at(&self, p: &Point3<f64>) -> Option<f64> {
        self.voxel(self.grid.containing(p)).map(|(t, _)| t as f64 * self.truncation)
    }

    pub fn world_to_voxel(&self, p: &Vector3<f64>) -> VoxelIndex {
        self.grid.containing(&Point3::from(*p))
    }
}

/// Visits every block the segment `a`-`b` passes through, in order.
fn traverse_blocks(grid: &VoxelGrid, a: &Point3<f64>, b: &Point3<f64>, mut visit: impl FnMut(BlockIndex)) {
    let side = grid.voxel_size * BLOCK_SIDE as f64;
    let start = block_of(grid.containing(a));
    let end = block_of(grid.containing(b));
    let qa = (a - Point3::from(grid.origin)) / side;
    let dir = (b - a) / side;
    let mut cell = start;
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0i32; 3];
    for i in 0..3 {
        if dir[i] > 0.0 {
            step[i] = 1;
            t_max[i] = ((cell[i] + 1) as f64 - qa[i]) / dir[i];
            t_delta[i] = 1.0 / dir[i];
        } else if dir[i] < 0.0 {
            step[i] = -1;
            t_max[i] = (cell[i] as f64 - qa[i]) / dir[i];
            t_delta[i] = -1.0 / dir[i];
        }
    }
    let budget = (0..3).map(|i| (end[i] - start[i]).unsigned_abs()).sum::<u32>() + 3;
    visit(cell);
    for _ in 0..budget {
        if cell == end {
            return;
        }
        let i = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[i] > 1.0 {
            break;
        }
        cell[i] += step[i];
        t_max[i] += t_delta[i];
        visit(cell);
    }
    if cell != end {
        visit(end);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    #[test]
    fn traversal_covers_dense_samples() {
        let grid = VoxelGrid {
            origin: [0.0; 3],
            voxel_size: 0.03,
        };
        let mut rng = 12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..500 {
            let a = Point3::new(next(), next(), next());
            let b = a + Vector3::new(next(), next(), next()) * 0.3;
            let mut seen = HashSet::new();
            traverse_blocks(&grid, &a, &b, |k| {
                seen.insert(k);
            });
            for i in 0..=2000 {
                let p = a + (b - a) * (i as f64 / 2000.0);
                assert!(seen.contains(&block_of(grid.containing(&p))));
            }
            assert!(seen.len() <= 12);
        }
    }

    #[test]
    fn block_indexing_round_trips() {
        for g in [[0, 0, 0], [-1, -1, -1], [7, 8, -9], [-17, 33, 5]] {
            let b = block_of(g);
            assert_eq!(voxel_in_block(b, offset_in_block(g)), g);
        }
    }

    #[test]
    fn integrate_only_touches_band() {
        let k = Intrinsics::new(50.0, 50.0, 20.0, 15.0, 40, 30).unwrap();
        let mut vol = TsdfVolume::new(&TsdfConfig {
            voxel_size: 0.02,
            ..Default::default()
        })
        .unwrap();
        let depth = Raster::filled(40, 30, 1.0f32);
        let pose = Pose::look_at(Point3::origin(), Point3::new(0.0, 0.0, 1.0), -Vector3::y()).unwrap();
        vol.integrate(&depth, &pose, &k).unwrap();
        assert!(!vol.is_empty());
        for (g, t, w) in vol.observed_voxels() {
            assert!(t.abs() <= 1.0);
            assert_eq!(w, 1.0);
            let z = vol.grid().center(g).z;
            assert!((z - 1.0).abs() <= vol.truncation() + 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TsdfVolume::new(&TsdfConfig {
            voxel_size: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(TsdfVolume::new(&TsdfConfig {
            truncation: Some(0.001),
            ..Default::default()
        })
        .is_err());
    }
}
