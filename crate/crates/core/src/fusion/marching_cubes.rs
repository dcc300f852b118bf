use std::collections::HashMap;

use nalgebra::Point3;
use rayon::prelude::*;

use super::mc_tables::{EDGE_TABLE, TRIANGLE_TABLE};
use super::mesh::Mesh;
use super::tsdf::{voxel_in_block, TsdfVolume, VoxelIndex, BLOCK_VOXELS};

const CORNERS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Identity of a surface vertex, shared between neighboring cubes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum VertexKey {
    /// Crossing strictly inside the lattice edge from `voxel` along `axis`.
    Edge { voxel: VoxelIndex, axis: u8 },
    /// Crossing exactly on a lattice point.
    Corner(VoxelIndex),
}

fn add(a: VoxelIndex, b: [i32; 3]) -> VoxelIndex {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

struct BlockPatch {
    triangles: Vec<[VertexKey; 3]>,
    positions: HashMap<VertexKey, Point3<f64>>,
}

fn cube_corner_values(vol: &TsdfVolume, g: VoxelIndex) -> Option<[f32; 8]> {
    let mut vals = [0f32; 8];
    for (i, c) in CORNERS.iter().enumerate() {
        vals[i] = vol.voxel(add(g, *c))?.0;
    }
    Some(vals)
}

fn polygonize_cube(vol: &TsdfVolume, g: VoxelIndex, patch: &mut BlockPatch) {
    let Some(vals) = cube_corner_values(vol, g) else {
        return;
    };
    let mut case = 0usize;
    for (i, &v) in vals.iter().enumerate() {
        if v < 0.0 {
            case |= 1 << i;
        }
    }
    if EDGE_TABLE[case] == 0 {
        return;
    }
    let grid = vol.grid();
    let mut keys: [Option<VertexKey>; 12] = [None; 12];
    for (e, &[a, b]) in EDGES.iter().enumerate() {
        if EDGE_TABLE[case] & (1 << e) == 0 {
            continue;
        }
        let (ga, gb) = (add(g, CORNERS[a]), add(g, CORNERS[b]));
        let (va, vb) = (vals[a] as f64, vals[b] as f64);
        let t = va / (va - vb);
        let (pa, pb) = (grid.center(ga), grid.center(gb));
        let key = if t <= 0.0 {
            VertexKey::Corner(ga)
        } else if t >= 1.0 {
            VertexKey::Corner(gb)
        } else {
            let (lo, hi, lo_val, hi_val) = if ga <= gb { (ga, gb, va, vb) } else { (gb, ga, vb, va) };
            let axis = (0..3).find(|&i| lo[i] != hi[i]).unwrap_or(0) as u8;
            let key = VertexKey::Edge { voxel: lo, axis };
            // Interpolate from the canonical endpoint so shared edges agree bit for bit.
            let t = lo_val / (lo_val - hi_val);
            let (pl, ph) = (grid.center(lo), grid.center(hi));
            patch.positions.entry(key).or_insert_with(|| pl + (ph - pl) * t);
            keys[e] = Some(key);
            continue;
        };
        let p = if matches!(key, VertexKey::Corner(c) if c == ga) { pa } else { pb };
        patch.positions.entry(key).or_insert(p);
        keys[e] = Some(key);
    }
    for tri in TRIANGLE_TABLE[case].chunks(3) {
        if tri[0] < 0 {
            break;
        }
        let k = [
            keys[tri[0] as usize],
            keys[tri[1] as usize],
            keys[tri[2] as usize],
        ];
        if let [Some(a), Some(b), Some(c)] = k {
            if a != b && b != c && a != c {
                patch.triangles.push([a, b, c]);
            }
        }
    }
}

/// Extracts the zero level set of every cube whose eight corners are observed.
///
/// Blocks are visited in ascending key order, so the output is deterministic.
pub fn extract_mesh(vol: &TsdfVolume) -> Mesh {
    let keys = vol.sorted_block_keys();
    let patches: Vec<BlockPatch> = keys
        .par_iter()
        .map(|&key| {
            let mut patch = BlockPatch {
                triangles: Vec::new(),
                positions: HashMap::new(),
            };
            let block = vol.block(key).expect("key from volume");
            for o in 0..BLOCK_VOXELS {
                if block.weight[o] > 0.0 {
                    polygonize_cube(vol, voxel_in_block(key, o), &mut patch);
                }
            }
            patch
        })
        .collect();

    let mut index: HashMap<VertexKey, u32> = HashMap::new();
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for patch in &patches {
        for tri in &patch.triangles {
            let ids = tri.map(|k| {
                *index.entry(k).or_insert_with(|| {
                    vertices.push(patch.positions[&k]);
                    (vertices.len() - 1) as u32
                })
            });
            let [a, b, c] = ids.map(|i| vertices[i as usize]);
            if (b - a).cross(&(c - a)).norm() > 0.0 {
                triangles.push(ids);
            }
        }
    }
    let mut mesh = Mesh {
        vertices,
        triangles,
        labels: None,
        colors: None,
    };
    mesh.drop_unreferenced();
    mesh
}
