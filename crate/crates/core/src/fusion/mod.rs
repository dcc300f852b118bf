//! Volumetric depth fusion and surface extraction.

mod marching_cubes;
mod mc_tables;
mod mesh;
mod tsdf;

pub use marching_cubes::extract_mesh;
pub use mesh::{argmax_class, class_color, transfer_labels, Mesh, UNLABELED};
pub use tsdf::{
    block_of, Block, BlockIndex, TsdfConfig, TsdfVolume, VoxelGrid, VoxelIndex, BLOCK_SIDE, BLOCK_VOXELS,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::raster::Raster;
    use nalgebra::{Point3, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn small_k() -> Intrinsics {
        Intrinsics::new(80.0, 80.0, 40.0, 30.0, 80, 60).unwrap()
    }

    fn forward_pose() -> Pose {
        Pose::look_at(Point3::origin(), Point3::new(0.0, 0.0, 1.0), -Vector3::y()).unwrap()
    }

    fn volume(voxel: f64) -> TsdfVolume {
        TsdfVolume::new(&TsdfConfig {
            voxel_size: voxel,
            ..Default::default()
        })
        .unwrap()
    }

    /// Zero crossing of the voxel column through `(x, y)` by linear interpolation.
    fn column_crossing(vol: &TsdfVolume, gx: i32, gy: i32) -> Option<f64> {
        let mut prev: Option<(f64, f32)> = None;
        for gz in -100..200 {
            let Some((t, _)) = vol.voxel([gx, gy, gz]) else {
                prev = None;
                continue;
            };
            let z = vol.grid().center([gx, gy, gz]).z;
            if let Some((pz, pt)) = prev {
                if pt >= 0.0 && t < 0.0 {
                    return Some(pz + (z - pz) * (pt as f64 / (pt - t) as f64));
                }
            }
            prev = Some((z, t));
        }
        None
    }

    #[test]
    fn single_plane_frame_crosses_at_depth() {
        let mut vol = volume(0.05);
        let depth = Raster::filled(80, 60, 1.0f32);
        vol.integrate(&depth, &forward_pose(), &small_k()).unwrap();
        for (gx, gy) in [(0, 0), (-1, -1), (2, -3), (-4, 3)] {
            let z = column_crossing(&vol, gx, gy).expect("crossing");
            assert!((z - 1.0).abs() <= 0.025 + 1e-9, "column ({gx},{gy}) crosses at {z}");
        }
    }

    #[test]
    fn identical_frame_twice_doubles_weight() {
        let mut once = volume(0.05);
        let depth = Raster::from_fn(80, 60, |u, v| 1.0 + 0.002 * (u + v) as f32);
        once.integrate(&depth, &forward_pose(), &small_k()).unwrap();
        let mut twice = once.clone();
        twice.integrate(&depth, &forward_pose(), &small_k()).unwrap();
        let a: Vec<_> = once.observed_voxels().collect();
        let b: Vec<_> = twice.observed_voxels().collect();
        assert_eq!(a.len(), b.len());
        for ((ga, ta, wa), (gb, tb, wb)) in a.into_iter().zip(b) {
            assert_eq!(ga, gb);
            assert!((ta - tb).abs() < 1e-6);
            assert_eq!(wb, 2.0 * wa);
        }
    }

    #[test]
    fn weight_is_capped() {
        let mut vol = TsdfVolume::new(&TsdfConfig {
            voxel_size: 0.05,
            max_weight: 3.0,
            ..Default::default()
        })
        .unwrap();
        let depth = Raster::filled(80, 60, 1.0f32);
        for _ in 0..5 {
            vol.integrate(&depth, &forward_pose(), &small_k()).unwrap();
        }
        assert!(vol.observed_voxels().all(|(_, t, w)| w <= 3.0 && t.abs() <= 1.0));
    }

    #[test]
    fn noisy_plane_frames_average_out() {
        let k = small_k();
        let mut vol = volume(0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0f32, 0.005).unwrap();
        for _ in 0..20 {
            let depth = Raster::from_fn(80, 60, |_, _| 1.0 + noise.sample(&mut rng));
            vol.integrate(&depth, &forward_pose(), &k).unwrap();
        }
        let mesh = extract_mesh(&vol);
        assert!(!mesh.vertices.is_empty());
        let mean = mesh.vertices.iter().map(|v| (v.z - 1.0).abs()).sum::<f64>() / mesh.vertices.len() as f64;
        assert!(mean < 0.002, "mean plane error {mean}");
    }

    #[test]
    fn analytic_sphere_mesh_is_accurate() {
        let mut vol = volume(0.01);
        vol.fill_from_sdf(Point3::new(-0.6, -0.6, -0.6), Point3::new(0.6, 0.6, 0.6), |p| {
            p.coords.norm() - 0.5
        });
        let mesh = extract_mesh(&vol);
        mesh.validate().unwrap();
        assert!(mesh.vertices.len() > 1000);
        let mean = mesh
            .vertices
            .iter()
            .map(|v| (v.coords.norm() - 0.5).abs())
            .sum::<f64>()
            / mesh.vertices.len() as f64;
        assert!(mean < 0.005, "mean radial error {mean}");
        assert!(mesh.vertices.iter().all(|v| (v.coords.norm() - 0.5).abs() < 0.01));
    }

    #[test]
    fn integration_order_invariance() {
        let k = small_k();
        let frames: Vec<(Raster<f32>, Pose)> = (0..4)
            .map(|i| {
                let eye = Point3::new(0.05 * i as f64, -0.03 * i as f64, 0.0);
                let pose = Pose::look_at(eye, Point3::new(0.0, 0.0, 1.2), -Vector3::y()).unwrap();
                let depth = Raster::from_fn(80, 60, |u, v| 1.1 + 0.001 * ((u * 7 + v * 3 + i * 11) % 13) as f32);
                (depth, pose)
            })
            .collect();
        let run = |order: &[usize]| {
            let mut vol = volume(0.03);
            for &i in order {
                vol.integrate(&frames[i].0, &frames[i].1, &k).unwrap();
            }
            vol.observed_voxels().collect::<Vec<_>>()
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[3, 1, 0, 2]);
        assert_eq!(a.len(), b.len());
        for ((ga, ta, wa), (gb, tb, wb)) in a.into_iter().zip(b) {
            assert_eq!(ga, gb);
            assert_eq!(wa, wb);
            assert!((ta - tb).abs() <= 1e-6);
        }
    }

    #[test]
    fn mesh_extraction_is_deterministic() {
        let mut vol = volume(0.02);
        vol.fill_from_sdf(Point3::new(-0.3, -0.3, -0.3), Point3::new(0.3, 0.3, 0.3), |p| {
            p.coords.norm() - 0.2
        });
        let a = extract_mesh(&vol);
        let b = extract_mesh(&vol.clone());
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_depth_is_skipped() {
        let mut vol = volume(0.05);
        let depth = Raster::filled(80, 60, 0.0f32);
        vol.integrate(&depth, &forward_pose(), &small_k()).unwrap();
        assert!(vol.is_empty());
        let wrong = Raster::filled(10, 10, 1.0f32);
        assert!(vol.integrate(&wrong, &forward_pose(), &small_k()).is_err());
    }
}
