//! Reconstruction and semantic metrics.

use std::fmt::Write as _;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Pose;
use crate::error::{Error, Result};
use crate::fusion::{Mesh, UNLABELED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NnMode {
    #[default]
    KdTree,
    BruteForce,
}

/// Nearest-neighbor lookup over a fixed point set.
pub struct NearestIndex {
    points: Vec<[f64; 3]>,
    tree: Option<ImmutableKdTree<f64, 3>>,
}

impl NearestIndex {
    pub fn new(points: &[Point3<f64>], mode: NnMode) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("reference point set"));
        }
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = match mode {
            NnMode::KdTree => Some(ImmutableKdTree::new_from_slice(&points)),
            NnMode::BruteForce => None,
        };
        Ok(Self { points, tree })
    }

    /// Index of and Euclidean distance to the nearest reference point.
    /// Brute force breaks distance ties by lowest index.
    pub fn nearest(&self, q: &Point3<f64>) -> (usize, f64) {
        let q = [q.x, q.y, q.z];
        match &self.tree {
            Some(tree) => {
                let nn = tree.nearest_one::<SquaredEuclidean>(&q);
                (nn.item as usize, nn.distance.sqrt())
            }
            None => {
                let mut best = (0usize, f64::INFINITY);
                for (i, p) in self.points.iter().enumerate() {
                    let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                (best.0, best.1.sqrt())
            }
        }
    }
}

/// Mean distance in centimeters from each reconstructed vertex to the
/// nearest ground-truth sample, after an optional rigid alignment of the mesh.
pub fn recon_error(mesh: &Mesh, gt: &[Point3<f64>], alignment: Option<&Pose>, mode: NnMode) -> Result<f64> {
    if mesh.vertices.is_empty() {
        return Err(Error::Empty("reconstructed mesh"));
    }
    let index = NearestIndex::new(gt, mode)?;
    let total: f64 = mesh
        .vertices
        .par_iter()
        .map(|v| {
            let p = alignment.map_or(*v, |t| t.transform_point(v));
            index.nearest(&p).1
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(100.0 * total / mesh.vertices.len() as f64)
}

/// Ground-truth class of each query point, taken from its nearest sample.
pub fn nearest_labels(queries: &[Point3<f64>], gt: &[Point3<f64>], gt_labels: &[u16], mode: NnMode) -> Result<Vec<u16>> {
    if gt.len() != gt_labels.len() {
        return Err(Error::dims(gt.len(), gt_labels.len()));
    }
    let index = NearestIndex::new(gt, mode)?;
    Ok(queries.par_iter().map(|q| gt_labels[index.nearest(q).0]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: u16,
    pub iou: f64,
    pub accuracy: f64,
    pub gt_count: u64,
    pub pred_count: u64,
    pub true_positives: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticScores {
    /// Classes present in ground truth, ascending.
    pub classes: Vec<ClassScore>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    /// Vertices excluded because their ground truth is unannotated.
    pub unannotated: u64,
}

/// Per-class IoU and recall over vertices with annotated ground truth.
pub fn semantic_scores(pred: &[u16], gt: &[u16], num_classes: usize) -> Result<SemanticScores> {
    if pred.len() != gt.len() {
        return Err(Error::dims(gt.len(), pred.len()));
    }
    let mut tp = vec![0u64; num_classes];
    let mut gt_count = vec![0u64; num_classes];
    let mut pred_count = vec![0u64; num_classes];
    let mut unannotated = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        for c in [p, g] {
            if c as usize >= num_classes {
                return Err(Error::InvalidParameter {
                    name: "num_classes",
                    reason: format!("label {c} is outside {num_classes} classes"),
                });
            }
        }
        if g == UNLABELED {
            unannotated += 1;
            continue;
        }
        gt_count[g as usize] += 1;
        pred_count[p as usize] += 1;
        if p == g {
            tp[g as usize] += 1;
        }
    }
    let classes: Vec<ClassScore> = (1..num_classes)
        .filter(|&c| gt_count[c] > 0)
        .map(|c| {
            let union = gt_count[c] + pred_count[c] - tp[c];
            ClassScore {
                class_id: c as u16,
                iou: tp[c] as f64 / union as f64,
                accuracy: tp[c] as f64 / gt_count[c] as f64,
                gt_count: gt_count[c],
                pred_count: pred_count[c],
                true_positives: tp[c],
            }
        })
        .collect();
    let mean = |f: fn(&ClassScore) -> f64| {
        (!classes.is_empty()).then(|| classes.iter().map(f).sum::<f64>() / classes.len() as f64)
    };
    Ok(SemanticScores {
        miou: mean(|c| c.iou),
        macc: mean(|c| c.accuracy),
        classes,
        unannotated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub error_metric: String,
    pub nn_mode: NnMode,
    pub vertices: usize,
    pub gt_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recon_error_cm: Option<f64>,
    pub semantic: Option<SemanticScores>,
    pub metadata: ReportMetadata,
}

pub const ERROR_METRIC: &str =
    "mean nearest-neighbor distance from reconstructed vertices to ground-truth samples (one-sided, cm)";

impl EvalReport {
    /// Evaluates a mesh against labeled or unlabeled ground-truth samples.
    /// Semantic scores are computed when both sides carry labels.
    pub fn evaluate(pred: &Mesh, gt: &Mesh, num_classes: usize, alignment: Option<&Pose>, mode: NnMode) -> Result<Self> {
        let recon = recon_error(pred, &gt.vertices, alignment, mode)?;
        let semantic = match (&pred.labels, &gt.labels) {
            (Some(p), Some(g)) => {
                let aligned: Vec<Point3<f64>> = pred
                    .vertices
                    .iter()
                    .map(|v| alignment.map_or(*v, |t| t.transform_point(v)))
                    .collect();
                let gt_for_pred = nearest_labels(&aligned, &gt.vertices, g, mode)?;
                Some(semantic_scores(p, &gt_for_pred, num_classes)?)
            }
            _ => None,
        };
        Ok(Self {
            recon_error_cm: Some(recon),
            semantic,
            metadata: ReportMetadata {
                error_metric: ERROR_METRIC.to_string(),
                nn_mode: mode,
                vertices: pred.vertices.len(),
                gt_samples: gt.vertices.len(),
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>12}", "metric", "value");
        let fmt = |x: Option<f64>, digits: usize| x.map_or("n/a".to_string(), |v| format!("{v:.digits$}"));
        let _ = writeln!(s, "{:<22}{:>12}", "recon error (cm)", fmt(self.recon_error_cm, 3));
        if let Some(sem) = &self.semantic {
            let _ = writeln!(s, "{:<22}{:>12}", "mIoU", fmt(sem.miou, 4));
            let _ = writeln!(s, "{:<22}{:>12}", "mAcc", fmt(sem.macc, 4));
            let _ = writeln!(s, "{:<22}{:>12}", "unannotated", sem.unannotated);
            let _ = writeln!(s);
            let _ = writeln!(s, "{:>6}{:>10}{:>10}{:>10}{:>10}", "class", "IoU", "Acc", "gt", "pred");
            for c in &sem.classes {
                let _ = writeln!(
                    s,
                    "{:>6}{:>10.4}{:>10.4}{:>10}{:>10}",
                    c.class_id, c.iou, c.accuracy, c.gt_count, c.pred_count
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_samples(z: f64) -> Vec<Point3<f64>> {
        let mut v = Vec::new();
        for i in 0..=40 {
            for j in 0..=40 {
                v.push(Point3::new(i as f64 * 0.025, j as f64 * 0.025, z));
            }
        }
        v
    }

    #[test]
    fn self_error_is_zero() {
        let pts = plane_samples(0.0);
        let mesh = Mesh::point_cloud(pts.clone(), None);
        for mode in [NnMode::KdTree, NnMode::BruteForce] {
            assert_eq!(recon_error(&mesh, &pts, None, mode).unwrap(), 0.0);
        }
    }

    #[test]
    fn plane_offset_reads_one_centimeter() {
        let gt = plane_samples(0.0);
        let mesh = Mesh::point_cloud(plane_samples(0.01), None);
        let e = recon_error(&mesh, &gt, None, NnMode::KdTree).unwrap();
        assert!((e - 1.0).abs() <= 0.01, "{e}");
    }

    #[test]
    fn alignment_is_applied() {
        let gt = plane_samples(0.0);
        let mesh = Mesh::point_cloud(plane_samples(0.02), None);
        let shift = Pose::new(Default::default(), Vector3::new(0.0, 0.0, -0.02), crate::camera::Convention::WorldFromWorld);
        let e = recon_error(&mesh, &gt, Some(&shift), NnMode::BruteForce).unwrap();
        assert!(e.abs() < 1e-9);
    }

    #[test]
    fn empty_mesh_is_an_error() {
        assert!(recon_error(&Mesh::default(), &plane_samples(0.0), None, NnMode::KdTree).is_err());
    }

    proptest! {
        #[test]
        fn kd_tree_matches_brute_force(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Point3<f64>> {
                (0..n).map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
            };
            let gt = cloud(300, &mut rng);
            let mesh = Mesh::point_cloud(cloud(60, &mut rng), None);
            let a = recon_error(&mesh, &gt, None, NnMode::KdTree).unwrap();
            let b = recon_error(&mesh, &gt, None, NnMode::BruteForce).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn accuracy_dominates_iou_and_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200;
            let gt: Vec<u16> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let pred: Vec<u16> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let s = semantic_scores(&pred, &gt, 5).unwrap();
            for c in &s.classes {
                prop_assert!(c.accuracy >= c.iou);
                prop_assert!((0.0..=1.0).contains(&c.iou));
            }
            if let (Some(a), Some(i)) = (s.macc, s.miou) {
                prop_assert!(a >= i);
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.reverse();
            idx.rotate_left(seed as usize % n);
            let gp: Vec<u16> = idx.iter().map(|&i| gt[i]).collect();
            let pp: Vec<u16> = idx.iter().map(|&i| pred[i]).collect();
            prop_assert_eq!(semantic_scores(&pp, &gp, 5).unwrap(), s);
        }
    }

    #[test]
    fn perfect_prediction() {
        let gt = vec![1, 2, 2, 3, 0, 1];
        let s = semantic_scores(&gt, &gt, 4).unwrap();
        assert_eq!(s.miou, Some(1.0));
        assert_eq!(s.macc, Some(1.0));
        assert_eq!(s.unannotated, 1);
    }

    #[test]
    fn half_flipped_binary_case() {
        let gt: Vec<u16> = [vec![1; 100], vec![2; 100]].concat();
        let mut pred = gt.clone();
        for p in pred.iter_mut().take(50) {
            *p = 2;
        }
        let s = semantic_scores(&pred, &gt, 3).unwrap();
        let c1 = &s.classes[0];
        assert_eq!(c1.class_id, 1);
        assert!((c1.iou - 0.5).abs() < 1e-12);
        assert!((c1.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded() {
        let gt = vec![1, 1, 3];
        let pred = vec![1, 1, 3];
        let s = semantic_scores(&pred, &gt, 5).unwrap();
        assert_eq!(s.classes.iter().map(|c| c.class_id).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(s.miou, Some(1.0));
        assert!(semantic_scores(&pred, &gt[..2], 5).is_err());
        let none = semantic_scores(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(none.miou, None);
    }

    #[test]
    fn report_table_and_json() {
        let gt = Mesh::point_cloud(plane_samples(0.0), Some(vec![1; 41 * 41]));
        let pred = gt.clone();
        let r = EvalReport::evaluate(&pred, &gt, 2, None, NnMode::KdTree).unwrap();
        assert_eq!(r.recon_error_cm, Some(0.0));
        assert_eq!(r.semantic.as_ref().unwrap().miou, Some(1.0));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.table().contains("mIoU"));
    }
}
