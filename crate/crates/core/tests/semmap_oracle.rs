use proptest::prelude::*;

use semfuse::semmap::{mask_iou, reproject_object, Keyframe, Provenance, SemMapConfig, SparseSemanticMap};
use semfuse::segment2d::{FilteredSeg, InstanceRecord};
use semfuse::{DepthMap, Intrinsics, Mask, Point3, Pose, Raster, Vector3};

const W: usize = 160;
const H: usize = 120;

fn k() -> Intrinsics {
    Intrinsics::new(150.0, 150.0, 79.5, 59.5, W, H).unwrap()
}

fn pose() -> Pose {
    Pose::look_at(Point3::origin(), Point3::new(0.0, 0.0, 1.0), Vector3::new(0.0, -1.0, 0.0)).unwrap()
}

fn wall() -> DepthMap {
    Raster::filled(W, H, 2.0)
}

fn rect() -> Mask {
    Raster::from_fn(W, H, |u, v| (40..120).contains(&u) && (30..90).contains(&v))
}

fn seg(mask: &Mask, class_id: u16, probability: f64) -> FilteredSeg {
    let labels = mask.map(|&b| b as u32);
    let pixel_count = mask.data().iter().filter(|&&b| b).count();
    FilteredSeg {
        labels,
        instances: if pixel_count == 0 {
            Vec::new()
        } else {
            vec![InstanceRecord {
                class_id,
                probability,
                pixel_count,
                detection: 0,
            }]
        },
    }
}

fn step(map: &mut SparseSemanticMap, id: u64, s: &FilteredSeg) -> semfuse::semmap::ConsistentMasks {
    let depth = wall();
    let pose = pose();
    map.propagate(
        Keyframe {
            id,
            seg: s,
            depth: &depth,
            pose: &pose,
        },
        &k(),
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Detector,
    Corrected,
    New,
}

/// Scalar restatement of the update rules for one object seen in every step.
#[derive(Debug, Default)]
struct Reference {
    object: Option<(u16, f64)>,
}

impl Reference {
    fn step(&mut self, class: u16, p: f64, cfg: &SemMapConfig) -> (u16, f64, Kind) {
        let th = cfg.thresholds;
        let Some((oc, w)) = self.object else {
            if p > th.t_p1 {
                self.object = Some((class, p));
                return (class, p, Kind::New);
            }
            return (class, p, Kind::Detector);
        };
        let mut out = (class, p, Kind::Detector);
        let w = if class == oc && p >= th.t_p1 {
            (w + cfg.delta_up).min(1.0)
        } else if class != oc && p >= th.t_p1 {
            let w = (w - cfg.delta_down).max(0.0);
            if w >= th.t_p2 {
                out = (oc, p, Kind::Corrected);
            }
            w
        } else if class == oc {
            out = (class, w, Kind::Detector);
            w
        } else {
            if w >= th.t_p2 {
                out = (oc, w, Kind::Corrected);
            }
            w
        };
        self.object = (w >= th.t_p2).then_some((oc, w));
        out
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn state_machine_matches_reference(script in prop::collection::vec((1u16..=2, 50u32..=100), 1..30)) {
        let cfg = SemMapConfig::default();
        let mut map = SparseSemanticMap::new(cfg);
        let mut reference = Reference::default();
        let mask = rect();
        for (i, &(class, pc)) in script.iter().enumerate() {
            let p = pc as f64 / 100.0;
            let had_object = reference.object.is_some();
            let (rc, rp, kind) = reference.step(class, p, &cfg);
            let out = step(&mut map, i as u64, &seg(&mask, class, p));
            let inst = &out.instances[0];
            prop_assert_eq!(inst.class_id, rc, "step {}", i);
            prop_assert_eq!(inst.probability, rp, "step {}", i);
            let got = match inst.provenance {
                Provenance::FromDetector => Kind::Detector,
                Provenance::CorrectedByMap { .. } => Kind::Corrected,
                Provenance::NewObject { .. } => Kind::New,
            };
            prop_assert_eq!(got, kind, "step {}", i);
            prop_assert_eq!(inst.matched_object.is_some(), had_object);
            match reference.object {
                Some((oc, w)) => {
                    prop_assert_eq!(map.len(), 1);
                    let obj = map.objects().next().unwrap();
                    prop_assert_eq!(obj.class_id, oc);
                    prop_assert_eq!(obj.weight, w);
                }
                None => prop_assert!(map.is_empty()),
            }
        }
    }
}

#[test]
fn iou_threshold_is_strict_at_every_pixel_count() {
    let cfg = SemMapConfig::default();
    let mut base = SparseSemanticMap::new(cfg);
    step(&mut base, 0, &seg(&rect(), 3, 0.95));
    assert_eq!(base.len(), 1);
    let region = reproject_object(base.objects().next().unwrap(), &pose(), &k());
    let pixels: Vec<usize> = (0..W * H).filter(|&i| region.data()[i]).collect();
    let r = pixels.len();
    assert!(r > 1000);
    let lo = (0.30 * r as f64) as usize;
    let hi = (0.50 * r as f64) as usize;
    let mut matched_any = false;
    for n in lo..=hi {
        let mut m: Mask = Raster::filled(W, H, false);
        for &i in &pixels[..n] {
            m.data_mut()[i] = true;
        }
        let iou = mask_iou(&region, &m).unwrap();
        assert_eq!(iou, n as f64 / r as f64);
        let mut map = base.clone();
        let out = step(&mut map, 1, &seg(&m, 3, 0.91));
        let matched = out.instances[0].matched_object.is_some();
        assert_eq!(matched, iou > cfg.thresholds.t_iou, "n {n} iou {iou}");
        matched_any |= matched;
        if (0.385..0.395).contains(&iou) {
            assert!(!matched);
        }
        if (0.405..0.415).contains(&iou) {
            assert!(matched);
        }
    }
    assert!(matched_any);
}

#[test]
fn creation_needs_probability_above_threshold() {
    let cfg = SemMapConfig::default();
    for pc in 80..=100u32 {
        let p = pc as f64 / 100.0;
        let mut map = SparseSemanticMap::new(cfg);
        let out = step(&mut map, 0, &seg(&rect(), 1, p));
        let created = matches!(out.instances[0].provenance, Provenance::NewObject { .. });
        assert_eq!(created, p > cfg.thresholds.t_p1, "p {p}");
        assert_eq!(map.len(), created as usize);
    }
}

#[test]
fn removal_step_matches_reference() {
    let cfg = SemMapConfig::default();
    let mut map = SparseSemanticMap::new(cfg);
    let mut reference = Reference::default();
    reference.step(1, 0.97, &cfg);
    step(&mut map, 0, &seg(&rect(), 1, 0.97));
    let mut removed_at = None;
    let mut expected_at = None;
    for i in 1..40u64 {
        reference.step(2, 0.95, &cfg);
        if reference.object.is_none() && expected_at.is_none() {
            expected_at = Some(i);
        }
        step(&mut map, i, &seg(&rect(), 2, 0.95));
        if map.objects().all(|o| o.class_id != 1) && removed_at.is_none() {
            removed_at = Some(i);
        }
        if removed_at.is_some() && expected_at.is_some() {
            break;
        }
    }
    assert!(expected_at.is_some());
    assert_eq!(removed_at, expected_at);
}

#[test]
fn checkpoint_resume_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let script: Vec<(u16, f64)> = vec![(1, 0.95), (1, 0.7), (2, 0.8), (2, 0.93), (1, 0.99), (2, 0.6), (1, 0.91)];
    let cfg = SemMapConfig::default();
    let mut whole = SparseSemanticMap::new(cfg);
    let full: Vec<_> = script
        .iter()
        .enumerate()
        .map(|(i, &(c, p))| step(&mut whole, i as u64, &seg(&rect(), c, p)))
        .collect();
    let mut first = SparseSemanticMap::new(cfg);
    for (i, &(c, p)) in script[..3].iter().enumerate() {
        step(&mut first, i as u64, &seg(&rect(), c, p));
    }
    let path = dir.path().join("map.json");
    first.save(&path).unwrap();
    let mut resumed = SparseSemanticMap::load(&path).unwrap();
    for (i, &(c, p)) in script.iter().enumerate().skip(3) {
        assert_eq!(step(&mut resumed, i as u64, &seg(&rect(), c, p)), full[i]);
    }
    assert_eq!(resumed, whole);
}
