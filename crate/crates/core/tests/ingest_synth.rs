use std::fs;
use std::path::Path;

use semfuse::ingest::{
    load_detections, write_detections, MaskEncoding, Sequence, SequenceConfig, ASSOCIATION_FILE, CAMERA_FILE,
    TRAJECTORY_FILE,
};
use semfuse::synth::{self, CameraSpec, SceneSpec};
use semfuse::Error;

fn small_scene() -> SceneSpec {
    let mut spec = SceneSpec::three_objects();
    spec.camera = CameraSpec {
        fx: 131.25,
        fy: 131.25,
        cx: 79.5,
        cy: 59.5,
        width: 160,
        height: 120,
    };
    spec.trajectory.frames = 6;
    spec.noise.flip_probability = 0.3;
    spec.noise.min_detection_pixels = 10;
    spec.sample_spacing = 0.05;
    spec
}

#[test]
fn synth_dataset_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_scene();
    let summary = synth::write_dataset(&spec, dir.path(), MaskEncoding::Png).unwrap();
    assert_eq!(summary.frames, 6);

    let seq = Sequence::open(dir.path(), &SequenceConfig::default()).unwrap();
    assert_eq!(seq.len(), spec.trajectory.frames);
    let rendered = synth::render(&spec).unwrap();
    for (i, f) in rendered.iter().enumerate() {
        let rec = seq.load_frame(i).unwrap();
        assert_eq!(rec.id, f.id);
        assert!(rec.pose.approx_eq(&f.pose, 1e-9), "pose {i}");
        for (a, b) in rec.depth.data().iter().zip(f.depth.data()) {
            assert!((a - b).abs() <= 0.5 / 5000.0 + 1e-6);
        }
        let dets = seq.load_detections(&rec.id).unwrap();
        assert_eq!(dets, synth::corrupt_detections(&spec, f));
    }
    let samples = semfuse::fusion::Mesh::read_ply(&dir.path().join(synth::GT_SAMPLES_FILE)).unwrap();
    assert_eq!(samples.vertices.len(), summary.gt_samples);
    let labels = samples.labels.unwrap();
    assert!(labels.iter().all(|&l| (1..5).contains(&l)));
}

#[test]
fn rle_and_png_masks_agree() {
    let spec = small_scene();
    let frame = synth::render_frame(&spec, 2).unwrap();
    let set = synth::corrupt_detections(&spec, &frame);
    assert!(!set.detections.is_empty());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_detections(a.path(), &set, MaskEncoding::Png).unwrap();
    write_detections(b.path(), &set, MaskEncoding::Rle).unwrap();
    let la = load_detections(a.path(), &set.frame_id, 160, 120).unwrap();
    let lb = load_detections(b.path(), &set.frame_id, 160, 120).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la, set);
    assert!(matches!(
        load_detections(b.path(), &set.frame_id, 80, 120),
        Err(Error::Data { .. })
    ));
}

fn write_minimal(root: &Path, assoc: &str, traj: &str) {
    fs::write(
        root.join(CAMERA_FILE),
        r#"{"fx":100.0,"fy":100.0,"cx":1.5,"cy":1.5,"width":4,"height":4}"#,
    )
    .unwrap();
    fs::write(root.join(ASSOCIATION_FILE), assoc).unwrap();
    fs::write(root.join(TRAJECTORY_FILE), traj).unwrap();
}

#[test]
fn malformed_index_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    write_minimal(
        dir.path(),
        "# header\n0.0 rgb/a.png 0.0 depth/a.png\n0.1 rgb/b.png depth/b.png\n",
        "0.0 0 0 0 0 0 0 1\n",
    );
    match Sequence::open(dir.path(), &SequenceConfig::default()) {
        Err(Error::Parse { line, path, .. }) => {
            assert_eq!(line, 3);
            assert!(path.ends_with(ASSOCIATION_FILE));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_trajectory_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    write_minimal(
        dir.path(),
        "0.0 rgb/a.png 0.0 depth/a.png\n",
        "0.0 0 0 0 0 0 0 1\n\n0.1 0 0 x 0 0 0 1\n",
    );
    assert!(matches!(
        Sequence::open(dir.path(), &SequenceConfig::default()),
        Err(Error::Parse { line: 3, .. })
    ));
}

#[test]
fn missing_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    match Sequence::open(dir.path(), &SequenceConfig::default()) {
        Err(Error::MissingFile(p)) => assert!(p.ends_with(CAMERA_FILE)),
        other => panic!("unexpected {other:?}"),
    }
    write_minimal(dir.path(), "0.0 rgb/a.png 0.0 depth/a.png\n", "0.0 0 0 0 0 0 0 1\n");
    let seq = Sequence::open(dir.path(), &SequenceConfig::default()).unwrap();
    assert!(matches!(seq.load_frame(0), Err(Error::MissingFile(_))));
}

#[test]
fn frames_without_poses_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write_minimal(
        dir.path(),
        "0.0 rgb/a.png 0.0 depth/a.png\n5.0 rgb/b.png 5.0 depth/b.png\n",
        "0.001 0 0 0 0 0 0 1\n",
    );
    let seq = Sequence::open(dir.path(), &SequenceConfig::default()).unwrap();
    assert_eq!(seq.len(), 1);
    assert_eq!(seq.entries[0].id, "a");
    write_minimal(dir.path(), "# nothing\n", "0.0 0 0 0 0 0 0 1\n");
    assert!(matches!(
        Sequence::open(dir.path(), &SequenceConfig::default()),
        Err(Error::Empty(_))
    ));
}
