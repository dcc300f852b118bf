use std::fs;
use std::path::{Path, PathBuf};

use semfuse::eval::EvalReport;
use semfuse::fusion::Mesh;
use semfuse::ingest::read_depth_png;
use semfuse::synth::{CameraSpec, SceneSpec};
use semfuse_cli::pipeline::{MaskRecord, MASK_DIR, MESH_FILE, REPORT_FILE, SEMANTIC_MESH_FILE};
use semfuse_cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn small_scene(frames: usize, flip: f64, seed: u64) -> SceneSpec {
    let mut spec = SceneSpec::three_objects();
    spec.camera = CameraSpec {
        fx: 262.5,
        fy: 262.5,
        cx: 159.5,
        cy: 119.5,
        width: 320,
        height: 240,
    };
    spec.trajectory.frames = frames;
    spec.noise.flip_probability = flip;
    spec.seed = seed;
    spec
}

fn synth(dir: &Path, spec: &SceneSpec) -> PathBuf {
    let spec_path = dir.join("scene.json");
    fs::write(&spec_path, serde_json::to_string(spec).unwrap()).unwrap();
    let ds = dir.join("dataset");
    let code = run(["semfuse", "synth", "--spec", spec_path.to_str().unwrap(), "--out", ds.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    ds
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn empty_dataset_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("empty");
    fs::create_dir_all(&ds).unwrap();
    let out = dir.path().join("out");
    let code = run(["semfuse", "reconstruct", "--dataset", s(&ds), "--out", s(&out)]);
    assert_eq!(code, EXIT_DATA);
    assert!(!out.exists());
}

#[test]
fn usage_errors() {
    assert_eq!(run(["semfuse", "reconstruct", "--bogus"]), EXIT_USAGE);
    assert_eq!(run(["semfuse", "reconstruct", "--t-iou", "1.5"]), EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[tsdf]\nvoxel_size = -1.0\n").unwrap();
    assert_eq!(run(["semfuse", "reconstruct", "--config", s(&cfg)]), EXIT_USAGE);
    let err = semfuse_cli::PipelineConfig::load(&cfg).unwrap().validate().unwrap_err();
    assert_eq!(err.field, "tsdf.voxel_size");
}

#[test]
fn plane_sequence_reconstructs_within_a_voxel() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SceneSpec::plane_wall();
    spec.trajectory.frames = 6;
    let ds = synth(dir.path(), &spec);
    let out = dir.path().join("out");
    assert_eq!(
        run(["semfuse", "reconstruct", "--dataset", s(&ds), "--out", s(&out), "--voxel-size", "0.04"]),
        EXIT_OK
    );
    let eval_out = dir.path().join("eval");
    let gt = ds.join(semfuse::synth::GT_SAMPLES_FILE);
    assert_eq!(
        run(["semfuse", "eval", s(&out.join(MESH_FILE)), s(&gt), "--num-classes", "2", "--out", s(&eval_out)]),
        EXIT_OK
    );
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(eval_out.join(REPORT_FILE)).unwrap()).unwrap();
    let err = report.recon_error_cm.unwrap();
    assert!(err < 4.0, "error {err} cm");
    assert!(out.join("manifest.json").exists());
    let log = fs::read_to_string(out.join("run.log")).unwrap();
    let cfg = semfuse_cli::PipelineConfig {
        dataset: ds.clone(),
        out: out.clone(),
        tsdf: semfuse::fusion::TsdfConfig {
            voxel_size: 0.04,
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(log.contains(&cfg.hash()));
}

fn masks(out: &Path) -> Vec<MaskRecord> {
    let mut files: Vec<_> = fs::read_dir(out.join(MASK_DIR))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap())
        .collect()
}

#[test]
fn noise_free_propagation_corrects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), &small_scene(8, 0.0, 0));
    let out = dir.path().join("out");
    assert_eq!(
        run(["semfuse", "propagate", "--dataset", s(&ds), "--out", s(&out), "--keyframe-stride", "1"]),
        EXIT_OK
    );
    let records = masks(&out);
    assert_eq!(records.len(), 8);
    for r in &records {
        for i in &r.instances {
            assert!(!matches!(i.provenance, semfuse::semmap::Provenance::CorrectedByMap { .. }));
            assert_eq!(i.class_id, i.detector_class);
        }
    }
}

#[test]
fn corrections_agree_with_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), &small_scene(8, 0.3, 4));
    let out = dir.path().join("out");
    assert_eq!(
        run(["semfuse", "propagate", "--dataset", s(&ds), "--out", s(&out), "--keyframe-stride", "1"]),
        EXIT_OK
    );
    let mut corrected = 0;
    for r in masks(&out) {
        let ids = read_depth_png(&out.join(MASK_DIR).join(format!("{}.png", r.frame_id))).unwrap();
        let gt = read_depth_png(&ds.join("gt").join(format!("{}_class.png", r.frame_id))).unwrap();
        for (j, inst) in r.instances.iter().enumerate() {
            if !matches!(inst.provenance, semfuse::semmap::Provenance::CorrectedByMap { .. }) {
                continue;
            }
            corrected += 1;
            let mut hist = [0usize; 5];
            for (&id, &c) in ids.data().iter().zip(gt.data()) {
                if id as usize == j + 1 {
                    hist[c as usize] += 1;
                }
            }
            let majority = (0..5).max_by_key(|&c| hist[c]).unwrap() as u16;
            assert_eq!(inst.class_id, majority, "{} instance {j}", r.frame_id);
            assert_ne!(inst.detector_class, majority);
        }
    }
    assert!(corrected > 0);
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn resumed_propagation_equals_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), &small_scene(8, 0.3, 1));
    let whole = dir.path().join("whole");
    let split = dir.path().join("split");
    let base = ["semfuse", "propagate", "--dataset", s(&ds), "--keyframe-stride", "1"];
    let with = |extra: &[&str], out: &Path| {
        let mut args: Vec<String> = base.iter().map(|x| x.to_string()).collect();
        args.extend(["--out".to_string(), s(out).to_string()]);
        args.extend(extra.iter().map(|x| x.to_string()));
        run(args)
    };
    assert_eq!(with(&[], &whole), EXIT_OK);
    assert_eq!(with(&["--stop-after", "3"], &split), EXIT_OK);
    assert_eq!(masks(&split).len(), 3);
    assert_eq!(with(&["--resume"], &split), EXIT_OK);
    let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        v.into_iter().filter(|(p, _)| p != "run.log" && p != "manifest.json").collect()
    };
    let (a, b) = (strip(dir_bytes(&split)), strip(dir_bytes(&whole)));
    assert_eq!(
        a.iter().map(|x| &x.0).collect::<Vec<_>>(),
        b.iter().map(|x| &x.0).collect::<Vec<_>>()
    );
    for ((path, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{path} differs");
    }
}

#[test]
fn zero_detections_leave_mesh_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), &small_scene(4, 0.0, 0));
    fs::remove_dir_all(ds.join("detections")).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run(["semfuse", "semantic", "--dataset", s(&ds), "--out", s(&out), "--keyframe-stride", "1"]),
        EXIT_OK
    );
    let mesh = Mesh::read_ply(&out.join(SEMANTIC_MESH_FILE)).unwrap();
    assert!(!mesh.vertices.is_empty());
    assert!(mesh.labels.unwrap().iter().all(|&l| l == 0));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    let sem = report.semantic.unwrap();
    assert!(sem.classes.iter().all(|c| c.true_positives == 0 && c.pred_count == 0));
}

#[test]
fn eval_of_identical_samples_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), &small_scene(1, 0.0, 0));
    let gt = ds.join(semfuse::synth::GT_SAMPLES_FILE);
    let out = dir.path().join("eval");
    assert_eq!(
        run(["semfuse", "eval", s(&gt), s(&gt), "--num-classes", "5", "--out", s(&out)]),
        EXIT_OK
    );
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report.recon_error_cm, Some(0.0));
    assert_eq!(report.semantic.unwrap().miou, Some(1.0));
}

#[test]
fn corrupted_ply_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(dir.path(), &small_scene(1, 0.0, 0));
    let gt = ds.join(semfuse::synth::GT_SAMPLES_FILE);
    let bytes = fs::read(&gt).unwrap();
    let bad = dir.path().join("bad.ply");
    fs::write(&bad, &bytes[..bytes.len() - 5]).unwrap();
    assert_eq!(run(["semfuse", "eval", s(&bad), s(&gt), "--num-classes", "5"]), EXIT_DATA);
    match Mesh::read_ply(&bad) {
        Err(semfuse::Error::Format { offset, .. }) => assert!(offset > 0 && offset <= bytes.len() as u64),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn synth_frame_count_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_scene(5, 0.0, 0);
    let ds = synth(dir.path(), &spec);
    let seq = semfuse::ingest::Sequence::open(&ds, &Default::default()).unwrap();
    assert_eq!(seq.len(), spec.trajectory.frames);
    let back: SceneSpec = serde_json::from_str(&fs::read_to_string(ds.join("scene.json")).unwrap()).unwrap();
    assert_eq!(back, spec);
}
