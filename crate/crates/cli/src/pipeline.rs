use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semfuse::eval::EvalReport;
use semfuse::fusion::{extract_mesh, transfer_labels, Mesh, TsdfVolume};
use semfuse::ingest::{select_keyframes, FrameRecord, Sequence};
use semfuse::project::{
    intersection_mask, label_vote_fusion, project_features, ClassProbabilityProvider, FeatureProvider,
    FileFeatureProvider, SparseFeatures, VoxelPoints,
};
use semfuse::segment2d::{compute_normals, filter_semantic, geometric_segment, FilteredSeg};
use semfuse::semmap::{ConsistentInstance, ConsistentMasks, Keyframe, SparseSemanticMap};
use semfuse::{Error, Raster, Result};

use crate::config::{FeatureSource, PipelineConfig};

pub const MESH_FILE: &str = "mesh.ply";
pub const SEMANTIC_MESH_FILE: &str = "semantic.ply";
pub const REPORT_FILE: &str = "report.json";
pub const MASK_DIR: &str = "masks";
pub const CHECKPOINT_FILE: &str = "semmap.json";
pub const PROGRESS_FILE: &str = "progress.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "run.log";

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Collects artifacts and log lines of one command run.
#[derive(Debug)]
pub struct Run {
    pub out: PathBuf,
    pub command: String,
    pub config_hash: String,
    log: Vec<String>,
    artifacts: BTreeMap<String, ()>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub artifacts: Vec<ManifestEntry>,
}

impl Run {
    pub fn new(out: &Path, command: &str, config_hash: String) -> Self {
        let mut run = Self {
            out: out.to_path_buf(),
            command: command.to_string(),
            config_hash,
            log: Vec::new(),
            artifacts: BTreeMap::new(),
        };
        run.log(format!("command {command}"));
        run.log(format!("config {}", run.config_hash));
        run
    }

    pub fn log(&mut self, line: impl Into<String>) {
        let line = line.into();
        log::info!("{line}");
        self.log.push(line);
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Registers a file already written under the output directory.
    pub fn record(&mut self, rel: impl Into<String>) {
        self.artifacts.insert(rel.into(), ());
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        self.record(rel);
        Ok(())
    }

    /// Writes the log and a manifest indexing every recorded artifact.
    pub fn finish(mut self) -> Result<Manifest> {
        let log = self.log.join("\n") + "\n";
        self.write(LOG_FILE, log.as_bytes())?;
        let mut artifacts = Vec::new();
        for rel in self.artifacts.keys() {
            let path = self.out.join(rel);
            let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
            artifacts.push(ManifestEntry {
                path: rel.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            artifacts,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = self.out.join(MANIFEST_FILE);
        fs::create_dir_all(&self.out).map_err(|e| io(&self.out, e))?;
        fs::write(&path, json).map_err(|e| io(&path, e))?;
        Ok(manifest)
    }
}

pub fn open_sequence(cfg: &PipelineConfig) -> Result<Sequence> {
    Sequence::open(&cfg.dataset, &cfg.sequence)
}

/// Integrates every frame and extracts the surface mesh.
pub fn reconstruct(cfg: &PipelineConfig, seq: &Sequence) -> Result<Mesh> {
    let mut vol = TsdfVolume::new(&cfg.tsdf)?;
    for frame in seq.frames() {
        let f = frame?;
        vol.integrate(&f.depth, &f.pose, &seq.intrinsics)?;
    }
    Ok(extract_mesh(&vol))
}

/// Detector labels of one frame restricted to its geometric instances.
pub fn filtered_segmentation(cfg: &PipelineConfig, seq: &Sequence, frame: &FrameRecord) -> Result<FilteredSeg> {
    let dets = seq.load_detections(&frame.id)?;
    let normals = compute_normals(&frame.depth, &seq.intrinsics);
    let geom = geometric_segment(&normals, &frame.depth, &cfg.segment)?;
    filter_semantic(&dets, &geom)
}

/// Consistent masks of one keyframe, corrected by `map` when given.
pub fn keyframe_masks(
    cfg: &PipelineConfig,
    seq: &Sequence,
    index: usize,
    frame: &FrameRecord,
    map: Option<&mut SparseSemanticMap>,
) -> Result<ConsistentMasks> {
    let seg = filtered_segmentation(cfg, seq, frame)?;
    match map {
        Some(map) => map.propagate(
            Keyframe {
                id: index as u64,
                seg: &seg,
                depth: &frame.depth,
                pose: &frame.pose,
            },
            &seq.intrinsics,
        ),
        None => Ok(ConsistentMasks::from_filtered(index as u64, &seg)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub keyframe: u64,
    pub frame_id: String,
    pub instances: Vec<ConsistentInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub config_hash: String,
    /// Position in the keyframe list of the next keyframe to process.
    pub next: usize,
    pub total: usize,
}

/// Writes `masks/<frame_id>.png` (instance ids) and `masks/<frame_id>.json`.
pub fn write_masks(run: &mut Run, frame_id: &str, masks: &ConsistentMasks) -> Result<()> {
    let rel_png = format!("{MASK_DIR}/{frame_id}.png");
    let mut ids = Vec::with_capacity(masks.labels.data().len());
    for &l in masks.labels.data() {
        ids.push(u16::try_from(l).map_err(|_| Error::DegenerateGeometry(format!("{frame_id}: too many instances")))?);
    }
    let raster = Raster::from_vec(masks.labels.width(), masks.labels.height(), ids)?;
    let path = run.path(&rel_png);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    semfuse::ingest::write_depth_png(&path, &raster)?;
    run.record(rel_png);
    let record = MaskRecord {
        keyframe: masks.keyframe,
        frame_id: frame_id.to_string(),
        instances: masks.instances.clone(),
    };
    let json = serde_json::to_string_pretty(&record).expect("mask record serializes") + "\n";
    run.write(&format!("{MASK_DIR}/{frame_id}.json"), json.as_bytes())
}

/// Runs keyframes through the semantic map, resuming from a checkpoint in
/// the output directory when `resume` is set. Stops after `limit`
/// keyframes when given.
pub fn propagate(cfg: &PipelineConfig, run: &mut Run, resume: bool, limit: Option<usize>) -> Result<Progress> {
    let seq = open_sequence(cfg)?;
    let keyframes = select_keyframes(seq.len(), cfg.sequence.keyframe_stride);
    let (mut map, start) = if resume && run.path(PROGRESS_FILE).exists() {
        let path = run.path(PROGRESS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        let p: Progress = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        if p.config_hash != run.config_hash {
            return Err(Error::Data {
                path,
                message: format!("checkpoint was written with config {}", p.config_hash),
            });
        }
        (SparseSemanticMap::load(&run.path(CHECKPOINT_FILE))?, p.next)
    } else {
        (SparseSemanticMap::new(cfg.semmap), 0)
    };
    let end = limit.map_or(keyframes.len(), |n| (start + n).min(keyframes.len()));
    run.log(format!("keyframes {}..{} of {}", start, end, keyframes.len()));
    let mut corrected = 0;
    for &index in &keyframes[start..end] {
        let frame = seq.load_frame(index)?;
        let masks = keyframe_masks(cfg, &seq, index, &frame, Some(&mut map))?;
        corrected += masks
            .instances
            .iter()
            .filter(|i| matches!(i.provenance, semfuse::semmap::Provenance::CorrectedByMap { .. }))
            .count();
        write_masks(run, &frame.id, &masks)?;
    }
    run.log(format!("corrected {corrected} instances, {} objects in map", map.len()));
    fs::create_dir_all(&run.out).map_err(|e| io(&run.out, e))?;
    map.save(&run.path(CHECKPOINT_FILE))?;
    run.record(CHECKPOINT_FILE);
    let progress = Progress {
        config_hash: run.config_hash.clone(),
        next: end,
        total: keyframes.len(),
    };
    let json = serde_json::to_string_pretty(&progress).expect("progress serializes") + "\n";
    run.write(PROGRESS_FILE, json.as_bytes())?;
    Ok(progress)
}

/// Output of the semantic chain.
#[derive(Debug, Clone)]
pub struct SemanticResult {
    pub mesh: Mesh,
    pub report: Option<EvalReport>,
    pub views: usize,
}

/// Reconstructs, labels keyframes, projects class probabilities onto the
/// surface voxels, votes and transfers labels to the mesh.
pub fn semantic(cfg: &PipelineConfig, run: &mut Run) -> Result<SemanticResult> {
    let seq = open_sequence(cfg)?;
    let mut mesh = reconstruct(cfg, &seq)?;
    run.log(format!("mesh {} vertices {} triangles", mesh.vertices.len(), mesh.triangles.len()));
    let grid = *TsdfVolume::new(&cfg.tsdf)?.grid();
    let points = VoxelPoints::from_mesh(&mesh, &grid);
    let k = seq.intrinsics;
    let provider: Box<dyn FeatureProvider> = match &cfg.projection.features {
        FeatureSource::ClassProbability => Box::new(ClassProbabilityProvider {
            num_classes: cfg.num_classes,
            level: cfg.projection.level,
        }),
        FeatureSource::Files { dir, channels } => Box::new(FileFeatureProvider {
            dir: dir.clone(),
            level: cfg.projection.level,
            channels: *channels,
        }),
    };
    let eps = cfg.projection.occlusion_voxels * cfg.tsdf.voxel_size;
    let mut map = cfg.propagation.then(|| SparseSemanticMap::new(cfg.semmap));
    let keyframes = select_keyframes(seq.len(), cfg.sequence.keyframe_stride);
    let mut slabs: Vec<SparseFeatures> = Vec::with_capacity(keyframes.len());
    for &index in &keyframes {
        let frame = seq.load_frame(index)?;
        let masks = keyframe_masks(cfg, &seq, index, &frame, map.as_mut())?;
        let labeled = masks.labels.map(|&l| l != 0);
        let mask = intersection_mask(&points.points, &frame.pose, &k, &frame.depth, &labeled, eps)?;
        let feat = provider.features(&frame.id, &masks, &k)?;
        slabs.push(project_features(&feat, &mask, &points.points, &frame.pose, &k)?);
    }
    run.log(format!("{} keyframes, {} surface voxels", keyframes.len(), points.len()));
    let dists = label_vote_fusion(&slabs)?;
    let labeled = dists.iter().filter(|d| d.is_some()).count();
    run.log(format!("{labeled} voxels received votes"));
    transfer_labels(&mut mesh, &grid, &points.distribution_map(&dists));
    let gt_path = cfg.gt_path();
    let report = if gt_path.exists() {
        let gt = Mesh::read_ply(&gt_path)?;
        // score the vertices as they are stored in the PLY
        let mut stored = mesh.clone();
        for v in &mut stored.vertices {
            *v = v.map(|c| c as f32 as f64);
        }
        Some(EvalReport::evaluate(&stored, &gt, cfg.num_classes, None, cfg.eval.nn_mode)?)
    } else {
        run.log(format!("no ground truth at {}", gt_path.display()));
        None
    };
    Ok(SemanticResult {
        mesh,
        report,
        views: keyframes.len(),
    })
}

pub fn write_mesh(run: &mut Run, rel: &str, mesh: &Mesh) -> Result<()> {
    let mut bytes = Vec::new();
    mesh.write_ply_to(&mut bytes).map_err(|e| io(&run.path(rel), e))?;
    run.write(rel, &bytes)
}
