//! Loading of RGB-D sequences, trajectories and detector output.
//!
//! Dataset layout:
//!
//! ```text
//! <root>/camera.json          {"fx","fy","cx","cy","width","height"}
//! <root>/associations.txt     "t_rgb rgb/<id>.png t_depth depth/<id>.png" per line
//! <root>/groundtruth.txt      "t tx ty tz qx qy qz qw" per line, world-from-camera
//! <root>/detections/<id>.json optional per-frame detector output
//! ```
//!
//! The frame id is the file stem of the rgb image.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::camera::{Convention, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::raster::{DepthMap, Mask, Raster};

pub const ASSOCIATION_FILE: &str = "associations.txt";
pub const TRAJECTORY_FILE: &str = "groundtruth.txt";
pub const CAMERA_FILE: &str = "camera.json";
pub const DETECTION_DIR: &str = "detections";

/// Counts per meter of 16-bit depth images (TUM / ICL-NUIM convention).
pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;

/// Quaternion norm deviation accepted silently when reading trajectories.
const TRAJECTORY_QUAT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub depth_scale: f64,
    /// Largest accepted gap between a frame and its nearest pose, seconds.
    pub pose_tolerance: f64,
    pub keyframe_stride: usize,
    /// Overrides `camera.json` when set.
    pub intrinsics: Option<Intrinsics>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            depth_scale: DEFAULT_DEPTH_SCALE,
            pose_tolerance: 0.02,
            keyframe_stride: 10,
            intrinsics: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub id: String,
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    /// Camera-from-world.
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: u16,
    pub score: f32,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub frame_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(frame_id: impl Into<String>) -> Self {
        Self {
            frame_id: frame_id.into(),
            detections: Vec::new(),
        }
    }
}

/// One association line matched to a pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub id: String,
    pub timestamp: f64,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub pose: Pose,
}

/// An opened sequence: index and poses resolved, images loaded on demand.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub root: PathBuf,
    pub intrinsics: Intrinsics,
    pub entries: Vec<FrameEntry>,
    depth_scale: f64,
}

impl Sequence {
    pub fn open(root: impl AsRef<Path>, config: &SequenceConfig) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !(config.depth_scale > 0.0) {
            return Err(Error::InvalidParameter {
                name: "depth_scale",
                reason: format!("must be positive, got {}", config.depth_scale),
            });
        }
        let intrinsics = match config.intrinsics {
            Some(k) => {
                k.validate()?;
                k
            }
            None => load_intrinsics(&root.join(CAMERA_FILE))?,
        };
        let index = load_associations(&root.join(ASSOCIATION_FILE))?;
        let trajectory = load_trajectory(&root.join(TRAJECTORY_FILE))?;
        let entries = match_poses(&root, index, &trajectory, config.pose_tolerance);
        if entries.is_empty() {
            return Err(Error::Empty("no frames with a matching pose"));
        }
        Ok(Self {
            root,
            intrinsics,
            entries,
            depth_scale: config.depth_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_frame(&self, index: usize) -> Result<FrameRecord> {
        let entry = &self.entries[index];
        let rgb = image::open(&entry.rgb_path)
            .map_err(|e| image_error(&entry.rgb_path, e))?
            .into_rgb8();
        let raw = read_depth_png(&entry.depth_path)?;
        let depth = decode_depth(&raw, self.depth_scale)?;
        if rgb.width() as usize != depth.width() || rgb.height() as usize != depth.height() {
            return Err(Error::data(
                &entry.rgb_path,
                format!(
                    "rgb is {}x{} but depth is {}x{}",
                    rgb.width(),
                    rgb.height(),
                    depth.width(),
                    depth.height()
                ),
            ));
        }
        if depth.width() != self.intrinsics.width || depth.height() != self.intrinsics.height {
            return Err(Error::data(
                &entry.depth_path,
                format!(
                    "depth is {}x{} but the camera is {}x{}",
                    depth.width(),
                    depth.height(),
                    self.intrinsics.width,
                    self.intrinsics.height
                ),
            ));
        }
        Ok(FrameRecord {
            id: entry.id.clone(),
            timestamp: entry.timestamp,
            rgb,
            depth,
            pose: entry.pose,
        })
    }

    /// Frames in timestamp order.
    pub fn frames(&self) -> impl Iterator<Item = Result<FrameRecord>> + '_ {
        (0..self.entries.len()).map(move |i| self.load_frame(i))
    }

    pub fn load_detections(&self, frame_id: &str) -> Result<DetectionSet> {
        load_detections(&self.root, frame_id, self.intrinsics.width, self.intrinsics.height)
    }
}

/// Loads every frame of a sequence.
pub fn load_sequence(root: impl AsRef<Path>, config: &SequenceConfig) -> Result<(Intrinsics, Vec<FrameRecord>)> {
    let seq = Sequence::open(root, config)?;
    let frames = seq.frames().collect::<Result<Vec<_>>>()?;
    Ok((seq.intrinsics, frames))
}

/// Indices of every `stride`-th frame, starting with the first.
pub fn select_keyframes(frame_count: usize, stride: usize) -> Vec<usize> {
    (0..frame_count).step_by(stride.max(1)).collect()
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(path: &Path, line: usize, field: &str, token: &str) -> Result<f64> {
    token
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, line, format!("bad {field} '{token}'")))
}

pub fn load_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = read_text(path)?;
    let k: Intrinsics = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    k.validate()?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    let text = serde_json::to_string_pretty(k).expect("intrinsics serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationEntry {
    pub rgb_timestamp: f64,
    pub rgb_path: String,
    pub depth_timestamp: f64,
    pub depth_path: String,
}

pub fn load_associations(path: &Path) -> Result<Vec<AssociationEntry>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, content) in content_lines(&text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 4 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 4 fields 'timestamp rgb timestamp depth', got {}", tokens.len()),
            ));
        }
        out.push(AssociationEntry {
            rgb_timestamp: parse_f64(path, line, "timestamp", tokens[0])?,
            rgb_path: tokens[1].to_string(),
            depth_timestamp: parse_f64(path, line, "timestamp", tokens[2])?,
            depth_path: tokens[3].to_string(),
        });
    }
    Ok(out)
}

/// Reads a TUM-style trajectory and converts every pose to camera-from-world.
pub fn load_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, content) in content_lines(&text) {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != 8 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 8 fields 'timestamp tx ty tz qx qy qz qw', got {}", tokens.len()),
            ));
        }
        let mut v = [0.0; 8];
        for (slot, token) in v.iter_mut().zip(&tokens) {
            *slot = parse_f64(path, line, "number", token)?;
        }
        let norm = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if !(norm > 1e-12) {
            return Err(Error::parse(path, line, "zero quaternion"));
        }
        if (norm - 1.0).abs() > TRAJECTORY_QUAT_TOLERANCE {
            warn!("{}:{line}: quaternion norm {norm} renormalized", path.display());
        }
        let world_from_camera = Pose::from_components(
            [v[7], v[4], v[5], v[6]],
            [v[1], v[2], v[3]],
            Convention::WorldFromCamera,
            f64::INFINITY,
        )?;
        out.push((v[0], world_from_camera.inverse()));
    }
    Ok(out)
}

/// Writes camera-from-world poses as a world-from-camera TUM trajectory.
pub fn write_trajectory(path: &Path, poses: &[(f64, Pose)]) -> Result<()> {
    let mut text = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in poses {
        let wc = pose.to_camera_from_world()?.inverse();
        let q = wc.rotation.quaternion();
        let tr = wc.translation;
        text.push_str(&format!(
            "{t:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
            tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn match_poses(root: &Path, mut index: Vec<AssociationEntry>, trajectory: &[(f64, Pose)], tolerance: f64) -> Vec<FrameEntry> {
    let mut poses: Vec<(f64, Pose)> = trajectory.to_vec();
    poses.sort_by(|a, b| a.0.total_cmp(&b.0));
    index.sort_by(|a, b| a.rgb_timestamp.total_cmp(&b.rgb_timestamp));
    let mut out: Vec<FrameEntry> = Vec::new();
    for entry in index {
        if let Some(last) = out.last() {
            if entry.rgb_timestamp <= last.timestamp {
                warn!("duplicate timestamp {} skipped", entry.rgb_timestamp);
                continue;
            }
        }
        let Some((dt, pose)) = nearest_pose(&poses, entry.rgb_timestamp) else {
            warn!("no poses available for frame at {}", entry.rgb_timestamp);
            continue;
        };
        if dt > tolerance {
            warn!(
                "frame {} skipped: nearest pose is {:.1} ms away (tolerance {:.1} ms)",
                entry.rgb_path,
                dt * 1e3,
                tolerance * 1e3
            );
            continue;
        }
        let id = Path::new(&entry.rgb_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| entry.rgb_path.clone());
        out.push(FrameEntry {
            id,
            timestamp: entry.rgb_timestamp,
            rgb_path: root.join(&entry.rgb_path),
            depth_path: root.join(&entry.depth_path),
            pose,
        });
    }
    out
}

fn nearest_pose(sorted: &[(f64, Pose)], t: f64) -> Option<(f64, Pose)> {
    let i = sorted.partition_point(|(ts, _)| *ts < t);
    let mut best: Option<(f64, Pose)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some((ts, pose)) = sorted.get(j) {
            let dt = (ts - t).abs();
            if best.is_none_or(|(b, _)| dt < b) {
                best = Some((dt, *pose));
            }
        }
    }
    best
}

pub fn read_depth_png(path: &Path) -> Result<Raster<u16>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let image::DynamicImage::ImageLuma16(buf) = img else {
        return Err(Error::data(path, "depth image must be 16-bit single channel"));
    };
    let (w, h) = buf.dimensions();
    Raster::from_vec(w as usize, h as usize, buf.into_raw())
}

pub fn write_depth_png(path: &Path, raw: &Raster<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(raw.width() as u32, raw.height() as u32, raw.data().to_vec()).expect("raster size");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Converts raw sensor counts to meters; zero counts stay invalid.
pub fn decode_depth(raw: &Raster<u16>, scale: f64) -> Result<DepthMap> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParameter {
            name: "depth_scale",
            reason: format!("must be positive, got {scale}"),
        });
    }
    Ok(raw.map(|&c| if c == 0 { 0.0 } else { (c as f64 / scale) as f32 }))
}

/// Inverse of [`decode_depth`] up to quantization; out-of-range depths become invalid.
pub fn encode_depth(depth: &DepthMap, scale: f64) -> Raster<u16> {
    depth.map(|&d| {
        let c = (d as f64 * scale).round();
        if d > 0.0 && c >= 1.0 && c <= u16::MAX as f64 {
            c as u16
        } else {
            0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSource {
    File(String),
    Rle { rle: Vec<u32>, size: [usize; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub class_id: u16,
    pub score: f64,
    pub mask: MaskSource,
}

pub fn detection_path(root: &Path, frame_id: &str) -> PathBuf {
    root.join(DETECTION_DIR).join(format!("{frame_id}.json"))
}

/// Loads a frame's detections; a missing manifest yields an empty set.
pub fn load_detections(root: &Path, frame_id: &str, width: usize, height: usize) -> Result<DetectionSet> {
    let path = detection_path(root, frame_id);
    if !path.exists() {
        return Ok(DetectionSet::empty(frame_id));
    }
    let text = read_text(&path)?;
    let entries: Vec<DetectionEntry> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let mut detections = Vec::with_capacity(entries.len());
    for (k, entry) in entries.into_iter().enumerate() {
        if !(0.0..=1.0).contains(&entry.score) {
            return Err(Error::data(&path, format!("detection {k}: score {} outside [0, 1]", entry.score)));
        }
        let mask = match &entry.mask {
            MaskSource::File(rel) => read_mask_png(&root.join(rel))?,
            MaskSource::Rle { rle, size } => {
                rle_decode(rle, size[1], size[0]).map_err(|m| Error::data(&path, format!("detection {k}: {m}")))?
            }
        };
        if mask.width() != width || mask.height() != height {
            return Err(Error::data(
                &path,
                format!(
                    "detection {k}: mask is {}x{} but the frame is {width}x{height}",
                    mask.width(),
                    mask.height()
                ),
            ));
        }
        detections.push(Detection {
            class_id: entry.class_id,
            score: entry.score as f32,
            mask,
        });
    }
    Ok(DetectionSet {
        frame_id: frame_id.to_string(),
        detections,
    })
}

/// How [`write_detections`] stores masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskEncoding {
    Png,
    Rle,
}

pub fn write_detections(root: &Path, set: &DetectionSet, encoding: MaskEncoding) -> Result<()> {
    let dir = root.join(DETECTION_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(set.detections.len());
    for (k, det) in set.detections.iter().enumerate() {
        let mask = match encoding {
            MaskEncoding::Rle => MaskSource::Rle {
                rle: rle_encode(&det.mask),
                size: [det.mask.height(), det.mask.width()],
            },
            MaskEncoding::Png => {
                let rel = format!("masks/{}_{k}.png", set.frame_id);
                let path = root.join(&rel);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                write_mask_png(&path, &det.mask)?;
                MaskSource::File(rel)
            }
        };
        entries.push(DetectionEntry {
            class_id: det.class_id,
            score: det.score as f64,
            mask,
        });
    }
    let path = detection_path(root, &set.frame_id);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer(&mut file, &entries).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    file.write_all(b"\n").map_err(|e| Error::io(&path, e))
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Raster::from_vec(w as usize, h as usize, img.into_raw().into_iter().map(|p| p > 0).collect())
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .expect("raster size");
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Row-major run lengths, alternating unset/set and starting with unset.
pub fn rle_encode(mask: &Mask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in mask.data() {
        if b != current {
            runs.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    runs.push(run);
    runs
}

pub fn rle_decode(runs: &[u32], width: usize, height: usize) -> std::result::Result<Mask, String> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (width * height) as u64 {
        return Err(format!("run lengths cover {total} pixels, expected {}", width * height));
    }
    let mut data = Vec::with_capacity(width * height);
    for (i, &r) in runs.iter().enumerate() {
        data.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    Raster::from_vec(width, height, data).map_err(|e| e.to_string())
}
