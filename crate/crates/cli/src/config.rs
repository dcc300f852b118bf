use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semfuse::eval::NnMode;
use semfuse::fusion::TsdfConfig;
use semfuse::ingest::SequenceConfig;
use semfuse::project::DEFAULT_OCCLUSION_VOXELS;
use semfuse::segment2d::SegmentParams;
use semfuse::semmap::SemMapConfig;

/// A rejected setting, named by its path in the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Per-pixel class probabilities from the consistent masks.
    ClassProbability,
    /// Exported rasters `<dir>/<frame_id>_l<level>.feat`.
    Files { dir: PathBuf, channels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSettings {
    /// Occlusion tolerance in voxels.
    pub occlusion_voxels: f64,
    pub level: u8,
    pub features: FeatureSource,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            occlusion_voxels: DEFAULT_OCCLUSION_VOXELS,
            level: 1,
            features: FeatureSource::ClassProbability,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Labeled ground-truth samples, relative to the dataset unless absolute.
    pub gt: PathBuf,
    pub nn_mode: NnMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            gt: PathBuf::from(semfuse::synth::GT_SAMPLES_FILE),
            nn_mode: NnMode::KdTree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Number of class ids including the unannotated class 0.
    pub num_classes: usize,
    /// Correct per-frame labels with the sparse semantic map.
    pub propagation: bool,
    pub sequence: SequenceConfig,
    pub segment: SegmentParams,
    pub semmap: SemMapConfig,
    pub tsdf: TsdfConfig,
    pub projection: ProjectionSettings,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("."),
            out: PathBuf::from("out"),
            seed: 0,
            threads: 0,
            num_classes: 41,
            propagation: true,
            sequence: SequenceConfig::default(),
            segment: SegmentParams::default(),
            semmap: SemMapConfig::default(),
            tsdf: TsdfConfig::default(),
            projection: ProjectionSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn err(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn unit_interval(field: &str, x: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(err(field, format!("must lie in [0, 1], got {x}")))
    }
}

fn positive(field: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(err(field, format!("must be positive, got {x}")))
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("config (bytes {}..{})", s.start, s.end))
                .unwrap_or_else(|| "config".to_string());
            err(&field, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(&path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(2..=u16::MAX as usize + 1).contains(&self.num_classes) {
            return Err(err("num_classes", format!("must lie in [2, 65536], got {}", self.num_classes)));
        }
        let s = &self.sequence;
        positive("sequence.depth_scale", s.depth_scale)?;
        if !(s.pose_tolerance >= 0.0) {
            return Err(err("sequence.pose_tolerance", "must be non-negative"));
        }
        if s.keyframe_stride == 0 {
            return Err(err("sequence.keyframe_stride", "must be at least 1"));
        }
        let g = &self.segment;
        if !(g.edge_angle_deg > 0.0 && g.edge_angle_deg < 180.0) {
            return Err(err("segment.edge_angle_deg", format!("must lie in (0, 180), got {}", g.edge_angle_deg)));
        }
        positive("segment.depth_gap_rel", g.depth_gap_rel)?;
        let m = &self.semmap;
        unit_interval("semmap.thresholds.t_iou", m.thresholds.t_iou)?;
        unit_interval("semmap.thresholds.t_p1", m.thresholds.t_p1)?;
        unit_interval("semmap.thresholds.t_p2", m.thresholds.t_p2)?;
        unit_interval("semmap.delta_up", m.delta_up)?;
        unit_interval("semmap.delta_down", m.delta_down)?;
        if m.max_support == 0 {
            return Err(err("semmap.max_support", "must be at least 1"));
        }
        positive("tsdf.voxel_size", self.tsdf.voxel_size)?;
        if let Some(t) = self.tsdf.truncation {
            if !(t >= self.tsdf.voxel_size) || !t.is_finite() {
                return Err(err("tsdf.truncation", format!("must be at least one voxel, got {t}")));
            }
        }
        if !(self.tsdf.max_weight >= 1.0) {
            return Err(err("tsdf.max_weight", "must be at least 1"));
        }
        let p = &self.projection;
        if !(p.occlusion_voxels >= 0.0) || !p.occlusion_voxels.is_finite() {
            return Err(err("projection.occlusion_voxels", "must be non-negative"));
        }
        if !(1..=4).contains(&p.level) {
            return Err(err("projection.level", format!("must lie in [1, 4], got {}", p.level)));
        }
        if let FeatureSource::Files { channels, .. } = &p.features {
            if *channels != self.num_classes {
                return Err(err(
                    "projection.features.channels",
                    format!("label voting needs {} class channels, got {channels}", self.num_classes),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory
    /// and the thread count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.threads = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn gt_path(&self) -> PathBuf {
        if self.eval.gt.is_absolute() {
            self.eval.gt.clone()
        } else {
            self.dataset.join(&self.eval.gt)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = PipelineConfig::from_toml("num_classes = 5\n[semmap.thresholds]\nt_iou = 0.5\n").unwrap();
        assert_eq!(c.num_classes, 5);
        assert_eq!(c.semmap.thresholds.t_iou, 0.5);
        assert_eq!(c.semmap.thresholds.t_p1, 0.9);
    }

    #[test]
    fn out_of_range_names_field() {
        let mut c = PipelineConfig::default();
        c.semmap.thresholds.t_p2 = 1.5;
        assert_eq!(c.validate().unwrap_err().field, "semmap.thresholds.t_p2");
        let mut c = PipelineConfig::default();
        c.tsdf.voxel_size = 0.0;
        assert_eq!(c.validate().unwrap_err().field, "tsdf.voxel_size");
        let mut c = PipelineConfig::default();
        c.sequence.keyframe_stride = 0;
        assert_eq!(c.validate().unwrap_err().field, "sequence.keyframe_stride");
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(PipelineConfig::from_toml("voxel = 3\n").is_err());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.out = PathBuf::from("elsewhere");
        c.threads = 3;
        assert_eq!(a.hash(), c.hash());
    }
}
