use std::cmp::Ordering;
use std::path::PathBuf;

use super::features::{level_shape, FeatureImage, SparseFeatures};
use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::semmap::ConsistentMasks;

/// Source of per-keyframe feature rasters.
pub trait FeatureProvider: Sync {
    fn level(&self) -> u8;
    fn channels(&self) -> usize;
    fn features(&self, frame_id: &str, masks: &ConsistentMasks, k: &Intrinsics) -> Result<FeatureImage>;
}

/// Class-probability channels computed from consistent masks.
#[derive(Debug, Clone, Copy)]
pub struct ClassProbabilityProvider {
    pub num_classes: usize,
    pub level: u8,
}

impl FeatureProvider for ClassProbabilityProvider {
    fn level(&self) -> u8 {
        self.level
    }

    fn channels(&self) -> usize {
        self.num_classes
    }

    fn features(&self, _frame_id: &str, masks: &ConsistentMasks, k: &Intrinsics) -> Result<FeatureImage> {
        class_probability_image(masks, self.num_classes, self.level, k)
    }
}

/// Replays exported activations stored as `<dir>/<frame_id>_l<level>.feat`.
#[derive(Debug, Clone)]
pub struct FileFeatureProvider {
    pub dir: PathBuf,
    pub level: u8,
    pub channels: usize,
}

impl FeatureProvider for FileFeatureProvider {
    fn level(&self) -> u8 {
        self.level
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn features(&self, frame_id: &str, _masks: &ConsistentMasks, _k: &Intrinsics) -> Result<FeatureImage> {
        let img = FeatureImage::read(&self.dir.join(format!("{frame_id}_l{}.feat", self.level)))?;
        img.expect_channels(self.channels)?;
        if img.level != self.level {
            return Err(Error::ChannelMismatch(format!(
                "raster for {frame_id} is level {}, expected {}",
                img.level, self.level
            )));
        }
        Ok(img)
    }
}

/// Per-pixel class probabilities on a level raster.
///
/// Each level pixel averages the full-resolution pixels it covers; a labeled
/// pixel contributes its instance probability on its class channel.
pub fn class_probability_image(
    masks: &ConsistentMasks,
    num_classes: usize,
    level: u8,
    k: &Intrinsics,
) -> Result<FeatureImage> {
    let (w, h) = level_shape(k, level)?;
    let (fw, fh) = (masks.labels.width(), masks.labels.height());
    if fw != k.width || fh != k.height {
        return Err(Error::dims(format!("{}x{}", k.width, k.height), format!("{fw}x{fh}")));
    }
    let plane = w * h;
    let mut sums = vec![0f64; plane * num_classes];
    let mut counts = vec![0u32; plane];
    let (sx, sy) = (w as f64 / fw as f64, h as f64 / fh as f64);
    for v in 0..fh {
        let lv = (((v as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        for u in 0..fw {
            let lu = (((u as f64 + 0.5) * sx).floor() as usize).min(w - 1);
            let at = lv * w + lu;
            counts[at] += 1;
            if let Some(inst) = masks.instance_at(u, v) {
                let c = inst.class_id as usize;
                if c >= num_classes {
                    return Err(Error::ChannelMismatch(format!(
                        "class {c} outside {num_classes} probability channels"
                    )));
                }
                sums[c * plane + at] += inst.probability;
            }
        }
    }
    let data = sums
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let n = counts[i % plane];
            if n == 0 {
                0.0
            } else {
                (s / n as f64) as f32
            }
        })
        .collect();
    FeatureImage::new(level, w, h, num_classes, data)
}

/// Sums class-probability vectors over the views that observed each point
/// and normalizes them; points without any probability mass get `None`.
///
/// Contributions are summed in a canonical order so the result does not
/// depend on view order.
pub fn label_vote_fusion(slabs: &[SparseFeatures]) -> Result<Vec<Option<Vec<f32>>>> {
    let Some(first) = slabs.first() else {
        return Ok(Vec::new());
    };
    let (n, c) = (first.n_points, first.channels);
    for s in slabs {
        if s.n_points != n {
            return Err(Error::dims(n, s.n_points));
        }
        if s.channels != c {
            return Err(Error::ChannelMismatch(format!("{} vs {c} class channels", s.channels)));
        }
    }
    let mut rows: Vec<Vec<&[f32]>> = vec![Vec::new(); n];
    for s in slabs {
        for (i, row) in s.iter() {
            rows[i as usize].push(row);
        }
    }
    Ok(rows
        .into_iter()
        .map(|mut views| {
            views.sort_by(|a, b| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            });
            let mut sum = vec![0f64; c];
            for r in views {
                for (s, &x) in sum.iter_mut().zip(r) {
                    *s += x as f64;
                }
            }
            let total: f64 = sum.iter().sum();
            (total > 0.0).then(|| sum.iter().map(|&s| (s / total) as f32).collect())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::argmax_class;
    use crate::raster::Raster;
    use crate::semmap::{ConsistentInstance, Provenance};

    fn slab(n: usize, c: usize, rows: &[(u32, Vec<f32>)]) -> SparseFeatures {
        let mut s = SparseFeatures::empty(1, c, n);
        for (i, r) in rows {
            s.push(*i, r);
        }
        s
    }

    #[test]
    fn one_view_one_hot() {
        let mut p = vec![0.0; 8];
        p[5] = 1.0;
        let d = label_vote_fusion(&[slab(1, 8, &[(0, p.clone())])]).unwrap();
        assert_eq!(d[0].as_deref(), Some(&p[..]));
    }

    #[test]
    fn larger_mass_wins() {
        let a = slab(1, 3, &[(0, vec![0.0, 0.9, 0.0])]);
        let b = slab(1, 3, &[(0, vec![0.0, 0.0, 0.6])]);
        let d = label_vote_fusion(&[a, b]).unwrap();
        assert_eq!(argmax_class(d[0].as_ref().unwrap()), Some(1));
    }

    #[test]
    fn order_and_zero_view_invariance() {
        let a = slab(3, 3, &[(0, vec![0.1, 0.7, 0.0]), (2, vec![0.3, 0.3, 0.3])]);
        let b = slab(3, 3, &[(0, vec![0.2, 0.0, 0.9]), (1, vec![0.0, 0.0, 0.4])]);
        let z = slab(3, 3, &[(0, vec![0.0; 3]), (1, vec![0.0; 3]), (2, vec![0.0; 3])]);
        let base = label_vote_fusion(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(label_vote_fusion(&[b.clone(), a.clone()]).unwrap(), base);
        assert_eq!(label_vote_fusion(&[a, z, b]).unwrap(), base);
    }

    #[test]
    fn class_probability_raster() {
        let k = Intrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        let labels = Raster::from_fn(64, 48, |u, _| if u < 32 { 1 } else { 0 });
        let masks = ConsistentMasks {
            keyframe: 0,
            labels,
            instances: vec![ConsistentInstance {
                class_id: 2,
                probability: 0.8,
                pixel_count: 32 * 48,
                detector_class: 2,
                detector_probability: 0.8,
                provenance: Provenance::FromDetector,
                matched_object: None,
            }],
        };
        let img = class_probability_image(&masks, 4, 2, &k).unwrap();
        assert_eq!((img.width, img.height), (32, 24));
        assert_eq!(img.pixel(3, 3), vec![0.0, 0.0, 0.8, 0.0]);
        assert_eq!(img.pixel(20, 3), vec![0.0; 4]);
        assert!(class_probability_image(&masks, 2, 1, &k).is_err());
    }
}
