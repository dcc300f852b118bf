use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};

pub const MAX_FEATURE_WIDTH: usize = 320;
pub const MAX_FEATURE_HEIGHT: usize = 240;

const FEATURE_MAGIC: &[u8; 4] = b"SFFI";
const SPARSE_MAGIC: &[u8; 4] = b"SFSP";
const FORMAT_VERSION: u32 = 1;

fn check_level(level: u8) -> Result<()> {
    if (1..=4).contains(&level) {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "level",
            reason: format!("pyramid level must be 1..=4, got {level}"),
        })
    }
}

/// Raster size of a pyramid level for a camera: the full image halved until
/// it fits 320x240, then halved once more per level above 1.
pub fn level_shape(k: &Intrinsics, level: u8) -> Result<(usize, usize)> {
    check_level(level)?;
    let (mut w, mut h) = (k.width, k.height);
    while w > MAX_FEATURE_WIDTH || h > MAX_FEATURE_HEIGHT {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
    }
    for _ in 1..level {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
    }
    Ok((w, h))
}

/// Dense per-pixel feature raster at one pyramid level, stored plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub level: u8,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl FeatureImage {
    pub fn new(level: u8, width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_level(level)?;
        if width == 0 || height == 0 || width > MAX_FEATURE_WIDTH || height > MAX_FEATURE_HEIGHT {
            return Err(Error::dims(
                format!("at most {MAX_FEATURE_WIDTH}x{MAX_FEATURE_HEIGHT}"),
                format!("{width}x{height}"),
            ));
        }
        if channels == 0 {
            return Err(Error::ChannelMismatch("feature image needs at least one channel".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::dims(width * height * channels, data.len()));
        }
        Ok(Self {
            level,
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        level: u8,
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for v in 0..height {
                for u in 0..width {
                    data.push(f(u, v, c));
                }
            }
        }
        Self::new(level, width, height, channels, data)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, u: usize, v: usize) -> Vec<f32> {
        let plane = self.width * self.height;
        let at = v * self.width + u;
        (0..self.channels).map(|c| self.data[c * plane + at]).collect()
    }

    pub fn expect_channels(&self, expected: usize) -> Result<()> {
        if self.channels == expected {
            Ok(())
        } else {
            Err(Error::ChannelMismatch(format!(
                "level {} expects {expected} channels, raster has {}",
                self.level, self.channels
            )))
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.data.len() * 4);
        buf.extend_from_slice(FEATURE_MAGIC);
        for x in [
            FORMAT_VERSION,
            self.level as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
        ] {
            buf.write_u32::<LittleEndian>(x).expect("vec write");
        }
        for &x in &self.data {
            buf.write_f32::<LittleEndian>(x).expect("vec write");
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        let mut r = &bytes[..];
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail(0, "truncated header".into()))?;
        if &magic != FEATURE_MAGIC {
            return Err(fail(0, "not a feature raster".into()));
        }
        let mut header = [0u32; 5];
        for (i, h) in header.iter_mut().enumerate() {
            *h = r
                .read_u32::<LittleEndian>()
                .map_err(|_| fail(4 + 4 * i, "truncated header".into()))?;
        }
        let [version, level, height, width, channels] = header;
        if version != FORMAT_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let n = (height as usize) * (width as usize) * (channels as usize);
        if r.len() != n * 4 {
            return Err(fail(24, format!("expected {} data bytes, found {}", n * 4, r.len())));
        }
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).expect("length checked");
        Self::new(level as u8, width as usize, height as usize, channels as usize, data)
    }
}

/// Sparse `N x C` features: rows for a sorted subset of point indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    pub level: u8,
    pub channels: usize,
    pub n_points: usize,
    index: Vec<u32>,
    values: Vec<f32>,
}

impl SparseFeatures {
    pub fn empty(level: u8, channels: usize, n_points: usize) -> Self {
        Self {
            level,
            channels,
            n_points,
            index: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a row; indices must be strictly increasing.
    pub fn push(&mut self, n: u32, row: &[f32]) {
        assert_eq!(row.len(), self.channels, "row width");
        assert!((n as usize) < self.n_points, "point index out of range");
        assert!(self.index.last().is_none_or(|&last| last < n), "indices must increase");
        self.index.push(n);
        self.values.extend_from_slice(row);
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.index
    }

    /// Row at storage position `i`.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn get(&self, n: usize) -> Option<&[f32]> {
        let i = self.index.binary_search(&(n as u32)).ok()?;
        Some(self.row(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f32])> {
        self.index.iter().copied().zip(self.values.chunks_exact(self.channels.max(1)))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(SPARSE_MAGIC);
        for x in [
            FORMAT_VERSION,
            self.level as u32,
            self.channels as u32,
            self.n_points as u32,
            self.index.len() as u32,
        ] {
            buf.write_u32::<LittleEndian>(x).expect("vec write");
        }
        for &n in &self.index {
            buf.write_u32::<LittleEndian>(n).expect("vec write");
        }
        for &x in &self.values {
            buf.write_f32::<LittleEndian>(x).expect("vec write");
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < 24 || &bytes[..4] != SPARSE_MAGIC {
            return Err(fail(0, "not a sparse feature file".into()));
        }
        let mut r = &bytes[4..];
        let mut header = [0u32; 5];
        for h in header.iter_mut() {
            *h = r.read_u32::<LittleEndian>().expect("length checked");
        }
        let [version, level, channels, n_points, count] = header;
        if version != FORMAT_VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let (c, m) = (channels as usize, count as usize);
        if r.len() != m * 4 + m * c * 4 {
            return Err(fail(24, format!("expected {} payload bytes, found {}", m * 4 * (1 + c), r.len())));
        }
        let mut out = Self::empty(level as u8, c, n_points as usize);
        let mut row = vec![0f32; c];
        let mut index = vec![0u32; m];
        r.read_u32_into::<LittleEndian>(&mut index).expect("length checked");
        for (i, &n) in index.iter().enumerate() {
            if n >= n_points || out.index.last().is_some_and(|&l| l >= n) {
                return Err(fail(24 + 4 * i, format!("bad point index {n}")));
            }
            r.read_f32_into::<LittleEndian>(&mut row).expect("length checked");
            out.push(n, &row);
        }
        Ok(out)
    }
}

/// Per-view sparse slabs over one point set: the `N x C x V` stack.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureStack {
    pub level: u8,
    pub channels: usize,
    pub n_points: usize,
    views: Vec<SparseFeatures>,
}

impl VoxelFeatureStack {
    pub fn new(views: Vec<SparseFeatures>) -> Result<Self> {
        let first = views.first().ok_or(Error::Empty("view stack"))?;
        let (level, channels, n_points) = (first.level, first.channels, first.n_points);
        for v in &views {
            if v.n_points != n_points {
                return Err(Error::dims(n_points, v.n_points));
            }
            if v.channels != channels || v.level != level {
                return Err(Error::ChannelMismatch(format!(
                    "view with level {} / {} channels in a level {level} / {channels} stack",
                    v.level, v.channels
                )));
            }
        }
        Ok(Self {
            level,
            channels,
            n_points,
            views,
        })
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, v: usize) -> &SparseFeatures {
        &self.views[v]
    }

    pub fn views(&self) -> &[SparseFeatures] {
        &self.views
    }

    pub fn get(&self, n: usize, v: usize) -> Option<&[f32]> {
        self.views[v].get(n)
    }
}
