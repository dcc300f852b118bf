use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::features::{SparseFeatures, VoxelFeatureStack};
use crate::error::{Error, Result};
use crate::fusion::VoxelIndex;

/// Channel widths of the four input pyramid levels.
pub const PYRAMID_CHANNELS: [usize; 4] = [512, 256, 128, 96];
/// Channel widths after aggregation, per level.
pub const AGGREGATED_CHANNELS: [usize; 4] = [256, 128, 128, 96];

pub const DOT_LAYERS: usize = 4;
const MAGIC: &[u8; 4] = b"DOTW";
const VERSION: u32 = 1;

/// One submanifold sparse convolution.
///
/// `weights` is laid out `[tap][out][in]` with taps ordered x fastest, then
/// y, then z over offsets `-r..=r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoTLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub relu: bool,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DoTLayer {
    pub fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn offsets(&self) -> Vec<[i32; 3]> {
        kernel_offsets(self.kernel)
    }

    /// Center tap maps input channel `i` to output channel `i`.
    pub fn projection(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let taps = kernel.pow(3);
        let mut weights = vec![0f32; taps * out_channels * in_channels];
        let center = taps / 2;
        for c in 0..in_channels.min(out_channels) {
            weights[(center * out_channels + c) * in_channels + c] = 1.0;
        }
        Self {
            in_channels,
            out_channels,
            kernel,
            relu: false,
            weights,
            bias: vec![0.0; out_channels],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidParameter {
                name: "kernel",
                reason: format!("kernel size must be odd, got {}", self.kernel),
            });
        }
        if self.weights.len() != self.taps() * self.out_channels * self.in_channels {
            return Err(Error::dims(self.taps() * self.out_channels * self.in_channels, self.weights.len()));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::dims(self.out_channels, self.bias.len()));
        }
        Ok(())
    }

    fn tap(&self, t: usize) -> &[f32] {
        let n = self.out_channels * self.in_channels;
        &self.weights[t * n..(t + 1) * n]
    }
}

pub(crate) fn kernel_offsets(kernel: usize) -> Vec<[i32; 3]> {
    let r = (kernel / 2) as i32;
    let mut out = Vec::with_capacity(kernel.pow(3));
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Four sparse convolutions followed by a max-pool over views.
#[derive(Debug, Clone, PartialEq)]
pub struct DoTWeights {
    pub level: u8,
    pub layers: Vec<DoTLayer>,
    /// Spatial extent of the view max-pool; 1 pools each voxel over views only.
    pub pool_kernel: usize,
}

impl DoTWeights {
    /// Deterministic default: the first layer keeps the leading output
    /// channels, the rest pass through, no nonlinearity.
    pub fn identity(level: u8) -> Result<Self> {
        let (cin, cout) = level_channels(level)?;
        Self::identity_with(level, cin, cout, 3)
    }

    pub fn identity_with(level: u8, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        let mut layers = vec![DoTLayer::projection(in_channels, out_channels, kernel)];
        for _ in 1..DOT_LAYERS {
            layers.push(DoTLayer::projection(out_channels, out_channels, kernel));
        }
        let w = Self {
            level,
            layers,
            pool_kernel: 1,
        };
        w.validate()?;
        Ok(w)
    }

    /// Uniform random weights scaled by fan-in; ReLU on all but the last layer.
    pub fn random(level: u8, in_channels: usize, out_channels: usize, kernel: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(DOT_LAYERS);
        for l in 0..DOT_LAYERS {
            let cin = if l == 0 { in_channels } else { out_channels };
            let taps = kernel.pow(3);
            let s = 1.0 / ((taps * cin) as f32).sqrt();
            layers.push(DoTLayer {
                in_channels: cin,
                out_channels,
                kernel,
                relu: l + 1 < DOT_LAYERS,
                weights: (0..taps * cin * out_channels).map(|_| rng.random_range(-s..s)).collect(),
                bias: (0..out_channels).map(|_| rng.random_range(-0.1..0.1)).collect(),
            });
        }
        let w = Self {
            level,
            layers,
            pool_kernel: 1,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().expect("validated").out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.level) {
            return Err(Error::InvalidParameter {
                name: "level",
                reason: format!("pyramid level must be 1..=4, got {}", self.level),
            });
        }
        if self.layers.len() != DOT_LAYERS {
            return Err(Error::InvalidParameter {
                name: "layers",
                reason: format!("expected {DOT_LAYERS} layers, got {}", self.layers.len()),
            });
        }
        if self.pool_kernel.is_multiple_of(2) {
            return Err(Error::InvalidParameter {
                name: "pool_kernel",
                reason: format!("must be odd, got {}", self.pool_kernel),
            });
        }
        for l in &self.layers {
            l.validate()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::ChannelMismatch(format!(
                    "layer outputs {} channels, next layer expects {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        Ok(())
    }

    /// Checks the chain against the configured pyramid widths for the level.
    pub fn check_pyramid(&self) -> Result<()> {
        let (cin, cout) = level_channels(self.level)?;
        if self.input_channels() != cin || self.output_channels() != cout {
            return Err(Error::ChannelMismatch(format!(
                "level {} chain {}->{} does not match {cin}->{cout}",
                self.level,
                self.input_channels(),
                self.output_channels()
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for x in [VERSION, self.level as u32, self.layers.len() as u32, self.pool_kernel as u32] {
            buf.write_u32::<LittleEndian>(x).expect("vec write");
        }
        for l in &self.layers {
            for x in [l.in_channels as u32, l.out_channels as u32, l.kernel as u32, l.relu as u32] {
                buf.write_u32::<LittleEndian>(x).expect("vec write");
            }
        }
        for l in &self.layers {
            for &x in l.weights.iter().chain(&l.bias) {
                buf.write_f32::<LittleEndian>(x).expect("vec write");
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let total = bytes.len();
        let mut r = &bytes[..];
        let at = |r: &[u8]| (total - r.len()) as u64;
        let fail = |offset: u64, message: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            message,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail(0, "truncated header".into()))?;
        if &magic != MAGIC {
            return Err(fail(0, "not a DoT weight file".into()));
        }
        let read_u32 = |r: &mut &[u8]| {
            let o = at(r);
            r.read_u32::<LittleEndian>().map_err(|_| fail(o, "truncated header".into()))
        };
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let level = read_u32(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let pool_kernel = read_u32(&mut r)? as usize;
        if count != DOT_LAYERS {
            return Err(fail(12, format!("expected {DOT_LAYERS} layers, got {count}")));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let (i, o, k, relu) = (read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);
            shapes.push((i as usize, o as usize, k as usize, relu != 0));
        }
        let mut layers = Vec::with_capacity(count);
        for (cin, cout, kernel, relu) in shapes {
            let nw = kernel.pow(3) * cin * cout;
            let o = at(r);
            if r.len() < (nw + cout) * 4 {
                return Err(fail(o, format!("truncated layer data: need {} bytes", (nw + cout) * 4)));
            }
            let mut weights = vec![0f32; nw];
            let mut bias = vec![0f32; cout];
            r.read_f32_into::<LittleEndian>(&mut weights).expect("length checked");
            r.read_f32_into::<LittleEndian>(&mut bias).expect("length checked");
            layers.push(DoTLayer {
                in_channels: cin,
                out_channels: cout,
                kernel,
                relu,
                weights,
                bias,
            });
        }
        if !r.is_empty() {
            return Err(fail(at(r), format!("{} trailing bytes", r.len())));
        }
        let w = Self {
            level: level as u8,
            layers,
            pool_kernel,
        };
        w.validate()?;
        Ok(w)
    }
}

fn level_channels(level: u8) -> Result<(usize, usize)> {
    if !(1..=4).contains(&level) {
        return Err(Error::InvalidParameter {
            name: "level",
            reason: format!("pyramid level must be 1..=4, got {level}"),
        });
    }
    let i = level as usize - 1;
    Ok((PYRAMID_CHANNELS[i], AGGREGATED_CHANNELS[i]))
}

fn add(a: VoxelIndex, b: [i32; 3]) -> VoxelIndex {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Runs the four sparse convolutions on one view's active voxels.
fn convolve_view(
    slab: &SparseFeatures,
    coords: &[VoxelIndex],
    lookup: &HashMap<VoxelIndex, usize>,
    weights: &DoTWeights,
) -> Vec<f32> {
    let active = slab.indices();
    let mut row_of = HashMap::with_capacity(active.len());
    for (m, &n) in active.iter().enumerate() {
        row_of.insert(n as usize, m);
    }
    let mut x: Vec<f32> = slab.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    for layer in &weights.layers {
        let offsets = layer.offsets();
        let live: Vec<usize> = (0..offsets.len())
            .filter(|&t| layer.tap(t).iter().any(|&w| w != 0.0))
            .collect();
        let (cin, cout) = (layer.in_channels, layer.out_channels);
        let mut y = vec![0f32; active.len() * cout];
        y.par_chunks_mut(cout).enumerate().for_each(|(m, out)| {
            out.copy_from_slice(&layer.bias);
            let base = coords[active[m] as usize];
            for &t in &live {
                let Some(&nb) = lookup.get(&add(base, offsets[t])) else {
                    continue;
                };
                let Some(&j) = row_of.get(&nb) else {
                    continue;
                };
                let xin = &x[j * cin..(j + 1) * cin];
                let w = layer.tap(t);
                for (o, acc) in out.iter_mut().enumerate() {
                    let wr = &w[o * cin..(o + 1) * cin];
                    *acc += wr.iter().zip(xin).map(|(a, b)| a * b).sum::<f32>();
                }
            }
            if layer.relu {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        });
        x = y;
    }
    x
}

/// Aggregates a view stack into one sparse volume for its pyramid level.
///
/// Each view is convolved on its own active voxels; the results are then
/// max-pooled across views (and across the pool kernel's neighborhood).
/// A voxel is present in the output when any view observed it.
pub fn aggregate_dot(stack: &VoxelFeatureStack, coords: &[VoxelIndex], weights: &DoTWeights) -> Result<SparseFeatures> {
    weights.validate()?;
    if stack.channels != weights.input_channels() {
        return Err(Error::ChannelMismatch(format!(
            "stack has {} channels, weights expect {}",
            stack.channels,
            weights.input_channels()
        )));
    }
    if stack.level != weights.level {
        return Err(Error::ChannelMismatch(format!(
            "stack level {} with weights for level {}",
            stack.level, weights.level
        )));
    }
    if coords.len() != stack.n_points {
        return Err(Error::dims(stack.n_points, coords.len()));
    }
    let lookup: HashMap<VoxelIndex, usize> = coords.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let cout = weights.output_channels();
    let per_view: Vec<Vec<f32>> = stack
        .views()
        .iter()
        .map(|slab| convolve_view(slab, coords, &lookup, weights))
        .collect();

    let mut present = vec![false; stack.n_points];
    for slab in stack.views() {
        for &n in slab.indices() {
            present[n as usize] = true;
        }
    }
    let pool = kernel_offsets(weights.pool_kernel);
    let rows: Vec<(u32, Vec<f32>)> = (0..stack.n_points)
        .into_par_iter()
        .filter(|&n| present[n])
        .map(|n| {
            let mut best = vec![f32::NEG_INFINITY; cout];
            for (slab, y) in stack.views().iter().zip(&per_view) {
                for o in &pool {
                    let Some(&nb) = lookup.get(&add(coords[n], *o)) else {
                        continue;
                    };
                    let Ok(m) = slab.indices().binary_search(&(nb as u32)) else {
                        continue;
                    };
                    for (b, &v) in best.iter_mut().zip(&y[m * cout..(m + 1) * cout]) {
                        *b = b.max(v);
                    }
                }
            }
            (n as u32, best)
        })
        .collect();
    let mut out = SparseFeatures::empty(stack.level, cout, stack.n_points);
    for (n, row) in rows {
        out.push(n, &row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_stack(seed: u64, coords: &[VoxelIndex], channels: usize, views: usize, level: u8) -> VoxelFeatureStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slabs = (0..views)
            .map(|_| {
                let mut s = SparseFeatures::empty(level, channels, coords.len());
                for n in 0..coords.len() {
                    if rng.random_bool(0.6) {
                        let row: Vec<f32> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
                        s.push(n as u32, &row);
                    }
                }
                s
            })
            .collect();
        VoxelFeatureStack::new(slabs).unwrap()
    }

    fn grid_coords(seed: u64, n: usize) -> Vec<VoxelIndex> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert([rng.random_range(0..5), rng.random_range(0..5), rng.random_range(0..4)]);
        }
        set.into_iter().collect()
    }

    /// Dense-tensor evaluation of the same network over the bounding box.
    fn dense_reference(stack: &VoxelFeatureStack, coords: &[VoxelIndex], w: &DoTWeights) -> Vec<Option<Vec<f32>>> {
        let lo = [0, 1, 2].map(|a| coords.iter().map(|c| c[a]).min().unwrap());
        let hi = [0, 1, 2].map(|a| coords.iter().map(|c| c[a]).max().unwrap());
        let dim = [0, 1, 2].map(|a| (hi[a] - lo[a] + 1) as usize);
        let cell = |c: VoxelIndex| -> Option<usize> {
            let l = [0, 1, 2].map(|a| c[a] - lo[a]);
            if (0..3).any(|a| l[a] < 0 || l[a] as usize >= dim[a]) {
                return None;
            }
            Some((l[2] as usize * dim[1] + l[1] as usize) * dim[0] + l[0] as usize)
        };
        let cells = dim[0] * dim[1] * dim[2];
        let cout = w.output_channels();
        let mut views_out = Vec::new();
        for slab in stack.views() {
            let mut active = vec![false; cells];
            let mut x = vec![0f32; cells * stack.channels];
            let mut c = stack.channels;
            for (n, row) in slab.iter() {
                let i = cell(coords[n as usize]).unwrap();
                active[i] = true;
                x[i * c..(i + 1) * c].copy_from_slice(row);
            }
            for layer in &w.layers {
                let co = layer.out_channels;
                let mut y = vec![0f32; cells * co];
                let r = (layer.kernel / 2) as i32;
                for z in 0..dim[2] as i32 {
                    for yy in 0..dim[1] as i32 {
                        for xx in 0..dim[0] as i32 {
                            let here = [xx + lo[0], yy + lo[1], z + lo[2]];
                            let i = cell(here).unwrap();
                            if !active[i] {
                                continue;
                            }
                            for o in 0..co {
                                let mut acc = layer.bias[o] as f64;
                                let mut t = 0;
                                for dz in -r..=r {
                                    for dy in -r..=r {
                                        for dx in -r..=r {
                                            if let Some(j) = cell([here[0] + dx, here[1] + dy, here[2] + dz]) {
                                                for ci in 0..c {
                                                    let wt = layer.weights[(t * co + o) * c + ci] as f64;
                                                    acc += wt * x[j * c + ci] as f64;
                                                }
                                            }
                                            t += 1;
                                        }
                                    }
                                }
                                if layer.relu {
                                    acc = acc.max(0.0);
                                }
                                y[i * co + o] = acc as f32;
                            }
                        }
                    }
                }
                x = y;
                c = co;
            }
            views_out.push((active, x));
        }
        coords
            .iter()
            .map(|&g| {
                let i = cell(g).unwrap();
                let mut best: Option<Vec<f32>> = None;
                for (active, y) in &views_out {
                    if active[i] {
                        let row = &y[i * cout..(i + 1) * cout];
                        best = Some(match best {
                            None => row.to_vec(),
                            Some(b) => b.iter().zip(row).map(|(a, b)| a.max(*b)).collect(),
                        });
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn random_weights_match_dense_reference() {
        for seed in 0..6u64 {
            let coords = grid_coords(seed, 20 + 8 * seed as usize);
            let stack = random_stack(seed + 100, &coords, 6, 3, 2);
            let w = DoTWeights::random(2, 6, 5, 3, seed).unwrap();
            let got = aggregate_dot(&stack, &coords, &w).unwrap();
            let want = dense_reference(&stack, &coords, &w);
            for (n, expected) in want.iter().enumerate() {
                match (got.get(n), expected) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        for (x, y) in a.iter().zip(b) {
                            assert!((x - y).abs() <= 1e-5, "seed {seed} voxel {n}: {x} vs {y}");
                        }
                    }
                    (a, b) => panic!("occupancy differs at {n}: {a:?} vs {b:?}"),
                }
            }
        }
    }

    #[test]
    fn identity_single_view_is_passthrough() {
        let coords = grid_coords(1, 30);
        let stack = random_stack(2, &coords, 4, 1, 1);
        let w = DoTWeights::identity_with(1, 4, 4, 3).unwrap();
        let out = aggregate_dot(&stack, &coords, &w).unwrap();
        assert_eq!(&out, stack.view(0));
    }

    #[test]
    fn identity_max_pools_views() {
        let coords = vec![[0, 0, 0]];
        let f = [0.5f32, -1.0, 2.0];
        let mut a = SparseFeatures::empty(1, 3, 1);
        a.push(0, &f);
        let mut b = SparseFeatures::empty(1, 3, 1);
        b.push(0, &f.map(|x| 2.0 * x));
        let stack = VoxelFeatureStack::new(vec![a.clone(), b.clone()]).unwrap();
        let w = DoTWeights::identity_with(1, 3, 3, 3).unwrap();
        let out = aggregate_dot(&stack, &coords, &w).unwrap();
        assert_eq!(out.get(0).unwrap(), &[1.0, -1.0, 4.0]);
        let swapped = VoxelFeatureStack::new(vec![b, a]).unwrap();
        assert_eq!(aggregate_dot(&swapped, &coords, &w).unwrap(), out);
    }

    #[test]
    fn pyramid_shape_chain() {
        let coords = grid_coords(9, 12);
        for level in 1..=4u8 {
            let w = DoTWeights::identity(level).unwrap();
            w.check_pyramid().unwrap();
            let cin = PYRAMID_CHANNELS[level as usize - 1];
            let stack = random_stack(level as u64, &coords, cin, 2, level);
            let out = aggregate_dot(&stack, &coords, &w).unwrap();
            assert_eq!(out.channels, AGGREGATED_CHANNELS[level as usize - 1]);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let coords = grid_coords(3, 10);
        let stack = random_stack(3, &coords, 5, 2, 1);
        let w = DoTWeights::identity_with(1, 4, 4, 3).unwrap();
        assert!(matches!(aggregate_dot(&stack, &coords, &w), Err(Error::ChannelMismatch(_))));
    }

    #[test]
    fn weights_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dotw");
        let mut w = DoTWeights::random(3, 7, 4, 3, 42).unwrap();
        w.pool_kernel = 3;
        w.write(&path).unwrap();
        assert_eq!(DoTWeights::read(&path).unwrap(), w);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(DoTWeights::read(&path), Err(Error::Format { .. })));
    }
}
