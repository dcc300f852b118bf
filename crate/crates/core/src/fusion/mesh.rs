use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use nalgebra::Point3;

use super::tsdf::{VoxelGrid, VoxelIndex};
use crate::error::{Error, Result};

/// Class id reserved for unannotated surface.
pub const UNLABELED: u16 = 0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub labels: Option<Vec<u16>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl Mesh {
    pub fn point_cloud(vertices: Vec<Point3<f64>>, labels: Option<Vec<u16>>) -> Self {
        Self {
            vertices,
            triangles: Vec::new(),
            labels,
            colors: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(i) = self.vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::DegenerateGeometry(format!("vertex {i} is not finite")));
        }
        for t in &self.triangles {
            if t.iter().any(|&i| i as usize >= n) {
                return Err(Error::DegenerateGeometry(format!("triangle {t:?} indexes past {n} vertices")));
            }
            let [a, b, c] = t.map(|i| self.vertices[i as usize]);
            if !((b - a).cross(&(c - a)).norm() > 0.0) {
                return Err(Error::DegenerateGeometry(format!("triangle {t:?} has zero area")));
            }
        }
        for len in [self.labels.as_ref().map(Vec::len), self.colors.as_ref().map(Vec::len)]
            .into_iter()
            .flatten()
        {
            if len != n {
                return Err(Error::dims(n, len));
            }
        }
        Ok(())
    }

    /// Removes vertices not used by any triangle, keeping first-use order.
    pub(crate) fn drop_unreferenced(&mut self) {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut kept = Vec::new();
        for t in &mut self.triangles {
            for i in t.iter_mut() {
                let old = *i as usize;
                if remap[old] == u32::MAX {
                    remap[old] = kept.len() as u32;
                    kept.push(old);
                }
                *i = remap[old];
            }
        }
        self.vertices = kept.iter().map(|&i| self.vertices[i]).collect();
        if let Some(l) = &self.labels {
            self.labels = Some(kept.iter().map(|&i| l[i]).collect());
        }
        if let Some(c) = &self.colors {
            self.colors = Some(kept.iter().map(|&i| c[i]).collect());
        }
    }

    /// Sets per-vertex classes and the matching palette colors.
    pub fn set_labels(&mut self, labels: Vec<u16>) -> Result<()> {
        if labels.len() != self.vertices.len() {
            return Err(Error::dims(self.vertices.len(), labels.len()));
        }
        self.colors = Some(labels.iter().map(|&c| class_color(c)).collect());
        self.labels = Some(labels);
        Ok(())
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_ply_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_ply_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format binary_little_endian 1.0")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        for axis in ["x", "y", "z"] {
            writeln!(w, "property float {axis}")?;
        }
        if self.colors.is_some() {
            for c in ["red", "green", "blue"] {
                writeln!(w, "property uchar {c}")?;
            }
        }
        if self.labels.is_some() {
            writeln!(w, "property ushort label")?;
        }
        writeln!(w, "element face {}", self.triangles.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "end_header")?;
        for (i, v) in self.vertices.iter().enumerate() {
            for c in v.iter() {
                w.write_f32::<LittleEndian>(*c as f32)?;
            }
            if let Some(colors) = &self.colors {
                w.write_all(&colors[i])?;
            }
            if let Some(labels) = &self.labels {
                w.write_u16::<LittleEndian>(labels[i])?;
            }
        }
        for t in &self.triangles {
            w.write_u8(3)?;
            for &i in t {
                w.write_i32::<LittleEndian>(i as i32)?;
            }
        }
        Ok(())
    }

    pub fn read_ply(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_ply(&bytes).map_err(|(offset, message)| Error::Format {
            path: path.to_path_buf(),
            offset,
            message,
        })
    }
}

/// Deterministic display color for a class id; class 0 is grey.
pub fn class_color(class: u16) -> [u8; 3] {
    if class == UNLABELED {
        return [128, 128, 128];
    }
    let mut h = (class as u32).wrapping_mul(0x9E37_79B9);
    h ^= h >> 15;
    h = h.wrapping_mul(0x85EB_CA6B);
    h ^= h >> 13;
    [
        64 + (h & 0xBF) as u8,
        64 + ((h >> 8) & 0xBF) as u8,
        64 + ((h >> 16) & 0xBF) as u8,
    ]
}

/// Labels every vertex with the argmax class of its containing voxel.
///
/// Ties go to the lowest class id; vertices in voxels without a
/// distribution, or with an all-zero distribution, become class 0.
pub fn transfer_labels(mesh: &mut Mesh, grid: &VoxelGrid, distributions: &HashMap<VoxelIndex, Vec<f32>>) {
    let labels = mesh
        .vertices
        .iter()
        .map(|v| {
            distributions
                .get(&grid.containing(v))
                .and_then(|d| argmax_class(d))
                .unwrap_or(UNLABELED)
        })
        .collect();
    mesh.set_labels(labels).expect("one label per vertex");
}

/// Index of the largest positive entry, lowest index on ties.
pub fn argmax_class(dist: &[f32]) -> Option<u16> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 && best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i as u16)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

type ParseResult<T> = std::result::Result<T, (u64, String)>;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> ParseResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err((self.pos as u64, format!("unexpected end of file reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn scalar(&mut self, ty: Scalar, what: &str) -> ParseResult<f64> {
        Ok(ty.read(self.take(ty.size(), what)?))
    }
}

fn parse_header(bytes: &[u8]) -> ParseResult<(Vec<Element>, usize)> {
    let mut pos = 0usize;
    let mut elements: Vec<Element> = Vec::new();
    let mut first = true;
    loop {
        let line_start = pos;
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err((line_start as u64, "header not terminated by end_header".into()));
        };
        pos += nl + 1;
        let line = std::str::from_utf8(&bytes[line_start..line_start + nl])
            .map_err(|_| (line_start as u64, "header is not ASCII".to_string()))?
            .trim_end_matches('\r');
        let err = |m: String| (line_start as u64, m);
        let tok: Vec<&str> = line.split_whitespace().collect();
        if first {
            if line != "ply" {
                return Err(err("missing ply magic".into()));
            }
            first = false;
            continue;
        }
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(err(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err(format!("bad element count {count}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before element".into()))?;
                let c = Scalar::parse(ct).ok_or_else(|| err(format!("unknown type {ct}")))?;
                let i = Scalar::parse(it).ok_or_else(|| err(format!("unknown type {it}")))?;
                el.properties.push(Property::List(name.to_string(), c, i));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before element".into()))?;
                let t = Scalar::parse(ty).ok_or_else(|| err(format!("unknown type {ty}")))?;
                el.properties.push(Property::Scalar(name.to_string(), t));
            }
            ["end_header"] => return Ok((elements, pos)),
            _ => return Err(err(format!("unrecognized header line {line:?}"))),
        }
    }
}

fn parse_ply(bytes: &[u8]) -> ParseResult<Mesh> {
    let (elements, body) = parse_header(bytes)?;
    let mut cur = Cursor { bytes, pos: body };
    let mut mesh = Mesh::default();
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let find = |n: &str| {
                    el.properties
                        .iter()
                        .position(|p| matches!(p, Property::Scalar(name, _) if name == n))
                };
                let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
                    return Err((body as u64, "vertex element lacks x, y or z".into()));
                };
                let rgb = (find("red"), find("green"), find("blue"));
                let label = find("label").or_else(|| find("class_id"));
                let mut colors = Vec::new();
                let mut labels = Vec::new();
                let mut vals = vec![0f64; el.properties.len()];
                for _ in 0..el.count {
                    for (k, p) in el.properties.iter().enumerate() {
                        vals[k] = match p {
                            Property::Scalar(_, t) => cur.scalar(*t, "vertex")?,
                            Property::List(_, ct, it) => {
                                let n = cur.scalar(*ct, "vertex list")? as usize;
                                cur.take(n * it.size(), "vertex list")?;
                                0.0
                            }
                        };
                    }
                    let at = cur.pos as u64;
                    let v = Point3::new(vals[ix], vals[iy], vals[iz]);
                    if !v.iter().all(|c| c.is_finite()) {
                        return Err((at, "non-finite vertex position".into()));
                    }
                    mesh.vertices.push(v);
                    if let (Some(r), Some(g), Some(b)) = rgb {
                        colors.push([vals[r] as u8, vals[g] as u8, vals[b] as u8]);
                    }
                    if let Some(l) = label {
                        labels.push(vals[l] as u16);
                    }
                }
                if rgb.0.is_some() && rgb.1.is_some() && rgb.2.is_some() {
                    mesh.colors = Some(colors);
                }
                if label.is_some() {
                    mesh.labels = Some(labels);
                }
            }
            "face" => {
                for _ in 0..el.count {
                    let mut tri = None;
                    for p in &el.properties {
                        match p {
                            Property::List(name, ct, it) => {
                                let at = cur.pos as u64;
                                let n = cur.scalar(*ct, "face")? as usize;
                                let mut idx = Vec::with_capacity(n);
                                for _ in 0..n {
                                    idx.push(cur.scalar(*it, "face index")?);
                                }
                                if name == "vertex_indices" || name == "vertex_index" {
                                    if n != 3 {
                                        return Err((at, format!("face with {n} vertices, expected 3")));
                                    }
                                    tri = Some((at, idx));
                                }
                            }
                            Property::Scalar(_, t) => {
                                cur.scalar(*t, "face")?;
                            }
                        }
                    }
                    let Some((at, idx)) = tri else {
                        return Err((cur.pos as u64, "face element lacks vertex_indices".into()));
                    };
                    let mut t = [0u32; 3];
                    for (k, &i) in idx.iter().enumerate() {
                        if i < 0.0 || i as usize >= mesh.vertices.len() {
                            return Err((at, format!("face index {i} out of range")));
                        }
                        t[k] = i as u32;
                    }
                    mesh.triangles.push(t);
                }
            }
            _ => {
                for _ in 0..el.count {
                    for p in &el.properties {
                        match p {
                            Property::Scalar(_, t) => {
                                cur.take(t.size(), &el.name)?;
                            }
                            Property::List(_, ct, it) => {
                                let n = cur.scalar(*ct, &el.name)? as usize;
                                cur.take(n * it.size(), &el.name)?;
                            }
                        }
                    }
                }
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err((cur.pos as u64, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> Mesh {
        Mesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(1.0, 1.0, 0.0),
                Point3::new(0.0, 1.0, 0.5),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            labels: None,
            colors: None,
        }
    }

    #[test]
    fn ply_round_trip_with_labels() {
        let mut m = quad();
        m.set_labels(vec![0, 3, 3, 7]).unwrap();
        let mut buf = Vec::new();
        m.write_ply_to(&mut buf).unwrap();
        let back = parse_ply(&buf).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ply_without_attributes() {
        let m = quad();
        let mut buf = Vec::new();
        m.write_ply_to(&mut buf).unwrap();
        assert_eq!(parse_ply(&buf).unwrap(), m);
    }

    #[test]
    fn truncated_ply_reports_offset() {
        let m = quad();
        let mut buf = Vec::new();
        m.write_ply_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let (offset, _) = parse_ply(&buf).unwrap_err();
        assert!(offset > 0 && offset as usize <= buf.len());
    }

    #[test]
    fn bad_face_index_reports_offset() {
        let m = quad();
        let mut buf = Vec::new();
        m.write_ply_to(&mut buf).unwrap();
        let n = buf.len();
        buf[n - 4..].copy_from_slice(&99i32.to_le_bytes());
        let (offset, msg) = parse_ply(&buf).unwrap_err();
        assert_eq!(offset as usize, n - 13);
        assert!(msg.contains("out of range"));
    }

    #[test]
    fn transfer_labels_cases() {
        let grid = VoxelGrid {
            origin: [0.0; 3],
            voxel_size: 0.5,
        };
        let mut m = quad();
        transfer_labels(&mut m, &grid, &HashMap::new());
        assert_eq!(m.labels.as_deref(), Some(&[0u16, 0, 0, 0][..]));

        let mut all = HashMap::new();
        for x in -1..4 {
            for y in -1..4 {
                for z in -1..4 {
                    all.insert([x, y, z], vec![0.1, 0.2, 0.7]);
                }
            }
        }
        transfer_labels(&mut m, &grid, &all);
        assert_eq!(m.labels.as_deref(), Some(&[2u16, 2, 2, 2][..]));
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        assert_eq!(argmax_class(&[0.0, 0.4, 0.4]), Some(1));
        assert_eq!(argmax_class(&[0.0, 0.0]), None);
    }
}
