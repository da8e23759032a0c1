//! PLY 1.0 import/export (ASCII and binary little-endian).
//!
//! Import reads the `vertex` element, which must be the first element:
//! `x`/`y`/`z` are required, `red`/`green`/`blue` and an integer `label` or
//! `segment` property are optional, anything else is skipped.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::model::{ClassId, LabeledCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        let start = pos;
        let rel = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(start as u64, format!("unterminated header while reading {what}")))?;
        pos += rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| Error::parse(start as u64, "header is not ASCII"))?
            .trim_end_matches('\r')
            .to_string();
        Ok((start, line))
    };

    let (_, magic) = next_line("magic")?;
    if magic.trim() != "ply" {
        return Err(Error::parse(0, "missing \"ply\" magic line"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (at, line) = next_line("header")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", fmt, version] => {
                if *version != "1.0" {
                    return Err(Error::parse(at as u64, format!("unsupported PLY version {version}")));
                }
                format = Some(match *fmt {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(Error::parse(at as u64, format!("unsupported PLY format {other}")))
                    }
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(at as u64, format!("bad element count {count:?}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", count, item, name] => {
                let (Some(count), Some(item)) = (Scalar::parse(count), Scalar::parse(item)) else {
                    return Err(Error::parse(at as u64, format!("bad list property {line:?}")));
                };
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(at as u64, "property before any element"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind: PropKind::List { count, item },
                });
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| Error::parse(at as u64, format!("unknown property type {ty:?}")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(at as u64, "property before any element"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind: PropKind::Scalar(ty),
                });
            }
            ["end_header"] => break,
            _ => return Err(Error::parse(at as u64, format!("unrecognized header line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| Error::parse(0, "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: pos,
    })
}

struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    label: Option<usize>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |name: &str| el.props.iter().position(|p| p.name == name);
    let scalar_at = |i: usize| match el.props[i].kind {
        PropKind::Scalar(s) => Some(s),
        PropKind::List { .. } => None,
    };
    let (Some(x), Some(y), Some(z)) = (find("x"), find("y"), find("z")) else {
        return Err(Error::InvalidData("not a point cloud: vertex element lacks x/y/z".into()));
    };
    for i in [x, y, z] {
        if scalar_at(i).is_none() {
            return Err(Error::InvalidData("not a point cloud: coordinate is a list property".into()));
        }
    }
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) if [r, g, b].iter().all(|&i| scalar_at(i).is_some()) => Some([r, g, b]),
        _ => None,
    };
    let label = find("label")
        .or_else(|| find("segment"))
        .filter(|&i| scalar_at(i).is_some_and(Scalar::is_integer));
    Ok(VertexLayout {
        xyz: [x, y, z],
        rgb,
        label,
    })
}

fn build_cloud(scene_id: &str, rows: Vec<Vec<f64>>, layout: &VertexLayout) -> Result<LabeledCloud> {
    let coords = rows
        .iter()
        .map(|r| [r[layout.xyz[0]], r[layout.xyz[1]], r[layout.xyz[2]]])
        .collect();
    let colors = layout.rgb.map(|[ri, gi, bi]| {
        rows.iter()
            .map(|r| [r[ri].clamp(0.0, 255.0) as u8, r[gi].clamp(0.0, 255.0) as u8, r[bi].clamp(0.0, 255.0) as u8])
            .collect()
    });
    let labels = match layout.label {
        Some(li) => {
            let mut out = Vec::with_capacity(rows.len());
            for (i, r) in rows.iter().enumerate() {
                let v = r[li];
                if !(0.0..=ClassId::MAX as f64).contains(&v) {
                    return Err(Error::InvalidData(format!("label {v} at vertex {i} out of range")));
                }
                out.push(v as ClassId);
            }
            Some(out)
        }
        None => None,
    };
    LabeledCloud::new(scene_id, coords, colors, labels)
}

/// Parses PLY bytes into a cloud named `scene_id`.
pub fn parse_ply(bytes: &[u8], scene_id: &str) -> Result<LabeledCloud> {
    let header = parse_header(bytes)?;
    let first = header
        .elements
        .first()
        .ok_or_else(|| Error::InvalidData("not a point cloud: no elements".into()))?;
    if first.name != "vertex" {
        let msg = if header.elements.iter().any(|e| e.name == "vertex") {
            format!("unknown element order: vertex must precede {:?}", first.name)
        } else {
            "not a point cloud: no vertex element".to_string()
        };
        return Err(Error::parse(header.body_offset as u64, msg));
    }
    let layout = vertex_layout(first)?;
    let body = &bytes[header.body_offset..];
    let rows = match header.format {
        PlyFormat::Ascii => read_ascii_rows(body, first, header.body_offset)?,
        PlyFormat::BinaryLittleEndian => read_binary_rows(body, first, header.body_offset)?,
    };
    build_cloud(scene_id, rows, &layout)
}

fn read_ascii_rows(body: &[u8], el: &Element, base: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::str::from_utf8(body).map_err(|_| Error::parse(base as u64, "ASCII body is not UTF-8"))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut rows = Vec::with_capacity(el.count);
    for i in 0..el.count {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(body.len() as u64 + base as u64, format!("truncated: vertex {i} missing")))?;
        let mut toks = line.split_whitespace();
        let mut row = Vec::with_capacity(el.props.len());
        let mut next = |what: &str| -> Result<f64> {
            let t = toks
                .next()
                .ok_or_else(|| Error::parse(base as u64, format!("vertex {i}: missing {what}")))?;
            t.parse::<f64>()
                .map_err(|_| Error::parse(base as u64, format!("vertex {i}: bad value {t:?} for {what}")))
        };
        for p in &el.props {
            match p.kind {
                // a declared float keeps single precision, as in the binary encodings
                PropKind::Scalar(Scalar::F32) => row.push(next(&p.name)? as f32 as f64),
                PropKind::Scalar(_) => row.push(next(&p.name)?),
                PropKind::List { .. } => {
                    let n = next(&p.name)? as usize;
                    for _ in 0..n {
                        next(&p.name)?;
                    }
                    row.push(f64::NAN);
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_binary_rows(body: &[u8], el: &Element, base: usize) -> Result<Vec<Vec<f64>>> {
    let mut pos = 0usize;
    let mut rows = Vec::with_capacity(el.count);
    let need = |pos: usize, n: usize, i: usize| -> Result<()> {
        if pos + n > body.len() {
            Err(Error::parse((base + pos) as u64, format!("truncated: vertex {i} incomplete")))
        } else {
            Ok(())
        }
    };
    for i in 0..el.count {
        let mut row = Vec::with_capacity(el.props.len());
        for p in &el.props {
            match p.kind {
                PropKind::Scalar(s) => {
                    need(pos, s.size(), i)?;
                    row.push(s.read_le(&body[pos..]));
                    pos += s.size();
                }
                PropKind::List { count, item } => {
                    need(pos, count.size(), i)?;
                    let n = count.read_le(&body[pos..]) as usize;
                    pos += count.size();
                    need(pos, n * item.size(), i)?;
                    pos += n * item.size();
                    row.push(f64::NAN);
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ply_bytes(cloud: &LabeledCloud, format: PlyFormat) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    header.push_str(&format!("comment scene {}\n", cloud.scene_id));
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors().is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.labels().is_some() {
        header.push_str("property ushort label\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for i in 0..cloud.len() {
        let p = cloud.coords()[i];
        let xyz = [p[0] as f32, p[1] as f32, p[2] as f32];
        match format {
            PlyFormat::Ascii => {
                let mut line = format!("{} {} {}", xyz[0], xyz[1], xyz[2]);
                if let Some(c) = cloud.colors() {
                    line.push_str(&format!(" {} {} {}", c[i][0], c[i][1], c[i][2]));
                }
                if let Some(l) = cloud.labels() {
                    line.push_str(&format!(" {}", l[i]));
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in xyz {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = cloud.colors() {
                    out.extend_from_slice(&c[i]);
                }
                if let Some(l) = cloud.labels() {
                    out.extend_from_slice(&l[i].to_le_bytes());
                }
            }
        }
    }
    out
}

/// Imports a PLY file; the scene id is the file stem.
pub fn import_ply(path: &Path) -> Result<LabeledCloud> {
    let bytes = read_file(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    parse_ply(&bytes, &id)
}

pub fn export_ply(cloud: &LabeledCloud, path: &Path, format: PlyFormat) -> Result<()> {
    write_file(path, &write_ply_bytes(cloud, format))
}
