//! Native `.crs` scene layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "CORRSEG1"
//! point_count    u64
//! flags          u32      bit 0 has_colors, bit 1 has_labels
//! taxonomy_hash  u64
//! scene_id       u32 length + UTF-8 bytes
//! coords         point_count x 3 x f64
//! colors         point_count x 3 x u8     (has_colors)
//! labels         point_count x u16        (has_labels)
//! ```

use std::path::Path;

use super::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::model::LabeledCloud;

pub const SCENE_MAGIC: &[u8; 8] = b"CORRSEG1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SceneFlags {
    pub has_colors: bool,
    pub has_labels: bool,
}

impl SceneFlags {
    const COLORS: u32 = 1;
    const LABELS: u32 = 2;

    pub fn bits(self) -> u32 {
        (if self.has_colors { Self::COLORS } else { 0 }) | (if self.has_labels { Self::LABELS } else { 0 })
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        if bits & !(Self::COLORS | Self::LABELS) != 0 {
            return None;
        }
        Some(Self {
            has_colors: bits & Self::COLORS != 0,
            has_labels: bits & Self::LABELS != 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneFileHeader {
    pub point_count: u64,
    pub flags: SceneFlags,
    pub taxonomy_hash: u64,
    pub scene_id: String,
}

pub fn encode_scene(cloud: &LabeledCloud, taxonomy_hash: u64) -> Vec<u8> {
    let n = cloud.len();
    let flags = SceneFlags {
        has_colors: cloud.colors().is_some(),
        has_labels: cloud.labels().is_some(),
    };
    let id = cloud.scene_id.as_bytes();
    let mut out = Vec::with_capacity(32 + id.len() + n * (24 + 3 + 2));
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&flags.bits().to_le_bytes());
    out.extend_from_slice(&taxonomy_hash.to_le_bytes());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    for p in cloud.coords() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(colors) = cloud.colors() {
        for c in colors {
            out.extend_from_slice(c);
        }
    }
    if let Some(labels) = cloud.labels() {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

fn decode_header(r: &mut ByteReader<'_>) -> Result<SceneFileHeader> {
    let magic = r.take(8, "magic")?;
    if magic != SCENE_MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:?}, expected \"CORRSEG1\"")));
    }
    let point_count = r.u64("point_count")?;
    let flags_at = r.offset();
    let bits = r.u32("flags")?;
    let flags = SceneFlags::from_bits(bits)
        .ok_or_else(|| Error::parse(flags_at, format!("unknown flag bits {bits:#x}")))?;
    let taxonomy_hash = r.u64("taxonomy_hash")?;
    let id_len = r.u32("scene_id length")? as usize;
    let id_at = r.offset();
    let scene_id = std::str::from_utf8(r.take(id_len, "scene_id")?)
        .map_err(|_| Error::parse(id_at, "scene_id is not UTF-8"))?
        .to_string();
    Ok(SceneFileHeader {
        point_count,
        flags,
        taxonomy_hash,
        scene_id,
    })
}

pub fn decode_scene(bytes: &[u8]) -> Result<(SceneFileHeader, LabeledCloud)> {
    let mut r = ByteReader::new(bytes);
    let header = decode_header(&mut r)?;
    let n = usize::try_from(header.point_count)
        .map_err(|_| Error::parse(8, "point_count does not fit in memory"))?;
    let per_point = 24 + if header.flags.has_colors { 3 } else { 0 } + if header.flags.has_labels { 2 } else { 0 };
    let needed = n.checked_mul(per_point);
    if needed.is_none_or(|need| need != r.remaining()) {
        return Err(Error::parse(
            r.offset(),
            format!(
                "flag/array mismatch: {} points with flags {:?} need {} payload bytes, found {}",
                n,
                header.flags,
                needed.map_or("overflow".to_string(), |v| v.to_string()),
                r.remaining()
            ),
        ));
    }
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.f64("x")?, r.f64("y")?, r.f64("z")?]);
    }
    let colors = if header.flags.has_colors {
        let raw = r.take(n * 3, "colors")?;
        Some(raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    } else {
        None
    };
    let labels = if header.flags.has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u16("label")?);
        }
        Some(l)
    } else {
        None
    };
    r.expect_end()?;
    let cloud = LabeledCloud::new(header.scene_id.clone(), coords, colors, labels)
        .map_err(|e| Error::parse(0, e.to_string()))?;
    Ok((header, cloud))
}

pub fn write_scene(path: &Path, cloud: &LabeledCloud, taxonomy_hash: u64) -> Result<()> {
    write_file(path, &encode_scene(cloud, taxonomy_hash))
}

pub fn read_scene(path: &Path) -> Result<LabeledCloud> {
    decode_scene(&read_file(path)?).map(|(_, c)| c)
}

pub fn read_scene_header(path: &Path) -> Result<SceneFileHeader> {
    let bytes = read_file(path)?;
    decode_header(&mut ByteReader::new(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_point() -> LabeledCloud {
        LabeledCloud::new("one", vec![[1.5, -2.25, 1e-300]], Some(vec![[1, 2, 3]]), Some(vec![7])).unwrap()
    }

    #[test]
    fn one_point_round_trip() {
        let c = one_point();
        let bytes = encode_scene(&c, 42);
        let (h, back) = decode_scene(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(h.taxonomy_hash, 42);
        assert_eq!(h.point_count, 1);
    }

    #[test]
    fn labels_without_colors_sets_only_label_flag() {
        let c = LabeledCloud::labeled("l", vec![[0.0; 3], [1.0; 3]], vec![1, 2]).unwrap();
        let (h, back) = decode_scene(&encode_scene(&c, 0)).unwrap();
        assert_eq!(h.flags, SceneFlags { has_colors: false, has_labels: true });
        assert_eq!(h.flags.bits(), 2);
        assert_eq!(back, c);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_scene(&one_point(), 0);
        bytes[0] = b'X';
        match decode_scene(&bytes) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_and_mismatched() {
        let bytes = encode_scene(&one_point(), 0);
        for cut in [4, 12, 20, 30, bytes.len() - 1] {
            assert!(matches!(decode_scene(&bytes[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        // clear the colors flag: payload no longer matches
        let mut b = bytes.clone();
        b[16] = 2;
        match decode_scene(&b) {
            Err(Error::Parse { offset, message }) => {
                assert!(message.contains("mismatch"));
                assert_eq!(offset, 32 + 3);
            }
            other => panic!("{other:?}"),
        }
        let mut b = bytes;
        b[16] = 0x10;
        assert!(matches!(decode_scene(&b), Err(Error::Parse { offset: 16, .. })));
    }
}
