//! Probability (`CRSPROB1`) and label (`CRSLBL01`) files exchanged between
//! `predict`, `fuse`, `verify` and `eval`.
//!
//! ```text
//! CRSPROB1 | u64 N | u32 C | u8 source | N*C f64
//! CRSLBL01 | u64 N | u8 provenance | N u16
//! ```

use std::path::Path;

use super::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::model::{FieldSource, Prediction, ProbabilityField, Provenance};

pub const FIELD_MAGIC: &[u8; 8] = b"CRSPROB1";
pub const LABELS_MAGIC: &[u8; 8] = b"CRSLBL01";

fn source_code(s: FieldSource) -> u8 {
    match s {
        FieldSource::Local => 0,
        FieldSource::Global => 1,
        FieldSource::Fused => 2,
    }
}

pub fn encode_field(field: &ProbabilityField) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + field.as_slice().len() * 8);
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(field.len() as u64).to_le_bytes());
    out.extend_from_slice(&(field.num_classes() as u32).to_le_bytes());
    out.push(source_code(field.source()));
    for v in field.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<ProbabilityField> {
    let mut r = ByteReader::new(bytes);
    if r.take(8, "magic")? != FIELD_MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"CRSPROB1\""));
    }
    let n = r.u64("row count")? as usize;
    let c = r.u32("class count")? as usize;
    let at = r.offset();
    let source = match r.u8("source")? {
        0 => FieldSource::Local,
        1 => FieldSource::Global,
        2 => FieldSource::Fused,
        other => return Err(Error::parse(at, format!("unknown field source {other}"))),
    };
    let count = n.checked_mul(c).filter(|v| v.checked_mul(8) == Some(r.remaining()));
    let Some(count) = count else {
        return Err(Error::parse(
            r.offset(),
            format!("{n}x{c} field does not match {} payload bytes", r.remaining()),
        ));
    };
    let mut probs = Vec::with_capacity(count);
    for _ in 0..count {
        probs.push(r.f64("probability")?);
    }
    ProbabilityField::new(probs, c, source).map_err(|e| Error::parse(21, e.to_string()))
}

pub fn encode_prediction(pred: &Prediction) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + pred.len() * 2);
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&(pred.len() as u64).to_le_bytes());
    out.push(pred.provenance.code());
    for l in &pred.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_prediction(bytes: &[u8]) -> Result<Prediction> {
    let mut r = ByteReader::new(bytes);
    if r.take(8, "magic")? != LABELS_MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"CRSLBL01\""));
    }
    let n = r.u64("label count")? as usize;
    let at = r.offset();
    let code = r.u8("provenance")?;
    let provenance =
        Provenance::from_code(code).ok_or_else(|| Error::parse(at, format!("unknown provenance {code}")))?;
    if n.checked_mul(2) != Some(r.remaining()) {
        return Err(Error::parse(
            r.offset(),
            format!("{n} labels do not match {} payload bytes", r.remaining()),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u16("label")?);
    }
    Ok(Prediction::new(labels, provenance))
}

pub fn write_field(path: &Path, field: &ProbabilityField) -> Result<()> {
    write_file(path, &encode_field(field))
}

pub fn read_field(path: &Path) -> Result<ProbabilityField> {
    decode_field(&read_file(path)?)
}

pub fn write_prediction(path: &Path, pred: &Prediction) -> Result<()> {
    write_file(path, &encode_prediction(pred))
}

pub fn read_prediction(path: &Path) -> Result<Prediction> {
    decode_prediction(&read_file(path)?)
}
