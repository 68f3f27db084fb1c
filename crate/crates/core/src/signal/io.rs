//! Record files: one JSON header line, a `---` separator line, then raw
//! little-endian `f32` samples, lead-major. Annotations live in a JSONL
//! sidecar (`<path>.ann.jsonl`), one `{"pos":..,"label":..}` per line.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BeatAnnotations, BeatLabel, EcgRecord};
use crate::{Error, Result, SCHEMA_VERSION};

const SEPARATOR: &[u8] = b"---\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    fs: u32,
    lead_names: Vec<String>,
    n_samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    pos: usize,
    label: BeatLabel,
}

pub fn annotation_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ann.jsonl");
    PathBuf::from(s)
}

pub fn save_record(record: &EcgRecord, path: &Path) -> Result<()> {
    let header = Header {
        version: SCHEMA_VERSION,
        fs: record.fs(),
        lead_names: record.lead_names().to_vec(),
        n_samples: record.n_samples(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.extend_from_slice(SEPARATOR);
    buf.reserve(record.n_leads() * record.n_samples() * 4);
    for lead in record.leads() {
        for &v in lead {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;

    let ann_path = annotation_path(path);
    match record.annotations() {
        Some(ann) => {
            let mut out = Vec::new();
            for (pos, label) in ann.iter() {
                serde_json::to_writer(&mut out, &AnnotationLine { pos, label })?;
                out.push(b'\n');
            }
            fs::write(&ann_path, out).map_err(|e| Error::io(&ann_path, e))?;
        }
        None => {
            if ann_path.exists() {
                fs::remove_file(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            }
        }
    }
    Ok(())
}

pub fn load_record(path: &Path) -> Result<EcgRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.version != SCHEMA_VERSION {
        return Err(Error::UnknownVersion(header.version));
    }
    let rest = &bytes[nl + 1..];
    if !rest.starts_with(SEPARATOR) {
        return Err(Error::MalformedHeader("missing separator line".into()));
    }
    let payload = &rest[SEPARATOR.len()..];
    let n_leads = header.lead_names.len();
    let expected = n_leads * header.n_samples;
    if payload.len() != expected * 4 {
        return Err(Error::SampleCountMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let leads = (0..n_leads)
        .map(|_| values.by_ref().take(header.n_samples).collect())
        .collect();
    let mut record = EcgRecord::new(leads, header.lead_names, header.fs)?;

    let ann_path = annotation_path(path);
    if ann_path.exists() {
        let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&ann_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let a: AnnotationLine = serde_json::from_str(&line)?;
            positions.push(a.pos);
            labels.push(a.label);
        }
        record = record.with_annotations(BeatAnnotations::new(positions, labels)?)?;
    }
    Ok(record)
}

/// Write `items` as JSONL.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every non-blank line of a JSONL file, parsed as `T`. Errors name the line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                message: format!("{}:{}: {e}", path.display(), i + 1),
                excerpt: crate::error::excerpt(l, 200),
            })
        })
        .collect()
}
