//! Label and feature file formats.
//!
//! Label files are JSON. Two layouts are accepted:
//!
//! - multi-video: `{"<video_id>": [record, ...], ...}`
//! - single-video: `{"annotations": [record, ...]}` or a bare `[record, ...]`,
//!   with the video id taken from the file stem.
//!
//! A record is `{"label": string, "position": milliseconds, "half": int?}`.
//! `position` may also be a decimal string. When `half` is present the
//! record belongs to video `<video_id>_<half>`. Other fields are ignored.
//!
//! Feature files are either the little-endian binary layout
//! (`u64 magic, u64 T_total, u64 P`, then `T_total·P` f32 row-major) or a
//! plain CSV with one row per timestep.

use super::{ms_to_anchor, Action, ActionSet, DataError, FeatureSequence};
use ndarray::Array2;
use serde::Serialize;
use serde_json::Value;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const FEATURE_MAGIC: u64 = 0x4453_5046;
const FEATURE_HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRecord {
    pub video_id: String,
    pub label: String,
    pub position_ms: i64,
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parses a label document into flat records. `default_video_id` names the
/// video for single-video documents.
pub fn parse_label_document(
    text: &str,
    default_video_id: &str,
) -> Result<Vec<LabelRecord>, DataError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| {
        DataError::parse(
            format!("label document (line {}, column {})", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    let mut out = Vec::new();
    match doc {
        Value::Array(records) => parse_records(&records, default_video_id, &mut out)?,
        Value::Object(map) => {
            if let Some(ann) = map.get("annotations") {
                let records = ann.as_array().ok_or_else(|| {
                    DataError::parse("label document", "\"annotations\" must be an array")
                })?;
                parse_records(records, default_video_id, &mut out)?;
            } else {
                for (video_id, records) in &map {
                    let records = records.as_array().ok_or_else(|| {
                        DataError::parse(
                            format!("video {video_id:?}"),
                            "expected an array of records",
                        )
                    })?;
                    parse_records(records, video_id, &mut out)?;
                }
            }
        }
        _ => {
            return Err(DataError::parse(
                "label document",
                "top level must be an object or an array",
            ))
        }
    }
    Ok(out)
}

fn parse_records(
    records: &[Value],
    video_id: &str,
    out: &mut Vec<LabelRecord>,
) -> Result<(), DataError> {
    for (i, rec) in records.iter().enumerate() {
        let ctx = || format!("video {video_id:?}, record {i}");
        let obj = rec
            .as_object()
            .ok_or_else(|| DataError::parse(ctx(), "record must be an object"))?;
        let label = obj
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| DataError::parse(ctx(), "missing string field \"label\""))?;
        let position_ms = match obj.get("position") {
            Some(Value::Number(n)) => n.as_i64(),
            Some(Value::String(s)) => s.trim().parse::<i64>().ok(),
            _ => None,
        }
        .ok_or_else(|| {
            DataError::parse(
                ctx(),
                "\"position\" must be an integer number of milliseconds",
            )
        })?;
        let video_id = match obj.get("half") {
            None | Some(Value::Null) => video_id.to_string(),
            Some(h) => {
                let half = h
                    .as_i64()
                    .or_else(|| h.as_str().and_then(|s| s.trim().parse().ok()))
                    .ok_or_else(|| DataError::parse(ctx(), "\"half\" must be an integer"))?;
                format!("{video_id}_{half}")
            }
        };
        out.push(LabelRecord {
            video_id,
            label: label.to_string(),
            position_ms,
        });
    }
    Ok(())
}

pub fn read_label_records(path: &Path) -> Result<Vec<LabelRecord>, DataError> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| DataError::parse(path.display().to_string(), e.to_string()))?;
    parse_label_document(text, &file_stem(path))
}

/// Loads a label file and converts every record to an anchor index.
///
/// `class_map` lists class names; a record's class is its position in that
/// list. When `lengths` knows a video's `T_total` the index is clipped to it.
pub fn load_labels(
    path: &Path,
    feature_rate_hz: f64,
    class_map: &[String],
    lengths: Option<&HashMap<String, usize>>,
) -> Result<BTreeMap<String, ActionSet>, DataError> {
    let records = read_label_records(path)?;
    labels_from_records(&records, feature_rate_hz, class_map, lengths).map_err(|e| match e {
        DataError::UnknownLabel { label, context } => DataError::UnknownLabel {
            label,
            context: format!("{} ({context})", path.display()),
        },
        other => other,
    })
}

pub fn labels_from_records(
    records: &[LabelRecord],
    feature_rate_hz: f64,
    class_map: &[String],
    lengths: Option<&HashMap<String, usize>>,
) -> Result<BTreeMap<String, ActionSet>, DataError> {
    let class_index: HashMap<&str, usize> = class_map
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut out: BTreeMap<String, Vec<Action>> = BTreeMap::new();
    for rec in records {
        let k = *class_index
            .get(rec.label.as_str())
            .ok_or_else(|| DataError::UnknownLabel {
                label: rec.label.clone(),
                context: format!("video {:?}", rec.video_id),
            })?;
        let len = lengths.and_then(|l| l.get(&rec.video_id).copied());
        let t = ms_to_anchor(rec.position_ms, feature_rate_hz, len);
        out.entry(rec.video_id.clone())
            .or_default()
            .push(Action::new(t, k));
    }
    Ok(out
        .into_iter()
        .map(|(k, v)| (k, ActionSet::new(v)))
        .collect())
}

#[derive(Serialize)]
struct OutRecord<'a> {
    label: &'a str,
    position: i64,
}

/// Writes a multi-video label document. Videos with no actions still get an
/// (empty) entry.
pub fn write_labels(
    path: &Path,
    videos: &BTreeMap<String, Vec<(String, i64)>>,
) -> Result<(), DataError> {
    let mut doc: BTreeMap<&str, Vec<OutRecord<'_>>> = BTreeMap::new();
    for (vid, recs) in videos {
        let mut recs: Vec<&(String, i64)> = recs.iter().collect();
        recs.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        doc.insert(
            vid.as_str(),
            recs.into_iter()
                .map(|(label, position)| OutRecord {
                    label,
                    position: *position,
                })
                .collect(),
        );
    }
    let mut text = serde_json::to_string_pretty(&doc).expect("label document serializes");
    text.push('\n');
    crate::fsio::write_atomic(path, text.as_bytes()).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_feature_bin(features: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = features.dim();
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(&FEATURE_MAGIC.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_bin(bytes: &[u8]) -> Result<Array2<f64>, DataError> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(DataError::parse(
            "feature header",
            format!("need {FEATURE_HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    let (magic, rows, cols) = (word(0), word(1), word(2));
    if magic != FEATURE_MAGIC {
        return Err(DataError::parse(
            "feature header",
            format!("bad magic {magic:#x}"),
        ));
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| DataError::parse("feature header", "dimensions overflow"))?;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() != count {
        return Err(DataError::parse(
            "feature payload",
            format!("{rows}×{cols} needs {count} bytes, found {}", payload.len()),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows as usize, cols as usize), data)
        .map_err(|e| DataError::parse("feature payload", e.to_string()))
}

pub fn parse_feature_csv(text: &str) -> Result<Array2<f64>, DataError> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                DataError::parse(
                    format!("feature csv line {}", lineno + 1),
                    format!("bad number {field:?}"),
                )
            })?;
            data.push(v);
        }
        let n = data.len() - before;
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(DataError::parse(
                    format!("feature csv line {}", lineno + 1),
                    format!("expected {c} columns, found {n}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| DataError::parse("feature csv", "no rows"))?;
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| DataError::parse("feature csv", e.to_string()))
}

/// Loads a feature file; `.csv` files are read as text, anything else as
/// the binary layout.
pub fn load_features(
    path: &Path,
    feature_rate_hz: f64,
    video_id: &str,
) -> Result<FeatureSequence, DataError> {
    let bytes = read_file(path)?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let features = if is_csv {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| DataError::parse(path.display().to_string(), e.to_string()))?;
        parse_feature_csv(text)?
    } else {
        decode_feature_bin(&bytes).map_err(|e| match e {
            DataError::Parse { context, message } => DataError::Parse {
                context: format!("{} ({context})", path.display()),
                message,
            },
            other => other,
        })?
    };
    FeatureSequence::new(features, feature_rate_hz, video_id)
}

pub fn write_feature_bin(path: &Path, features: &Array2<f64>) -> Result<(), DataError> {
    crate::fsio::write_atomic(path, &encode_feature_bin(features)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
