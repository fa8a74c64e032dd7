use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde_json::{json, Map, Value};

use super::{io_error, DataError};
use crate::language::{tokenize, Query, Vocabulary};
use crate::moments::{consensus_span, Span};

/// Segment length of the released corpus, in seconds.
pub const SEGMENT_SECONDS: f64 = 5.0;
/// Segment count assumed when a record gives neither a count nor a duration.
pub const DEFAULT_NUM_SEGMENTS: usize = 6;
const MAX_SPANS: usize = 4;

/// Accepted spellings of each field, tried in order.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyAliases {
    pub annotation_id: Vec<String>,
    pub video: Vec<String>,
    pub description: Vec<String>,
    pub times: Vec<String>,
    pub num_segments: Vec<String>,
    pub duration: Vec<String>,
}

fn owned(keys: &[&str]) -> Vec<String> {
    keys.iter().map(|k| k.to_string()).collect()
}

impl Default for KeyAliases {
    fn default() -> Self {
        Self {
            annotation_id: owned(&["annotation_id", "id"]),
            video: owned(&["video", "video_id"]),
            description: owned(&["description", "sentence", "query"]),
            times: owned(&["times", "spans"]),
            num_segments: owned(&["num_segments"]),
            duration: owned(&["duration"]),
        }
    }
}

impl KeyAliases {
    /// Parses `field=alias1,alias2;field=...`; aliases are tried before the
    /// defaults.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let mut out = Self::default();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (field, aliases) = part
                .split_once('=')
                .ok_or_else(|| format!("expected `field=alias,...`, found `{part}`"))?;
            let slot = match field.trim() {
                "annotation_id" => &mut out.annotation_id,
                "video" => &mut out.video,
                "description" => &mut out.description,
                "times" => &mut out.times,
                "num_segments" => &mut out.num_segments,
                "duration" => &mut out.duration,
                other => return Err(format!("unknown annotation field `{other}`")),
            };
            let mut list: Vec<String> = aliases.split(',').map(|a| a.trim().to_string()).collect();
            list.retain(|a| !a.is_empty());
            list.extend(slot.drain(..));
            *slot = list;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub annotation_id: String,
    pub video_id: String,
    pub description: String,
    /// Annotator spans, exactly four after ingestion.
    pub times: Vec<Span>,
    pub num_segments: usize,
    /// Set when fewer than four spans were supplied and the modal span was repeated.
    pub padded: bool,
}

impl AnnotationRecord {
    /// Training target: the most frequent exact span, earliest on ties.
    pub fn positive(&self) -> Span {
        consensus_span(&self.times).expect("records hold at least one span")
    }

    pub fn to_query(&self, vocabulary: &Vocabulary) -> Query {
        Query {
            annotation_id: self.annotation_id.clone(),
            description: self.description.clone(),
            tokens: vocabulary.encode(&tokenize(&self.description)),
            video_id: self.video_id.clone(),
            num_segments: self.num_segments,
            annotations: self.times.clone(),
        }
    }
}

/// Counts of what ingestion changed or dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<(String, String)>,
    pub padded: usize,
    pub truncated: usize,
}

fn field<'a>(obj: &'a Map<String, Value>, keys: &[String]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(k))
}

fn record_error(index: usize, field: &str, reason: impl Into<String>) -> DataError {
    DataError::Record {
        index,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn as_count(v: &Value) -> Option<usize> {
    v.as_u64().and_then(|n| usize::try_from(n).ok())
}

fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Malformed records are errors; records with an invalid span are rejected
/// whole and listed in the report.
pub fn parse_annotations(
    text: &str,
    aliases: &KeyAliases,
) -> Result<(Vec<AnnotationRecord>, IngestReport), DataError> {
    let value: Value = serde_json::from_str(text).map_err(|source| DataError::Json {
        path: "<input>".into(),
        source,
    })?;
    records_from_value(&value, aliases)
}

fn records_from_value(
    value: &Value,
    aliases: &KeyAliases,
) -> Result<(Vec<AnnotationRecord>, IngestReport), DataError> {
    let items = value
        .as_array()
        .ok_or_else(|| record_error(0, "<root>", "expected a JSON array of records"))?;
    let mut report = IngestReport::default();
    let mut out = Vec::with_capacity(items.len());
    for (index, item) in items.iter().enumerate() {
        let obj = item
            .as_object()
            .ok_or_else(|| record_error(index, "<record>", "expected an object"))?;
        let text_field = |keys: &[String], name: &str| -> Result<String, DataError> {
            let v = field(obj, keys).ok_or_else(|| record_error(index, name, "missing"))?;
            as_text(v).ok_or_else(|| record_error(index, name, format!("expected a string, found {v}")))
        };
        let annotation_id = text_field(&aliases.annotation_id, "annotation_id")?;
        let video_id = text_field(&aliases.video, "video")?;
        let description = text_field(&aliases.description, "description")?;
        let times_value = field(obj, &aliases.times).ok_or_else(|| record_error(index, "times", "missing"))?;
        let pairs = times_value
            .as_array()
            .ok_or_else(|| record_error(index, "times", "expected an array of [start, end] pairs"))?;
        let mut raw = Vec::with_capacity(pairs.len());
        for p in pairs {
            let pair = p
                .as_array()
                .filter(|a| a.len() == 2)
                .and_then(|a| Some((as_count(&a[0])?, as_count(&a[1])?)))
                .ok_or_else(|| record_error(index, "times", format!("expected [start, end] of non-negative integers, found {p}")))?;
            raw.push(pair);
        }
        let num_segments = match field(obj, &aliases.num_segments) {
            Some(v) => as_count(v)
                .filter(|&n| n > 0)
                .ok_or_else(|| record_error(index, "num_segments", format!("expected a positive integer, found {v}")))?,
            None => match field(obj, &aliases.duration).and_then(Value::as_f64) {
                Some(d) if d > 0.0 => ((d / SEGMENT_SECONDS).ceil() as usize).clamp(1, DEFAULT_NUM_SEGMENTS),
                _ => DEFAULT_NUM_SEGMENTS,
            },
        };

        let invalid = raw
            .iter()
            .find(|&&(s, e)| !Span::new(s, e).is_valid_for(num_segments))
            .copied();
        if raw.is_empty() || invalid.is_some() {
            let reason = match invalid {
                Some((s, e)) => format!("span [{s}, {e}] invalid for {num_segments} segments"),
                None => "no spans".to_string(),
            };
            warn!("rejecting annotation `{annotation_id}`: {reason}");
            report.rejected.push((annotation_id, reason));
            continue;
        }
        let mut times: Vec<Span> = raw.into_iter().map(|(s, e)| Span::new(s, e)).collect();
        if times.len() > MAX_SPANS {
            times.truncate(MAX_SPANS);
            report.truncated += 1;
        }
        let padded = times.len() < MAX_SPANS;
        if padded {
            let modal = consensus_span(&times).expect("non-empty");
            times.resize(MAX_SPANS, modal);
            report.padded += 1;
        }
        out.push(AnnotationRecord {
            annotation_id,
            video_id,
            description,
            times,
            num_segments,
            padded,
        });
    }
    if items.is_empty() {
        warn!("annotation list is empty");
    }
    out.sort_by(|a, b| natural_cmp(&a.annotation_id, &b.annotation_id));
    report.accepted = out.len();
    Ok((out, report))
}

pub fn load_annotations(
    path: &Path,
    aliases: &KeyAliases,
) -> Result<(Vec<AnnotationRecord>, IngestReport), DataError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let value: Value = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let (records, report) = records_from_value(&value, aliases)?;
    if !report.rejected.is_empty() || report.padded > 0 || report.truncated > 0 {
        log::info!(
            "{}: {} accepted, {} rejected, {} padded, {} truncated",
            path.display(),
            report.accepted,
            report.rejected.len(),
            report.padded,
            report.truncated
        );
    }
    Ok((records, report))
}

/// Canonical JSON with the default key names.
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), DataError> {
    let list: Vec<Value> = records
        .iter()
        .map(|r| {
            json!({
                "annotation_id": r.annotation_id,
                "video": r.video_id,
                "description": r.description,
                "times": r.times.iter().map(|s| [s.start, s.end]).collect::<Vec<_>>(),
                "num_segments": r.num_segments,
            })
        })
        .collect();
    let text = serde_json::to_string_pretty(&Value::Array(list)).expect("JSON values serialize");
    fs::write(path, text + "\n").map_err(io_error(path))
}

/// Groups records by video id.
pub(crate) fn by_video(records: &[AnnotationRecord]) -> BTreeMap<&str, Vec<&AnnotationRecord>> {
    let mut out: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        out.entry(&r.video_id).or_default().push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<(Vec<AnnotationRecord>, IngestReport), DataError> {
        records_from_value(&serde_json::from_str(text).unwrap(), &KeyAliases::default())
    }

    #[test]
    fn ambiguity_record_verbatim() {
        let (r, rep) = parse(
            r#"[{"annotation_id": 7, "video": "v", "description": "a dog", "times": [[0,0],[0,0],[0,0],[0,1]], "extra": 1}]"#,
        )
        .unwrap();
        assert_eq!(rep.accepted, 1);
        assert_eq!(r[0].annotation_id, "7");
        assert_eq!(r[0].times, vec![Span::new(0, 0), Span::new(0, 0), Span::new(0, 0), Span::new(0, 1)]);
        assert_eq!(r[0].num_segments, 6);
        assert!(!r[0].padded);
    }

    #[test]
    fn invalid_span_rejected() {
        let (r, rep) = parse(
            r#"[{"annotation_id": "a", "video": "v", "description": "x", "times": [[5,4],[0,0]]},
                {"annotation_id": "b", "video": "v", "description": "x", "times": [[0,6]], "num_segments": 6}]"#,
        )
        .unwrap();
        assert!(r.is_empty());
        assert_eq!(rep.rejected.len(), 2);
    }

    #[test]
    fn empty_list() {
        let (r, rep) = parse("[]").unwrap();
        assert!(r.is_empty());
        assert_eq!(rep, IngestReport::default());
    }

    #[test]
    fn malformed_record_names_index_and_field() {
        let err = parse(r#"[{"annotation_id": "a", "video": "v", "description": "x", "times": [[0,0]]}, {"video": "v"}]"#)
            .unwrap_err();
        match err {
            DataError::Record { index, field, .. } => assert_eq!((index, field.as_str()), (1, "annotation_id")),
            other => panic!("{other}"),
        }
        assert!(parse(r#"[{"annotation_id": "a", "video": "v", "description": "x", "times": [[0]]}]"#).is_err());
    }

    #[test]
    fn padding_truncation_and_order() {
        let (r, rep) = parse(
            r#"[{"annotation_id": "10", "video": "v", "description": "x", "times": [[1,1],[2,2],[2,2]]},
                {"annotation_id": "9", "video": "v", "description": "x", "times": [[0,0],[0,0],[0,0],[0,0],[1,1]]},
                {"annotation_id": "b", "video": "v", "description": "x", "times": [[0,0]], "duration": 12.0}]"#,
        )
        .unwrap();
        let ids: Vec<&str> = r.iter().map(|x| x.annotation_id.as_str()).collect();
        assert_eq!(ids, vec!["9", "10", "b"]);
        assert_eq!(r[1].times[3], Span::new(2, 2));
        assert!(r[1].padded);
        assert_eq!(r[0].times.len(), 4);
        assert_eq!(r[2].num_segments, 3);
        assert_eq!((rep.padded, rep.truncated), (2, 1));
    }

    #[test]
    fn aliases() {
        let a = KeyAliases::parse("video=clip; description = text").unwrap();
        let (r, _) = records_from_value(
            &serde_json::from_str(r#"[{"id": "1", "clip": "c", "text": "t", "times": [[0,0]]}]"#).unwrap(),
            &a,
        )
        .unwrap();
        assert_eq!(r[0].video_id, "c");
        assert!(KeyAliases::parse("nonsense=x").is_err());
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let records = vec![AnnotationRecord {
            annotation_id: "3".into(),
            video_id: "v".into(),
            description: "the \"first\" dog".into(),
            times: vec![Span::new(0, 1), Span::new(0, 1), Span::new(2, 3), Span::new(4, 4)],
            num_segments: 5,
            padded: false,
        }];
        write_annotations(&path, &records).unwrap();
        let (back, _) = load_annotations(&path, &KeyAliases::default()).unwrap();
        assert_eq!(back, records);
    }
}
