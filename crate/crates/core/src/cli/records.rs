//! `{"id", "text"}` JSONL files exchanged between `translate` and
//! `evaluate`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::corpus::read_file;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

/// Reads one record per non-blank line. The text is the first present
/// field of `fields`; a missing `id` becomes the 0-based record index.
pub fn read_records(path: &Path, fields: &[&str]) -> Result<Vec<TextRecord>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = match value.get("id") {
            None => out.len().to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => return Err(parse_err(format!("unsupported id {other}"))),
        };
        let text = fields
            .iter()
            .find_map(|f| value.get(*f).and_then(Value::as_str))
            .ok_or_else(|| parse_err(format!("expected a string field among {fields:?}")))?;
        out.push(TextRecord {
            id,
            text: text.to_string(),
        });
    }
    Ok(out)
}

pub fn records_to_jsonl(records: &[TextRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn index_by_id(records: Vec<TextRecord>, side: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::with_capacity(records.len());
    let mut duplicates = BTreeSet::new();
    for r in records {
        if map.insert(r.id.clone(), r.text).is_some() {
            duplicates.insert(r.id);
        }
    }
    if !duplicates.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "duplicate ids in {side}: {}",
            duplicates.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(map)
}

/// Pairs hypotheses with references by id, in reference order. Every id
/// must appear on both sides.
pub fn join_by_id(
    hyps: Vec<TextRecord>,
    refs: Vec<TextRecord>,
) -> Result<(Vec<String>, Vec<String>)> {
    let order: Vec<String> = refs.iter().map(|r| r.id.clone()).collect();
    let hyp_map = index_by_id(hyps, "hypotheses")?;
    let mut ref_map = index_by_id(refs, "references")?;
    let mut missing_hyp: Vec<String> = order
        .iter()
        .filter(|id| !hyp_map.contains_key(*id))
        .cloned()
        .collect();
    let mut missing_ref: Vec<String> = hyp_map
        .keys()
        .filter(|id| !ref_map.contains_key(*id))
        .cloned()
        .collect();
    missing_hyp.sort();
    missing_ref.sort();
    if !missing_hyp.is_empty() {
        return Err(Error::MissingIds {
            side: "hypotheses".into(),
            ids: missing_hyp,
        });
    }
    if !missing_ref.is_empty() {
        return Err(Error::MissingIds {
            side: "references".into(),
            ids: missing_ref,
        });
    }
    let mut hyp_map = hyp_map;
    let mut hyps = Vec::with_capacity(order.len());
    let mut refs = Vec::with_capacity(order.len());
    for id in order {
        hyps.push(hyp_map.remove(&id).expect("checked"));
        refs.push(ref_map.remove(&id).expect("checked"));
    }
    Ok((hyps, refs))
}
