//! Reader/writer for the pair-annotation JSON schema, plus dataset and
//! caption-length statistics.
//!
//! Accepted layouts: a JSON array of records, an object keyed by pair id, or
//! JSON lines. The writer always emits a pretty-printed array with a fixed key
//! order, so write → read → write is byte-identical.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{AuxAnnotation, AuxAnswer, ImageId, PairRecord, SoftScore, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub split: Split,
    pub records: Vec<PairRecord>,
}

impl DatasetFile {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.pair_id) {
                return Err(Error::Validation(format!("duplicate pair id {}", r.pair_id)));
            }
            r.validate()?;
        }
        Ok(())
    }

    pub fn labeled(&self) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(|r| r.is_labeled())
    }

    /// Every image mentioned by the split, sorted.
    pub fn images(&self) -> Vec<ImageId> {
        let mut set: HashSet<&ImageId> = HashSet::new();
        for r in &self.records {
            set.insert(&r.reference);
            set.extend(r.target_hard.iter());
            set.extend(r.members.iter());
        }
        let mut v: Vec<ImageId> = set.into_iter().cloned().collect();
        v.sort();
        v
    }
}

/// Parsed file together with non-fatal warnings (e.g. unknown keys).
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub file: DatasetFile,
    pub warnings: Vec<String>,
}

const TOP_KEYS: &[&str] = &[
    "pairid",
    "reference",
    "target_hard",
    "target_soft",
    "caption",
    "caption_extend",
    "img_set",
    "reference_rank",
    "target_rank",
];
const IMG_SET_KEYS: &[&str] = &["id", "members", "reference_rank", "target_rank"];

pub fn read_dataset(path: &Path, split: Option<Split>) -> Result<DatasetFile> {
    let parsed = read_dataset_with_warnings(path, split)?;
    for w in &parsed.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(parsed.file)
}

pub fn read_dataset_with_warnings(path: &Path, split: Option<Split>) -> Result<ParsedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split = split
        .or_else(|| Split::from_path_hint(path))
        .ok_or_else(|| {
            Error::InvalidConfig(format!("cannot infer split from {}; pass it explicitly", path.display()))
        })?;
    parse_dataset(&text, split)
}

pub fn parse_dataset(text: &str, split: Split) -> Result<ParsedDataset> {
    let objects: Vec<(Option<u64>, Value)> = match serde_json::from_str::<Value>(text) {
        Ok(Value::Array(items)) => items.into_iter().map(|v| (None, v)).collect(),
        Ok(Value::Object(map)) if map.contains_key("pairid") => vec![(None, Value::Object(map))],
        Ok(Value::Object(map)) => {
            let mut items = Vec::with_capacity(map.len());
            for (k, v) in map {
                let key = k
                    .parse::<u64>()
                    .map_err(|_| Error::Format(format!("object key {k:?} is not a pair id")))?;
                items.push((Some(key), v));
            }
            items.sort_by_key(|(k, _)| *k);
            items
        }
        Ok(other) => {
            return Err(Error::Format(format!(
                "expected array or object at top level, found {}",
                type_name(&other)
            )))
        }
        Err(_) => {
            let mut items = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v = serde_json::from_str::<Value>(line).map_err(|e| Error::Record {
                    index: i,
                    message: format!("invalid JSON line: {e}"),
                })?;
                items.push((None, v));
            }
            items
        }
    };

    let mut warnings = Vec::new();
    let mut records = Vec::with_capacity(objects.len());
    for (index, (key, value)) in objects.into_iter().enumerate() {
        let record = parse_record(index, key, value, split, &mut warnings)?;
        records.push(record);
    }
    let file = DatasetFile { split, records };
    file.validate()?;
    Ok(ParsedDataset { file, warnings })
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn parse_record(
    index: usize,
    key: Option<u64>,
    value: Value,
    split: Split,
    warnings: &mut Vec<String>,
) -> Result<PairRecord> {
    let err = |message: String| Error::Record { index, message };
    let Value::Object(obj) = value else {
        return Err(err("record is not an object".into()));
    };
    for k in obj.keys() {
        if !TOP_KEYS.contains(&k.as_str()) {
            warnings.push(format!("record {index}: unknown key {k:?}"));
        }
    }

    let pair_id = match (obj.get("pairid"), key) {
        (Some(v), _) => v.as_u64().ok_or_else(|| err("pairid is not a non-negative integer".into()))?,
        (None, Some(k)) => k,
        (None, None) => return Err(err("missing required key \"pairid\"".into())),
    };
    let image = |v: &Value, what: &str| -> Result<ImageId> {
        let s = v.as_str().ok_or_else(|| err(format!("{what} is not a string")))?;
        ImageId::new(s).map_err(|e| err(format!("{what}: {e}")))
    };
    let reference = image(
        obj.get("reference").ok_or_else(|| err("missing required key \"reference\"".into()))?,
        "reference",
    )?;
    let caption = obj
        .get("caption")
        .ok_or_else(|| err("missing required key \"caption\"".into()))?
        .as_str()
        .ok_or_else(|| err("caption is not a string".into()))?
        .to_string();

    let img_set = obj
        .get("img_set")
        .and_then(Value::as_object)
        .ok_or_else(|| err("missing required key \"img_set\"".into()))?;
    for k in img_set.keys() {
        if !IMG_SET_KEYS.contains(&k.as_str()) {
            warnings.push(format!("record {index}: unknown img_set key {k:?}"));
        }
    }
    let members = img_set
        .get("members")
        .and_then(Value::as_array)
        .ok_or_else(|| err("missing required key \"img_set.members\"".into()))?
        .iter()
        .map(|v| image(v, "img_set.members"))
        .collect::<Result<Vec<_>>>()?;
    let subset_id = match img_set.get("id") {
        Some(v) => v.as_i64().ok_or_else(|| err("img_set.id is not an integer".into()))?,
        None => -1,
    };

    let rank = |name: &str| -> Result<Option<usize>> {
        let v = img_set.get(name).or_else(|| obj.get(name));
        match v {
            None | Some(Value::Null) => Ok(None),
            Some(v) => {
                let r = v.as_u64().ok_or_else(|| err(format!("{name} is not an integer")))?;
                if r > 5 {
                    return Err(err(format!("{name} {r} outside 0..=5")));
                }
                Ok(Some(r as usize))
            }
        }
    };
    let reference_rank = rank("reference_rank")?;
    let target_rank = rank("target_rank")?;

    let target_hard = match obj.get("target_hard") {
        None | Some(Value::Null) => None,
        Some(v) => Some(image(v, "target_hard")?),
    };
    if split != Split::Test && target_hard.is_none() {
        return Err(err("missing target_hard outside the test split".into()));
    }

    let mut target_soft = BTreeMap::new();
    if let Some(v) = obj.get("target_soft") {
        let map = v.as_object().ok_or_else(|| err("target_soft is not an object".into()))?;
        for (k, score) in map {
            let id = ImageId::new(k.as_str()).map_err(|e| err(format!("target_soft: {e}")))?;
            let s = score
                .as_f64()
                .ok_or_else(|| err(format!("target_soft score for {k} is not a number")))?;
            target_soft.insert(id, SoftScore::from_value(s).map_err(|e| err(e.to_string()))?);
        }
    }

    let aux = match obj.get("caption_extend") {
        None | Some(Value::Null) => None,
        Some(v) => Some(parse_aux(v).map_err(|e| err(e.to_string()))?),
    };

    let record = PairRecord {
        pair_id,
        reference,
        target_hard,
        target_soft,
        caption,
        aux,
        subset_id,
        members,
        reference_rank,
        target_rank,
    };
    record.validate().map_err(|e| err(e.to_string()))?;
    Ok(record)
}

fn parse_aux(v: &Value) -> Result<AuxAnnotation> {
    let map = v
        .as_object()
        .ok_or_else(|| Error::Validation("caption_extend is not an object".into()))?;
    let mut aux = AuxAnnotation::default();
    for (k, answer) in map {
        let slot = k
            .parse::<usize>()
            .ok()
            .and_then(|i| aux.slot_mut(i))
            .ok_or_else(|| Error::Validation(format!("caption_extend key {k:?} not in 0..=3")))?;
        let text = answer
            .as_str()
            .ok_or_else(|| Error::Validation(format!("caption_extend {k} is not a string")))?;
        *slot = Some(AuxAnswer::parse(text)?);
    }
    Ok(aux)
}

#[derive(Serialize)]
struct ImgSetOut<'a> {
    id: i64,
    members: &'a [ImageId],
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_rank: Option<usize>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    pairid: u64,
    reference: &'a ImageId,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_hard: Option<&'a ImageId>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    target_soft: BTreeMap<&'a str, f64>,
    caption: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    caption_extend: Option<BTreeMap<String, String>>,
    img_set: ImgSetOut<'a>,
}

fn record_out(r: &PairRecord) -> RecordOut<'_> {
    RecordOut {
        pairid: r.pair_id,
        reference: &r.reference,
        target_hard: r.target_hard.as_ref(),
        target_soft: r.target_soft.iter().map(|(k, v)| (k.as_str(), v.value())).collect(),
        caption: &r.caption,
        caption_extend: r.aux.as_ref().map(|aux| {
            aux.answers()
                .iter()
                .enumerate()
                .filter_map(|(i, a)| a.map(|a| (i.to_string(), a.raw())))
                .collect()
        }),
        img_set: ImgSetOut {
            id: r.subset_id,
            members: &r.members,
            reference_rank: r.reference_rank,
            target_rank: r.target_rank,
        },
    }
}

/// Canonical serialization: records sorted by pair id, fixed key order.
pub fn encode_dataset(file: &DatasetFile) -> Result<String> {
    let mut records: Vec<&PairRecord> = file.records.iter().collect();
    records.sort_by_key(|r| r.pair_id);
    let out: Vec<RecordOut> = records.into_iter().map(record_out).collect();
    let mut s = serde_json::to_string_pretty(&out)?;
    s.push('\n');
    Ok(s)
}

/// One record per line, same key order as [`encode_dataset`].
pub fn encode_dataset_jsonl(file: &DatasetFile) -> Result<String> {
    let mut s = String::new();
    for r in &file.records {
        s.push_str(&serde_json::to_string(&record_out(r))?);
        s.push('\n');
    }
    Ok(s)
}

/// SHA-256 of the canonical encoding, as lowercase hex.
pub fn fingerprint(file: &DatasetFile) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(encode_dataset(file)?.as_bytes())))
}

pub fn write_dataset(file: &DatasetFile, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(file)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: Split,
    pub subsets: usize,
    pub pairs: usize,
    pub pairs_per_subset: f64,
    pub images: usize,
    /// Share of pairs (in %) with an applicable answer for Q1..Q4.
    pub aux_applicable_pct: [f64; 4],
}

fn stats_for<'a>(split: Split, records: impl Iterator<Item = &'a PairRecord>) -> SplitStats {
    let mut subsets = HashSet::new();
    let mut images: HashSet<&ImageId> = HashSet::new();
    let mut pairs = 0usize;
    let mut aux_counts = [0usize; 4];
    for r in records {
        pairs += 1;
        subsets.insert(r.subset_id);
        images.insert(&r.reference);
        images.extend(r.target_hard.iter());
        images.extend(r.members.iter());
        if let Some(aux) = &r.aux {
            for (i, a) in aux.answers().iter().enumerate() {
                if a.is_some_and(AuxAnswer::is_applicable) {
                    aux_counts[i] += 1;
                }
            }
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    SplitStats {
        split,
        subsets: subsets.len(),
        pairs,
        pairs_per_subset: ratio(pairs, subsets.len()),
        images: images.len(),
        aux_applicable_pct: aux_counts.map(|c| 100.0 * ratio(c, pairs)),
    }
}

/// Per-split statistics in the order the files are given.
pub fn dataset_stats(files: &[DatasetFile]) -> Vec<SplitStats> {
    files.iter().map(|f| stats_for(f.split, f.records.iter())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaptionStats {
    pub captions: usize,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
}

pub fn caption_length_stats(files: &[DatasetFile]) -> CaptionStats {
    let mut lengths: Vec<usize> = files
        .iter()
        .flat_map(|f| f.records.iter())
        .map(|r| r.caption.split_whitespace().count())
        .collect();
    let n = lengths.len();
    if n == 0 {
        return CaptionStats {
            captions: 0,
            mean: 0.0,
            median: 0.0,
            stddev: 0.0,
        };
    }
    lengths.sort_unstable();
    let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        lengths[n / 2] as f64
    } else {
        (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
    };
    let var = lengths.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    CaptionStats {
        captions: n,
        mean,
        median,
        stddev: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Sentinel;

    const SAMPLE: &str = r#"[{
        "pairid": 12554,
        "reference": "dev-147-2-img0",
        "target_hard": "dev-846-2-img0",
        "target_soft": {"dev-846-2-img0": 1.0, "dev-743-3-img0": -1.0},
        "caption": "Catch the crab in the circular ring and place them on the metal table.",
        "caption_extend": {
            "0": "[c] None existed",
            "1": "We don't see the gloved hands of the fisherman",
            "2": "Focus on the net full of crabs",
            "3": "[cr0] Nothing worth mentioning"
        },
        "img_set": {
            "id": 106,
            "members": ["dev-147-2-img0", "dev-224-1-img1", "dev-410-2-img0", "dev-743-3-img0", "dev-846-2-img0", "dev-998-1-img0"],
            "reference_rank": 0,
            "target_rank": 4
        }
    }]"#;

    #[test]
    fn parses_sample_record() {
        let parsed = parse_dataset(SAMPLE, Split::Val).unwrap();
        assert!(parsed.warnings.is_empty());
        let r = &parsed.file.records[0];
        assert_eq!(r.pair_id, 12554);
        let aux = r.aux.as_ref().unwrap();
        assert_eq!(aux.q4.as_ref().unwrap().sentinel(), Some(Sentinel::Cr0));
        assert_eq!(aux.q1.as_ref().unwrap().sentinel(), Some(Sentinel::C));
        assert!(aux.q2.as_ref().unwrap().is_applicable());
        assert_eq!(r.target_soft.len(), 2);
        assert_eq!(
            r.target_soft[r.target_hard.as_ref().unwrap()],
            SoftScore::Same
        );
    }

    #[test]
    fn top_level_ranks_and_keyed_layout_are_accepted() {
        let text = r#"{"7": {"reference": "a", "target_hard": "b", "caption": "x",
            "reference_rank": 0, "target_rank": 1,
            "img_set": {"id": 1, "members": ["a","b","c","d","e","f"]}}}"#;
        let parsed = parse_dataset(text, Split::Train).unwrap();
        assert_eq!(parsed.file.records[0].pair_id, 7);
        assert_eq!(parsed.file.records[0].target_rank, Some(1));
    }

    #[test]
    fn unknown_key_warns() {
        let text = r#"[{"pairid": 1, "reference": "a", "target_hard": "b", "caption": "x", "mood": 3,
            "img_set": {"id": 1, "members": ["a","b","c","d","e","f"]}}]"#;
        let parsed = parse_dataset(text, Split::Train).unwrap();
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("mood"));
    }

    #[test]
    fn missing_required_key_reports_index() {
        let text = r#"[{"pairid": 1, "reference": "a", "target_hard": "b", "caption": "x",
            "img_set": {"id": 1, "members": ["a","b","c","d","e","f"]}},
            {"pairid": 2, "reference": "a", "target_hard": "b",
            "img_set": {"id": 1, "members": ["a","b","c","d","e","f"]}}]"#;
        match parse_dataset(text, Split::Train).unwrap_err() {
            Error::Record { index, message } => {
                assert_eq!(index, 1);
                assert!(message.contains("caption"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn hidden_labels_only_in_test() {
        let text = r#"[{"pairid": 1, "reference": "a", "caption": "x",
            "img_set": {"id": 1, "members": ["a","b","c","d","e","f"]}}]"#;
        let parsed = parse_dataset(text, Split::Test).unwrap();
        assert!(!parsed.file.records[0].is_labeled());
        assert!(parse_dataset(text, Split::Val).is_err());
    }

    #[test]
    fn bad_soft_score_rejected() {
        let text = r#"[{"pairid": 1, "reference": "a", "target_hard": "b", "caption": "x",
            "target_soft": {"b": 0.7},
            "img_set": {"id": 1, "members": ["a","b","c","d","e","f"]}}]"#;
        assert!(parse_dataset(text, Split::Val).is_err());
    }

    #[test]
    fn jsonl_accepted() {
        let text = "{\"pairid\": 1, \"reference\": \"a\", \"target_hard\": \"b\", \"caption\": \"x\", \"img_set\": {\"id\": 1, \"members\": [\"a\",\"b\",\"c\",\"d\",\"e\",\"f\"]}}\n\
                    {\"pairid\": 2, \"reference\": \"b\", \"target_hard\": \"c\", \"caption\": \"y\", \"img_set\": {\"id\": 1, \"members\": [\"a\",\"b\",\"c\",\"d\",\"e\",\"f\"]}}\n";
        let parsed = parse_dataset(text, Split::Train).unwrap();
        assert_eq!(parsed.file.records.len(), 2);
        let again = parse_dataset(&encode_dataset_jsonl(&parsed.file).unwrap(), Split::Train).unwrap();
        assert_eq!(again.file, parsed.file);
    }

    #[test]
    fn stats_of_empty_file() {
        let s = dataset_stats(&[DatasetFile {
            split: Split::Train,
            records: vec![],
        }]);
        assert_eq!(s[0].subsets, 0);
        assert_eq!(s[0].pairs_per_subset, 0.0);
    }

    #[test]
    fn single_caption_length() {
        let mut f = parse_dataset(SAMPLE, Split::Val).unwrap().file;
        f.records[0].caption = "add a dog".into();
        assert_eq!(caption_length_stats(&[f]).mean, 3.0);
    }
}
