use cirbench_core::dataset::{
    caption_length_stats, dataset_stats, encode_dataset, encode_dataset_jsonl, fingerprint, parse_dataset, read_dataset,
    write_dataset, DatasetFile,
};
use cirbench_core::model::{AuxAnswer, Sentinel, SoftScore};
use cirbench_core::synthetic::random_dataset;
use cirbench_core::{Error, ImageId, Split};
use proptest::prelude::*;

#[test]
fn thousand_record_round_trip_is_byte_identical() {
    let file = random_dataset(1000, Split::Val, 42);
    let first = encode_dataset(&file).unwrap();
    let reread = parse_dataset(&first, Split::Val).unwrap();
    assert!(reread.warnings.is_empty());
    assert_eq!(reread.file.records.len(), 1000);
    let second = encode_dataset(&reread.file).unwrap();
    assert_eq!(first, second);

    // The fixture must actually exercise every sentinel and soft score.
    for sentinel in ["\"[c]", "\"[cr0]", "\"[cr1]"] {
        assert!(first.contains(sentinel), "missing {sentinel}");
    }
    for score in [": 1.0", ": 0.5", ": -1.0"] {
        assert!(first.contains(score), "missing {score}");
    }
}

#[test]
fn file_round_trip_and_split_hint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cap.rc2.train.json");
    let file = random_dataset(50, Split::Train, 1);
    write_dataset(&file, &path).unwrap();
    let back = read_dataset(&path, None).unwrap();
    assert_eq!(back.split, Split::Train);
    assert_eq!(encode_dataset(&back).unwrap(), encode_dataset(&file).unwrap());
}

#[test]
fn jsonl_and_keyed_layouts_parse_to_the_same_records() {
    let file = random_dataset(30, Split::Val, 8);
    let canonical = encode_dataset(&file).unwrap();
    let jsonl = encode_dataset_jsonl(&file).unwrap();
    assert_eq!(encode_dataset(&parse_dataset(&jsonl, Split::Val).unwrap().file).unwrap(), canonical);

    let values: Vec<serde_json::Value> = serde_json::from_str(&canonical).unwrap();
    let keyed: serde_json::Map<String, serde_json::Value> = values
        .into_iter()
        .map(|v| (v["pairid"].to_string(), v))
        .collect();
    let keyed = serde_json::to_string(&keyed).unwrap();
    assert_eq!(encode_dataset(&parse_dataset(&keyed, Split::Val).unwrap().file).unwrap(), canonical);
}

const SAMPLE: &str = r#"[{
  "pairid": 12063,
  "reference": "test1-147-1-img1",
  "target_hard": "test1-83-0-img1",
  "target_soft": {"test1-83-0-img1": 1.0},
  "caption": "remove all but one bird and have it facing right",
  "img_set": {"id": 2, "members": ["test1-147-1-img1", "test1-1001-2-img0", "test1-83-0-img1",
      "test1-359-0-img1", "test1-906-0-img1", "test1-1-1-img1"],
    "reference_rank": 0, "target_rank": 2}
}]"#;

#[test]
fn missing_required_key_names_the_record() {
    let bad = SAMPLE.replace("\"caption\": \"remove all but one bird and have it facing right\",", "");
    match parse_dataset(&bad, Split::Val) {
        Err(Error::Record { index, message }) => {
            assert_eq!(index, 0);
            assert!(message.contains("caption"));
        }
        other => panic!("expected record error, got {other:?}"),
    }
}

#[test]
fn hidden_labels_only_in_test() {
    let hidden = SAMPLE
        .replace("\"target_hard\": \"test1-83-0-img1\",", "")
        .replace("\"target_soft\": {\"test1-83-0-img1\": 1.0},", "")
        .replace(", \"target_rank\": 2", "");
    assert!(parse_dataset(&hidden, Split::Val).is_err());
    let parsed = parse_dataset(&hidden, Split::Test).unwrap();
    assert!(!parsed.file.records[0].is_labeled());
}

#[test]
fn unknown_keys_warn_but_parse() {
    let extra = SAMPLE.replace("\"pairid\": 12063,", "\"pairid\": 12063, \"worker\": \"x\",");
    let parsed = parse_dataset(&extra, Split::Val).unwrap();
    assert_eq!(parsed.warnings.len(), 1);
    assert!(parsed.warnings[0].contains("worker"));
}

#[test]
fn invalid_soft_score_and_rank_are_rejected() {
    let bad_score = SAMPLE.replace("{\"test1-83-0-img1\": 1.0}", "{\"test1-83-0-img1\": 0.7}");
    assert!(parse_dataset(&bad_score, Split::Val).is_err());
    let bad_rank = SAMPLE.replace("\"target_rank\": 2", "\"target_rank\": 1");
    assert!(parse_dataset(&bad_rank, Split::Val).is_err());
}

#[test]
fn sentinels_parse() {
    assert_eq!(
        AuxAnswer::parse("[cr0] nothing").unwrap(),
        AuxAnswer::NotApplicable {
            sentinel: Sentinel::Cr0,
            rest: " nothing".into()
        }
    );
    assert!(AuxAnswer::parse("[c][cr1]").is_err());
    assert!(AuxAnswer::parse("a dog").unwrap().is_applicable());
    assert_eq!(SoftScore::from_value(-1.0).unwrap(), SoftScore::TooDifferent);
}

#[test]
fn stats_count_subsets_pairs_and_images() {
    let file = random_dataset(90, Split::Train, 3);
    let stats = dataset_stats(std::slice::from_ref(&file));
    assert_eq!(stats.len(), 1);
    let s = &stats[0];
    assert_eq!((s.subsets, s.pairs, s.images), (10, 90, 60));
    assert!((s.pairs_per_subset - 9.0).abs() < 1e-12);

    let text = r#"[{"pairid": 1, "reference": "a", "target_hard": "b", "caption": "one two three",
        "img_set": {"id": 0, "members": ["a", "b"]}},
      {"pairid": 2, "reference": "b", "target_hard": "a", "caption": "one  two three four five",
        "img_set": {"id": 0, "members": ["a", "b"]}}]"#;
    let f: DatasetFile = parse_dataset(text, Split::Val).unwrap().file;
    let c = caption_length_stats(&[f]);
    assert_eq!(c.captions, 2);
    assert!((c.mean - 4.0).abs() < 1e-12);
    assert!((c.median - 4.0).abs() < 1e-12);
    assert!((c.stddev - 1.0).abs() < 1e-12);
}

#[test]
fn fingerprint_ignores_layout_but_not_content() {
    let file = random_dataset(20, Split::Val, 5);
    let mut shuffled = file.clone();
    shuffled.records.reverse();
    assert_eq!(fingerprint(&file).unwrap(), fingerprint(&shuffled).unwrap());
    let mut changed = file.clone();
    changed.records[0].caption.push('!');
    assert_ne!(fingerprint(&file).unwrap(), fingerprint(&changed).unwrap());
    assert_eq!(fingerprint(&file).unwrap().len(), 64);
}

#[test]
fn image_ids_reject_separators() {
    assert!(ImageId::new("a b").is_err());
    assert!(ImageId::new("a/b").is_err());
    assert!(ImageId::new("").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_any_seed(seed in any::<u64>(), n in 1usize..60, split in prop::sample::select(vec![Split::Train, Split::Val, Split::Test])) {
        let file = random_dataset(n, split, seed);
        let a = encode_dataset(&file).unwrap();
        let b = encode_dataset(&parse_dataset(&a, split).unwrap().file).unwrap();
        prop_assert_eq!(a, b);
    }
}
