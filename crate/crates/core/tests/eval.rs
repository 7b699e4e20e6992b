use cirbench_core::composers::{Composer, ComposerConfig, ComposerKind, ProjectionMode};
use cirbench_core::eval::{evaluate, evaluate_split, retrieve, RetrieveOptions, DEFAULT_DEPTH};
use cirbench_core::metrics::{CompositeSpec, MetricKey};
use cirbench_core::submission::{score, validate, Submission, SubmissionEntry, VERSION};
use cirbench_core::synthetic::{generate, SyntheticBenchmark, SyntheticConfig};
use cirbench_core::text::Vocabulary;
use cirbench_core::{ImageId, Split};

fn bench() -> SyntheticBenchmark {
    generate(&SyntheticConfig::default()).unwrap()
}

fn vocab(b: &SyntheticBenchmark) -> Vocabulary {
    Vocabulary::build(b.split(Split::Train).records.iter().map(|r| r.caption.as_str()))
}

fn composer(kind: ComposerKind, b: &SyntheticBenchmark, v: &Vocabulary) -> Composer {
    let cfg = ComposerConfig {
        d_model: 16,
        d_ff: 32,
        heads: 2,
        ..ComposerConfig::desk(kind, b.store.dimension(), v.len())
    };
    Composer::new(cfg).unwrap()
}

/// Submission that puts the gold target first in both lists.
fn oracle_submission(b: &SyntheticBenchmark, split: Split) -> Submission {
    let file = b.split(split);
    let images = file.images();
    let rankings = file
        .records
        .iter()
        .map(|r| {
            let target = r.target_hard.clone().unwrap();
            let rest = |pool: &[ImageId]| -> Vec<ImageId> {
                std::iter::once(target.clone())
                    .chain(pool.iter().filter(|i| **i != target && **i != r.reference).cloned())
                    .collect()
            };
            let mut global = rest(&images);
            global.truncate(DEFAULT_DEPTH);
            (
                r.pair_id,
                SubmissionEntry {
                    global,
                    subset: rest(&r.members),
                },
            )
        })
        .collect();
    Submission {
        version: VERSION.into(),
        split,
        rankings,
    }
}

#[test]
fn gold_submission_scores_one_hundred() {
    let b = bench();
    let report = score(&oracle_submission(&b, Split::Val), b.split(Split::Val)).unwrap();
    for k in [1, 5, 10, 50] {
        assert_eq!(report.get(MetricKey::Recall(k)), Some(100.0));
        assert_eq!(report.get(MetricKey::Map(k)), Some(100.0));
    }
    for k in [1, 2, 3] {
        assert_eq!(report.get(MetricKey::RecallSubset(k)), Some(100.0));
    }
    assert_eq!(report.composite, Some(100.0));
}

#[test]
fn missing_and_unknown_ids_are_rejected_with_names() {
    let b = bench();
    let gold = b.split(Split::Val);
    let mut sub = oracle_submission(&b, Split::Val);
    let first = *sub.rankings.keys().next().unwrap();
    let entry = sub.rankings.remove(&first).unwrap();
    sub.rankings.insert(999_999, entry);
    let rejection = validate(&sub, gold).unwrap_err();
    assert!(rejection.offending.contains(&first.to_string()));
    assert!(rejection.offending.contains(&"999999".to_string()));
    assert!(score(&sub, gold).is_err());
}

#[test]
fn malformed_lists_are_rejected() {
    let b = bench();
    let gold = b.split(Split::Val);
    let base = oracle_submission(&b, Split::Val);
    let id = *base.rankings.keys().nth(3).unwrap();
    let record = gold.records.iter().find(|r| r.pair_id == id).unwrap();

    let mut with_reference = base.clone();
    with_reference.rankings.get_mut(&id).unwrap().global[1] = record.reference.clone();
    let mut duplicated = base.clone();
    let entry = duplicated.rankings.get_mut(&id).unwrap();
    entry.global[2] = entry.global[1].clone();
    let mut short_subset = base.clone();
    short_subset.rankings.get_mut(&id).unwrap().subset.pop();
    let mut short_global = base.clone();
    short_global.rankings.get_mut(&id).unwrap().global.truncate(10);
    let mut stranger = base.clone();
    stranger.rankings.get_mut(&id).unwrap().global[4] = ImageId::new("nowhere").unwrap();

    for bad in [with_reference, duplicated, short_subset, short_global, stranger] {
        let rejection = validate(&bad, gold).unwrap_err();
        assert_eq!(rejection.offending, vec![id.to_string()]);
    }

    let mut version = base.clone();
    version.version = "v0".into();
    assert!(validate(&version, gold).is_err());
    let mut split = base;
    split.split = Split::Train;
    assert!(validate(&split, gold).is_err());
}

#[test]
fn local_and_server_scores_agree() {
    let b = bench();
    let v = vocab(&b);
    let file = b.split(Split::Val);
    for kind in [ComposerKind::ImageOnly, ComposerKind::RandomImageText, ComposerKind::Transformer] {
        let c = composer(kind, &b, &v);
        let rankings = retrieve(&c, &v, file, &b.store, RetrieveOptions::default()).unwrap();
        let local = evaluate(&rankings, &CompositeSpec::cirr()).unwrap();
        let sub = Submission::from_rankings(Split::Val, &rankings, DEFAULT_DEPTH);
        let remote = score(&sub, file).unwrap();
        assert_eq!(local, remote, "{kind}");
        assert_eq!(evaluate_split(&c, &v, file, &b.store, RetrieveOptions::default()).unwrap(), local);
    }
}

#[test]
fn pools_exclude_the_reference() {
    let b = bench();
    let v = vocab(&b);
    let file = b.split(Split::Val);
    let c = composer(ComposerKind::ImageOnly, &b, &v);
    let rankings = retrieve(&c, &v, file, &b.store, RetrieveOptions::default()).unwrap();
    let images = file.images().len();
    for (q, r) in rankings.iter().zip(&file.records) {
        assert_eq!(q.pair_id, r.pair_id);
        assert_eq!(q.global.candidates.len(), images - 1);
        assert_eq!(q.subset.candidates.len(), 5);
        assert!(!q.global.candidates.contains(&r.reference));
        assert!(!q.subset.candidates.contains(&r.reference));
    }
    let truncated = retrieve(
        &c,
        &v,
        file,
        &b.store,
        RetrieveOptions {
            depth: Some(3),
            ..RetrieveOptions::default()
        },
    )
    .unwrap();
    for (full, cut) in rankings.iter().zip(&truncated) {
        assert_eq!(cut.global.candidates[..], full.global.candidates[..3]);
        assert_eq!(cut.global.gold_rank, full.global.gold_rank.filter(|&g| g <= 3));
    }
}

#[test]
fn identity_image_only_ranks_by_raw_cosine() {
    let b = bench();
    let v = vocab(&b);
    let file = b.split(Split::Val);
    let cfg = ComposerConfig {
        d_model: b.store.dimension(),
        projection: ProjectionMode::Identity,
        ..ComposerConfig::desk(ComposerKind::ImageOnly, b.store.dimension(), v.len())
    };
    let c = Composer::new(cfg).unwrap();
    assert_eq!(c.param_count(), 0);
    let rankings = retrieve(&c, &v, file, &b.store, RetrieveOptions::default()).unwrap();
    let r = &file.records[0];
    let q = b.store.get_f64(&r.reference).unwrap();
    let cos = |id: &ImageId| {
        let x = b.store.get_f64(id).unwrap();
        let d: f64 = q.iter().zip(&x).map(|(a, b)| a * b).sum();
        d / (q.iter().map(|a| a * a).sum::<f64>().sqrt() * x.iter().map(|a| a * a).sum::<f64>().sqrt())
    };
    let top = &rankings[0].subset.candidates[0];
    for other in r.members.iter().filter(|m| **m != r.reference) {
        assert!(cos(top) >= cos(other) - 1e-12);
    }
}

#[test]
fn unlabeled_split_cannot_be_scored_locally() {
    let b = bench();
    let v = vocab(&b);
    let mut file = b.split(Split::Test).clone();
    for r in &mut file.records {
        r.target_hard = None;
        r.target_soft.clear();
        r.target_rank = None;
    }
    let c = composer(ComposerKind::ConcatMlp, &b, &v);
    assert!(evaluate_split(&c, &v, &file, &b.store, RetrieveOptions::default()).is_err());
    // Retrieval itself still works for building a submission.
    let rankings = retrieve(&c, &v, &file, &b.store, RetrieveOptions::default()).unwrap();
    assert!(rankings.iter().all(|q| q.global.gold_rank.is_none()));
}
