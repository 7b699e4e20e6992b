//! Versioned submission format for hidden-label scoring, with atomic
//! validation against the gold split.
//!
//! ```json
//! {"version": "v1", "split": "test",
//!  "rankings": {"12554": {"global": ["..."], "subset": ["..."]}}}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetFile;
use crate::eval::{QueryRanking, DEFAULT_DEPTH};
use crate::metrics::{CompositeSpec, MetricReport, DEFAULT_KS, DEFAULT_SUBSET_KS};
use crate::model::{ImageId, PairRecord, Split};

pub const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionEntry {
    pub global: Vec<ImageId>,
    pub subset: Vec<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub version: String,
    pub split: Split,
    pub rankings: BTreeMap<u64, SubmissionEntry>,
}

impl Submission {
    /// Builds a submission from local rankings, truncating global lists to `depth`.
    pub fn from_rankings(split: Split, rankings: &[QueryRanking], depth: usize) -> Self {
        let rankings = rankings
            .iter()
            .map(|q| {
                let mut global = q.global.candidates.clone();
                global.truncate(depth);
                (
                    q.pair_id,
                    SubmissionEntry {
                        global,
                        subset: q.subset.candidates.clone(),
                    },
                )
            })
            .collect();
        Submission {
            version: VERSION.to_string(),
            split,
            rankings,
        }
    }
}

/// Reasons a submission was refused. Nothing is scored when any are present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("submission rejected: {}", .problems.join("; "))]
pub struct Rejection {
    pub problems: Vec<String>,
    /// Pair ids (or `version`/`split`) named by the problems.
    pub offending: Vec<String>,
}

impl Rejection {
    fn push(&mut self, who: impl ToString, problem: String) {
        let who = who.to_string();
        if !self.offending.contains(&who) {
            self.offending.push(who);
        }
        self.problems.push(problem);
    }
}

fn duplicates(list: &[ImageId]) -> Vec<&ImageId> {
    let mut seen = HashSet::new();
    let mut out: Vec<&ImageId> = list.iter().filter(|id| !seen.insert(*id)).collect();
    out.dedup();
    out
}

fn check_entry(record: &PairRecord, entry: &SubmissionEntry, corpus: &HashSet<&ImageId>, min_global: usize, rej: &mut Rejection) {
    let id = record.pair_id;
    let expected: HashSet<&ImageId> = record.subset_candidates().collect();
    let given: HashSet<&ImageId> = entry.subset.iter().collect();
    if entry.subset.len() != expected.len() || given != expected {
        rej.push(
            id,
            format!("pair {id}: subset ranking must be a permutation of the subset minus the reference"),
        );
    }
    let dups = duplicates(&entry.global);
    if !dups.is_empty() {
        rej.push(id, format!("pair {id}: duplicate candidates in global ranking: {dups:?}"));
    }
    if entry.global.contains(&record.reference) {
        rej.push(id, format!("pair {id}: global ranking contains the reference image"));
    }
    if let Some(unknown) = entry.global.iter().find(|c| !corpus.contains(c)) {
        rej.push(id, format!("pair {id}: unknown image {unknown} in global ranking"));
    }
    if entry.global.len() < min_global {
        rej.push(
            id,
            format!("pair {id}: global ranking has {} entries, need {min_global}", entry.global.len()),
        );
    }
}

/// Validates every entry against the gold split. All problems are reported together.
pub fn validate(sub: &Submission, gold: &DatasetFile) -> Result<(), Rejection> {
    let mut rej = Rejection {
        problems: Vec::new(),
        offending: Vec::new(),
    };
    if sub.version != VERSION {
        rej.push("version", format!("unsupported version {:?}, expected {VERSION:?}", sub.version));
    }
    if sub.split != gold.split {
        rej.push("split", format!("submission is for {} but server holds {}", sub.split, gold.split));
    }
    let images = gold.images();
    let corpus: HashSet<&ImageId> = images.iter().collect();
    let min_global = DEFAULT_DEPTH.min(images.len().saturating_sub(1));
    let records: HashMap<u64, &PairRecord> = gold.records.iter().map(|r| (r.pair_id, r)).collect();

    let mut missing: Vec<u64> = records.keys().filter(|id| !sub.rankings.contains_key(id)).copied().collect();
    missing.sort_unstable();
    for id in missing {
        rej.push(id, format!("pair {id}: missing from submission"));
    }
    for (id, entry) in &sub.rankings {
        match records.get(id) {
            None => rej.push(id, format!("pair {id}: unknown pair id")),
            Some(record) => check_entry(record, entry, &corpus, min_global, &mut rej),
        }
    }
    if rej.problems.is_empty() {
        Ok(())
    } else {
        Err(rej)
    }
}

/// Validates and scores a submission. Gold ranks are summed in pair-id
/// order so the result equals local evaluation of the same rankings.
pub fn score(sub: &Submission, gold: &DatasetFile) -> Result<MetricReport, Rejection> {
    validate(sub, gold)?;
    let mut records: Vec<&PairRecord> = gold.records.iter().collect();
    records.sort_by_key(|r| r.pair_id);
    let rank = |list: &[ImageId], target: Option<&ImageId>| target.and_then(|t| list.iter().position(|c| c == t).map(|p| p + 1));
    let mut global = Vec::with_capacity(records.len());
    let mut subset = Vec::with_capacity(records.len());
    for r in records {
        let entry = &sub.rankings[&r.pair_id];
        global.push(rank(&entry.global, r.target_hard.as_ref()));
        subset.push(rank(&entry.subset, r.target_hard.as_ref()));
    }
    MetricReport::from_gold_ranks(&global, &subset, &DEFAULT_KS, &DEFAULT_SUBSET_KS, &CompositeSpec::cirr()).map_err(|e| Rejection {
        problems: vec![e.to_string()],
        offending: Vec::new(),
    })
}
