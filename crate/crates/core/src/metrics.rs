//! Brute-force ranking and retrieval metrics.
//!
//! All metrics are percentages in [0, 100]. Every query has a single positive,
//! so mAP@K reduces to the mean reciprocal rank truncated at K.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::euclidean;
use crate::model::{ImageId, RankingResult};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];
pub const DEFAULT_SUBSET_KS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Global,
    Subset,
}

/// Ranks `pool` by ascending Euclidean distance to `query`; ties go to the
/// smaller image id.
pub fn rank_candidates(
    pair_id: u64,
    query: &[f64],
    pool: &[(ImageId, &[f64])],
    gold: Option<&ImageId>,
) -> Result<RankingResult> {
    if pool.is_empty() {
        return Err(Error::Validation(format!("pair {pair_id}: empty candidate pool")));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for (id, feature) in pool {
        if feature.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                actual: feature.len(),
            });
        }
        scored.push((euclidean(query, feature), id));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let candidates = scored.into_iter().map(|(_, id)| id.clone()).collect();
    Ok(RankingResult::new(pair_id, candidates, gold))
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    Ok(())
}

fn mean_pct(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    100.0 * values.sum::<f64>() / n as f64
}

/// Percentage of queries whose gold rank is within `k`. Results without a
/// gold rank count as misses.
pub fn recall_at_k(gold_ranks: &[Option<usize>], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(mean_pct(
        gold_ranks
            .iter()
            .map(|r| if r.is_some_and(|r| r <= k) { 1.0 } else { 0.0 }),
        gold_ranks.len(),
    ))
}

pub fn map_at_k(gold_ranks: &[Option<usize>], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(mean_pct(
        gold_ranks.iter().map(|r| match r {
            Some(r) if *r <= k => 1.0 / *r as f64,
            _ => 0.0,
        }),
        gold_ranks.len(),
    ))
}

pub fn gold_ranks(results: &[RankingResult]) -> Vec<Option<usize>> {
    results.iter().map(|r| r.gold_rank).collect()
}

/// Expected recall of a uniformly random ranking over `pool_size` candidates.
pub fn theoretical_random(pool_size: usize, k: usize) -> Result<f64> {
    check_k(k)?;
    if k > pool_size {
        return Err(Error::InvalidConfig(format!("K = {k} exceeds pool size {pool_size}")));
    }
    Ok(100.0 * k as f64 / pool_size as f64)
}

/// Half-up rounding to two decimals, as printed in result tables.
pub fn round2(x: f64) -> f64 {
    // Nudge ties like 45.875 stored just below the tie.
    let scaled = x * 100.0;
    let nudged = scaled + scaled.abs() * 1e-12;
    (nudged + 0.5).floor() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKey {
    Recall(usize),
    RecallSubset(usize),
    Map(usize),
    MapSubset(usize),
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKey::Recall(k) => write!(f, "R@{k}"),
            MetricKey::RecallSubset(k) => write!(f, "R_Subset@{k}"),
            MetricKey::Map(k) => write!(f, "mAP@{k}"),
            MetricKey::MapSubset(k) => write!(f, "mAP_Subset@{k}"),
        }
    }
}

impl FromStr for MetricKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown metric key {s:?}"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        match name {
            "R" => Ok(MetricKey::Recall(k)),
            "R_Subset" => Ok(MetricKey::RecallSubset(k)),
            "mAP" => Ok(MetricKey::Map(k)),
            "mAP_Subset" => Ok(MetricKey::MapSubset(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec(pub Vec<(MetricKey, f64)>);

impl CompositeSpec {
    /// Mean of R@5 and R_Subset@1.
    pub fn cirr() -> Self {
        CompositeSpec(vec![(MetricKey::Recall(5), 1.0), (MetricKey::RecallSubset(1), 1.0)])
    }

    /// Mean of R@10 and R@50.
    pub fn fashion() -> Self {
        CompositeSpec(vec![(MetricKey::Recall(10), 1.0), (MetricKey::Recall(50), 1.0)])
    }
}

impl Serialize for MetricKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    pub recall: BTreeMap<usize, f64>,
    pub recall_subset: BTreeMap<usize, f64>,
    pub map: BTreeMap<usize, f64>,
    pub map_subset: BTreeMap<usize, f64>,
    pub composite: Option<f64>,
}

impl MetricReport {
    /// Builds a report from per-query gold ranks. Either side may be empty
    /// when only one pool was evaluated. `composite` is filled in when every
    /// metric it references is present.
    pub fn from_gold_ranks(
        global: &[Option<usize>],
        subset: &[Option<usize>],
        ks: &[usize],
        subset_ks: &[usize],
        composite: &CompositeSpec,
    ) -> Result<Self> {
        let mut report = MetricReport {
            queries: global.len().max(subset.len()),
            recall: BTreeMap::new(),
            recall_subset: BTreeMap::new(),
            map: BTreeMap::new(),
            map_subset: BTreeMap::new(),
            composite: None,
        };
        if !global.is_empty() {
            for &k in ks {
                report.recall.insert(k, recall_at_k(global, k)?);
                report.map.insert(k, map_at_k(global, k)?);
            }
        }
        if !subset.is_empty() {
            for &k in subset_ks {
                report.recall_subset.insert(k, recall_at_k(subset, k)?);
                report.map_subset.insert(k, map_at_k(subset, k)?);
            }
        }
        report.composite = composite_score(&report, composite).ok();
        Ok(report)
    }

    pub fn get(&self, key: MetricKey) -> Option<f64> {
        match key {
            MetricKey::Recall(k) => self.recall.get(&k),
            MetricKey::RecallSubset(k) => self.recall_subset.get(&k),
            MetricKey::Map(k) => self.map.get(&k),
            MetricKey::MapSubset(k) => self.map_subset.get(&k),
        }
        .copied()
    }

    /// Copy with every value rounded half-up to two decimals.
    pub fn rounded(&self) -> Self {
        let r = |m: &BTreeMap<usize, f64>| m.iter().map(|(k, v)| (*k, round2(*v))).collect();
        MetricReport {
            queries: self.queries,
            recall: r(&self.recall),
            recall_subset: r(&self.recall_subset),
            map: r(&self.map),
            map_subset: r(&self.map_subset),
            composite: self.composite.map(round2),
        }
    }

    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, f64)> = Vec::new();
        rows.extend(self.recall.iter().map(|(k, v)| (MetricKey::Recall(*k).to_string(), *v)));
        rows.extend(self.recall_subset.iter().map(|(k, v)| (MetricKey::RecallSubset(*k).to_string(), *v)));
        rows.extend(self.map.iter().map(|(k, v)| (MetricKey::Map(*k).to_string(), *v)));
        rows.extend(self.map_subset.iter().map(|(k, v)| (MetricKey::MapSubset(*k).to_string(), *v)));
        if let Some(c) = self.composite {
            rows.push(("composite".into(), c));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = format!("{:<width$}  {:>7}\n", "metric", "value");
        out.push_str(&format!("{:<width$}  {:>7}\n", "queries", self.queries));
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {:>7.2}\n", round2(v)));
        }
        out
    }
}

/// Weighted mean of the referenced metrics.
pub fn composite_score(report: &MetricReport, spec: &CompositeSpec) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (key, w) in &spec.0 {
        let v = report
            .get(*key)
            .ok_or_else(|| Error::InvalidConfig(format!("metric {key} missing from report")))?;
        num += w * v;
        den += w;
    }
    if den <= 0.0 {
        return Err(Error::InvalidConfig("composite weights must sum to a positive value".into()));
    }
    Ok(num / den)
}

/// Orders results by pair id so every reducer sums in the same order.
pub fn sort_by_pair(results: &mut [RankingResult]) {
    results.sort_by_key(|r| r.pair_id);
}
