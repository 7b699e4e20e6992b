//! Image-subset construction.
//!
//! For a seed image, every other image is ranked by cosine similarity to the
//! seed. Near duplicates (κ ≥ threshold) are dropped, the next
//! `candidate_window` images are scanned greedily and a candidate is added
//! only when it sits more than `min_gap` below the last added image. A seed
//! that cannot reach `subset_size` members is discarded.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{dot, norm, FeatureStore, DEGENERATE_NORM};
use crate::model::{ImageId, Subset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub near_duplicate_threshold: f64,
    pub min_gap: f64,
    pub candidate_window: usize,
    pub subset_size: usize,
    pub overlap_limit: usize,
    pub rng_seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            near_duplicate_threshold: 0.94,
            min_gap: 0.002,
            candidate_window: 20,
            subset_size: 6,
            overlap_limit: 2,
            rng_seed: 0,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.min_gap > 0.0
            && self.min_gap < self.near_duplicate_threshold
            && self.near_duplicate_threshold <= 1.0)
        {
            return bad("require 0 < min_gap < near_duplicate_threshold <= 1");
        }
        if self.subset_size < 2 {
            return bad("subset_size must be at least 2");
        }
        if self.candidate_window + 1 < self.subset_size {
            return bad("candidate_window must be at least subset_size - 1");
        }
        Ok(())
    }
}

/// Why a seed produced no subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// Fewer than `subset_size - 1` images survive the near-duplicate filter.
    TooFewCandidates,
    /// The gap rule skipped too many window candidates.
    GapRule,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MineOutcome {
    Accepted(Subset),
    Rejected(Rejection),
}

impl MineOutcome {
    pub fn subset(self) -> Option<Subset> {
        match self {
            MineOutcome::Accepted(s) => Some(s),
            MineOutcome::Rejected(_) => None,
        }
    }
}

/// Source of seed similarities. Selection depends only on what this returns.
pub trait SimilarityProvider: Sync {
    /// Number of images in the corpus, seed included.
    fn corpus_len(&self) -> usize;

    /// Similarity of every other usable image to `seed`, in any order.
    fn similarities(&self, seed: &ImageId) -> Result<Vec<(ImageId, f64)>>;
}

/// Cosine similarity computed in 64-bit, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Err(Error::Degenerate);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pre-normalized view of a feature store for repeated cosine queries.
pub struct CosineIndex<'a> {
    store: &'a FeatureStore,
    unit: Vec<f64>,
    usable: Vec<bool>,
}

impl<'a> CosineIndex<'a> {
    pub fn new(store: &'a FeatureStore) -> Self {
        let d = store.dimension();
        let mut unit = vec![0.0; store.len() * d];
        let mut usable = vec![false; store.len()];
        for i in 0..store.len() {
            let row: Vec<f64> = store.row(i).iter().map(|&x| x as f64).collect();
            let n = norm(&row);
            if n >= DEGENERATE_NORM {
                usable[i] = true;
                for (dst, x) in unit[i * d..(i + 1) * d].iter_mut().zip(&row) {
                    *dst = x / n;
                }
            } else {
                log::warn!("image {} has a degenerate feature; excluded from mining", store.ids()[i]);
            }
        }
        CosineIndex { store, unit, usable }
    }

    fn unit_row(&self, i: usize) -> &[f64] {
        let d = self.store.dimension();
        &self.unit[i * d..(i + 1) * d]
    }

    pub fn is_usable(&self, id: &ImageId) -> bool {
        self.store.index_of(id).is_some_and(|i| self.usable[i])
    }
}

impl SimilarityProvider for CosineIndex<'_> {
    fn corpus_len(&self) -> usize {
        self.store.len()
    }

    fn similarities(&self, seed: &ImageId) -> Result<Vec<(ImageId, f64)>> {
        let s = self
            .store
            .index_of(seed)
            .ok_or_else(|| Error::UnknownImage(seed.to_string()))?;
        if !self.usable[s] {
            return Err(Error::Degenerate);
        }
        let seed_row = self.unit_row(s);
        Ok((0..self.store.len())
            .filter(|&i| i != s && self.usable[i])
            .map(|i| {
                let k = dot(seed_row, self.unit_row(i)).clamp(-1.0, 1.0);
                (self.store.ids()[i].clone(), k)
            })
            .collect())
    }
}

/// Descending similarity, ties broken by ascending image id.
fn by_similarity_desc(a: &(ImageId, f64), b: &(ImageId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

pub fn mine_subset(seed: &ImageId, store: &FeatureStore, cfg: &MinerConfig) -> Result<MineOutcome> {
    mine_subset_with(seed, &CosineIndex::new(store), cfg)
}

pub fn mine_subset_with<P: SimilarityProvider + ?Sized>(
    seed: &ImageId,
    provider: &P,
    cfg: &MinerConfig,
) -> Result<MineOutcome> {
    cfg.validate()?;
    if provider.corpus_len() < cfg.candidate_window + 1 {
        return Err(Error::InvalidConfig(format!(
            "corpus of {} images is smaller than candidate_window + 1 = {}",
            provider.corpus_len(),
            cfg.candidate_window + 1
        )));
    }
    let mut ranked = provider.similarities(seed)?;
    ranked.sort_by(by_similarity_desc);

    let window = ranked
        .iter()
        .filter(|(_, k)| *k < cfg.near_duplicate_threshold)
        .take(cfg.candidate_window);

    let needed = cfg.subset_size - 1;
    let mut members = vec![seed.clone()];
    let mut kappas = vec![1.0];
    let mut last_added = 1.0;
    let mut seen = 0;
    for (id, k) in window {
        seen += 1;
        if last_added - k > cfg.min_gap {
            members.push(id.clone());
            kappas.push(*k);
            last_added = *k;
            if members.len() == cfg.subset_size {
                break;
            }
        }
    }
    if members.len() < cfg.subset_size {
        let reason = if seen < needed {
            Rejection::TooFewCandidates
        } else {
            Rejection::GapRule
        };
        return Ok(MineOutcome::Rejected(reason));
    }
    Ok(MineOutcome::Accepted(Subset {
        id: 0,
        members,
        seed_similarities: kappas,
    }))
}

/// Mines subsets from seeds drawn without replacement in `rng_seed` order,
/// keeping a subset only if it shares at most `overlap_limit` members with
/// every previously accepted one. Subset ids are assigned in acceptance order.
pub fn mine_all(store: &FeatureStore, cfg: &MinerConfig, target_count: usize) -> Result<Vec<Subset>> {
    mine_all_with(store.ids(), &CosineIndex::new(store), cfg, target_count)
}

pub fn mine_all_with<P: SimilarityProvider + ?Sized>(
    ids: &[ImageId],
    provider: &P,
    cfg: &MinerConfig,
    target_count: usize,
) -> Result<Vec<Subset>> {
    cfg.validate()?;
    let mut accepted: Vec<Subset> = Vec::new();
    if target_count == 0 {
        return Ok(accepted);
    }
    let mut seeds = ids.to_vec();
    seeds.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.rng_seed));

    let mut membership: HashMap<ImageId, Vec<usize>> = HashMap::new();
    let chunk = (rayon::current_num_threads() * 8).max(16);
    for batch in seeds.chunks(chunk) {
        let outcomes: Vec<Result<MineOutcome>> = batch
            .par_iter()
            .map(|seed| match mine_subset_with(seed, provider, cfg) {
                Err(Error::Degenerate) => Ok(MineOutcome::Rejected(Rejection::TooFewCandidates)),
                other => other,
            })
            .collect();
        for outcome in outcomes {
            let Some(mut subset) = outcome?.subset() else {
                continue;
            };
            let mut shared: HashMap<usize, usize> = HashMap::new();
            for m in &subset.members {
                for &other in membership.get(m).into_iter().flatten() {
                    *shared.entry(other).or_default() += 1;
                }
            }
            if shared.values().any(|&c| c > cfg.overlap_limit) {
                continue;
            }
            subset.id = accepted.len() as u64;
            for m in &subset.members {
                membership.entry(m.clone()).or_default().push(accepted.len());
            }
            accepted.push(subset);
            if accepted.len() == target_count {
                return Ok(accepted);
            }
        }
    }
    Ok(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<(ImageId, f64)>);

    impl SimilarityProvider for Fixed {
        fn corpus_len(&self) -> usize {
            self.0.len() + 1
        }
        fn similarities(&self, _seed: &ImageId) -> Result<Vec<(ImageId, f64)>> {
            Ok(self.0.clone())
        }
    }

    fn id(s: impl Into<String>) -> ImageId {
        ImageId::new(s).unwrap()
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate)));
    }

    #[test]
    fn all_candidates_within_gap_is_rejected() {
        let sims: Vec<_> = (0..25).map(|i| (id(format!("c{i:02}")), 0.9 - 0.0001 * i as f64)).collect();
        let out = mine_subset_with(&id("seed"), &Fixed(sims), &MinerConfig::default()).unwrap();
        assert_eq!(out, MineOutcome::Rejected(Rejection::GapRule));
    }

    #[test]
    fn ties_break_by_id() {
        let mut sims = vec![(id("b"), 0.5), (id("a"), 0.5)];
        sims.extend((0..20).map(|i| (id(format!("z{i:02}")), 0.4 - 0.01 * i as f64)));
        let cfg = MinerConfig {
            subset_size: 2,
            ..MinerConfig::default()
        };
        let s = mine_subset_with(&id("seed"), &Fixed(sims), &cfg).unwrap().subset().unwrap();
        assert_eq!(s.members[1], id("a"));
    }

    #[test]
    fn small_corpus_is_a_precondition_error() {
        let sims: Vec<_> = (0..5).map(|i| (id(format!("c{i}")), 0.5 - 0.1 * i as f64)).collect();
        assert!(mine_subset_with(&id("seed"), &Fixed(sims), &MinerConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = MinerConfig {
            min_gap: 0.0,
            ..MinerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MinerConfig {
            candidate_window: 3,
            ..MinerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn target_zero_is_empty() {
        let store = FeatureStore::from_rows(2, (0..30).map(|i| (id(format!("i{i}")), vec![1.0, i as f32]))).unwrap();
        assert!(mine_all(&store, &MinerConfig::default(), 0).unwrap().is_empty());
    }
}
