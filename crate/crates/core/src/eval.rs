//! Composes every query of a split and ranks the global and subset pools.
//!
//! The global pool is every image of the split except the query's reference;
//! the subset pool is the query's subset minus the reference.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composers::{ComposeInput, Composer, ComposerKind};
use crate::dataset::DatasetFile;
use crate::error::{Error, Result};
use crate::features::{to_f64, FeatureStore};
use crate::metrics::{rank_candidates, CompositeSpec, MetricReport, DEFAULT_KS, DEFAULT_SUBSET_KS};
use crate::model::{ImageId, RankingResult};
use crate::text::Vocabulary;
use crate::trainer::substitute_index;

/// Global ranking depth kept in submissions; the largest reported K.
pub const DEFAULT_DEPTH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrieveOptions {
    /// Truncate global rankings to this many candidates; `None` keeps all.
    pub depth: Option<usize>,
    /// Seed of the substitute references used by the random-image baseline.
    pub substitute_seed: u64,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        RetrieveOptions {
            depth: None,
            substitute_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub pair_id: u64,
    pub global: RankingResult,
    pub subset: RankingResult,
}

/// Projected candidates of a split, in sorted id order.
#[derive(Debug, Clone)]
pub struct EmbeddedCorpus {
    pub ids: Vec<ImageId>,
    pub raw: Vec<Vec<f64>>,
    pub projected: Vec<Vec<f64>>,
    index: HashMap<ImageId, usize>,
}

impl EmbeddedCorpus {
    pub fn new(composer: &Composer, store: &FeatureStore, ids: Vec<ImageId>) -> Result<Self> {
        let raw = ids
            .iter()
            .map(|id| store.require(id).map(to_f64))
            .collect::<Result<Vec<_>>>()?;
        let projected = raw
            .par_iter()
            .map(|f| composer.project_image(f))
            .collect::<Result<Vec<_>>>()?;
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(EmbeddedCorpus {
            ids,
            raw,
            projected,
            index,
        })
    }

    pub fn index_of(&self, id: &ImageId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }
}

/// Composed query features, one per record, in record order.
pub fn compose_queries(
    composer: &Composer,
    vocab: &Vocabulary,
    file: &DatasetFile,
    corpus: &EmbeddedCorpus,
    substitute_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    file.records
        .par_iter()
        .map(|r| {
            let mut input = corpus.index_of(&r.reference)?;
            if composer.kind() == ComposerKind::RandomImageText {
                input = substitute_index(r.pair_id, input, corpus.ids.len(), substitute_seed)?;
            }
            let tokens = vocab.encode(&r.caption);
            composer.compose(ComposeInput {
                reference: &corpus.raw[input],
                tokens: &tokens,
            })
        })
        .collect()
}

/// Ranks both pools for every record, returned in pair-id order.
pub fn retrieve(
    composer: &Composer,
    vocab: &Vocabulary,
    file: &DatasetFile,
    store: &FeatureStore,
    opts: RetrieveOptions,
) -> Result<Vec<QueryRanking>> {
    let corpus = EmbeddedCorpus::new(composer, store, file.images())?;
    let queries = compose_queries(composer, vocab, file, &corpus, opts.substitute_seed)?;
    let mut out = file
        .records
        .par_iter()
        .zip(queries.par_iter())
        .map(|(r, q)| {
            let pool = |ids: &mut dyn Iterator<Item = &ImageId>| -> Result<Vec<(ImageId, &[f64])>> {
                ids.filter(|id| **id != r.reference)
                    .map(|id| Ok((id.clone(), corpus.projected[corpus.index_of(id)?].as_slice())))
                    .collect()
            };
            let global_pool = pool(&mut corpus.ids.iter())?;
            let subset_pool = pool(&mut r.members.iter())?;
            let gold = r.target_hard.as_ref();
            let mut global = rank_candidates(r.pair_id, q, &global_pool, gold)?;
            if let Some(depth) = opts.depth {
                global.candidates.truncate(depth);
                global.gold_rank = global.gold_rank.filter(|&g| g <= depth);
            }
            let subset = rank_candidates(r.pair_id, q, &subset_pool, gold)?;
            Ok(QueryRanking {
                pair_id: r.pair_id,
                global,
                subset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|q| q.pair_id);
    Ok(out)
}

/// Metric report over the rankings that have a gold target, summed in
/// pair-id order.
pub fn evaluate(rankings: &[QueryRanking], composite: &CompositeSpec) -> Result<MetricReport> {
    let mut sorted: Vec<&QueryRanking> = rankings.iter().collect();
    sorted.sort_by_key(|q| q.pair_id);
    let global: Vec<Option<usize>> = sorted.iter().map(|q| q.global.gold_rank).collect();
    let subset: Vec<Option<usize>> = sorted.iter().map(|q| q.subset.gold_rank).collect();
    MetricReport::from_gold_ranks(&global, &subset, &DEFAULT_KS, &DEFAULT_SUBSET_KS, composite)
}

/// Retrieves and scores a labeled split.
pub fn evaluate_split(
    composer: &Composer,
    vocab: &Vocabulary,
    file: &DatasetFile,
    store: &FeatureStore,
    opts: RetrieveOptions,
) -> Result<MetricReport> {
    if file.labeled().count() != file.records.len() {
        return Err(Error::Data(format!(
            "{} split has unlabeled records; it can only be scored by the server",
            file.split
        )));
    }
    evaluate(&retrieve(composer, vocab, file, store, opts)?, &CompositeSpec::cirr())
}
