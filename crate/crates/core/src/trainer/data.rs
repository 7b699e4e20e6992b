use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sampling::sample_excluding;
use super::TripletSample;
use crate::composers::{ComposerKind, Composer};
use crate::dataset::DatasetFile;
use crate::error::{Error, Result};
use crate::features::{to_f64, FeatureStore};
use crate::model::ImageId;
use crate::text::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub pair_id: u64,
    /// Corpus index of the reference image.
    pub reference: usize,
    /// Corpus index of the image fed to the composer; differs from
    /// `reference` only for the random-image baseline.
    pub input: usize,
    pub target: usize,
    pub tokens: Vec<u32>,
}

/// Training corpus (every image of the split, as 64-bit features) and the
/// labeled queries over it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub ids: Vec<ImageId>,
    pub corpus: Vec<Vec<f64>>,
    pub examples: Vec<TrainExample>,
}

/// Deterministic stand-in reference for the random-image baseline: a corpus
/// index other than `reference`, fixed by `(seed, pair_id)`.
pub fn substitute_index(pair_id: u64, reference: usize, corpus_len: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pair_id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    sample_excluding(&mut rng, corpus_len, &[reference])
}

impl TrainingSet {
    pub fn from_dataset(
        file: &DatasetFile,
        store: &FeatureStore,
        vocab: &Vocabulary,
        kind: ComposerKind,
        substitute_seed: u64,
    ) -> Result<Self> {
        let ids = file.images();
        let corpus = ids
            .iter()
            .map(|id| store.require(id).map(to_f64))
            .collect::<Result<Vec<_>>>()?;
        let index: HashMap<&ImageId, usize> = ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut examples = Vec::new();
        for r in file.labeled() {
            let target = r.target_hard.as_ref().expect("labeled record");
            let reference = index[&r.reference];
            let input = if kind == ComposerKind::RandomImageText {
                substitute_index(r.pair_id, reference, ids.len(), substitute_seed)?
            } else {
                reference
            };
            examples.push(TrainExample {
                pair_id: r.pair_id,
                reference,
                input,
                target: index[target],
                tokens: vocab.encode(&r.caption),
            });
        }
        Ok(TrainingSet { ids, corpus, examples })
    }

    pub(super) fn check(&self, composer: &Composer) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Data("no labeled training pairs".into()));
        }
        let dim = composer.config.feature_dim;
        if let Some(f) = self.corpus.iter().find(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: f.len(),
            });
        }
        Ok(())
    }

    pub(super) fn sample<'a>(&'a self, i: usize, negatives: &'a [&'a [f64]]) -> TripletSample<'a> {
        let e = &self.examples[i];
        TripletSample {
            reference: &self.corpus[e.input],
            tokens: &e.tokens,
            positive: &self.corpus[e.target],
            negatives,
        }
    }
}
