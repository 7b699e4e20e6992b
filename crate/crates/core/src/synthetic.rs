//! Synthetic attribute benchmark with a known answer.
//!
//! Every image is a distinct combination of one value per attribute slot,
//! encoded one-hot with Gaussian noise. A subset is a base combination plus
//! variants that change one or two slots, so its members are mutually
//! similar. Captions name the target's values on the slots where it differs
//! from the reference, which makes the target the only correct answer.

use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::DatasetFile;
use crate::error::{Error, Result};
use crate::features::{dot, norm, FeatureStore};
use crate::model::{ImageId, PairRecord, Split, Subset};
use crate::pairs::{assign_splits, draw_pairs, SplitAssignment, SplitRatios};

/// Value words, one row per slot. All 32 are distinct.
pub const VALUES: [[&str; 8]; 4] = [
    ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"],
    ["cube", "sphere", "cone", "cylinder", "torus", "pyramid", "ring", "disk"],
    ["tiny", "small", "medium", "large", "huge", "narrow", "wide", "tall"],
    ["metal", "wood", "glass", "rubber", "stone", "paper", "cloth", "plastic"],
];

pub const SLOTS: usize = 4;
pub const VALUES_PER_SLOT: usize = 8;
pub const DIM: usize = SLOTS * VALUES_PER_SLOT;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub images: usize,
    pub subset_size: usize,
    pub noise: f64,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            images: 500,
            subset_size: 6,
            noise: 0.05,
            ratios: SplitRatios::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub store: FeatureStore,
    pub attributes: BTreeMap<ImageId, [usize; SLOTS]>,
    pub subsets: Vec<Subset>,
    pub assignment: SplitAssignment,
    pub splits: BTreeMap<Split, DatasetFile>,
}

impl SyntheticBenchmark {
    pub fn split(&self, split: Split) -> &DatasetFile {
        &self.splits[&split]
    }
}

/// Caption naming the target's values on every slot where it differs.
pub fn describe_edit(reference: &[usize; SLOTS], target: &[usize; SLOTS]) -> String {
    let words: Vec<&str> = (0..SLOTS)
        .filter(|&s| reference[s] != target[s])
        .map(|s| VALUES[s][target[s]])
        .collect();
    format!("make it {}", words.join(" and "))
}

fn random_combo(rng: &mut ChaCha8Rng) -> [usize; SLOTS] {
    std::array::from_fn(|_| rng.random_range(0..VALUES_PER_SLOT))
}

fn variant(base: &[usize; SLOTS], rng: &mut ChaCha8Rng) -> [usize; SLOTS] {
    let slots: Vec<usize> = (0..SLOTS).collect();
    let changes = rng.random_range(1..=2);
    let mut out = *base;
    for &s in slots.choose_multiple(rng, changes) {
        let mut v = rng.random_range(0..VALUES_PER_SLOT - 1);
        if v >= base[s] {
            v += 1;
        }
        out[s] = v;
    }
    out
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    let capacity = VALUES_PER_SLOT.pow(SLOTS as u32);
    if cfg.images > capacity / 2 || cfg.subset_size < 4 || cfg.images < cfg.subset_size * 3 {
        return Err(Error::InvalidConfig(format!(
            "cannot build {} images in subsets of {}",
            cfg.images, cfg.subset_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut used: HashSet<[usize; SLOTS]> = HashSet::new();
    let mut groups: Vec<Vec<[usize; SLOTS]>> = Vec::new();

    let n_subsets = cfg.images / cfg.subset_size;
    while groups.len() < n_subsets {
        let base = random_combo(&mut rng);
        if used.contains(&base) {
            continue;
        }
        let mut group = vec![base];
        let mut attempts = 0;
        while group.len() < cfg.subset_size && attempts < 200 {
            attempts += 1;
            let v = variant(&base, &mut rng);
            if !used.contains(&v) && !group.contains(&v) {
                group.push(v);
            }
        }
        if group.len() == cfg.subset_size {
            used.extend(group.iter().copied());
            groups.push(group);
        }
    }
    let mut fillers = Vec::new();
    while used.len() + fillers.len() < cfg.images {
        let c = random_combo(&mut rng);
        if !used.contains(&c) && !fillers.contains(&c) {
            fillers.push(c);
        }
    }

    let mut store = FeatureStore::new(DIM)?;
    let mut attributes = BTreeMap::new();
    let mut vectors: BTreeMap<ImageId, Vec<f64>> = BTreeMap::new();
    let mut next = 0usize;
    let mut add = |combo: [usize; SLOTS], rng: &mut ChaCha8Rng| -> Result<ImageId> {
        let id = ImageId::new(format!("synth-{next:04}"))?;
        next += 1;
        let mut v = vec![0.0f64; DIM];
        for (s, &value) in combo.iter().enumerate() {
            v[s * VALUES_PER_SLOT + value] = 1.0;
        }
        v.iter_mut().for_each(|x| *x += noise.sample(rng));
        let f32s: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        store.push(id.clone(), &f32s)?;
        attributes.insert(id.clone(), combo);
        vectors.insert(id.clone(), f32s.iter().map(|&x| x as f64).collect());
        Ok(id)
    };

    let mut subsets = Vec::with_capacity(groups.len());
    for group in &groups {
        let members = group
            .iter()
            .map(|&c| add(c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        subsets.push(members);
    }
    for c in fillers {
        add(c, &mut rng)?;
    }
    let subsets: Vec<Subset> = subsets
        .into_iter()
        .enumerate()
        .map(|(sid, members)| {
            let seed = &vectors[&members[0]];
            let seed_similarities = members
                .iter()
                .map(|m| {
                    let v = &vectors[m];
                    dot(seed, v) / (norm(seed) * norm(v))
                })
                .collect();
            Subset {
                id: sid as u64,
                members,
                seed_similarities,
            }
        })
        .collect();

    let assignment = assign_splits(&subsets, cfg.ratios, cfg.seed)?;
    let mut splits: BTreeMap<Split, DatasetFile> = Split::ALL
        .iter()
        .map(|&s| (s, DatasetFile { split: s, records: Vec::new() }))
        .collect();
    let mut pair_id = 0u64;
    for subset in &subsets {
        let split = assignment.split_of(subset.id).expect("every subset is assigned");
        for p in draw_pairs(subset) {
            let reference = subset.members[p.reference_rank].clone();
            let target = subset.members[p.target_rank].clone();
            let caption = describe_edit(&attributes[&reference], &attributes[&target]);
            splits.get_mut(&split).unwrap().records.push(PairRecord {
                pair_id,
                reference,
                target_soft: BTreeMap::from([(target.clone(), crate::model::SoftScore::Same)]),
                target_hard: Some(target),
                caption,
                aux: None,
                subset_id: subset.id as i64,
                members: subset.members.clone(),
                reference_rank: Some(p.reference_rank),
                target_rank: Some(p.target_rank),
            });
            pair_id += 1;
        }
    }
    Ok(SyntheticBenchmark {
        store,
        attributes,
        subsets,
        assignment,
        splits,
    })
}

const WORDS: [&str; 16] = [
    "the", "dog", "is", "now", "sitting", "on", "grass", "two", "bottles", "with", "more", "light", "closer", "view",
    "\"quoted\"", "café",
];

/// Random but schema-valid annotation file of `records` pairs, used to
/// exercise the reader and writer. Pairs come from disjoint six-image
/// subsets; auxiliary answers mix free text, every sentinel and absent
/// slots; soft scores use every allowed value.
pub fn random_dataset(records: usize, split: Split, seed: u64) -> DatasetFile {
    use crate::model::{AuxAnnotation, AuxAnswer, Sentinel, SoftScore};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng, len: usize| -> String {
        (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let prefix = match split {
        Split::Train => "train",
        Split::Val => "dev",
        Split::Test => "test1",
    };
    let mut out = Vec::with_capacity(records);
    let mut subset = 0usize;
    while out.len() < records {
        let members: Vec<ImageId> = (0..6)
            .map(|m| ImageId::new(format!("{prefix}-{subset}-{}-img{m}", m % 3)).unwrap())
            .collect();
        for (r, t, _) in crate::pairs::pair_ranks(6) {
            if out.len() == records {
                break;
            }
            let pair_id = out.len() as u64 * 3 + 1;
            let labeled = split != Split::Test;
            let mut target_soft = BTreeMap::new();
            if labeled {
                target_soft.insert(members[t].clone(), SoftScore::Same);
                for (i, m) in members.iter().enumerate() {
                    if i != r && i != t && rng.random_bool(0.5) {
                        let s = if rng.random_bool(0.5) { SoftScore::NoDifference } else { SoftScore::TooDifferent };
                        target_soft.insert(m.clone(), s);
                    }
                }
            }
            let aux = rng.random_bool(0.9).then(|| {
                let mut a = AuxAnnotation::default();
                for q in 0..4 {
                    let answer = match rng.random_range(0..5) {
                        0 => None,
                        1 => Some(AuxAnswer::Text(sentence(&mut rng, 4))),
                        k => {
                            let rest = if rng.random_bool(0.5) { String::new() } else { format!(" {}", sentence(&mut rng, 2)) };
                            Some(AuxAnswer::NotApplicable {
                                sentinel: [Sentinel::C, Sentinel::Cr0, Sentinel::Cr1][k - 2],
                                rest,
                            })
                        }
                    };
                    *a.slot_mut(q).unwrap() = answer;
                }
                a
            });
            let len = rng.random_range(3..20);
            out.push(PairRecord {
                pair_id,
                reference: members[r].clone(),
                target_hard: labeled.then(|| members[t].clone()),
                target_soft,
                caption: sentence(&mut rng, len),
                aux,
                subset_id: subset as i64,
                members: members.clone(),
                reference_rank: Some(r),
                target_rank: labeled.then_some(t),
            });
        }
        subset += 1;
    }
    DatasetFile { split, records: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_of_default_benchmark() {
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(b.store.len(), 500);
        assert_eq!(b.subsets.len(), 83);
        let combos: HashSet<_> = b.attributes.values().collect();
        assert_eq!(combos.len(), 500);
        let pairs: usize = b.splits.values().map(|f| f.records.len()).sum();
        assert_eq!(pairs, 83 * 9);
        for f in b.splits.values() {
            f.validate().unwrap();
        }
        let counts = b.assignment.counts();
        assert!(counts[&Split::Train] >= 60 && counts[&Split::Val] >= 7);
    }

    #[test]
    fn captions_name_changed_values() {
        assert_eq!(describe_edit(&[0, 0, 0, 0], &[1, 0, 0, 2]), "make it blue and glass");
    }

    #[test]
    fn deterministic() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(a.splits, b.splits);
        assert_eq!(a.store.ids(), b.store.ids());
    }
}
