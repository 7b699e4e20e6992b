//! Pair drawing, split assignment and dialogue-path extraction.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImageId, PairRecord, Split, Subset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Loop,
    Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DirectedPair {
    pub subset_id: u64,
    pub reference_rank: usize,
    pub target_rank: usize,
    pub kind: PairKind,
}

/// Rank pairs drawn from a subset of `size` members: the closed loop
/// `0→1→…→size-1→0` followed by branches `0→k` for `k` in `2..=size-2`.
/// For six members that is 6 loop pairs and 3 branches.
pub fn pair_ranks(size: usize) -> Vec<(usize, usize, PairKind)> {
    let mut out: Vec<_> = (0..size).map(|r| (r, (r + 1) % size, PairKind::Loop)).collect();
    if size >= 4 {
        out.extend((2..=size - 2).map(|t| (0, t, PairKind::Branch)));
    }
    out
}

pub fn draw_pairs(subset: &Subset) -> Vec<DirectedPair> {
    pair_ranks(subset.members.len())
        .into_iter()
        .map(|(r, t, kind)| DirectedPair {
            subset_id: subset.id,
            reference_rank: r,
            target_rank: t,
            kind,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios {all:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }

    fn get(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidConfig(format!("bad ratios {s:?}: {e}")))?;
        let [train, val, test] = parts[..] else {
            return Err(Error::InvalidConfig(format!("expected three ratios, got {s:?}")));
        };
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub ratios: SplitRatios,
    pub rng_seed: u64,
    pub assignment: BTreeMap<u64, Split>,
}

impl SplitAssignment {
    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut c: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for s in self.assignment.values() {
            *c.get_mut(s).unwrap() += 1;
        }
        c
    }

    pub fn split_of(&self, subset_id: u64) -> Option<Split> {
        self.assignment.get(&subset_id).copied()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Groups subsets sharing any member into connected components, shuffles the
/// components and hands each to the split with the largest remaining deficit
/// (ties go to train, then val, then test).
pub fn assign_splits(subsets: &[Subset], ratios: SplitRatios, rng_seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    let n = subsets.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut owner: HashMap<&ImageId, usize> = HashMap::new();
    for (i, s) in subsets.iter().enumerate() {
        for m in &s.members {
            if let Some(&j) = owner.get(m) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            } else {
                owner.insert(m, i);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut components: Vec<Vec<usize>> = groups.into_values().collect();
    components.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));

    let mut filled: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
    let mut assignment = BTreeMap::new();
    for comp in components {
        let split = Split::ALL
            .iter()
            .copied()
            .map(|s| (s, ratios.get(s) * n as f64 - filled[&s] as f64))
            .fold(None::<(Split, f64)>, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
            .map(|(s, _)| s)
            .unwrap();
        *filled.get_mut(&split).unwrap() += comp.len();
        for i in comp {
            assignment.insert(subsets[i].id, split);
        }
    }
    Ok(SplitAssignment {
        ratios,
        rng_seed,
        assignment,
    })
}

/// Output of [`extract_dialogue_paths`]. Paths and cycles are lists of pair ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueReport {
    /// Maximal simple chains of consecutive-modification pairs starting at an
    /// image no loop pair leads into.
    pub paths: Vec<Vec<u64>>,
    /// One entry per closed subset, starting from the seed's pair.
    pub cycles: Vec<Vec<u64>>,
    pub closed_loop: BTreeMap<i64, bool>,
}

impl DialogueReport {
    pub fn closed_loop_fraction(&self) -> f64 {
        if self.closed_loop.is_empty() {
            return 0.0;
        }
        self.closed_loop.values().filter(|&&c| c).count() as f64 / self.closed_loop.len() as f64
    }

    pub fn longest_path(&self) -> usize {
        self.paths.iter().map(Vec::len).max().unwrap_or(0)
    }
}

fn is_loop_pair(r: &PairRecord) -> Option<(usize, usize)> {
    let (ref_rank, tgt_rank) = (r.reference_rank?, r.target_rank?);
    r.target_hard.as_ref()?;
    let n = r.members.len();
    (n > 0 && tgt_rank == (ref_rank + 1) % n).then_some((ref_rank, tgt_rank))
}

/// Builds the image graph of consecutive-modification (loop) pairs, flags
/// subsets whose loop survives intact, and lists maximal simple chains. Chains
/// may cross subsets through shared images.
pub fn extract_dialogue_paths(pairs: &[PairRecord]) -> DialogueReport {
    let mut report = DialogueReport::default();

    let mut by_subset: BTreeMap<i64, (usize, BTreeMap<usize, u64>)> = BTreeMap::new();
    for r in pairs {
        let entry = by_subset
            .entry(r.subset_id)
            .or_insert_with(|| (r.members.len(), BTreeMap::new()));
        if let Some((ref_rank, _)) = is_loop_pair(r) {
            entry.1.insert(ref_rank, r.pair_id);
        }
    }
    for (subset_id, (size, loop_pairs)) in &by_subset {
        let closed = *size > 0 && (0..*size).all(|rank| loop_pairs.contains_key(&rank));
        report.closed_loop.insert(*subset_id, closed);
        if closed {
            report.cycles.push(loop_pairs.values().copied().collect());
        }
    }

    let mut out_edges: BTreeMap<&ImageId, Vec<(&ImageId, u64)>> = BTreeMap::new();
    let mut has_incoming: HashSet<&ImageId> = HashSet::new();
    for r in pairs.iter().filter(|r| is_loop_pair(r).is_some()) {
        let target = r.target_hard.as_ref().unwrap();
        out_edges.entry(&r.reference).or_default().push((target, r.pair_id));
        has_incoming.insert(target);
    }
    for edges in out_edges.values_mut() {
        edges.sort();
    }

    let sources: Vec<&ImageId> = out_edges
        .keys()
        .copied()
        .filter(|n| !has_incoming.contains(n))
        .collect();
    for source in sources {
        let mut visited = HashSet::from([source]);
        let mut chain = Vec::new();
        walk(source, &out_edges, &mut visited, &mut chain, &mut report.paths);
    }
    report
}

fn walk<'a>(
    node: &'a ImageId,
    edges: &BTreeMap<&'a ImageId, Vec<(&'a ImageId, u64)>>,
    visited: &mut HashSet<&'a ImageId>,
    chain: &mut Vec<u64>,
    out: &mut Vec<Vec<u64>>,
) {
    let mut extended = false;
    for &(next, pair_id) in edges.get(node).into_iter().flatten() {
        if visited.contains(next) {
            continue;
        }
        extended = true;
        visited.insert(next);
        chain.push(pair_id);
        walk(next, edges, visited, chain, out);
        chain.pop();
        visited.remove(next);
    }
    if !extended && !chain.is_empty() {
        out.push(chain.clone());
    }
}
