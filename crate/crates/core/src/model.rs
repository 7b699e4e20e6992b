//! Domain types shared across the toolkit: image identifiers, subsets,
//! annotated pair records and ranking results.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image identifier following the NLVR2 naming style, e.g. `dev-147-2-img0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageId(String);

impl ImageId {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.is_empty()
            || value
                .chars()
                .any(|c| c.is_whitespace() || c == '/' || c == '\\')
        {
            return Err(Error::InvalidImageId(value));
        }
        Ok(ImageId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ImageId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        ImageId::new(value)
    }
}

impl From<ImageId> for String {
    fn from(id: ImageId) -> String {
        id.0
    }
}

impl FromStr for ImageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ImageId::new(s)
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for ImageId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Six mutually similar images. `members[0]` is the seed; `seed_similarities[i]`
/// is the cosine similarity of `members[i]` to the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub id: u64,
    pub members: Vec<ImageId>,
    pub seed_similarities: Vec<f64>,
}

impl Subset {
    pub fn seed(&self) -> &ImageId {
        &self.members[0]
    }

    pub fn rank_of(&self, id: &ImageId) -> Option<usize> {
        self.members.iter().position(|m| m == id)
    }

    /// Checks the miner output contract for a subset of `size` members.
    pub fn validate(&self, size: usize, near_duplicate_threshold: f64, min_gap: f64) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("subset {}: {msg}", self.id)));
        if self.members.len() != size {
            return fail(format!("expected {size} members, found {}", self.members.len()));
        }
        if self.seed_similarities.len() != size {
            return fail(format!(
                "expected {size} similarities, found {}",
                self.seed_similarities.len()
            ));
        }
        let distinct: HashSet<_> = self.members.iter().collect();
        if distinct.len() != size {
            return fail("members are not distinct".into());
        }
        if (self.seed_similarities[0] - 1.0).abs() > 1e-6 {
            return fail(format!("seed similarity {} != 1", self.seed_similarities[0]));
        }
        for (i, &k) in self.seed_similarities.iter().enumerate().skip(1) {
            if !(-1.0..=1.0).contains(&k) {
                return fail(format!("similarity {k} outside [-1, 1]"));
            }
            if k >= near_duplicate_threshold {
                return fail(format!("member {i} is a near duplicate (kappa {k})"));
            }
        }
        for w in self.seed_similarities.windows(2) {
            if w[0] - w[1] <= min_gap {
                return fail(format!("gap {} - {} not above {min_gap}", w[0], w[1]));
            }
        }
        Ok(())
    }
}

/// Sentinel prefixes marking a not-applicable auxiliary answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sentinel {
    /// `[c]`: nothing to report.
    C,
    /// `[cr0]`: nothing worth mentioning.
    Cr0,
    /// `[cr1]`: covered in the main caption.
    Cr1,
}

impl Sentinel {
    pub const ALL: [Sentinel; 3] = [Sentinel::Cr0, Sentinel::Cr1, Sentinel::C];

    pub fn prefix(self) -> &'static str {
        match self {
            Sentinel::C => "[c]",
            Sentinel::Cr0 => "[cr0]",
            Sentinel::Cr1 => "[cr1]",
        }
    }

    fn strip(s: &str) -> Option<(Sentinel, &str)> {
        Sentinel::ALL
            .iter()
            .find_map(|&st| s.strip_prefix(st.prefix()).map(|rest| (st, rest)))
    }
}

/// One auxiliary answer. The raw text is reconstructed verbatim by [`AuxAnswer::raw`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuxAnswer {
    Text(String),
    NotApplicable { sentinel: Sentinel, rest: String },
}

impl AuxAnswer {
    pub fn parse(raw: &str) -> Result<Self> {
        match Sentinel::strip(raw) {
            Some((sentinel, rest)) => {
                if Sentinel::strip(rest.trim_start()).is_some() {
                    return Err(Error::Validation(format!(
                        "auxiliary answer {raw:?} carries more than one sentinel"
                    )));
                }
                Ok(AuxAnswer::NotApplicable {
                    sentinel,
                    rest: rest.to_string(),
                })
            }
            None => Ok(AuxAnswer::Text(raw.to_string())),
        }
    }

    pub fn raw(&self) -> String {
        match self {
            AuxAnswer::Text(t) => t.clone(),
            AuxAnswer::NotApplicable { sentinel, rest } => format!("{}{rest}", sentinel.prefix()),
        }
    }

    pub fn is_applicable(&self) -> bool {
        matches!(self, AuxAnswer::Text(_))
    }

    pub fn sentinel(&self) -> Option<Sentinel> {
        match self {
            AuxAnswer::Text(_) => None,
            AuxAnswer::NotApplicable { sentinel, .. } => Some(*sentinel),
        }
    }
}

/// Answers to the four auxiliary questions (preserved traits, incidental
/// changes, viewpoint, background/lighting). Any of them may be absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuxAnnotation {
    pub q1: Option<AuxAnswer>,
    pub q2: Option<AuxAnswer>,
    pub q3: Option<AuxAnswer>,
    pub q4: Option<AuxAnswer>,
}

impl AuxAnnotation {
    pub fn answers(&self) -> [Option<&AuxAnswer>; 4] {
        [
            self.q1.as_ref(),
            self.q2.as_ref(),
            self.q3.as_ref(),
            self.q4.as_ref(),
        ]
    }

    pub fn slot_mut(&mut self, index: usize) -> Option<&mut Option<AuxAnswer>> {
        match index {
            0 => Some(&mut self.q1),
            1 => Some(&mut self.q2),
            2 => Some(&mut self.q3),
            3 => Some(&mut self.q4),
            _ => None,
        }
    }
}

/// Soft-target label: same image (1.0), no difference worth mentioning (0.5)
/// or too different (-1.0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SoftScore {
    Same,
    NoDifference,
    TooDifferent,
}

impl SoftScore {
    pub fn from_value(v: f64) -> Result<Self> {
        if v == 1.0 {
            Ok(SoftScore::Same)
        } else if v == 0.5 {
            Ok(SoftScore::NoDifference)
        } else if v == -1.0 {
            Ok(SoftScore::TooDifferent)
        } else {
            Err(Error::Validation(format!(
                "soft target score {v} not in {{1.0, 0.5, -1.0}}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            SoftScore::Same => 1.0,
            SoftScore::NoDifference => 0.5,
            SoftScore::TooDifferent => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Guesses the split from a file name such as `cap.rc2.val.json`.
    pub fn from_path_hint(path: &std::path::Path) -> Option<Split> {
        let name = path.file_name()?.to_str()?.to_lowercase();
        let tokens: Vec<&str> = name
            .split(|c: char| !c.is_ascii_alphanumeric())
            .collect();
        if tokens.iter().any(|t| *t == "train") {
            Some(Split::Train)
        } else if tokens.iter().any(|t| *t == "val" || *t == "dev") {
            Some(Split::Val)
        } else if tokens.iter().any(|t| t.starts_with("test")) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "dev" => Ok(Split::Val),
            "test" | "test1" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// One annotated query triple with its subset context.
///
/// `target_hard` and the two ranks are absent for hidden-label test files.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: u64,
    pub reference: ImageId,
    pub target_hard: Option<ImageId>,
    pub target_soft: BTreeMap<ImageId, SoftScore>,
    pub caption: String,
    pub aux: Option<AuxAnnotation>,
    pub subset_id: i64,
    pub members: Vec<ImageId>,
    pub reference_rank: Option<usize>,
    pub target_rank: Option<usize>,
}

impl PairRecord {
    pub fn is_labeled(&self) -> bool {
        self.target_hard.is_some()
    }

    /// Subset candidates for this query: the members minus the reference.
    pub fn subset_candidates(&self) -> impl Iterator<Item = &ImageId> {
        self.members.iter().filter(move |m| **m != self.reference)
    }

    /// Enforces the membership and rank invariants between the record and its subset.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("pair {}: {msg}", self.pair_id)));
        if self.caption.trim().is_empty() {
            return fail("empty caption".into());
        }
        let distinct: HashSet<_> = self.members.iter().collect();
        if distinct.len() != self.members.len() {
            return fail("subset members are not distinct".into());
        }
        if !self.members.contains(&self.reference) {
            return fail(format!("reference {} not in subset {}", self.reference, self.subset_id));
        }
        if let Some(target) = &self.target_hard {
            if *target == self.reference {
                return fail("reference equals target".into());
            }
            if !self.members.contains(target) {
                return fail(format!("target {target} not in subset {}", self.subset_id));
            }
            if !self.target_soft.is_empty()
                && self.target_soft.get(target) != Some(&SoftScore::Same)
            {
                return fail("target_soft does not score target_hard as 1.0".into());
            }
        }
        if let Some(r) = self.reference_rank {
            if self.members.get(r) != Some(&self.reference) {
                return fail(format!("members[{r}] is not the reference"));
            }
        }
        if let (Some(t), Some(target)) = (self.target_rank, &self.target_hard) {
            if self.members.get(t) != Some(target) {
                return fail(format!("members[{t}] is not the target"));
            }
        }
        if let (Some(r), Some(t)) = (self.reference_rank, self.target_rank) {
            if r == t {
                return fail("reference_rank equals target_rank".into());
            }
        }
        Ok(())
    }

    /// Additionally checks the record against an explicit mined subset.
    pub fn validate_against(&self, subset: &Subset) -> Result<()> {
        self.validate()?;
        if self.subset_id != subset.id as i64 || self.members != subset.members {
            return Err(Error::Validation(format!(
                "pair {}: subset {} does not match record subset {}",
                self.pair_id, subset.id, self.subset_id
            )));
        }
        Ok(())
    }
}

/// A query ready for composition.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub pair_id: u64,
    pub reference_index: usize,
    pub tokens: Vec<u32>,
}

/// Per-query ordered candidate list with the gold target's 1-based rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub pair_id: u64,
    pub candidates: Vec<ImageId>,
    pub gold_rank: Option<usize>,
}

impl RankingResult {
    pub fn new(pair_id: u64, candidates: Vec<ImageId>, gold: Option<&ImageId>) -> Self {
        let gold_rank = gold.and_then(|g| candidates.iter().position(|c| c == g).map(|p| p + 1));
        RankingResult {
            pair_id,
            candidates,
            gold_rank,
        }
    }
}
