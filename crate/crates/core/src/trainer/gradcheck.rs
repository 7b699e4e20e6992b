//! Central-difference verification of the analytic gradient of the mean
//! soft triplet loss.
//!
//! Rectified units make the loss piecewise smooth. When a probe at `±step`
//! straddles a kink the difference quotient is meaningless, so a coordinate
//! that misses the tolerance is re-probed with steps shrinking tenfold down
//! to [`MIN_STEP`] and keeps its smallest error. A wrong gradient disagrees
//! at every step; the number of coordinates that needed a smaller step is
//! reported per group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{triplet_loss, triplet_objective, TripletSample};
use crate::composers::Composer;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;
/// Smallest step tried when refining a coordinate.
pub const MIN_STEP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    /// Coordinates that only met the tolerance at a step below the initial one.
    pub refined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    /// True when every group is within tolerance; vacuously true for a model
    /// without parameters.
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Owned inputs for a gradient check.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub references: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<u32>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl Fixture {
    /// `n` random triplets with `token_count` tokens each.
    pub fn random(composer: &Composer, n: usize, token_count: usize, seed: u64) -> Self {
        let cfg = &composer.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature = |rng: &mut ChaCha8Rng| (0..cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut f = Fixture {
            references: Vec::new(),
            tokens: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
        };
        for _ in 0..n {
            f.references.push(feature(&mut rng));
            f.positives.push(feature(&mut rng));
            f.negatives.push(feature(&mut rng));
            let hi = cfg.vocab_size.max(3) as u32;
            f.tokens.push((0..token_count.max(1)).map(|_| rng.random_range(2..hi)).collect());
        }
        f
    }
}

/// Denominator floor of [`relative_error`]. At the default step, a single
/// rounding unit of a loss near 1 moves the difference quotient by about
/// 5e-13, so gradients below this floor cannot be resolved.
pub const ERROR_FLOOR: f64 = 1e-7;

/// Relative error `|a − n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

pub fn grad_check(composer: &Composer, fixture: &Fixture, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let negs: Vec<[&[f64]; 1]> = fixture.negatives.iter().map(|n| [n.as_slice()]).collect();
    let samples: Vec<TripletSample<'_>> = (0..fixture.references.len())
        .map(|i| TripletSample {
            reference: &fixture.references[i],
            tokens: &fixture.tokens[i],
            positive: &fixture.positives[i],
            negatives: &negs[i],
        })
        .collect();
    let (_, analytic) = triplet_objective(composer, &samples)?;
    let mut probe = composer.clone();
    let mut groups = Vec::new();
    for spec in composer.params.layout().specs() {
        let mut worst = (0.0, spec.offset);
        let mut refined = 0;
        for i in spec.range() {
            let mut h = step;
            let mut err = f64::INFINITY;
            loop {
                let numeric = central_difference(&mut probe, &samples, i, h)?;
                err = err.min(relative_error(analytic[i], numeric));
                if err < tolerance || h / 10.0 < MIN_STEP {
                    break;
                }
                h /= 10.0;
            }
            if h < step && err < tolerance {
                refined += 1;
            }
            if err > worst.0 {
                worst = (err, i);
            }
        }
        groups.push(GroupError {
            name: spec.name.clone(),
            params: spec.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            refined,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        step,
        groups,
    })
}

fn central_difference(probe: &mut Composer, samples: &[TripletSample<'_>], i: usize, h: f64) -> Result<f64> {
    let orig = probe.params.flat()[i];
    probe.params.flat_mut()[i] = orig + h;
    let up = triplet_loss(probe, samples)?;
    probe.params.flat_mut()[i] = orig - h;
    let down = triplet_loss(probe, samples)?;
    probe.params.flat_mut()[i] = orig;
    Ok((up - down) / (2.0 * h))
}
