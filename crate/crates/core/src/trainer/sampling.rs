use rand::Rng;

use crate::error::{Error, Result};

/// Uniform draw from `0..corpus_len` excluding every index in `exclude`.
pub fn sample_excluding<R: Rng + ?Sized>(rng: &mut R, corpus_len: usize, exclude: &[usize]) -> Result<usize> {
    let mut excluded: Vec<usize> = exclude.iter().copied().filter(|&i| i < corpus_len).collect();
    excluded.sort_unstable();
    excluded.dedup();
    let eligible = corpus_len - excluded.len();
    if eligible == 0 {
        return Err(Error::Data(format!(
            "no eligible negative in a corpus of {corpus_len} images"
        )));
    }
    let mut pick = rng.random_range(0..eligible);
    for &e in &excluded {
        if pick >= e {
            pick += 1;
        } else {
            break;
        }
    }
    Ok(pick)
}

/// One or more uniform negatives per positive, drawn in example order.
/// Each draw excludes the example's own reference and target.
pub fn sample_negatives<R: Rng + ?Sized>(
    rng: &mut R,
    corpus_len: usize,
    pairs: &[(usize, usize)],
    per_positive: usize,
) -> Result<Vec<Vec<usize>>> {
    if corpus_len < 3 {
        return Err(Error::Data(format!(
            "negative sampling needs at least 3 images, corpus has {corpus_len}"
        )));
    }
    pairs
        .iter()
        .map(|&(reference, target)| {
            (0..per_positive)
                .map(|_| sample_excluding(rng, corpus_len, &[reference, target]))
                .collect()
        })
        .collect()
}

/// Negatives taken from the other positives of the same batch. Falls back
/// to the corpus when no batch-mate is eligible.
pub fn sample_in_batch<R: Rng + ?Sized>(
    rng: &mut R,
    corpus_len: usize,
    pairs: &[(usize, usize)],
    per_positive: usize,
) -> Result<Vec<Vec<usize>>> {
    if corpus_len < 3 {
        return Err(Error::Data(format!(
            "negative sampling needs at least 3 images, corpus has {corpus_len}"
        )));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(reference, target) in pairs {
        let mut pool: Vec<usize> = pairs
            .iter()
            .map(|p| p.1)
            .filter(|&t| t != reference && t != target)
            .collect();
        pool.sort_unstable();
        pool.dedup();
        let draws = (0..per_positive)
            .map(|_| {
                if pool.is_empty() {
                    sample_excluding(rng, corpus_len, &[reference, target])
                } else {
                    Ok(pool[rng.random_range(0..pool.len())])
                }
            })
            .collect::<Result<_>>()?;
        out.push(draws);
    }
    Ok(out)
}
