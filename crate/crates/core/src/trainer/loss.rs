//! Soft triplet loss `L = log(1 + exp(d(φ, φ⁺) − d(φ, φ⁻)))` with plain
//! Euclidean distance.

use crate::composers::linalg::sigmoid;
use crate::error::{Error, Result};
use crate::features::euclidean;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: f64,
    pub g_anchor: Vec<f64>,
    pub g_pos: Vec<f64>,
    pub g_neg: Vec<f64>,
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn soft_triplet_loss(anchor: &[f64], pos: &[f64], neg: &[f64]) -> Result<TripletLoss> {
    for v in [pos, neg] {
        if v.len() != anchor.len() {
            return Err(Error::DimensionMismatch {
                expected: anchor.len(),
                actual: v.len(),
            });
        }
    }
    let d_pos = euclidean(anchor, pos);
    let d_neg = euclidean(anchor, neg);
    let x = d_pos - d_neg;
    let slope = sigmoid(x);
    // ∂d(a, b)/∂a = (a − b)/d; zero at coincident points.
    let unit = |a: &[f64], b: &[f64], d: f64| -> Vec<f64> {
        if d == 0.0 {
            vec![0.0; a.len()]
        } else {
            a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
        }
    };
    let u_pos = unit(anchor, pos, d_pos);
    let u_neg = unit(anchor, neg, d_neg);
    Ok(TripletLoss {
        loss: softplus(x),
        d_pos,
        d_neg,
        g_anchor: u_pos.iter().zip(&u_neg).map(|(p, n)| slope * (p - n)).collect(),
        g_pos: u_pos.iter().map(|p| -slope * p).collect(),
        g_neg: u_neg.iter().map(|n| slope * n).collect(),
    })
}
