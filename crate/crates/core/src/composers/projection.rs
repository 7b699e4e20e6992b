use super::linalg::{dot, normalize, normalize_backward};
use super::{ComposerConfig, ComposerParameters, ProjectionMode};

/// Retained state of `normalize(W·f + b)`.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    pub feature: Vec<f64>,
    pub unit: Vec<f64>,
    pub norm: f64,
}

pub(super) fn forward(cfg: &ComposerConfig, p: &ComposerParameters, feature: &[f64]) -> ProjectionCache {
    let pre = match cfg.projection {
        ProjectionMode::Identity => feature.to_vec(),
        ProjectionMode::Learned => {
            let w = p.view("img.weight");
            let b = p.view("img.bias");
            let fd = cfg.feature_dim;
            (0..cfg.d_model)
                .map(|i| b[i] + dot(&w[i * fd..(i + 1) * fd], feature))
                .collect()
        }
    };
    let (unit, norm) = normalize(&pre);
    ProjectionCache {
        feature: feature.to_vec(),
        unit,
        norm,
    }
}

pub(super) fn backward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    cache: &ProjectionCache,
    g_unit: &[f64],
    grad: &mut [f64],
) {
    if cfg.projection == ProjectionMode::Identity {
        return;
    }
    let g_pre = normalize_backward(&cache.unit, cache.norm, g_unit);
    let layout = p.layout();
    let fd = cfg.feature_dim;
    let w_range = layout.range("img.weight");
    let gw = &mut grad[w_range];
    for (i, g) in g_pre.iter().enumerate() {
        for (gw_ij, f) in gw[i * fd..(i + 1) * fd].iter_mut().zip(&cache.feature) {
            *gw_ij += g * f;
        }
    }
    let b_range = layout.range("img.bias");
    for (gb, g) in grad[b_range].iter_mut().zip(&g_pre) {
        *gb += g;
    }
}
