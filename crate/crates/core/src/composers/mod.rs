//! Query composers: models mapping a reference-image feature and caption
//! tokens to one unit-norm feature in the same space as projected candidate
//! images.
//!
//! Every composer shares the image projection `normalize(W·f + b)`, which
//! also encodes candidate and target images. All arithmetic is 64-bit and
//! every forward pass can retain its intermediates for an exact backward pass.

pub mod checkpoint;
pub mod linalg;
mod mlp;
pub mod params;
mod projection;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use params::{ComposerParameters, ParamLayout, ParamSpec};
pub use projection::ProjectionCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposerKind {
    ImageOnly,
    TextOnly,
    RandomImageText,
    ConcatMlp,
    GatedResidual,
    Transformer,
}

impl ComposerKind {
    pub const ALL: [ComposerKind; 6] = [
        ComposerKind::ImageOnly,
        ComposerKind::TextOnly,
        ComposerKind::RandomImageText,
        ComposerKind::ConcatMlp,
        ComposerKind::GatedResidual,
        ComposerKind::Transformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComposerKind::ImageOnly => "image_only",
            ComposerKind::TextOnly => "text_only",
            ComposerKind::RandomImageText => "random_image_text",
            ComposerKind::ConcatMlp => "concat_mlp",
            ComposerKind::GatedResidual => "gated_residual",
            ComposerKind::Transformer => "transformer",
        }
    }

    /// Whether the composer reads caption tokens.
    pub fn uses_text(self) -> bool {
        !matches!(self, ComposerKind::ImageOnly)
    }
}

impl fmt::Display for ComposerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComposerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ComposerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown composer kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Trainable `W·f + b` followed by normalization.
    Learned,
    /// Frozen identity; requires `feature_dim == d_model`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposerConfig {
    pub kind: ComposerKind,
    pub feature_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Captions longer than this are truncated.
    pub max_tokens: usize,
    pub projection: ProjectionMode,
    pub init_seed: u64,
}

impl ComposerConfig {
    /// Desk-scale defaults: d_model 64, 2 layers, 4 heads, d_ff 128.
    pub fn desk(kind: ComposerKind, feature_dim: usize, vocab_size: usize) -> Self {
        ComposerConfig {
            kind,
            feature_dim,
            d_model: 64,
            d_ff: 128,
            layers: 2,
            heads: 4,
            vocab_size,
            max_tokens: 32,
            projection: ProjectionMode::Learned,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.feature_dim == 0 || self.d_model == 0 {
            return bad("feature_dim and d_model must be positive".into());
        }
        if self.projection == ProjectionMode::Identity && self.feature_dim != self.d_model {
            return bad(format!(
                "identity projection needs feature_dim ({}) == d_model ({})",
                self.feature_dim, self.d_model
            ));
        }
        if self.kind.uses_text() && self.vocab_size < 2 {
            return bad("vocabulary must hold at least the OOV and CLS tokens".into());
        }
        if matches!(
            self.kind,
            ComposerKind::ConcatMlp | ComposerKind::RandomImageText | ComposerKind::GatedResidual | ComposerKind::Transformer
        ) && self.d_ff == 0
        {
            return bad("d_ff must be positive".into());
        }
        if self.kind == ComposerKind::Transformer {
            if self.heads == 0 || self.d_model % self.heads != 0 {
                return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
            }
            if self.max_tokens == 0 {
                return bad("max_tokens must be positive".into());
            }
        }
        Ok(())
    }
}

/// One query: the reference feature (or a substitute, for `random_image_text`)
/// and its caption token ids.
#[derive(Debug, Clone, Copy)]
pub struct ComposeInput<'a> {
    pub reference: &'a [f64],
    pub tokens: &'a [u32],
}

#[derive(Debug, Clone)]
pub enum ComposeCache {
    Image(ProjectionCache),
    Text(mlp::TextCache),
    Concat(mlp::ConcatCache),
    Gated(mlp::GatedCache),
    Transformer(transformer::TransformerCache),
}

/// Output of a retained forward pass.
#[derive(Debug, Clone)]
pub struct Composed {
    pub output: Vec<f64>,
    pub cache: ComposeCache,
}

/// Forward results of a batch, kept for [`Composer::compose_gradient`].
#[derive(Debug, Clone)]
pub struct ForwardBatch {
    pub outputs: Vec<Vec<f64>>,
    caches: Vec<ComposeCache>,
}

impl ForwardBatch {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composer {
    pub config: ComposerConfig,
    pub params: ComposerParameters,
}

impl Composer {
    pub fn new(config: ComposerConfig) -> Result<Self> {
        config.validate()?;
        let params = ComposerParameters::init(&config);
        Ok(Composer { config, params })
    }

    pub fn with_params(config: ComposerConfig, params: ComposerParameters) -> Result<Self> {
        config.validate()?;
        let expected = ParamLayout::for_config(&config);
        if **params.layout() != expected {
            return Err(Error::Consistency("parameter layout does not match configuration".into()));
        }
        Ok(Composer { config, params })
    }

    pub fn kind(&self) -> ComposerKind {
        self.config.kind
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_feature(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.config.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.feature_dim,
                actual: f.len(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty token list".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Shared image projection, used for references and candidates alike.
    pub fn project_image(&self, feature: &[f64]) -> Result<Vec<f64>> {
        Ok(self.project_forward(feature)?.unit.clone())
    }

    pub fn project_forward(&self, feature: &[f64]) -> Result<ProjectionCache> {
        self.check_feature(feature)?;
        Ok(projection::forward(&self.config, &self.params, feature))
    }

    pub fn project_backward(&self, cache: &ProjectionCache, g_unit: &[f64], grad: &mut [f64]) {
        projection::backward(&self.config, &self.params, cache, g_unit, grad);
    }

    pub fn compose(&self, input: ComposeInput<'_>) -> Result<Vec<f64>> {
        Ok(self.compose_forward(input)?.output)
    }

    pub fn compose_forward(&self, input: ComposeInput<'_>) -> Result<Composed> {
        self.check_feature(input.reference)?;
        if self.config.kind.uses_text() {
            self.check_tokens(input.tokens)?;
        }
        let (cfg, p) = (&self.config, &self.params);
        Ok(match cfg.kind {
            ComposerKind::ImageOnly => {
                let c = projection::forward(cfg, p, input.reference);
                Composed {
                    output: c.unit.clone(),
                    cache: ComposeCache::Image(c),
                }
            }
            ComposerKind::TextOnly => {
                let (output, c) = mlp::text_forward(cfg, p, input.tokens);
                Composed {
                    output,
                    cache: ComposeCache::Text(c),
                }
            }
            ComposerKind::ConcatMlp | ComposerKind::RandomImageText => {
                let (output, c) = mlp::concat_forward(cfg, p, input.reference, input.tokens);
                Composed {
                    output,
                    cache: ComposeCache::Concat(c),
                }
            }
            ComposerKind::GatedResidual => {
                let (output, c) = mlp::gated_forward(cfg, p, input.reference, input.tokens);
                Composed {
                    output,
                    cache: ComposeCache::Gated(c),
                }
            }
            ComposerKind::Transformer => {
                let tokens = &input.tokens[..input.tokens.len().min(cfg.max_tokens)];
                let (output, c) = transformer::forward(cfg, p, input.reference, tokens);
                Composed {
                    output,
                    cache: ComposeCache::Transformer(c),
                }
            }
        })
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂φ` for one retained sample.
    pub fn compose_backward(&self, cache: &ComposeCache, g_out: &[f64], grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::Consistency(format!(
                "gradient buffer has {} slots, model has {} parameters",
                grad.len(),
                self.params.len()
            )));
        }
        let (cfg, p) = (&self.config, &self.params);
        match (cfg.kind, cache) {
            (ComposerKind::ImageOnly, ComposeCache::Image(c)) => projection::backward(cfg, p, c, g_out, grad),
            (ComposerKind::TextOnly, ComposeCache::Text(c)) => mlp::text_backward(cfg, p, c, g_out, grad),
            (ComposerKind::ConcatMlp | ComposerKind::RandomImageText, ComposeCache::Concat(c)) => {
                mlp::concat_backward(cfg, p, c, g_out, grad)
            }
            (ComposerKind::GatedResidual, ComposeCache::Gated(c)) => mlp::gated_backward(cfg, p, c, g_out, grad),
            (ComposerKind::Transformer, ComposeCache::Transformer(c)) => {
                transformer::backward(cfg, p, c, g_out, grad)
            }
            _ => return Err(Error::Consistency("cache does not belong to this composer kind".into())),
        }
        Ok(())
    }

    /// Forward pass over a batch, in parallel, retaining intermediates.
    pub fn forward_batch(&self, inputs: &[ComposeInput<'_>]) -> Result<ForwardBatch> {
        let composed: Vec<Composed> = inputs
            .par_iter()
            .map(|i| self.compose_forward(*i))
            .collect::<Result<_>>()?;
        let (outputs, caches) = composed.into_iter().map(|c| (c.output, c.cache)).unzip();
        Ok(ForwardBatch { outputs, caches })
    }

    /// Exact gradient of `Σ_i ⟨loss_grads[i], φ_i⟩` with respect to every
    /// parameter. Per-sample gradients are summed in sample order.
    pub fn compose_gradient(&self, batch: &ForwardBatch, loss_grads: &[Vec<f64>]) -> Result<Vec<f64>> {
        if loss_grads.len() != batch.caches.len() {
            return Err(Error::Consistency(format!(
                "{} loss gradients for a batch of {}",
                loss_grads.len(),
                batch.caches.len()
            )));
        }
        let per_sample: Vec<Vec<f64>> = batch
            .caches
            .par_iter()
            .zip(loss_grads.par_iter())
            .map(|(cache, g)| {
                let mut grad = vec![0.0; self.params.len()];
                self.compose_backward(cache, g, &mut grad)?;
                Ok(grad)
            })
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; self.params.len()];
        for g in &per_sample {
            linalg::add_assign(&mut total, g);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests;
