use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ComposerConfig, ComposerKind, ProjectionMode};
use crate::error::{Error, Result};

/// Which initializer a tensor receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    Linear { fan_in: usize },
    /// Uniform in ±1/sqrt(d_model).
    Embedding,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors laid out back to back in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    fn builder() -> LayoutBuilder {
        LayoutBuilder { specs: Vec::new(), total: 0 }
    }

    /// Layout for a configuration; a pure function of the configuration.
    pub fn for_config(cfg: &ComposerConfig) -> Self {
        let d = cfg.d_model;
        let mut b = ParamLayout::builder();
        if cfg.projection == ProjectionMode::Learned {
            b.push("img.weight", &[d, cfg.feature_dim], Init::Linear { fan_in: cfg.feature_dim });
            b.push("img.bias", &[d], Init::Zeros);
        }
        match cfg.kind {
            ComposerKind::ImageOnly => {}
            ComposerKind::TextOnly => {
                b.push("tok.embed", &[cfg.vocab_size, d], Init::Embedding);
            }
            ComposerKind::ConcatMlp | ComposerKind::RandomImageText => {
                b.push("tok.embed", &[cfg.vocab_size, d], Init::Embedding);
                b.push("mlp.w1", &[2 * d, cfg.d_ff], Init::Linear { fan_in: 2 * d });
                b.push("mlp.b1", &[cfg.d_ff], Init::Zeros);
                b.push("mlp.w2", &[cfg.d_ff, d], Init::Linear { fan_in: cfg.d_ff });
                b.push("mlp.b2", &[d], Init::Zeros);
            }
            ComposerKind::GatedResidual => {
                b.push("tok.embed", &[cfg.vocab_size, d], Init::Embedding);
                b.push("gate.w", &[2 * d, d], Init::Linear { fan_in: 2 * d });
                b.push("gate.b", &[d], Init::Zeros);
                b.push("res.w1", &[2 * d, cfg.d_ff], Init::Linear { fan_in: 2 * d });
                b.push("res.b1", &[cfg.d_ff], Init::Zeros);
                b.push("res.w2", &[cfg.d_ff, d], Init::Linear { fan_in: cfg.d_ff });
                b.push("res.b2", &[d], Init::Zeros);
            }
            ComposerKind::Transformer => {
                b.push("tok.embed", &[cfg.vocab_size, d], Init::Embedding);
                b.push("pos.embed", &[cfg.max_tokens + 2, d], Init::Embedding);
                for l in 0..cfg.layers {
                    for proj in ["q", "k", "v", "o"] {
                        b.push(&format!("layer{l}.attn.{proj}.weight"), &[d, d], Init::Linear { fan_in: d });
                        b.push(&format!("layer{l}.attn.{proj}.bias"), &[d], Init::Zeros);
                    }
                    b.push(&format!("layer{l}.ln1.gain"), &[d], Init::Ones);
                    b.push(&format!("layer{l}.ln1.bias"), &[d], Init::Zeros);
                    b.push(&format!("layer{l}.ffn.w1"), &[d, cfg.d_ff], Init::Linear { fan_in: d });
                    b.push(&format!("layer{l}.ffn.b1"), &[cfg.d_ff], Init::Zeros);
                    b.push(&format!("layer{l}.ffn.w2"), &[cfg.d_ff, d], Init::Linear { fan_in: cfg.d_ff });
                    b.push(&format!("layer{l}.ffn.b2"), &[d], Init::Zeros);
                    b.push(&format!("layer{l}.ln2.gain"), &[d], Init::Ones);
                    b.push(&format!("layer{l}.ln2.bias"), &[d], Init::Zeros);
                }
            }
        }
        b.build()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.index.get(name).map(|&i| &self.specs[i])
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.spec(name)
            .unwrap_or_else(|| panic!("parameter {name} not in layout"))
            .range()
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, shape: &[usize], init: Init) {
        let spec = ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.total,
            init,
        };
        self.total += spec.len();
        self.specs.push(spec);
    }

    fn build(self) -> ParamLayout {
        let index = self
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        ParamLayout {
            specs: self.specs,
            index,
            total: self.total,
        }
    }
}

/// All trainable weights of a composer in one flat buffer. Named views are
/// slices of that buffer, so writes through either are visible in both.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposerParameters {
    layout: Arc<ParamLayout>,
    data: Vec<f64>,
}

impl ComposerParameters {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![0.0; layout.total()];
        ComposerParameters { layout, data }
    }

    pub fn from_flat(layout: Arc<ParamLayout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::Consistency(format!(
                "parameter vector has {} values, layout expects {}",
                data.len(),
                layout.total()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!("non-finite parameter at index {i}")));
        }
        Ok(ComposerParameters { layout, data })
    }

    pub fn init(cfg: &ComposerConfig) -> Self {
        let layout = Arc::new(ParamLayout::for_config(cfg));
        let mut params = ComposerParameters::zeros(layout.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        for spec in layout.specs() {
            let slot = &mut params.data[spec.range()];
            match spec.init {
                Init::Zeros => slot.fill(0.0),
                Init::Ones => slot.fill(1.0),
                Init::Linear { fan_in } => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    slot.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
                }
                Init::Embedding => {
                    let a = 1.0 / (cfg.d_model as f64).sqrt();
                    slot.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
                }
            }
        }
        params
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn view(&self, name: &str) -> &[f64] {
        &self.data[self.layout.range(name)]
    }

    pub fn view_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.range(name);
        &mut self.data[r]
    }

    /// Index and magnitude of the largest-magnitude parameter.
    pub fn max_abs(&self) -> (usize, f64) {
        self.data
            .iter()
            .enumerate()
            .map(|(i, x)| (i, x.abs()))
            .fold((0, 0.0), |best, cur| if cur.1 > best.1 || cur.1.is_nan() { cur } else { best })
    }
}
