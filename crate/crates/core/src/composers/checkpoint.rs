//! `CPR1` checkpoint: magic, u32 version, u32 header length, JSON header
//! (configuration and vocabulary), u64 parameter count, then the flat
//! parameter vector as little-endian f64.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Composer, ComposerConfig, ComposerParameters, ParamLayout};
use crate::error::{Error, Result};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"CPR1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ComposerConfig,
    vocabulary: Vocabulary,
}

/// A trained composer together with the vocabulary that tokenizes its input.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub composer: Composer,
    pub vocabulary: Vocabulary,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.composer.config.clone(),
            vocabulary: self.vocabulary.clone(),
        })?;
        let params = self.composer.params.flat();
        let mut out = Vec::with_capacity(20 + header.len() + params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for x in params {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Format("truncated checkpoint".into());
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("missing CPR1 magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12 + header_len;
        let header: Header = serde_json::from_slice(bytes.get(12..header_end).ok_or_else(truncated)?)?;
        let count_bytes = bytes.get(header_end..header_end + 8).ok_or_else(truncated)?;
        let count = u64::from_le_bytes(count_bytes.try_into().unwrap()) as usize;
        let payload = &bytes[header_end + 8..];
        if payload.len() != count * 8 {
            return Err(Error::Format(format!(
                "checkpoint declares {count} parameters but carries {} bytes",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        header.config.validate()?;
        if header.config.kind.uses_text() && header.vocabulary.len() != header.config.vocab_size {
            return Err(Error::Consistency(format!(
                "vocabulary holds {} tokens, configuration expects {}",
                header.vocabulary.len(),
                header.config.vocab_size
            )));
        }
        let layout = Arc::new(ParamLayout::for_config(&header.config));
        let params = ComposerParameters::from_flat(layout, data)?;
        Ok(Checkpoint {
            composer: Composer::with_params(header.config, params)?,
            vocabulary: header.vocabulary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}
