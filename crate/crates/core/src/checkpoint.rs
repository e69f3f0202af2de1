//! Self-contained JSON snapshots of a trained network.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::graph::{write_model_spec, Architecture};
use crate::nn::{BnStats, Masks, Model, Params};
use crate::pruner::WidthMultipliers;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub model_spec: String,
    /// SHA-256 of `model_spec`, hex.
    pub spec_sha256: String,
    pub params: Params<f32>,
    pub stats: Vec<BnStats<f32>>,
    pub masks: Masks,
    pub widths: Option<WidthMultipliers>,
    /// Input normalisation the network was trained with.
    pub normalizer: Normalizer,
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn new(
        model: &Model<f32>,
        masks: &Masks,
        widths: Option<&WidthMultipliers>,
        normalizer: &Normalizer,
    ) -> Self {
        let model_spec = write_model_spec(&model.arch().graph);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec_sha256: sha256_hex(&model_spec),
            model_spec,
            params: model.params.clone(),
            stats: model.stats.clone(),
            masks: masks.clone(),
            widths: widths.cloned(),
            normalizer: normalizer.clone(),
        }
    }

    /// Rebuilds the network and its masks, checking integrity first.
    pub fn restore(&self) -> Result<(Model<f32>, Masks)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (this build reads {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if sha256_hex(&self.model_spec) != self.spec_sha256 {
            return Err(Error::Checkpoint(
                "model spec does not match its checksum".into(),
            ));
        }
        let arch = Architecture::from_spec(&self.model_spec)?;
        let masks = Masks::new(&arch, self.masks.groups().to_vec())?;
        let model = Model::from_parts(arch, self.params.clone(), self.stats.clone())?;
        Ok((model, masks))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
