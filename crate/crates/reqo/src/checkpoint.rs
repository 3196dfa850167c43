//! Versioned model checkpoints as JSON.

use std::fs;
use std::path::Path;

use reqo_core::encoder::Catalog;
use reqo_core::scaler::LabelScaler;
use reqo_core::ReqoModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::{Trained, TrainingConfig};

pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 (hex) of the catalog's canonical JSON.
pub fn catalog_fingerprint(catalog: &Catalog) -> String {
    let bytes = serde_json::to_vec(catalog).expect("catalog serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub catalog_fingerprint: String,
    pub model: ReqoModel,
    pub scaler: LabelScaler,
    pub training: TrainingConfig,
}

impl Checkpoint {
    pub fn new(model: ReqoModel, scaler: LabelScaler, training: TrainingConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            catalog_fingerprint: catalog_fingerprint(&model.catalog),
            model,
            scaler,
            training,
        }
    }

    pub fn from_trained(t: Trained) -> Self {
        Self::new(t.model, t.scaler, t.config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parses and checks a checkpoint. When `catalog` is given it must match
    /// the catalog the model was trained with.
    pub fn from_json(text: &str, catalog: Option<&Catalog>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| Error::json(e, text))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::json(e, text))?;
        let embedded = catalog_fingerprint(&ck.model.catalog);
        if embedded != ck.catalog_fingerprint {
            return Err(Error::Fingerprint {
                expected: ck.catalog_fingerprint,
                found: embedded,
            });
        }
        if let Some(c) = catalog {
            let found = catalog_fingerprint(c);
            if found != ck.catalog_fingerprint {
                return Err(Error::Fingerprint {
                    expected: ck.catalog_fingerprint,
                    found,
                });
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, catalog: Option<&Catalog>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, catalog)
    }
}
