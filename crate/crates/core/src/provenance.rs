//! Content hashes and header lines that tie outputs to their inputs.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::model::{Covariance, VarianceModel};
use crate::rng::RNG_ALGORITHM;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 over the dimensions, covariances and scalings of a model.
pub fn model_digest(model: &VarianceModel) -> String {
    let mut h = Sha256::new();
    for v in [model.n(), model.samples(), model.levels()] {
        h.update((v as u64).to_le_bytes());
    }
    for s in model.sigmas() {
        match s {
            Covariance::Diagonal(d) => {
                h.update(b"diag");
                d.iter().for_each(|v| h.update(v.to_le_bytes()));
            }
            Covariance::Dense(m) => {
                h.update(b"dense");
                m.iter().for_each(|v| h.update(v.to_le_bytes()));
            }
        }
    }
    for l in model.scalings() {
        l.iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    hex::encode(h.finalize())
}

/// Provenance block written at the top of every output.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub rng: String,
}

impl Provenance {
    pub fn new(config_hash: String, seed: Option<u64>) -> Self {
        Provenance {
            version: VERSION.to_string(),
            config_hash,
            seed,
            rng: RNG_ALGORITHM.to_string(),
        }
    }

    /// `# key: value` comment lines for CSV and text outputs.
    pub fn header_lines(&self) -> String {
        let seed = self
            .seed
            .map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# vcclt {}\n# config_hash: {}\n# seed: {}\n# rng: {}\n",
            self.version, self.config_hash, seed, self.rng
        )
    }
}
