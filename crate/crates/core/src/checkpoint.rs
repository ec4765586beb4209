//! Versioned checkpoint files: a magic line followed by a JSON body.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Standardization;
use crate::error::{FsviError, Result};
use crate::network::MlpSpec;
use crate::objective::{Likelihood, VariationalPosterior};
use crate::predictive::write_atomic;

pub const MAGIC: &str = "FSVI1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub posterior: VariationalPosterior,
    pub likelihood: Likelihood,
    pub feature_stats: Option<Standardization>,
    pub target_stats: Option<Standardization>,
    /// Columns of the training CSV used as targets, if any.
    pub target_columns: Vec<usize>,
    pub config_hash: String,
}

/// Hex SHA-256 of the JSON encoding of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

impl Checkpoint {
    pub fn to_string(&self) -> Result<String> {
        Ok(format!("{MAGIC}\n{}\n", serde_json::to_string(self)?))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (magic, body) = text.split_once('\n').unwrap_or((text, ""));
        if magic.trim_end() != MAGIC {
            return Err(FsviError::Checkpoint(format!(
                "unsupported header {:?}, expected {MAGIC:?}",
                magic.chars().take(16).collect::<String>()
            )));
        }
        let ck: Checkpoint =
            serde_json::from_str(body).map_err(|e| FsviError::Checkpoint(format!("corrupt body: {e}")))?;
        if ck.posterior.len() != ck.spec.num_params() {
            return Err(FsviError::Checkpoint(format!(
                "posterior has {} parameters, the architecture needs {}",
                ck.posterior.len(),
                ck.spec.num_params()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_string()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let text =
            String::from_utf8(bytes).map_err(|_| FsviError::Checkpoint("file is not UTF-8 text".into()))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;

    fn sample() -> Checkpoint {
        let spec = MlpSpec::with_activation(vec![2, 3, 1], Activation::Relu).unwrap();
        let p = spec.num_params();
        Checkpoint {
            posterior: VariationalPosterior::new((0..p).map(|k| k as f64 * 0.1).collect(), vec![-3.0; p])
                .unwrap(),
            spec,
            likelihood: Likelihood::GaussianRegression { noise_variance: 0.1 },
            feature_stats: Some(Standardization::identity(2)),
            target_stats: None,
            target_columns: vec![2],
            config_hash: config_hash(&"cfg").unwrap(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("FSVI1\n"));
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_wrong_magic_and_corruption() {
        let text = sample().to_string().unwrap();
        assert!(matches!(
            Checkpoint::parse(&text.replacen("FSVI1", "FSVI2", 1)),
            Err(FsviError::Checkpoint(_))
        ));
        assert!(matches!(Checkpoint::parse(&text[..text.len() / 2]), Err(FsviError::Checkpoint(_))));
        assert!(Checkpoint::parse("").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        assert_eq!(config_hash(&1u32).unwrap(), config_hash(&1u32).unwrap());
        assert_ne!(config_hash(&1u32).unwrap(), config_hash(&2u32).unwrap());
        assert_eq!(config_hash(&1u32).unwrap().len(), 64);
    }
}
