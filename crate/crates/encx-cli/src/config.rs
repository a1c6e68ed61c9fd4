//! One JSON config file, flag-overridable, hashed into every output.

use encx_core::encoders::{RidgeConfig, TrainConfig};
use encx_core::synthgen::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub prepare: PrepareSection,
    #[serde(default = "TrainConfig::default")]
    pub train: TrainConfig,
    #[serde(default = "RidgeConfig::default")]
    pub ridge: RidgeConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub vp: VpSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: 0,
            synth: SynthSection::default(),
            prepare: PrepareSection::default(),
            train: TrainConfig::default(),
            ridge: RidgeConfig::default(),
            eval: EvalSection::default(),
            vp: VpSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// Named configuration; `config` overrides it entirely when present.
    pub preset: Option<String>,
    pub config: Option<SynthConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareSection {
    /// Maximum PCA components to fit (clamped to min(T, V)).
    pub n_pca_max: usize,
    pub batch_rows: usize,
    pub lanczos_lobes: usize,
    pub delays_tr: Vec<usize>,
}

impl Default for PrepareSection {
    fn default() -> Self {
        PrepareSection {
            n_pca_max: 8192,
            batch_rows: encx_core::reduction::DEFAULT_BATCH_ROWS,
            lanczos_lobes: 3,
            delays_tr: encx_core::alignment::DEFAULT_DELAYS_TR.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_perm: usize,
    pub block_len: usize,
    pub q_thresh: f64,
    pub ccmax_floor: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_perm: 1000,
            block_len: 10,
            q_thresh: 0.01,
            ccmax_floor: encx_core::metrics::CCMAX_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VpSection {
    /// "r2" or "cc_norm".
    pub basis: String,
}

impl Default for VpSection {
    fn default() -> Self {
        VpSection {
            basis: "r2".into(),
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
                let cfg: CliConfig = serde_json::from_str(&text)
                    .map_err(|e| anyhow::anyhow!("config {}: {e}", p.display()))?;
                Ok(cfg)
            }
        }
    }

    /// Canonical serialization of the effective config; the hash everything
    /// downstream carries is the sha256 of exactly these bytes.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
