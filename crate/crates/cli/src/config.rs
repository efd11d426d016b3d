//! Experiment config file schema. Every table rejects unknown keys; command
//! line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use smcsim::covert::CovertConfig;
use smcsim::detect::{CorpusConfig, DetectorKind};
use smcsim::experiments::{FingerprintConfig, RsaConfig, SrpConfig};
use smcsim::ispectre::LeakConfig;
use smcsim::uarch::ProbeKind;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in profile name or path to a profile file.
    pub profile: Option<String>,
    pub seed: Option<u64>,
    /// Overrides the profile's timer noise.
    pub noise_sigma: Option<f64>,
    /// Output directory.
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub histogram: HistogramSection,
    #[serde(default)]
    pub covert: CovertSection,
    #[serde(default)]
    pub rsa: RsaSection,
    #[serde(default)]
    pub srp: SrpConfig,
    #[serde(default)]
    pub ispectre: IspectreSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub fingerprint: FingerprintConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSection {
    /// Empty means every kind the profile supports.
    pub kinds: Vec<ProbeKind>,
    pub samples: usize,
}

impl Default for HistogramSection {
    fn default() -> Self {
        HistogramSection {
            kinds: Vec::new(),
            samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovertSection {
    /// Random bits per trial.
    pub bits: usize,
    pub trials: usize,
    pub config: CovertConfig,
}

impl Default for CovertSection {
    fn default() -> Self {
        CovertSection {
            bits: 1000,
            trials: 1,
            config: CovertConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RsaSection {
    pub keys: usize,
    pub config: RsaConfig,
}

impl Default for RsaSection {
    fn default() -> Self {
        RsaSection {
            keys: 10,
            config: RsaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IspectreSection {
    /// Random secret bytes to leak.
    pub secret_len: usize,
    /// Public bytes in front of the secret.
    pub array_len: usize,
    pub config: LeakConfig,
}

impl Default for IspectreSection {
    fn default() -> Self {
        IspectreSection {
            secret_len: 64,
            array_len: 16,
            config: LeakConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    /// Generate a corpus from the profile and seed instead of using the
    /// shipped one.
    pub regenerate: bool,
    pub detectors: Vec<DetectorKind>,
    pub corpus: CorpusConfig,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            regenerate: false,
            detectors: vec![DetectorKind::Threshold, DetectorKind::Stump, DetectorKind::Knn],
            corpus: CorpusConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
