//! JSON run configuration. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{DEFAULT_SIZE, DEFAULT_TRAIN, DEFAULT_VAL};
use crate::error::{Error, Result};
use crate::model::{AdrSettings, ModelConfig, DEFAULT_LR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdrConfig {
    /// Attach reallocation to every decoder attention block.
    pub enabled: bool,
    #[serde(rename = "D_m")]
    pub d_m: usize,
    #[serde(rename = "D_e")]
    pub d_e: usize,
    #[serde(rename = "D_k")]
    pub d_k: usize,
}

impl Default for AdrConfig {
    fn default() -> Self {
        let s = AdrSettings::default();
        Self {
            enabled: false,
            d_m: s.d_m,
            d_e: s.d_e,
            d_k: s.d_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynconvConfig {
    pub enabled: bool,
    #[serde(rename = "K")]
    pub k: usize,
}

impl Default for DynconvConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            k: crate::dynbaseline::DEFAULT_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: DEFAULT_TRAIN,
            val: DEFAULT_VAL,
            size: DEFAULT_SIZE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Empty means every decoder group.
    pub selectors: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(rename = "I_max")]
    pub i_max: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            selectors: Vec::new(),
            seeds: vec![0, 1, 2],
            i_max: crate::redundancy::DEFAULT_I_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: usize,
    pub lr: f64,
    /// Seeds initialisation and the shuffling schedule.
    pub seed: u64,
    pub widths: [usize; 2],
    pub adr: AdrConfig,
    pub dynconv: DynconvConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: DEFAULT_LR,
            seed: 0,
            widths: [8, 16],
            adr: AdrConfig::default(),
            dynconv: DynconvConfig::default(),
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.widths.contains(&0) {
            return fail(format!("widths must be positive, got {:?}", self.widths));
        }
        if self.adr.enabled {
            let d_c = 3 * self.widths[0];
            if self.adr.d_m == 0 || self.adr.d_m >= d_c {
                return fail(format!("adr.D_m = {} must lie in 1..{d_c}", self.adr.d_m));
            }
            if self.adr.d_e == 0 {
                return fail("adr.D_e must be positive".into());
            }
            if self.adr.d_k.is_multiple_of(2) {
                return fail(format!("adr.D_k = {} must be odd", self.adr.d_k));
            }
        }
        if self.dynconv.enabled && self.dynconv.k == 0 {
            return fail("dynconv.K must be at least 1".into());
        }
        if self.data.size < 8 || !self.data.size.is_multiple_of(4) {
            return fail(format!(
                "data.size = {} must be a multiple of 4 and at least 8",
                self.data.size
            ));
        }
        if self.data.train == 0 {
            return fail("data.train must be at least 1".into());
        }
        if !(self.probe.i_max > 0.0) {
            return fail("probe.I_max must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            adr_enabled: [self.adr.enabled; 2],
            adr: AdrSettings {
                d_m: self.adr.d_m,
                d_e: self.adr.d_e,
                d_k: self.adr.d_k,
            },
            dynconv_enabled: self.dynconv.enabled,
            dynconv_candidates: self.dynconv.k,
            init_seed: self.seed,
        }
    }
}
