//! Run configuration, provenance manifests, curriculum stage runners and
//! the end-to-end demo.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the TOML
//! config file, `ECGLM_CONFIG__<section>__<key>` environment variables
//! (plus `ECGLM_SEED` and `ECGLM_WORKERS`), then command-line flags.

mod demo;
mod manifest;
mod stages;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::ClientConfig;
use crate::forecast::{CorpusSpec, ForecastSpec, ForecastTask};
use crate::mask::MaskScheme;
use crate::neural::{AeConfig, AeTrainConfig, LmTrainConfig, TinyLmConfig};
use crate::preprocess::PreprocessConfig;
use crate::{Error, Result};

pub use demo::{run_demo, DemoSummary};
pub use manifest::{hash_file, FileEntry, Manifest};
pub use stages::{load_records, record_label, run_stage, StageOutput};

pub const ENV_PREFIX: &str = "ECGLM_CONFIG__";
pub const ENV_SEED: &str = "ECGLM_SEED";
pub const ENV_WORKERS: &str = "ECGLM_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_records: usize,
    pub duration_s: f64,
    pub fs: u32,
    pub leads: Vec<String>,
    /// Share of records given an AFIB or AFL stretch.
    pub arrhythmia_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_records: 4,
            duration_s: 20.0,
            fs: 500,
            leads: vec!["I".into(), "II".into(), "V1".into()],
            arrhythmia_share: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub windows_s: Vec<u32>,
    pub horizons_s: Vec<u32>,
    pub stride_s: Option<u32>,
    pub balance_ratio: f64,
    pub task: ForecastTask,
    /// Share of records held out for evaluation.
    pub test_fraction: f64,
    pub corpus: CorpusSpec,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            windows_s: vec![10, 30, 60],
            horizons_s: vec![60, 180],
            stride_s: None,
            balance_ratio: 3.0,
            task: ForecastTask::Binary,
            test_fraction: 0.3,
            corpus: CorpusSpec {
                n_records: 16,
                duration_s: 900.0,
                precursor_s: 400.0,
                ..CorpusSpec::default()
            },
        }
    }
}

impl ForecastConfig {
    pub fn specs(&self) -> Vec<ForecastSpec> {
        self.windows_s
            .iter()
            .flat_map(|&w| {
                self.horizons_s.iter().map(move |&h| ForecastSpec {
                    window_s: w,
                    horizon_s: h,
                    stride_s: self.stride_s,
                    balance_ratio: self.balance_ratio,
                })
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.windows_s.is_empty() || self.horizons_s.is_empty() {
            return Err(Error::invalid("forecast.windows_s", "windows and horizons must be non-empty"));
        }
        for s in self.specs() {
            s.validate()?;
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("forecast.test_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub client: ClientConfig,
    pub stage2_options: usize,
    /// Stage 5 window and horizon.
    pub window_s: u32,
    pub horizon_s: u32,
    /// Cap on Stage 5 samples per record.
    pub max_per_record: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            client: ClientConfig::default(),
            stage2_options: 4,
            window_s: 60,
            horizon_s: 300,
            max_per_record: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub mask_scheme: MaskScheme,
    pub ae: AeConfig,
    pub ae_train: AeTrainConfig,
    /// Extra random segments mixed into autoencoder training.
    pub ae_extra_segments: usize,
    pub lm: TinyLmConfig,
    pub lm_train: LmTrainConfig,
    pub forecast: ForecastConfig,
    pub datagen: DatagenConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: None,
            out_dir: None,
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            mask_scheme: MaskScheme::LeadAware,
            ae: AeConfig::default(),
            ae_train: AeTrainConfig {
                epochs: 20,
                ..AeTrainConfig::default()
            },
            ae_extra_segments: 200,
            lm: TinyLmConfig::default(),
            lm_train: LmTrainConfig::default(),
            forecast: ForecastConfig::default(),
            datagen: DatagenConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        if self.synth.n_records == 0 || !(self.synth.duration_s >= 2.0) || self.synth.leads.is_empty() {
            return Err(Error::invalid("synth", "need at least one record of 2 s or more with one lead"));
        }
        self.preprocess.validate()?;
        self.ae.validate()?;
        if self.ae.n != self.preprocess.target_fs as usize {
            return Err(Error::invalid(
                "ae.n",
                format!("must equal preprocess.target_fs ({}) so one segment is one second", self.preprocess.target_fs),
            ));
        }
        self.lm.validate()?;
        self.forecast.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    /// Defaults, then `path`, then overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::invalid("config", format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in env {
            let keys: Vec<String> = if k == ENV_SEED {
                vec!["seed".into()]
            } else if k == ENV_WORKERS {
                vec!["workers".into()]
            } else if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                rest.split("__").map(str::to_ascii_lowercase).collect()
            } else {
                continue;
            };
            set_path(&mut table, &keys, parse_value(&v)).map_err(|e| Error::invalid("environment", format!("{k}: {e}")))?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`Self::load`] with the process environment.
    pub fn load_with_env(path: Option<&Path>) -> Result<Self> {
        Self::load(path, std::env::vars())
    }

    /// Runs `f` on a pool of `workers` threads.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.workers {
            b = b.num_threads(n);
        }
        let pool = b.build().map_err(|e| Error::invalid("workers", e.to_string()))?;
        Ok(pool.install(f))
    }
}

fn parse_value(v: &str) -> toml::Value {
    format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

fn set_path(table: &mut toml::Table, keys: &[String], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = keys.split_last().ok_or("empty key")?;
    let mut t = table;
    for k in parents {
        t = t
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("{k} is not a section"))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        assert_eq!(PipelineConfig::load(None, vec![]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn env_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[ae_train]\nepochs = 2\n[forecast]\nwindows_s = [10]\n").unwrap();
        let c = PipelineConfig::load(
            Some(&p),
            env(&[("ECGLM_SEED", "9"), ("ECGLM_CONFIG__AE_TRAIN__LR", "0.01"), ("HOME", "/x")]),
        )
        .unwrap();
        assert_eq!((c.seed, c.ae_train.epochs, c.ae_train.lr), (9, 2, 0.01));
        assert_eq!(c.forecast.windows_s, vec![10]);
        assert_ne!(c.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn errors_name_the_field() {
        let e = PipelineConfig::load(None, env(&[("ECGLM_CONFIG__PREPROCESS__HIGHPASS_CUTOFF_HZ", "-1")])).unwrap_err();
        assert!(e.to_string().contains("highpass_cutoff_hz"), "{e}");
        let e = PipelineConfig::load(None, env(&[("ECGLM_CONFIG__BOGUS", "1")])).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = PipelineConfig::load(None, env(&[("ECGLM_CONFIG__AE__N", "128")])).unwrap_err();
        assert!(e.to_string().contains("ae.n"), "{e}");
    }
}
