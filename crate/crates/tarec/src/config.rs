//! Experiment configuration: one TOML file with sections mirroring the
//! pipeline stages. Unknown keys abort before any work begins, every field is
//! validated on load, and the effective (post-override) config is hashed for
//! provenance headers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::NegativeStrategy;
use crate::error::{Error, Result};
use crate::nets::ModelDims;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: String,
    pub format: String,
    pub l: usize,
    pub min_item_count: usize,
    pub min_seq_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: String::new(),
            format: "tsv".into(),
            l: 10,
            min_item_count: 5,
            min_seq_len: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub denoiser_layers: usize,
    /// 0 means "use 4 * d"
    pub denoiser_hidden: usize,
    pub rho: f64,
    /// classifier-free guidance scale at inference
    pub w: f64,
    /// sinusoid frequency base of the timestep embedding
    pub time_base: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 64,
            encoder_layers: 1,
            encoder_heads: 2,
            denoiser_layers: 3,
            denoiser_hidden: 0,
            rho: 0.1,
            w: 0.0,
            time_base: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            t: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub lambda_c: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub patience: usize,
    pub stop_tcr_prev_branch: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            lambda_c: 0.5,
            epochs: 100,
            batch: 128,
            lr: 1e-3,
            seed: 0,
            patience: 20,
            stop_tcr_prev_branch: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub lambda_base: f64,
    pub strategy: String,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub patience: usize,
    /// negative disables the fixed-strength variant; >= 0 enables it
    pub fixed_lambda: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            lambda_base: 0.5,
            strategy: "random_batch".into(),
            epochs: 20,
            batch: 128,
            lr: 1e-4,
            seed: 0,
            patience: 20,
            fixed_lambda: -1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub steps: usize,
    pub k: usize,
    pub exclude_history: bool,
    pub seed: u64,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            steps: 1,
            k: 20,
            exclude_history: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
    /// probe sample sizes
    pub probes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 20,
            repeats: 5,
            seed: 0,
            probes: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub infer: InferSection,
    pub eval: EvalSection,
    pub synth: SynthConfig,
}

impl ExperimentConfig {
    /// Parses and validates, applying `key=value` overrides (dotted paths,
    /// e.g. `pretrain.lambda_c=0`) onto the raw TOML before deserializing so
    /// fail-closed key checking also covers overrides.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        for (key, raw) in overrides {
            apply_override(&mut table, key, raw)?;
        }
        let cfg: ExperimentConfig = ExperimentConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.format != "tsv" {
            return Err(Error::Config(format!(
                "unsupported data format `{}` (only tsv)",
                self.data.format
            )));
        }
        if self.data.l == 0 || self.data.min_item_count == 0 || self.data.min_seq_len == 0 {
            return Err(Error::Config("data thresholds must be >= 1".into()));
        }
        if self.model.rho < 0.0 || self.model.rho > 1.0 {
            return Err(Error::Config("rho must lie in [0, 1]".into()));
        }
        if self.model.w < 0.0 {
            return Err(Error::Config("guidance scale w must be >= 0".into()));
        }
        if self.schedule.t == 0
            || self.schedule.beta_start <= 0.0
            || self.schedule.beta_start > self.schedule.beta_end
            || self.schedule.beta_end >= 1.0
        {
            return Err(Error::Config(
                "schedule needs T >= 1 and 0 < beta_start <= beta_end < 1".into(),
            ));
        }
        if self.pretrain.lambda_c < 0.0 {
            return Err(Error::Config("lambda_c must be >= 0".into()));
        }
        if self.pretrain.lr <= 0.0 || self.finetune.lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.pretrain.batch == 0 || self.finetune.batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.finetune.lambda_base <= 0.0 {
            return Err(Error::Config("lambda_base must be > 0".into()));
        }
        NegativeStrategy::parse(&self.finetune.strategy)?;
        if self.infer.steps == 0 || self.infer.steps > self.schedule.t {
            return Err(Error::Config(format!(
                "infer.steps must lie in 1..=T, got {}",
                self.infer.steps
            )));
        }
        if self.infer.k == 0 || self.eval.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.eval.repeats == 0 {
            return Err(Error::Config("eval.repeats must be >= 1".into()));
        }
        self.dims_for(1).validate()
    }

    /// Model dimensions for a corpus of `v` items.
    pub fn dims_for(&self, v: usize) -> ModelDims {
        let hidden = if self.model.denoiser_hidden == 0 {
            4 * self.model.d
        } else {
            self.model.denoiser_hidden
        };
        ModelDims {
            v,
            d: self.model.d,
            l: self.data.l,
            n_layers: self.model.encoder_layers,
            n_heads: self.model.encoder_heads,
            h_ff: 4 * self.model.d,
            den_layers: self.model.denoiser_layers,
            den_hidden: hidden,
            d_t: self.model.d,
            time_base: self.model.time_base,
        }
    }

    pub fn strategy(&self) -> NegativeStrategy {
        NegativeStrategy::parse(&self.finetune.strategy).expect("validated at load")
    }

    pub fn fixed_lambda(&self) -> Option<f64> {
        if self.finetune.fixed_lambda >= 0.0 {
            Some(self.finetune.fixed_lambda)
        } else {
            None
        }
    }

    /// Canonical serialized form of the effective config.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex chars of the SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_toml().as_bytes());
        hex::encode(hasher.finalize())[..16].to_string()
    }

    pub fn data_path(&self) -> PathBuf {
        PathBuf::from(&self.data.path)
    }
}

/// Sets `section.key = parsed(raw)` inside the raw TOML tree. The value is
/// parsed as TOML so numbers, booleans, and strings all work; bare words
/// fall back to strings.
fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!(
            "override key `{key}` must be section.field"
        )));
    }
    let parsed: toml::Value = match raw.parse::<toml::Value>() {
        Ok(v) => v,
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let section = table
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(Default::default()));
    let section = section
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("section `{}` is not a table", parts[0])))?;
    section.insert(parts[1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg.data.l, 10);
        assert_eq!(cfg.model.d, 64);
        assert_eq!(cfg.schedule.t, 500);
        assert_eq!(cfg.pretrain.lambda_c, 0.5);
        assert_eq!(cfg.finetune.lambda_base, 0.5);
        assert_eq!(cfg.infer.k, 20);
    }

    #[test]
    fn unknown_keys_fail_closed() {
        let res = ExperimentConfig::from_toml("[data]\nbogus = 3\n", &[]);
        assert!(matches!(res, Err(Error::Config(_))), "{res:?}");
        let res = ExperimentConfig::from_toml("[nonsense]\nx = 1\n", &[]);
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply_and_are_fail_closed() {
        let cfg = ExperimentConfig::from_toml(
            "[pretrain]\nlambda_c = 0.5\n",
            &[("pretrain.lambda_c".into(), "0".into())],
        )
        .unwrap();
        assert_eq!(cfg.pretrain.lambda_c, 0.0);
        let res = ExperimentConfig::from_toml("", &[("pretrain.bogus".into(), "1".into())]);
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml("[model]\nrho = 1.5\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("[schedule]\nt = 0\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("[finetune]\nstrategy = \"magic\"\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("[infer]\nsteps = 501\n", &[]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml("", &[]).unwrap();
        let b = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c =
            ExperimentConfig::from_toml("", &[("pretrain.seed".into(), "9".into())]).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn fixed_lambda_sentinel() {
        let a = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(a.fixed_lambda(), None);
        let b = ExperimentConfig::from_toml("[finetune]\nfixed_lambda = 0.5\n", &[]).unwrap();
        assert_eq!(b.fixed_lambda(), Some(0.5));
    }
}
