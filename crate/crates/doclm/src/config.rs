//! Run configuration: model architecture, training regime, and data paths,
//! with named profiles and strict validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Tanh,
}

/// Per-connection dropout rates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutRates {
    /// Word-level embedding dropout (whole rows of the embedding table).
    pub x: f32,
    /// Variational dropout on the embedding output feeding layer 1.
    pub h0: f32,
    /// Variational dropout on middle-layer outputs.
    pub mid: f32,
    /// Variational dropout on the final layer output feeding the head.
    pub out: f32,
    /// Dropout on the head's per-component projections.
    pub k: f32,
}

impl DropoutRates {
    pub fn zero() -> Self {
        DropoutRates {
            x: 0.0,
            h0: 0.0,
            mid: 0.0,
            out: 0.0,
            k: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("x", self.x),
            ("h0", self.h0),
            ("mid", self.mid),
            ("out", self.out),
            ("k", self.k),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "dropout.{name} must be in [0, 1), got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Initialization scales. The rank diagnostic needs larger output-layer
/// magnitudes than the training default, so these are configurable.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Uniform half-width for the embedding / tied output matrix.
    pub embed_scale: f32,
    /// Multiplier on the 1/sqrt(fan) half-width of all other weights.
    pub weight_gain: f32,
    /// Forget-gate bias initial value.
    pub forget_bias: f32,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            embed_scale: 0.1,
            weight_gain: 1.0,
            forget_bias: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Embedding width; with tying this is also the head projection width d.
    pub d_embed: usize,
    /// Hidden sizes of layers 1..=N.
    pub d_hidden: Vec<usize>,
    /// Softmax components per source layer, listed `[i_N, ..., i_0]`.
    pub allocation: Vec<usize>,
    pub lambda_beta: f32,
    /// Tie the output matrix to the embedding table.
    pub tied: bool,
    pub k_activation: Activation,
    pub dropout: DropoutRates,
    /// Recurrent weight (DropConnect) rate.
    pub weight_drop: f32,
    /// Activation regularizer weight on the dropped final output.
    pub ar_alpha: f32,
    /// Temporal activation regularizer weight on consecutive final outputs.
    pub tar_gamma: f32,
    #[serde(default)]
    pub init: InitConfig,
}

impl ModelConfig {
    pub fn total_components(&self) -> usize {
        self.allocation.iter().sum()
    }

    /// Source layer per component, final layer first (the serialization
    /// order of the allocation).
    pub fn component_layers(&self) -> Vec<usize> {
        let n = self.n_layers;
        let mut out = Vec::with_capacity(self.total_components());
        for (idx, &count) in self.allocation.iter().enumerate() {
            let layer = n - idx;
            for _ in 0..count {
                out.push(layer);
            }
        }
        out
    }

    /// Width of layer `n` as seen by the head (layer 0 is the embedding).
    pub fn layer_width(&self, n: usize) -> usize {
        if n == 0 {
            self.d_embed
        } else {
            self.d_hidden[n - 1]
        }
    }

    /// The equivalent single-source configuration: all components drawn from
    /// the final layer, which reduces the head to a mixture over the top
    /// hidden state only.
    pub fn mos_equivalent(&self) -> ModelConfig {
        let mut cfg = self.clone();
        let j = self.total_components();
        cfg.allocation = vec![0; self.n_layers + 1];
        cfg.allocation[0] = j;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Config("model.n_layers must be >= 1".into()));
        }
        if self.d_hidden.len() != self.n_layers {
            return Err(Error::Config(format!(
                "model.d_hidden must list {} sizes, got {}",
                self.n_layers,
                self.d_hidden.len()
            )));
        }
        if self.d_embed == 0 || self.d_hidden.iter().any(|&d| d == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.allocation.len() != self.n_layers + 1 {
            return Err(Error::Config(format!(
                "model.allocation must list {} counts [i_N..i_0], got {}",
                self.n_layers + 1,
                self.allocation.len()
            )));
        }
        if self.total_components() == 0 {
            return Err(Error::Config(
                "model.allocation must sum to at least one component".into(),
            ));
        }
        if self.lambda_beta < 0.0 {
            return Err(Error::Config("model.lambda_beta must be >= 0".into()));
        }
        self.dropout.validate()?;
        if !(0.0..1.0).contains(&self.weight_drop) {
            return Err(Error::Config(format!(
                "model.weight_drop must be in [0, 1), got {}",
                self.weight_drop
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Minimum validation-perplexity improvement to start another round.
    pub epsilon: f64,
    pub max_rounds: usize,
    /// Extra epochs after the averaging trigger fires within a round.
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epsilon: 0.1,
            max_rounds: 8,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub bptt: usize,
    /// Variable-length BPTT draws; off gives deterministic slice lengths.
    pub var_bptt: bool,
    pub clip: f32,
    /// Non-monotone interval (validation checks) before averaging triggers.
    pub nonmono: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Record wall-clock seconds in the learning curve; disable for
    /// byte-identical reruns.
    #[serde(default = "default_true")]
    pub wall_clock: bool,
}

fn default_true() -> bool {
    true
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        if self.bptt == 0 {
            return Err(Error::Config("training.bptt must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("training.lr must be positive".into()));
        }
        if self.clip <= 0.0 {
            return Err(Error::Config("training.clip must be positive".into()));
        }
        Ok(())
    }
}

/// Synthetic-corpus generation, used when the data paths do not exist yet.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Approximate size: tokens for word corpora, bytes for char corpora.
    pub size: usize,
    pub n_types: usize,
    pub seed: u64,
    /// Fraction of lines held out for validation (and as much again for
    /// test when no test path is given).
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub token_mode: TokenMode,
    #[serde(default = "default_min_freq")]
    pub min_freq: usize,
    #[serde(default)]
    pub max_vocab: Option<usize>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

fn default_min_freq() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.data.train.as_os_str().is_empty() || self.data.valid.as_os_str().is_empty() {
            return Err(Error::Config(
                "data.train and data.valid paths are required".into(),
            ));
        }
        Ok(())
    }

    /// Load a config file: start from its named profile (or `desk-word`),
    /// overlay the file's own keys, then validate. Unknown keys are
    /// rejected.
    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut file_value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.into(),
                source: e,
            })?;
        let profile_name = file_value
            .as_object_mut()
            .and_then(|o| o.remove("profile"))
            .map(|v| {
                v.as_str()
                    .map(|s| s.to_string())
                    .ok_or_else(|| Error::Config("profile must be a string".into()))
            })
            .transpose()?
            .unwrap_or_else(|| "desk-word".to_string());
        let mut base = serde_json::to_value(profile(&profile_name)?).unwrap();
        merge_json(&mut base, file_value);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Named hyperparameter profiles selectable from config files.
pub fn profile(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        // The published word-level profiles.
        "ptb-paper" => RunConfig {
            model: ModelConfig {
                n_layers: 3,
                d_embed: 280,
                d_hidden: vec![960, 960, 620],
                allocation: vec![15, 5, 0, 0],
                lambda_beta: 0.001,
                tied: true,
                k_activation: Activation::None,
                dropout: DropoutRates {
                    x: 0.1,
                    h0: 0.4,
                    mid: 0.225,
                    out: 0.4,
                    k: 0.6,
                },
                weight_drop: 0.5,
                ar_alpha: 2.0,
                tar_gamma: 1.0,
                init: InitConfig::default(),
            },
            training: TrainingConfig {
                lr: 20.0,
                batch_size: 12,
                bptt: 70,
                var_bptt: true,
                clip: 0.25,
                nonmono: 60,
                epochs: 500,
                seed: 1,
                finetune: FinetuneConfig::default(),
                wall_clock: true,
            },
            data: DataConfig {
                train: PathBuf::new(),
                valid: PathBuf::new(),
                test: None,
                token_mode: TokenMode::Words,
                min_freq: 1,
                max_vocab: None,
                synth: None,
            },
        },
        "wt2-paper" => {
            let mut cfg = profile("ptb-paper")?;
            cfg.model.d_embed = 300;
            cfg.model.d_hidden = vec![1150, 1150, 650];
            cfg.model.dropout.h0 = 0.65;
            cfg.model.dropout.mid = 0.2;
            cfg.training.lr = 15.0;
            cfg.training.batch_size = 15;
            cfg
        }
        // Small word-level profile for laptop-scale corpora.
        "desk-word" => RunConfig {
            model: ModelConfig {
                n_layers: 3,
                d_embed: 64,
                d_hidden: vec![128, 128, 80],
                allocation: vec![2, 1, 0, 0],
                lambda_beta: 0.001,
                tied: true,
                k_activation: Activation::None,
                dropout: DropoutRates {
                    x: 0.05,
                    h0: 0.2,
                    mid: 0.1,
                    out: 0.2,
                    k: 0.3,
                },
                weight_drop: 0.3,
                ar_alpha: 2.0,
                tar_gamma: 1.0,
                init: InitConfig::default(),
            },
            training: TrainingConfig {
                lr: 10.0,
                batch_size: 16,
                bptt: 35,
                var_bptt: true,
                clip: 0.25,
                nonmono: 5,
                epochs: 12,
                seed: 1,
                finetune: FinetuneConfig {
                    epsilon: 0.1,
                    max_rounds: 8,
                    patience: 2,
                },
                wall_clock: true,
            },
            data: DataConfig {
                train: PathBuf::new(),
                valid: PathBuf::new(),
                test: None,
                token_mode: TokenMode::Words,
                min_freq: 1,
                max_vocab: None,
                synth: None,
            },
        },
        // Character-level profile sized for a few-minute CPU run.
        "desk-char" => {
            let mut cfg = profile("desk-word")?;
            cfg.model.d_embed = 12;
            cfg.model.d_hidden = vec![96, 96, 64];
            cfg.model.dropout = DropoutRates {
                x: 0.0,
                h0: 0.05,
                mid: 0.05,
                out: 0.1,
                k: 0.1,
            };
            cfg.model.weight_drop = 0.15;
            cfg.training.lr = 14.0;
            cfg.training.batch_size = 48;
            cfg.training.bptt = 50;
            cfg.training.epochs = 4;
            cfg.data.token_mode = TokenMode::Chars;
            cfg
        }
        other => {
            return Err(Error::Config(format!(
                "unknown profile '{other}' (expected ptb-paper, wt2-paper, desk-word, desk-char)"
            )))
        }
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ptb_profile_pins_published_values() {
        let cfg = profile("ptb-paper").unwrap();
        assert_eq!(cfg.training.lr, 20.0);
        assert_eq!(cfg.training.batch_size, 12);
        assert_eq!(cfg.training.nonmono, 60);
        assert_eq!(cfg.model.d_embed, 280);
        assert_eq!(cfg.model.d_hidden, vec![960, 960, 620]);
        assert_eq!(cfg.model.dropout.x, 0.1);
        assert_eq!(cfg.model.dropout.h0, 0.4);
        assert_eq!(cfg.model.dropout.mid, 0.225);
        assert_eq!(cfg.model.dropout.out, 0.4);
        assert_eq!(cfg.model.dropout.k, 0.6);
        assert_eq!(cfg.model.weight_drop, 0.5);
        assert_eq!(cfg.model.allocation, vec![15, 5, 0, 0]);
        assert_eq!(cfg.model.lambda_beta, 0.001);
    }

    #[test]
    fn wt2_profile_pins_published_values() {
        let cfg = profile("wt2-paper").unwrap();
        assert_eq!(cfg.training.lr, 15.0);
        assert_eq!(cfg.training.batch_size, 15);
        assert_eq!(cfg.model.d_embed, 300);
        assert_eq!(cfg.model.d_hidden, vec![1150, 1150, 650]);
        assert_eq!(cfg.model.dropout.h0, 0.65);
    }

    #[test]
    fn component_layers_order_final_first() {
        let mut cfg = profile("desk-word").unwrap().model;
        cfg.allocation = vec![2, 1, 0, 1];
        assert_eq!(cfg.component_layers(), vec![3, 3, 2, 0]);
        assert_eq!(cfg.total_components(), 4);
    }

    #[test]
    fn mos_equivalent_moves_all_components_to_final() {
        let mut cfg = profile("desk-word").unwrap().model;
        cfg.allocation = vec![15, 5, 0, 0];
        let mos = cfg.mos_equivalent();
        assert_eq!(mos.allocation, vec![20, 0, 0, 0]);
    }

    #[test]
    fn validation_rejects_bad_allocation() {
        let mut cfg = profile("desk-word").unwrap();
        cfg.model.allocation = vec![0, 0, 0, 0];
        assert!(cfg.model.validate().is_err());
        cfg.model.allocation = vec![1, 0, 0];
        assert!(cfg.model.validate().is_err());
    }

    #[test]
    fn load_rejects_unknown_keys_and_merges_profile() {
        let dir = std::env::temp_dir().join(format!("doclm-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        std::fs::write(
            &path,
            r#"{
  "profile": "ptb-paper",
  "model": { "allocation": [15, 5, 0, 0], "lambda_beta": 0.001 },
  "training": { "seed": 7 },
  "data": { "train": "train.txt", "valid": "valid.txt" }
}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.training.seed, 7);
        assert_eq!(cfg.training.lr, 20.0); // from profile
        assert_eq!(cfg.model.d_hidden, vec![960, 960, 620]);

        std::fs::write(&path, r#"{ "model": { "nonsense": 1 } }"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_config_file_names_path() {
        let err = RunConfig::load(std::path::Path::new("/nonexistent/cfg.json"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("/nonexistent/cfg.json"), "{err}");
    }
}
