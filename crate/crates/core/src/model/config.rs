use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{EOS, MASK};
use crate::error::{LaknError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    AutoRegressive,
    AutoEncoding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_layers: usize,
    pub d_model: usize,
    /// Neurons per FFN layer.
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Token that replaces one prompt token in attribution baselines.
    pub pad_token_id: usize,
    pub seed: u64,
    /// Score multi-token answers by their mean log-probability.
    #[serde(default)]
    pub multi_token: bool,
}

impl ModelConfig {
    /// Toy-scale defaults for the given architecture and vocabulary.
    pub fn new(architecture: Architecture, vocab_size: usize) -> Self {
        ModelConfig {
            architecture,
            n_layers: 4,
            d_model: 64,
            d_ffn: 128,
            n_heads: 4,
            vocab_size,
            max_seq_len: 16,
            pad_token_id: match architecture {
                Architecture::AutoRegressive => EOS,
                Architecture::AutoEncoding => MASK,
            },
            seed: 0,
            multi_token: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(LaknError::Config {
                field: format!("model.{field}"),
                message,
            })
        };
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 || self.max_seq_len == 0 {
            return bad("n_layers", "layer count and widths must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(
                "n_heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            );
        }
        if self.vocab_size <= MASK {
            return bad("vocab_size", format!("{} leaves no room for specials", self.vocab_size));
        }
        if self.pad_token_id >= self.vocab_size {
            return bad(
                "pad_token_id",
                format!("{} outside vocabulary of {}", self.pad_token_id, self.vocab_size),
            );
        }
        Ok(())
    }

    pub fn check_neuron(&self, n: NeuronId) -> Result<()> {
        if n.layer >= self.n_layers || n.index >= self.d_ffn {
            return Err(LaknError::Contract(format!(
                "neuron ({}, {}) outside {} layers x {} neurons",
                n.layer, n.index, self.n_layers, self.d_ffn
            )));
        }
        Ok(())
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_ffn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        NeuronId { layer, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// Wherever the answer is read: the last position (auto-regressive) or
    /// the mask position (auto-encoding).
    Prediction,
    At(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideMode {
    SetVector(Vec<f64>),
    SetScalar { neuron: usize, value: f64 },
    Scale { neuron: usize, factor: f64 },
}

/// Replacement applied to FFN activations after the nonlinearity and before
/// the second projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationOverride {
    pub layer: usize,
    pub position: Position,
    pub mode: OverrideMode,
}

impl ActivationOverride {
    pub fn zero(n: NeuronId) -> Self {
        ActivationOverride {
            layer: n.layer,
            position: Position::Prediction,
            mode: OverrideMode::SetScalar {
                neuron: n.index,
                value: 0.0,
            },
        }
    }

    pub fn scale(n: NeuronId, factor: f64) -> Self {
        ActivationOverride {
            layer: n.layer,
            position: Position::Prediction,
            mode: OverrideMode::Scale {
                neuron: n.index,
                factor,
            },
        }
    }

    pub fn set_vector(layer: usize, values: Vec<f64>) -> Self {
        ActivationOverride {
            layer,
            position: Position::Prediction,
            mode: OverrideMode::SetVector(values),
        }
    }

    pub(crate) fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(LaknError::Contract(format!(
                "override on layer {} of {}",
                self.layer, cfg.n_layers
            )));
        }
        match &self.mode {
            OverrideMode::SetVector(v) if v.len() != cfg.d_ffn => Err(LaknError::Contract(format!(
                "SetVector of length {} for {} neurons",
                v.len(),
                cfg.d_ffn
            ))),
            OverrideMode::SetVector(v) if v.iter().any(|x| !x.is_finite()) => {
                Err(LaknError::Contract("SetVector holds non-finite values".into()))
            }
            OverrideMode::SetScalar { neuron, value } => {
                cfg.check_neuron(NeuronId::new(self.layer, *neuron))?;
                if !value.is_finite() {
                    return Err(LaknError::Contract("SetScalar value not finite".into()));
                }
                Ok(())
            }
            OverrideMode::Scale { neuron, factor } => {
                cfg.check_neuron(NeuronId::new(self.layer, *neuron))?;
                if !factor.is_finite() {
                    return Err(LaknError::Contract("Scale factor not finite".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardResult {
    /// positions × vocab, before softmax.
    pub logits: Tensor,
    /// Per layer, positions × d_ffn, recorded after overrides. Present when
    /// recording was requested.
    pub ffn_activations: Option<Vec<Tensor>>,
    /// Position the answer is read from.
    pub prediction_position: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::new(Architecture::AutoEncoding, 100);
        c.validate().unwrap();
        assert_eq!(c.pad_token_id, MASK);
        assert_eq!(ModelConfig::new(Architecture::AutoRegressive, 100).pad_token_id, EOS);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::new(Architecture::AutoRegressive, 100)
        };
        assert!(matches!(c.validate(), Err(LaknError::Config { .. })));
    }

    #[test]
    fn override_checks() {
        let c = ModelConfig::new(Architecture::AutoRegressive, 100);
        assert!(ActivationOverride::zero(NeuronId::new(4, 0)).validate(&c).is_err());
        assert!(ActivationOverride::zero(NeuronId::new(0, 128)).validate(&c).is_err());
        assert!(ActivationOverride::scale(NeuronId::new(0, 1), f64::NAN).validate(&c).is_err());
        assert!(ActivationOverride::set_vector(0, vec![0.0; 3]).validate(&c).is_err());
        assert!(ActivationOverride::set_vector(0, vec![0.0; 128]).validate(&c).is_ok());
    }
}
