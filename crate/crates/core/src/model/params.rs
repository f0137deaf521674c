use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, NeuronId};
use crate::error::{LaknError, Result};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    /// d_model × d_ffn; column i is the key of neuron i.
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// d_ffn × d_model; row i is the value written by neuron i.
    pub w_out: Tensor,
    pub b_out: Tensor,
}

pub const LAYER_PARAM_NAMES: [&str; 12] = [
    "ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w_in", "b_in", "w_out", "b_out",
];

impl LayerParams {
    fn all(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.ln2_g,
            &self.ln2_b, &self.w_in, &self.b_in, &self.w_out, &self.b_out,
        ]
    }

    fn all_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    /// vocab × d_model output embedding, untied from `tok_emb`.
    pub unembed: Tensor,
}

impl Params {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rand = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| normal.sample(&mut rng)).collect())
                .expect("consistent shape")
        };
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        let tok_emb = rand(cfg.vocab_size, d);
        let pos_emb = rand(cfg.max_seq_len, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                w_q: rand(d, d),
                w_k: rand(d, d),
                w_v: rand(d, d),
                w_o: rand(d, d),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w_in: rand(d, f),
                b_in: Tensor::zeros(&[f]),
                w_out: rand(f, d),
                b_out: Tensor::zeros(&[d]),
            })
            .collect();
        let unembed = rand(cfg.vocab_size, d);
        Params {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            unembed,
        }
    }

    /// Every parameter tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            v.extend(l.all());
        }
        v.extend([&self.lnf_g, &self.lnf_b, &self.unembed]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            v.extend(l.all_mut());
        }
        v.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.unembed]);
        v
    }

    /// Names matching [`Params::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.layers.len() {
            v.extend(LAYER_PARAM_NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        v.extend(["lnf_g", "lnf_b", "unembed"].map(String::from));
        v
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Canonical index of a layer parameter in [`Params::tensors`].
    pub fn layer_index(layer: usize, name: &str) -> Option<usize> {
        LAYER_PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|p| 2 + layer * LAYER_PARAM_NAMES.len() + p)
    }
}

/// Per-scalar trainability over [`Params::tensors`], in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMask {
    masks: Vec<Vec<bool>>,
}

impl ParamMask {
    pub fn all(params: &Params) -> Self {
        ParamMask {
            masks: params.tensors().iter().map(|t| vec![true; t.numel()]).collect(),
        }
    }

    pub fn none(params: &Params) -> Self {
        ParamMask {
            masks: params.tensors().iter().map(|t| vec![false; t.numel()]).collect(),
        }
    }

    /// Key column, key bias and value row of every listed neuron. The value
    /// bias is shared by all neurons of a layer and stays frozen, as do the
    /// normalization parameters.
    pub fn for_neurons(params: &Params, neurons: &[NeuronId]) -> Result<Self> {
        let mut m = Self::none(params);
        let f = params.layers.first().map_or(0, |l| l.b_in.numel());
        for n in neurons {
            if n.layer >= params.layers.len() || n.index >= f {
                return Err(LaknError::Contract(format!(
                    "mask neuron ({}, {}) outside the model",
                    n.layer, n.index
                )));
            }
            let w_in = Params::layer_index(n.layer, "w_in").expect("known name");
            let d = params.layers[n.layer].w_in.rows();
            for r in 0..d {
                m.masks[w_in][r * f + n.index] = true;
            }
            let b_in = Params::layer_index(n.layer, "b_in").expect("known name");
            m.masks[b_in][n.index] = true;
            let w_out = Params::layer_index(n.layer, "w_out").expect("known name");
            for c in 0..d {
                m.masks[w_out][n.index * d + c] = true;
            }
        }
        Ok(m)
    }

    pub fn tensor(&self, i: usize) -> &[bool] {
        &self.masks[i]
    }

    pub fn n_trainable(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_trainable() == 0
    }

    pub(crate) fn matches(&self, params: &Params) -> bool {
        let ts = params.tensors();
        ts.len() == self.masks.len() && ts.iter().zip(&self.masks).all(|(t, m)| t.numel() == m.len())
    }
}
