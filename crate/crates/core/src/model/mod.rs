//! Tiny decoder-only causal language model.
//!
//! Pre-norm transformer blocks with learned absolute positions and a separate
//! output head. Every layer's residual-stream output is exposed so that
//! representation-level losses can target an intermediate layer.

mod decode;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{GradMap, Gradients, ParamSet, Scalar, Tensor};

pub use forward::{
    bind, embed_tokens, forward_from_embeddings, forward_logits, greedy_decode, mean_pooled_rep, sequence_logprobs,
    token_logprobs_var, Bound, ForwardOut, HiddenStates,
};

pub(crate) use decode::KvDecoder;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self { vocab_size: 256, d_model: 64, n_layers: 4, n_heads: 4, max_seq_len: 128, seed: 0 }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::config("n_layers must be at least 2"));
        }
        if self.max_seq_len < 8 {
            return Err(Error::config("max_seq_len must be at least 8"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Layer whose representations feed Moderate selection.
    pub fn penultimate_layer(&self) -> usize {
        self.n_layers - 2
    }

    /// Default representation-misdirection layer, `ceil(n_layers / 2)`.
    pub fn default_rmu_layer(&self) -> usize {
        self.n_layers.div_ceil(2).min(self.n_layers - 1)
    }

    /// Names and shapes of every tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, t, h) = (self.vocab_size, self.d_model, self.max_seq_len, self.mlp_dim());
        let mut specs = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![t, d])];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("h{i}.{s}");
            specs.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.w1"), vec![d, h]),
                (p("mlp.b1"), vec![h]),
                (p("mlp.w2"), vec![h, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        specs.extend([
            ("ln_f.g".to_string(), vec![d]),
            ("ln_f.b".to_string(), vec![d]),
            ("head".to_string(), vec![v, d]),
        ]);
        specs
    }
}

pub(crate) const PER_LAYER: usize = 12;

/// Index helpers into the flat tensor list.
pub(crate) mod slot {
    use super::PER_LAYER;
    pub const TOK: usize = 0;
    pub const POS: usize = 1;
    pub fn layer(i: usize, k: usize) -> usize {
        2 + i * PER_LAYER + k
    }
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W1: usize = 8;
    pub const B1: usize = 9;
    pub const W2: usize = 10;
    pub const B2: usize = 11;
    pub fn final_g(n_layers: usize) -> usize {
        2 + n_layers * PER_LAYER
    }
    pub fn final_b(n_layers: usize) -> usize {
        final_g(n_layers) + 1
    }
    pub fn head(n_layers: usize) -> usize {
        final_g(n_layers) + 2
    }
}

/// All trainable weights of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LMParams<T = f32> {
    pub config: LMConfig,
    tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> LMParams<T> {
    /// Seeded initialization: N(0, 0.02) weights, residual projections scaled
    /// by `1/sqrt(2·n_layers)`, unit norm gains and zero biases.
    pub fn init(config: LMConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data: Vec<T> = if name.ends_with(".g") {
                    vec![T::one(); numel]
                } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                    vec![T::zero(); numel]
                } else {
                    let scale = if name.ends_with("wo") || name.ends_with("w2") { resid_scale } else { 1.0 };
                    (0..numel).map(|_| T::from_f64c(normal.sample(&mut rng) * scale)).collect()
                };
                (name, Tensor::new(shape, data).expect("spec shape"))
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Builds parameters from named tensors, checking them against `config`.
    pub fn from_tensors(config: LMConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::contract(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for ((sn, ss), (n, t)) in specs.iter().zip(&tensors) {
            if sn != n || ss.as_slice() != t.shape() {
                return Err(Error::contract(format!("tensor {n}{:?} does not match expected {sn}{ss:?}", t.shape())));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn tensors(&self) -> &[(String, Tensor<T>)] {
        &self.tensors
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> LMParams<U> {
        LMParams { config: self.config, tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Euclidean distance between two parameter vectors.
    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| {
                let d = (x - y).to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.config.vocab_size != other.config.vocab_size
            || self.config.d_model != other.config.d_model
            || self.config.n_layers != other.config.n_layers
            || self.config.n_heads != other.config.n_heads
            || self.config.max_seq_len != other.config.max_seq_len
        {
            return Err(Error::contract(format!("architectures differ: {:?} vs {:?}", self.config, other.config)));
        }
        Ok(())
    }

    /// Collects leaf gradients for `bound` into a name-aligned map; tensors the
    /// root does not depend on get zero gradients.
    pub fn grad_map(&self, bound: &Bound, grads: &mut Gradients<T>) -> GradMap<T> {
        GradMap::new(
            self.tensors
                .iter()
                .zip(bound.vars())
                .map(|((name, t), &v)| {
                    let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape()));
                    (name.clone(), g)
                })
                .collect(),
        )
    }

    pub fn zero_grads(&self) -> GradMap<T> {
        GradMap::new(self.tensors.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect())
    }
}

impl<T: Scalar> ParamSet<T> for LMParams<T> {
    fn named(&self) -> Vec<(&str, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors.iter_mut().map(|(_, t)| t).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(LMConfig::default().validate().is_ok());
        let bad_heads = LMConfig { n_heads: 3, ..LMConfig::default() };
        assert!(bad_heads.validate().is_err());
        let one_layer = LMConfig { n_layers: 1, ..LMConfig::default() };
        assert!(one_layer.validate().is_err());
        let short = LMConfig { max_seq_len: 4, ..LMConfig::default() };
        assert!(short.validate().is_err());
        assert_eq!(LMConfig::default().default_rmu_layer(), 2);
        assert_eq!(LMConfig::default().penultimate_layer(), 2);
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = LMConfig { vocab_size: 20, d_model: 16, n_layers: 2, n_heads: 2, max_seq_len: 8, seed: 3 };
        let a = LMParams::<f32>::init(cfg).unwrap();
        let b = LMParams::<f32>::init(cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tensors().len(), 2 + 2 * PER_LAYER + 3);
        assert_eq!(a.tensor(slot::head(2)).shape(), &[20, 16]);
        assert_eq!(a.by_name("h1.mlp.w1").unwrap().shape(), &[16, 64]);
        let c = LMParams::<f32>::init(LMConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }
}
