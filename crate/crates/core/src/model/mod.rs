//! A small byte-level pre-norm transformer with named parameter layers.
//!
//! [`ModelState`] is the immutable, portable form of a model (32-bit values,
//! ordered layer table). All arithmetic happens in `f64` on a [`net::Net`]
//! built from the state; results are rounded back to `f32` when a new state
//! is produced.

mod checkpoint;
mod decode;
mod mask;
pub(crate) mod net;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load, load_bytes, save, to_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{generate, Decoding, Generator};
pub use mask::GradientMask;
pub use net::Perturbation;
pub(crate) use train::MaskedTrainer;
pub use train::{
    adversarial_perturbation, adversarial_step, block_hidden_len, cross_entropy, finetune_full, forward_loss,
    forward_loss_at, forward_with_perturbation, loss_gradient, sft_step, train_base, BaseTraining, Optimizer, Sample,
};

pub const VOCAB_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Width of the feed-forward hidden layer.
    pub ffn_dim: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            context_len: 128,
            embed_dim: 64,
            n_blocks: 2,
            n_heads: 2,
            ffn_dim: 256,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::BadConfig(msg.to_string()));
        if self.vocab_size != VOCAB_SIZE {
            return bad("vocab_size must be 256 (byte alphabet)");
        }
        if self.context_len < 16 {
            return bad("context_len must be at least 16");
        }
        if self.embed_dim == 0 || self.n_blocks == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.embed_dim % self.n_heads != 0 {
            return bad("embed_dim must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Canonical layer table: names and shapes in storage order.
    pub fn layer_table(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let f = self.ffn_dim;
        let mut t = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.context_len, d]),
        ];
        for b in 0..self.n_blocks {
            let p = |s: &str| format!("blocks.{b}.{s}");
            t.push((p("ln1.gain"), vec![d]));
            t.push((p("ln1.bias"), vec![d]));
            t.push((p("attn.wq"), vec![d, d]));
            t.push((p("attn.wk"), vec![d, d]));
            t.push((p("attn.wv"), vec![d, d]));
            t.push((p("attn.wo"), vec![d, d]));
            t.push((p("ln2.gain"), vec![d]));
            t.push((p("ln2.bias"), vec![d]));
            t.push((p("mlp.w_in"), vec![d, f]));
            t.push((p("mlp.b_in"), vec![f]));
            t.push((p("mlp.w_out"), vec![f, d]));
            t.push((p("mlp.b_out"), vec![d]));
        }
        t.push(("ln_f.gain".to_string(), vec![d]));
        t.push(("ln_f.bias".to_string(), vec![d]));
        t.push(("head".to_string(), vec![d, self.vocab_size]));
        t
    }

    pub fn param_count(&self) -> usize {
        self.layer_table()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Layer {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps_taken: usize,
    pub corpus_id: String,
    /// Optimizer used by the most recent training run, e.g. `adam(0.9,0.999)`.
    pub optimizer: String,
}

/// Parameters of one model plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub train_meta: TrainMeta,
}

impl ModelState {
    /// Seeded initialization. Deterministic in `config.rng_seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let d = config.embed_dim as f64;
        let residual_scale = 1.0 / (2.0 * config.n_blocks as f64).sqrt();
        let layers = config
            .layer_table()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let std = if name == "tok_emb" {
                    0.3
                } else if name == "pos_emb" {
                    0.05
                } else if name.ends_with("gain") {
                    return Layer { name, shape, values: vec![1.0; len] };
                } else if name.ends_with("bias") || name.ends_with("b_in") || name.ends_with("b_out")
                {
                    return Layer { name, shape, values: vec![0.0; len] };
                } else if name.ends_with("wo") || name.ends_with("w_out") {
                    residual_scale / (shape[0] as f64).sqrt()
                } else {
                    1.0 / d.sqrt()
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                let values = (0..len).map(|_| normal.sample(&mut rng) as f32).collect();
                Layer { name, shape, values }
            })
            .collect();
        Ok(Self { config, layers, train_meta: TrainMeta::default() })
    }

    /// Checks the layer table against the config and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let table = self.config.layer_table();
        if table.len() != self.layers.len() {
            return Err(Error::ModelShapeMismatch(format!(
                "expected {} layers, found {}",
                table.len(),
                self.layers.len()
            )));
        }
        for ((name, shape), layer) in table.iter().zip(&self.layers) {
            if *name != layer.name || *shape != layer.shape {
                return Err(Error::ModelShapeMismatch(format!(
                    "layer `{}` {:?} where `{}` {:?} was expected",
                    layer.name, layer.shape, name, shape
                )));
            }
            if layer.values.len() != shape.iter().product::<usize>() {
                return Err(Error::ModelShapeMismatch(format!(
                    "layer `{}` holds {} values for shape {:?}",
                    layer.name,
                    layer.values.len(),
                    shape
                )));
            }
            if let Some(i) = layer.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::ModelShapeMismatch(format!(
                    "layer `{}` has a non-finite value at {i}",
                    layer.name
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// Errors unless both states share config dimensions and layer table.
    pub fn check_compatible(&self, other: &ModelState) -> Result<()> {
        let strip = |c: &ModelConfig| ModelConfig { rng_seed: 0, ..*c };
        if strip(&self.config) != strip(&other.config) || self.layers.len() != other.layers.len() {
            return Err(Error::ModelShapeMismatch("configs differ".into()));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ModelShapeMismatch(format!(
                    "layer `{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Flat positions (layer index, element index) whose bits differ.
    pub fn diff_support(&self, other: &ModelState) -> Result<Vec<(usize, usize)>> {
        self.check_compatible(other)?;
        let mut out = Vec::new();
        for (li, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            for (i, (x, y)) in a.values.iter().zip(&b.values).enumerate() {
                if x.to_bits() != y.to_bits() {
                    out.push((li, i));
                }
            }
        }
        Ok(out)
    }

    /// SHA-256 over the checkpoint encoding.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(to_bytes(self)))
    }
}
