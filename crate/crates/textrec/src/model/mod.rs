//! Autoregressive transformer decoder with optional low-rank adapters.
//!
//! Pre-norm decoder blocks, causal masking, learned positional embeddings,
//! GELU feed-forward. Adapters add `(alpha/r) * B*A*x` on the configured
//! attention projections; `B` is zero-initialized so an untrained adapter is
//! an exact no-op. Training math runs at single precision; every routine is
//! generic over `f32`/`f64` so gradient checks can run at double precision.

mod checkpoint;
mod net;
mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{forward, log_softmax_row, loss, loss_and_grad, next_token_log_probs};
pub use ops::adapter_contribution;

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut2, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type for model math. `f32` is the training dtype; `f64` exists for
/// finite-difference verification.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTE_LEN: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_LEN: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_LEN: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Cast an `f64` constant into the model scalar type.
pub(crate) fn t<T: Scalar>(x: f64) -> T {
    T::from(x).expect("scalar conversion")
}

/// Attention projections that can carry a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterSite {
    Q,
    K,
    V,
    O,
}

impl AdapterSite {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterSite::Q => "q",
            AdapterSite::K => "k",
            AdapterSite::V => "v",
            AdapterSite::O => "o",
        }
    }
    pub const ALL: [AdapterSite; 4] = [AdapterSite::Q, AdapterSite::K, AdapterSite::V, AdapterSite::O];
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Adapter rank; 0 disables adapters.
    #[serde(default = "default_adapter_rank")]
    pub adapter_rank: usize,
    #[serde(default = "default_adapter_alpha")]
    pub adapter_alpha: f64,
    #[serde(default = "default_adapter_targets")]
    pub adapter_targets: Vec<AdapterSite>,
}

fn default_max_len() -> usize {
    256
}
fn default_adapter_rank() -> usize {
    8
}
fn default_adapter_alpha() -> f64 {
    16.0
}
fn default_adapter_targets() -> Vec<AdapterSite> {
    vec![AdapterSite::Q, AdapterSite::V]
}

impl Default for ModelConfig {
    /// Desk-scale defaults: a model small enough to train on one CPU.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8192,
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            d_ff: 1024,
            max_len: 256,
            dropout: 0.0,
            adapter_rank: 8,
            adapter_alpha: 16.0,
            adapter_targets: default_adapter_targets(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        if self.vocab_size < 4 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::config(
                "vocab_size, n_layers, and d_ff must be positive (vocab >= 4)",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.adapter_alpha <= 0.0 {
            return Err(Error::config("adapter_alpha must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for site in &self.adapter_targets {
            if !seen.insert(*site) {
                return Err(Error::config(format!(
                    "duplicate adapter target '{}'",
                    site.tag()
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn adapters_enabled(&self) -> bool {
        self.adapter_rank > 0 && !self.adapter_targets.is_empty()
    }

    pub fn adapter_scale(&self) -> f64 {
        if self.adapter_rank == 0 {
            0.0
        } else {
            self.adapter_alpha / self.adapter_rank as f64
        }
    }

    /// Every tensor name with its shape, the single source of truth shared by
    /// initialization and checkpoint validation. Adapter factors are stored
    /// row-convention: `lora_a` is `[d_in, r]`, `lora_b` is `[r, d_out]`.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.d_model;
        let r = self.adapter_rank;
        let mut shapes = BTreeMap::new();
        shapes.insert("tok_emb".to_string(), vec![self.vocab_size, d]);
        shapes.insert("pos_emb".to_string(), vec![self.max_len, d]);
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            shapes.insert(format!("{p}.ln1.g"), vec![d]);
            shapes.insert(format!("{p}.ln1.b"), vec![d]);
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.insert(format!("{p}.attn.{w}"), vec![d, d]);
            }
            if self.adapters_enabled() {
                for site in &self.adapter_targets {
                    shapes.insert(format!("{p}.attn.{}.lora_a", site.tag()), vec![d, r]);
                    shapes.insert(format!("{p}.attn.{}.lora_b", site.tag()), vec![r, d]);
                }
            }
            shapes.insert(format!("{p}.ln2.g"), vec![d]);
            shapes.insert(format!("{p}.ln2.b"), vec![d]);
            shapes.insert(format!("{p}.ffn.w1"), vec![d, self.d_ff]);
            shapes.insert(format!("{p}.ffn.b1"), vec![self.d_ff]);
            shapes.insert(format!("{p}.ffn.w2"), vec![self.d_ff, d]);
            shapes.insert(format!("{p}.ffn.b2"), vec![d]);
        }
        shapes.insert("final_ln.g".to_string(), vec![d]);
        shapes.insert("final_ln.b".to_string(), vec![d]);
        shapes.insert("out_proj".to_string(), vec![d, self.vocab_size]);
        shapes
    }
}

fn is_adapter_tensor(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Named model tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// Random initialization. Base weights draw from N(0, 0.02); norm gains
    /// start at one, biases and adapter `B` factors at zero, and adapter `A`
    /// factors draw from N(0, 0.02) on a separate stream so the base weights
    /// are identical whether or not adapters are configured.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut base_rng = ChaCha20Rng::seed_from_u64(seed);
        let mut adapter_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6164_6170_7465_7273);
        let normal = Normal::new(0.0f64, 0.02).expect("valid normal");
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.expected_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".g") {
                vec![T::one(); n]
            } else if name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with(".lora_b")
            {
                vec![T::zero(); n]
            } else if name.ends_with(".lora_a") {
                (0..n).map(|_| t(normal.sample(&mut adapter_rng))).collect()
            } else {
                (0..n).map(|_| t(normal.sample(&mut base_rng))).collect()
            };
            tensors.insert(name, ArrayD::from_shape_vec(shape, data).expect("shape"));
        }
        Ok(ParamSet { tensors })
    }

    /// Zero tensors with the same names and shapes; the gradient container.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(name, tensor)| {
                    (name.clone(), ArrayD::zeros(tensor.raw_dim()))
                })
                .collect(),
        }
    }

    /// Wrap externally produced tensors (checkpoint load), verifying names,
    /// shapes, and finiteness against the config.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, ArrayD<T>>) -> Result<Self> {
        let expected = cfg.expected_shapes();
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => {
                    return Err(Error::data(format!("checkpoint is missing tensor '{name}'")))
                }
                Some(tensor) if tensor.shape() != shape.as_slice() => {
                    return Err(Error::data(format!(
                        "tensor '{name}' has shape {:?}, config expects {:?}",
                        tensor.shape(),
                        shape
                    )));
                }
                _ => {}
            }
        }
        for name in tensors.keys() {
            if !expected.contains_key(name) {
                return Err(Error::data(format!(
                    "checkpoint carries unexpected tensor '{name}'"
                )));
            }
        }
        let set = ParamSet { tensors };
        if !set.all_finite() {
            return Err(Error::Numerical(
                "checkpoint contains non-finite parameter values".to_string(),
            ));
        }
        Ok(set)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|tensor| tensor.iter().all(|v| v.is_finite()))
    }

    pub fn tensors(&self) -> &BTreeMap<String, ArrayD<T>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, ArrayD<T>> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor '{name}'"))
    }

    pub(crate) fn mat(&self, name: &str) -> ArrayView2<'_, T> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("tensor '{name}' is not 2-d"))
    }

    pub(crate) fn vec1(&self, name: &str) -> ArrayView1<'_, T> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("tensor '{name}' is not 1-d"))
    }

    pub(crate) fn mat_mut(&mut self, name: &str) -> ArrayViewMut2<'_, T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor '{name}'"))
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("tensor '{name}' is not 2-d"))
    }

    /// Names of the tensors the optimizer may update. With `adapters_only`
    /// set, exactly the adapter A/B factors; otherwise every tensor.
    pub fn trainable_names(&self, cfg: &ModelConfig, adapters_only: bool) -> Result<Vec<String>> {
        if adapters_only {
            if !cfg.adapters_enabled() {
                return Err(Error::config(
                    "adapters_only training requested but adapters are disabled (rank 0 or no targets)",
                ));
            }
            Ok(self
                .tensors
                .keys()
                .filter(|name| is_adapter_tensor(name))
                .cloned()
                .collect())
        } else {
            Ok(self.tensors.keys().cloned().collect())
        }
    }

    /// Whether decoupled weight decay applies: base weight matrices only,
    /// never adapter factors or norm/bias vectors.
    pub fn is_decayed(name: &str) -> bool {
        !(is_adapter_tensor(name)
            || name.ends_with(".g")
            || name.ends_with(".b")
            || name.ends_with(".b1")
            || name.ends_with(".b2"))
    }
}

/// A rectangular training batch: right-padded token ids plus a {0,1} mask
/// that is 1 exactly on output-region tokens and the end marker.
#[derive(Debug, Clone)]
pub struct Batch {
    pub token_ids: ndarray::Array2<u32>,
    pub loss_mask: ndarray::Array2<u8>,
}

impl Batch {
    /// Build from `(token ids, index of first output token)` pairs with
    /// dynamic padding to the longest sequence.
    pub fn from_examples(examples: &[(Vec<u32>, usize)]) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::data("cannot build an empty batch"));
        }
        let seq = examples.iter().map(|(ids, _)| ids.len()).max().unwrap();
        let mut token_ids = ndarray::Array2::<u32>::from_elem((examples.len(), seq), crate::tokenizer::PAD_ID);
        let mut loss_mask = ndarray::Array2::<u8>::zeros((examples.len(), seq));
        for (row, (ids, output_start)) in examples.iter().enumerate() {
            if *output_start == 0 || *output_start >= ids.len() {
                return Err(Error::data(format!(
                    "output region must start inside the sequence (start {output_start}, len {})",
                    ids.len()
                )));
            }
            for (col, &id) in ids.iter().enumerate() {
                token_ids[[row, col]] = id;
            }
            for col in *output_start..ids.len() {
                loss_mask[[row, col]] = 1;
            }
        }
        Ok(Batch {
            token_ids,
            loss_mask,
        })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.token_ids.dim() != self.loss_mask.dim() {
            return Err(Error::data("token/mask shape mismatch"));
        }
        let (_, seq) = self.token_ids.dim();
        if seq > cfg.max_len {
            return Err(Error::data(format!(
                "sequence length {seq} exceeds max_len {}",
                cfg.max_len
            )));
        }
        if self.token_ids.iter().any(|&id| id as usize >= cfg.vocab_size) {
            return Err(Error::data("token id out of vocabulary range"));
        }
        if self.loss_mask.iter().any(|&m| m > 1) {
            return Err(Error::data("loss mask must be 0/1"));
        }
        Ok(())
    }

    pub fn mask_count(&self) -> usize {
        self.loss_mask.iter().map(|&m| m as usize).sum()
    }
}
