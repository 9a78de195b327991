//! Tiny causal token model with low-rank adapters.
//!
//! The base model is a pre-norm transformer: token plus position
//! embeddings, `n_layers` blocks of causal self-attention and a GELU
//! feed-forward layer, a final layer norm and an output projection. The
//! four attention projections of every block and the output projection
//! carry a low-rank adapter `h = W0 x + α · up(down(x))` with `up`
//! zero-initialized, so a fresh model computes exactly the base function.
//! Only adapter entries are ever trained; everything else is frozen.
//!
//! Parameters are stored in single precision. Forward and backward passes
//! run in double precision.

mod checkpoint;
pub mod mat;
mod net;
mod sample;

use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trajectory::TokenMask;
use crate::vocab::Token;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST};
pub use net::{lora_forward, Decoder, Logits, Network};
pub use sample::{argmax_token, log_softmax_emittable, sample_token};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 64,
            context_len: 256,
            n_layers: 2,
            n_heads: 1,
            lora_rank: 8,
            lora_alpha: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 16 {
            return fail(format!("vocab_size {} < 16", self.vocab_size));
        }
        if self.embed_dim < 8 {
            return fail(format!("embed_dim {} < 8", self.embed_dim));
        }
        if self.context_len < 16 {
            return fail(format!("context_len {} < 16", self.context_len));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!("n_heads {} must divide embed_dim {}", self.n_heads, self.embed_dim));
        }
        let smallest = self.embed_dim.min(self.vocab_size);
        if self.lora_rank == 0 || self.lora_rank >= smallest {
            return fail(format!("lora_rank {} must be in 1..{}", self.lora_rank, smallest));
        }
        if !self.lora_alpha.is_finite() {
            return fail("lora_alpha must be finite".into());
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Row-major single-precision parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn random(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }
}

/// A frozen matrix with its trainable low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// Frozen base weight, `d_out × d_in`.
    pub base: Matrix,
    /// Up-projection, `d_out × r`; zero at initialization.
    pub up: Matrix,
    /// Down-projection, `r × d_in`.
    pub down: Matrix,
    pub alpha: f64,
}

impl LoraLayer {
    pub fn new(base: Matrix, rank: usize, alpha: f64, rng: &mut impl Rng) -> Self {
        let down = Matrix::random(rank, base.cols, 1.0 / (base.cols as f64).sqrt(), rng);
        let up = Matrix::zeros(base.rows, rank);
        Self { base, up, down, alpha }
    }

    pub fn rank(&self) -> usize {
        self.down.rows
    }

    pub fn d_in(&self) -> usize {
        self.base.cols
    }

    pub fn d_out(&self) -> usize {
        self.base.rows
    }
}

/// Frozen, non-adapted arrays of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub ffn_in: Matrix,
    pub ffn_in_bias: Matrix,
    pub ffn_out: Matrix,
    pub ffn_out_bias: Matrix,
}

/// Adapter slot of each attention projection within a block.
pub const ATTN_SLOTS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub config: PolicyConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    /// Per block `q, k, v, o`, then the output projection.
    pub adapters: Vec<LoraLayer>,
    pub version: u64,
}

/// Standard deviation of the frozen output projection. Kept small so an
/// untrained policy is close to uniform over the vocabulary.
const HEAD_INIT_STD: f64 = 0.02;

impl PolicyParameters {
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let f = config.ffn_dim();
        let proj_std = 1.0 / (d as f64).sqrt();
        let token_embedding = Matrix::random(config.vocab_size, d, 1.0, &mut rng);
        let position_embedding = Matrix::random(config.context_len, d, 0.5, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        let mut adapters = Vec::with_capacity(4 * config.n_layers + 1);
        for _ in 0..config.n_layers {
            for _ in ATTN_SLOTS {
                let base = Matrix::random(d, d, proj_std, &mut rng);
                adapters.push(LoraLayer::new(base, config.lora_rank, config.lora_alpha, &mut rng));
            }
            blocks.push(BlockWeights {
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                ffn_in: Matrix::random(f, d, proj_std, &mut rng),
                ffn_in_bias: Matrix::zeros(1, f),
                ffn_out: Matrix::random(d, f, 1.0 / (f as f64).sqrt(), &mut rng),
                ffn_out_bias: Matrix::zeros(1, d),
            });
        }
        let head = Matrix::random(config.vocab_size, d, HEAD_INIT_STD, &mut rng);
        adapters.push(LoraLayer::new(head, config.lora_rank, config.lora_alpha, &mut rng));
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_gain: Matrix::filled(1, d, 1.0),
            final_bias: Matrix::zeros(1, d),
            adapters,
            version: 0,
        })
    }

    pub fn head(&self) -> &LoraLayer {
        self.adapters.last().expect("output adapter")
    }

    /// Names and arrays of every frozen array, in checkpoint order.
    pub fn frozen_arrays(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend([
                (format!("block{l}.ln1_gain"), &b.ln1_gain),
                (format!("block{l}.ln1_bias"), &b.ln1_bias),
                (format!("block{l}.ln2_gain"), &b.ln2_gain),
                (format!("block{l}.ln2_bias"), &b.ln2_bias),
                (format!("block{l}.ffn_in"), &b.ffn_in),
                (format!("block{l}.ffn_in_bias"), &b.ffn_in_bias),
                (format!("block{l}.ffn_out"), &b.ffn_out),
                (format!("block{l}.ffn_out_bias"), &b.ffn_out_bias),
            ]);
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        for (i, a) in self.adapters.iter().enumerate() {
            out.push((format!("{}.base", adapter_name(&self.config, i)), &a.base));
        }
        out
    }

    /// Names and arrays of every trainable array, in gradient order.
    pub fn trainable_arrays(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(2 * self.adapters.len());
        for (i, a) in self.adapters.iter().enumerate() {
            let name = adapter_name(&self.config, i);
            out.push((format!("{name}.up"), &a.up));
            out.push((format!("{name}.down"), &a.down));
        }
        out
    }

    pub fn trainable_arrays_mut(&mut self) -> Vec<&mut Matrix> {
        self.adapters.iter_mut().flat_map(|a| [&mut a.up, &mut a.down]).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.iter().map(|a| a.up.len() + a.down.len()).sum()
    }

    /// SHA-256 over every frozen array; constant for a whole training run.
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.frozen_arrays() {
            h.update(name.as_bytes());
            for x in &m.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.frozen_arrays()
            .into_iter()
            .chain(self.trainable_arrays())
            .all(|(_, m)| m.data.iter().all(|x| x.is_finite()))
    }

    /// Fills every adapter (including `up`) with random entries. Used to
    /// move away from the zero-adapter point, e.g. for gradient checks.
    pub fn randomize_adapters(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in self.trainable_arrays_mut() {
            *m = Matrix::random(m.rows, m.cols, std, &mut rng);
        }
    }

    pub fn network(&self) -> Network {
        Network::new(self)
    }

    pub fn forward_logits(&self, context: &[Token]) -> Result<Logits> {
        self.network().forward_logits(context)
    }

    pub fn sequence_logprob(&self, stream: &[Token], mask: &TokenMask) -> Result<f64> {
        self.network().sequence_logprob(stream, mask)
    }

    pub fn backward(&self, stream: &[Token], mask: &TokenMask, weights: &[f64]) -> Result<GradientSet> {
        Ok(self.network().backward(stream, mask, weights)?.1)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }
}

pub fn adapter_name(config: &PolicyConfig, index: usize) -> String {
    if index == 4 * config.n_layers {
        "head".to_string()
    } else {
        format!("block{}.{}", index / 4, ATTN_SLOTS[index % 4])
    }
}

/// Frozen copy of the policy used as the old policy during rollouts.
#[derive(Debug, Clone)]
pub struct Snapshot(Arc<PolicyParameters>);

impl Snapshot {
    pub fn version(&self) -> u64 {
        self.0.version
    }
}

impl Deref for Snapshot {
    type Target = PolicyParameters;

    fn deref(&self) -> &PolicyParameters {
        &self.0
    }
}

/// Gradient of an objective with respect to each adapter's `up` and `down`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<LoraGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &PolicyParameters) -> Self {
        Self {
            grads: params
                .adapters
                .iter()
                .map(|a| LoraGrad { up: vec![0.0; a.up.len()], down: vec![0.0; a.down.len()] })
                .collect(),
        }
    }

    /// Arrays in the same order as [`PolicyParameters::trainable_arrays`].
    pub fn arrays(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.grads.iter().flat_map(|g| [&g.up, &g.down])
    }

    fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.grads.iter_mut().flat_map(|g| [&mut g.up, &mut g.down])
    }

    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.arrays_mut().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.arrays().all(|a| a.iter().all(|x| *x == 0.0))
    }

    pub fn all_finite(&self) -> bool {
        self.arrays().all(|a| a.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays().flat_map(|a| a.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arrays().flat_map(|a| a.iter().copied()).collect()
    }

    pub fn shapes_match(&self, params: &PolicyParameters) -> bool {
        self.grads.len() == params.adapters.len()
            && self
                .grads
                .iter()
                .zip(&params.adapters)
                .all(|(g, a)| g.up.len() == a.up.len() && g.down.len() == a.down.len())
    }
}
