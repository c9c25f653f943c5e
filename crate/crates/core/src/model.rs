//! Toy decoder-only transformer with MoE feed-forward blocks.
//!
//! Each block is pre-norm: `x += Attn(LN(x))` with single-head causal
//! attention that never looks across sequences, then `x += MoE(LN(x))` where
//! routing runs over the whole flattened batch. The shared expert buffers are
//! therefore the only path by which one sequence can influence another.
//!
//! Weights are a pure function of the config. They are drawn in
//! [`ModelConfig::matrix_shapes`] order from `Rng::new(seed, MODEL_STREAM)`,
//! each entry uniform on `[-sqrt(3), sqrt(3))` (unit variance) and scaled by
//! `1/sqrt(d_model)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, param_err, shape_err, Result};
use crate::moe::{buffer_capacity, BatchShape, ExpertParams, MoEConfig, MoELayerParams};
use crate::rng::Rng;
use crate::routing::{
    route_sampled, route_unlimited, route_vanilla, ExpertBufferState, GateMatrix, RoutingPlan,
};
use crate::tensor::{layer_norm_rows, softmax_row, Matrix};

/// PRNG stream used for weight initialisation.
pub const MODEL_STREAM: u64 = 0x006d_6f64_656c;
/// PRNG stream used by sampled routing inside a forward pass.
pub const SAMPLED_ROUTING_STREAM: u64 = 0x7361_6d70;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub experts: usize,
    pub top_k: usize,
    pub capacity_slack: f64,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            d_model: 32,
            vocab: 64,
            max_seq_len: 8,
            experts: 4,
            top_k: 2,
            capacity_slack: 0.8,
            d_ff: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn moe(&self) -> MoEConfig {
        MoEConfig {
            experts: self.experts,
            top_k: self.top_k,
            capacity_slack: self.capacity_slack,
            d_model: self.d_model,
            d_ff: self.d_ff,
        }
    }

    /// Checks every invariant; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("d_model", self.d_model),
            ("max_seq_len", self.max_seq_len),
            ("experts", self.experts),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(param_err!("{} must be at least 1", name));
            }
        }
        if self.vocab < 2 {
            return Err(param_err!("vocab must be at least 2"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(param_err!(
                "top_k = {} must lie in 1..={} (experts)",
                self.top_k,
                self.experts
            ));
        }
        if !(self.capacity_slack.is_finite() && self.capacity_slack >= 0.0) {
            return Err(param_err!("capacity_slack must be finite and >= 0"));
        }
        Ok(())
    }

    /// Names and shapes of every weight matrix, in initialisation and
    /// checkpoint order.
    pub fn matrix_shapes(&self) -> Vec<(String, usize, usize)> {
        let d = self.d_model;
        let mut shapes = vec![
            (String::from("embedding"), self.vocab, d),
            (String::from("positional"), self.max_seq_len, d),
        ];
        for b in 0..self.blocks {
            for name in ["wq", "wk", "wv", "wo"] {
                shapes.push((format!("block{b}.{name}"), d, d));
            }
            shapes.push((format!("block{b}.gate"), d, self.experts));
            for e in 0..self.experts {
                shapes.push((format!("block{b}.expert{e}.w_in"), d, self.d_ff));
                shapes.push((format!("block{b}.expert{e}.w_out"), self.d_ff, d));
            }
        }
        shapes.push((String::from("unembedding"), d, self.vocab));
        shapes
    }

    /// Vanilla routing with the buffer this config's slack gives `shape`.
    pub fn vanilla_for(&self, shape: BatchShape) -> RoutingStrategy {
        RoutingStrategy::Vanilla {
            capacity: buffer_capacity(&self.moe(), shape),
        }
    }
}

/// How the MoE layers assign tokens to experts during a forward pass.
/// Capacities are fixed per deployment, independent of the batch passed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutingStrategy {
    Unlimited,
    Vanilla { capacity: usize },
    Sampled { capacity: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attention: AttentionParams,
    pub moe: MoELayerParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    embedding: Matrix,
    positional: Matrix,
    blocks: Vec<Block>,
    unembedding: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub gates: GateMatrix,
    pub plan: RoutingPlan,
    pub buffers: ExpertBufferState,
}

/// Routing instrumentation for one forward pass, one entry per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub shape: BatchShape,
    /// `(B*T) x vocab`, sequence-major rows.
    pub logits: Matrix,
    pub trace: ForwardTrace,
}

impl ForwardOutput {
    /// Logits at the final position of batch element `element`.
    pub fn last_logits(&self, element: usize) -> Result<&[f64]> {
        if element >= self.shape.batch {
            return Err(param_err!(
                "batch element {} out of range (B = {})",
                element,
                self.shape.batch
            ));
        }
        let row = self.shape.token_index(element, self.shape.seq_len - 1);
        Ok(self.logits.row(row))
    }

    /// Next-token distribution for batch element `element`.
    pub fn next_token_distribution(&self, element: usize) -> Result<Vec<f64>> {
        softmax_row(self.last_logits(element)?)
    }
}

impl ToyModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed, MODEL_STREAM);
        let scale = libm::sqrt(3.0) / libm::sqrt(config.d_model as f64);
        let mut matrices = Vec::new();
        for (_, rows, cols) in config.matrix_shapes() {
            matrices.push(Matrix::from_fn(rows, cols, |_, _| {
                (rng.next_f64() * 2.0 - 1.0) * scale
            })?);
        }
        Self::from_matrices(config, matrices)
    }

    /// Rebuilds a model from matrices in [`ModelConfig::matrix_shapes`] order.
    pub fn from_matrices(config: ModelConfig, matrices: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = config.matrix_shapes();
        if matrices.len() != shapes.len() {
            return Err(shape_err!(
                "{} matrices supplied, config needs {}",
                matrices.len(),
                shapes.len()
            ));
        }
        for ((name, r, c), m) in shapes.iter().zip(&matrices) {
            if m.rows() != *r || m.cols() != *c {
                return Err(shape_err!(
                    "{} is {}x{}, expected {}x{}",
                    name,
                    m.rows(),
                    m.cols(),
                    r,
                    c
                ));
            }
        }

        let moe_cfg = config.moe();
        let mut it = matrices.into_iter();
        let mut next = || it.next().expect("length checked above");
        let embedding = next();
        let positional = next();
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let attention = AttentionParams {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
            };
            let gate = next();
            let experts = (0..config.experts)
                .map(|_| ExpertParams {
                    w_in: next(),
                    w_out: next(),
                })
                .collect();
            blocks.push(Block {
                attention,
                moe: MoELayerParams::new(&moe_cfg, gate, experts)?,
            });
        }
        let unembedding = next();
        Ok(Self {
            config,
            embedding,
            positional,
            blocks,
            unembedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// All weight matrices in [`ModelConfig::matrix_shapes`] order.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding, &self.positional];
        for b in &self.blocks {
            out.extend([&b.attention.wq, &b.attention.wk, &b.attention.wv, &b.attention.wo]);
            out.push(&b.moe.gate);
            for e in &b.moe.experts {
                out.push(&e.w_in);
                out.push(&e.w_out);
            }
        }
        out.push(&self.unembedding);
        out
    }

    pub fn validate_batch(&self, batch: &[Vec<u32>]) -> Result<BatchShape> {
        let seq_len = batch.first().map_or(0, Vec::len);
        if batch.is_empty() || seq_len == 0 {
            return Err(input_err!("batch must hold at least one non-empty sequence"));
        }
        if seq_len > self.config.max_seq_len {
            return Err(input_err!(
                "sequence length {} exceeds max_seq_len {}",
                seq_len,
                self.config.max_seq_len
            ));
        }
        for (b, seq) in batch.iter().enumerate() {
            if seq.len() != seq_len {
                return Err(input_err!(
                    "sequence {} has length {}, expected {}",
                    b,
                    seq.len(),
                    seq_len
                ));
            }
            if let Some(&bad) = seq.iter().find(|&&id| id as usize >= self.config.vocab) {
                return Err(input_err!(
                    "token id {} in sequence {} is outside the vocabulary (s = {})",
                    bad,
                    b,
                    self.config.vocab
                ));
            }
        }
        BatchShape::new(batch.len(), seq_len)
    }

    /// Batched forward pass returning logits for every position.
    pub fn forward(&self, batch: &[Vec<u32>], strategy: RoutingStrategy) -> Result<ForwardOutput> {
        let shape = self.validate_batch(batch)?;
        let d = self.config.d_model;
        let mut x = Matrix::zeros(shape.tokens(), d);
        for (b, seq) in batch.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                let row = x.row_mut(shape.token_index(b, t));
                let emb = self.embedding.row(id as usize);
                let pos = self.positional.row(t);
                for j in 0..d {
                    row[j] = emb[j] + pos[j];
                }
            }
        }

        let mut layers = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let attn = self.attention(&block.attention, &layer_norm_rows(&x), shape)?;
            add_in_place(&mut x, &attn);

            let h = layer_norm_rows(&x);
            let gates = GateMatrix::new(shape, block.moe.gate_rows(&h)?)?;
            let k = self.config.top_k;
            let (plan, buffers) = match strategy {
                RoutingStrategy::Unlimited => route_unlimited(&gates, k)?,
                RoutingStrategy::Vanilla { capacity } => route_vanilla(&gates, k, capacity)?,
                RoutingStrategy::Sampled { capacity, seed } => {
                    let rng = Rng::new(seed, SAMPLED_ROUTING_STREAM).fork(layer as u64);
                    route_sampled(&gates, k, capacity, &rng)?
                }
            };
            let moe_out = block.moe.combine(&h, &plan)?;
            add_in_place(&mut x, &moe_out);
            layers.push(LayerTrace {
                gates,
                plan,
                buffers,
            });
        }

        let logits = layer_norm_rows(&x).matmul(&self.unembedding)?;
        Ok(ForwardOutput {
            shape,
            logits,
            trace: ForwardTrace { layers },
        })
    }

    /// Single-head causal attention restricted to each sequence.
    fn attention(&self, p: &AttentionParams, h: &Matrix, shape: BatchShape) -> Result<Matrix> {
        let q = h.matmul(&p.wq)?;
        let k = h.matmul(&p.wk)?;
        let v = h.matmul(&p.wv)?;
        let d = self.config.d_model;
        let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);
        let mut mixed = Matrix::zeros(shape.tokens(), d);
        for b in 0..shape.batch {
            for t in 0..shape.seq_len {
                let qi = shape.token_index(b, t);
                let scores: Vec<f64> = (0..=t)
                    .map(|u| {
                        let ki = shape.token_index(b, u);
                        dot(q.row(qi), k.row(ki)) * inv_sqrt_d
                    })
                    .collect();
                let weights = softmax_row(&scores)?;
                let out = mixed.row_mut(qi);
                for (u, w) in weights.iter().enumerate() {
                    let vi = v.row(shape.token_index(b, u));
                    for j in 0..d {
                        out[j] += w * vi[j];
                    }
                }
            }
        }
        mixed.matmul(&p.wo)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_in_place(x: &mut Matrix, delta: &Matrix) {
    for i in 0..x.rows() {
        let d = delta.row(i).to_vec();
        for (a, b) in x.row_mut(i).iter_mut().zip(d) {
            *a += b;
        }
    }
}
