//! The sparse MoE layer: linear softmax gate, ReLU MLP experts, per-expert
//! buffer capacity and the drop-aware weighted combination of expert outputs.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::routing::RoutingPlan;
use crate::tensor::{softmax_row, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub experts: usize,
    pub top_k: usize,
    /// Capacity slack `C`; the per-expert buffer is `round(k * C * B * T / n)`.
    pub capacity_slack: f64,
    pub d_model: usize,
    pub d_ff: usize,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(param_err!("experts must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(param_err!(
                "top_k = {} must lie in 1..={} (the expert count)",
                self.top_k,
                self.experts
            ));
        }
        if !(self.capacity_slack.is_finite() && self.capacity_slack >= 0.0) {
            return Err(param_err!("capacity_slack must be finite and >= 0"));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(param_err!("d_model and d_ff must be at least 1"));
        }
        Ok(())
    }
}

/// `batch` sequences of `seq_len` tokens, flattened sequence-major: token
/// `t` of sequence `b` is row `b * seq_len + t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub batch: usize,
    pub seq_len: usize,
}

impl BatchShape {
    pub fn new(batch: usize, seq_len: usize) -> Result<Self> {
        if batch == 0 || seq_len == 0 {
            return Err(param_err!("batch shape {}x{} must be at least 1x1", batch, seq_len));
        }
        Ok(Self { batch, seq_len })
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Batch element that flattened token `token` belongs to.
    pub fn source_of(&self, token: usize) -> usize {
        token / self.seq_len
    }

    pub fn token_index(&self, element: usize, position: usize) -> usize {
        element * self.seq_len + position
    }
}

/// Per-expert buffer size `round(k * C * B * T / n)`, rounding half away from
/// zero. A result `>= B * T` never drops anything.
pub fn buffer_capacity(cfg: &MoEConfig, shape: BatchShape) -> usize {
    let assignments = (cfg.top_k * shape.tokens()) as f64;
    libm::round(assignments * cfg.capacity_slack / cfg.experts as f64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    /// `d_model x d_ff`
    pub w_in: Matrix,
    /// `d_ff x d_model`
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoELayerParams {
    /// `d_model x experts`, no bias.
    pub gate: Matrix,
    pub experts: Vec<ExpertParams>,
}

impl MoELayerParams {
    pub fn new(cfg: &MoEConfig, gate: Matrix, experts: Vec<ExpertParams>) -> Result<Self> {
        cfg.validate()?;
        if gate.rows() != cfg.d_model || gate.cols() != cfg.experts {
            return Err(shape_err!(
                "gate is {}x{}, expected {}x{}",
                gate.rows(),
                gate.cols(),
                cfg.d_model,
                cfg.experts
            ));
        }
        if experts.len() != cfg.experts {
            return Err(shape_err!("{} experts supplied, expected {}", experts.len(), cfg.experts));
        }
        for (i, e) in experts.iter().enumerate() {
            let in_ok = e.w_in.rows() == cfg.d_model && e.w_in.cols() == cfg.d_ff;
            let out_ok = e.w_out.rows() == cfg.d_ff && e.w_out.cols() == cfg.d_model;
            if !(in_ok && out_ok) {
                return Err(shape_err!("expert {} weights do not match d_model/d_ff", i));
            }
        }
        Ok(Self { gate, experts })
    }

    pub fn zeros(cfg: &MoEConfig) -> Result<Self> {
        let experts = (0..cfg.experts)
            .map(|_| ExpertParams {
                w_in: Matrix::zeros(cfg.d_model, cfg.d_ff),
                w_out: Matrix::zeros(cfg.d_ff, cfg.d_model),
            })
            .collect();
        Self::new(cfg, Matrix::zeros(cfg.d_model, cfg.experts), experts)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.gate.rows()
    }

    /// Gate distribution `softmax(z · W_gate)` for one token.
    pub fn gate_row(&self, z: &[f64]) -> Result<Vec<f64>> {
        softmax_row(&self.gate.vec_mul(z)?)
    }

    /// `relu(z · W_in) · W_out`
    pub fn expert_forward(&self, expert: usize, z: &[f64]) -> Result<Vec<f64>> {
        let params = self
            .experts
            .get(expert)
            .ok_or_else(|| param_err!("expert {} out of range (n = {})", expert, self.experts.len()))?;
        let mut hidden = params.w_in.vec_mul(z)?;
        for h in &mut hidden {
            *h = h.max(0.0);
        }
        params.w_out.vec_mul(&hidden)
    }

    /// Gate matrix rows for every token of `z`.
    pub fn gate_rows(&self, z: &Matrix) -> Result<Matrix> {
        let mut out = z.matmul(&self.gate)?;
        for i in 0..out.rows() {
            let p = softmax_row(out.row(i))?;
            out.row_mut(i).copy_from_slice(&p);
        }
        Ok(out)
    }

    /// Weighted sum of expert outputs over each token's non-dropped
    /// assignments. A token whose assignments were all dropped gets a zero
    /// row; the caller's residual connection carries it forward.
    pub fn combine(&self, z: &Matrix, plan: &RoutingPlan) -> Result<Matrix> {
        if z.rows() != plan.shape().tokens() || z.cols() != self.d_model() {
            return Err(shape_err!(
                "plan for {} tokens applied to a {}x{} input",
                plan.shape().tokens(),
                z.rows(),
                z.cols()
            ));
        }
        if plan.num_experts() != self.num_experts() {
            return Err(shape_err!(
                "plan routes over {} experts, layer has {}",
                plan.num_experts(),
                self.num_experts()
            ));
        }
        let mut out = Matrix::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            let mut acc = vec![0.0; z.cols()];
            for entry in plan.token_entries(i).iter().filter(|e| !e.dropped) {
                let y = self.expert_forward(entry.expert, z.row(i))?;
                for (a, v) in acc.iter_mut().zip(&y) {
                    *a += entry.weight * v;
                }
            }
            out.row_mut(i).copy_from_slice(&acc);
        }
        out.check_finite("combine")
    }
}
