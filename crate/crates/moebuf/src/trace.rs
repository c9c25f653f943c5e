//! Trace and report files.
//!
//! `plan.json` holds one entry per block with the gate matrix, the routing
//! plan and the buffer provenance. Gate matrices use the same schema the
//! `route` subcommand reads. `trace.csv` holds one row per attack iteration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use moebuf_core::attack::AttackTrace;
use moebuf_core::model::ForwardTrace;
use moebuf_core::routing::{route_sampled, route_unlimited, route_vanilla};
use moebuf_core::{BatchShape, ExpertBufferState, GateMatrix, Matrix, Rng, RoutingPlan, RoutingStrategy};
use serde::{Deserialize, Serialize};

use crate::error::{spec_err, Error, Result};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// On-disk gate matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateFile {
    pub schema_version: u32,
    pub batch: usize,
    pub seq_len: usize,
    pub experts: usize,
    pub rows: Vec<Vec<f64>>,
}

impl GateFile {
    pub fn from_gates(g: &GateMatrix) -> Self {
        let shape = g.shape();
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            batch: shape.batch,
            seq_len: shape.seq_len,
            experts: g.num_experts(),
            rows: g.rows().to_vec(),
        }
    }

    pub fn to_gates(&self) -> Result<GateMatrix> {
        if self.schema_version != TRACE_SCHEMA_VERSION {
            return Err(spec_err(format!(
                "gate file schema_version {} is not supported",
                self.schema_version
            )));
        }
        let shape = BatchShape::new(self.batch, self.seq_len)?;
        let probs = Matrix::from_rows(&self.rows)?;
        if probs.cols() != self.experts {
            return Err(spec_err(format!(
                "gate rows have {} columns, experts = {}",
                probs.cols(),
                self.experts
            )));
        }
        Ok(GateMatrix::new(shape, probs)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| spec_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| spec_err(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub gates: GateFile,
    pub plan: RoutingPlan,
    pub buffers: ExpertBufferState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub routing: RoutingStrategy,
    pub batch: Vec<Vec<u32>>,
    pub layers: Vec<LayerRecord>,
}

impl PlanFile {
    pub fn new(routing: RoutingStrategy, batch: &[Vec<u32>], trace: &ForwardTrace) -> Self {
        let layers = trace
            .layers
            .iter()
            .enumerate()
            .map(|(layer, t)| LayerRecord {
                layer,
                gates: GateFile::from_gates(&t.gates),
                plan: t.plan.clone(),
                buffers: t.buffers.clone(),
            })
            .collect();
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            routing,
            batch: batch.to_vec(),
            layers,
        }
    }
}

/// Output of the `route` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOutput {
    pub schema_version: u32,
    pub routing: RoutingStrategy,
    pub top_k: usize,
    pub plan: RoutingPlan,
    pub buffers: ExpertBufferState,
}

pub fn route_gates(gates: &GateMatrix, top_k: usize, routing: RoutingStrategy) -> Result<RouteOutput> {
    let (plan, buffers) = match routing {
        RoutingStrategy::Unlimited => route_unlimited(gates, top_k)?,
        RoutingStrategy::Vanilla { capacity } => route_vanilla(gates, top_k, capacity)?,
        RoutingStrategy::Sampled { capacity, seed } => {
            route_sampled(gates, top_k, capacity, &Rng::new(seed, moebuf_core::model::SAMPLED_ROUTING_STREAM))?
        }
    };
    Ok(RouteOutput {
        schema_version: TRACE_SCHEMA_VERSION,
        routing,
        top_k,
        plan,
        buffers,
    })
}

pub const TRACE_CSV_HEADER: &str = "iteration,loss,best_loss,p_target,p_competitor,drops_from_xstar";

pub fn attack_csv(trace: &AttackTrace) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in &trace.iterations {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.loss, r.best_loss, r.p_target, r.p_competitor, r.drops_from_victim
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}
