//! Routing strategies: gate matrix in, routing plan and buffer occupancy out.
//!
//! Vanilla routing walks the flattened batch rank by rank: every token's
//! top-1 expert is assigned in batch order, then every token's top-2 expert,
//! and so on. Each expert owns one buffer of `capacity` slots shared by all
//! ranks; an assignment that finds its expert's buffer full is dropped, it is
//! never re-routed and never consumes a slot. Because earlier rows fill the
//! buffers first, one batch element can change which assignments of another
//! element survive.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::moe::BatchShape;
use crate::rng::Rng;
use crate::tensor::{topk_indices, Matrix};

/// Allowed deviation of a gate row's sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// `(B*T) x n` routing weights; row `i` is token `i`'s distribution over experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGateMatrix")]
pub struct GateMatrix {
    batch: usize,
    seq_len: usize,
    experts: usize,
    rows: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawGateMatrix {
    batch: usize,
    seq_len: usize,
    experts: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<RawGateMatrix> for GateMatrix {
    type Error = Error;

    fn try_from(raw: RawGateMatrix) -> Result<Self> {
        let shape = BatchShape::new(raw.batch, raw.seq_len)?;
        let probs = Matrix::from_rows(&raw.rows)?;
        if probs.cols() != raw.experts {
            return Err(shape_err!(
                "rows have {} columns but experts = {}",
                probs.cols(),
                raw.experts
            ));
        }
        GateMatrix::new(shape, probs)
    }
}

impl GateMatrix {
    pub fn new(shape: BatchShape, probs: Matrix) -> Result<Self> {
        if probs.rows() != shape.tokens() {
            return Err(shape_err!(
                "gate matrix has {} rows, batch shape {}x{} needs {}",
                probs.rows(),
                shape.batch,
                shape.seq_len,
                shape.tokens()
            ));
        }
        if probs.cols() == 0 {
            return Err(shape_err!("gate matrix needs at least one expert column"));
        }
        for i in 0..probs.rows() {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(param_err!("gate row {} is not a probability vector (sum {})", i, sum));
            }
        }
        let rows = (0..probs.rows()).map(|i| probs.row(i).to_vec()).collect();
        Ok(Self {
            batch: shape.batch,
            seq_len: shape.seq_len,
            experts: probs.cols(),
            rows,
        })
    }

    pub fn shape(&self) -> BatchShape {
        BatchShape {
            batch: self.batch,
            seq_len: self.seq_len,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.rows[token]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Reorders whole batch elements: element `j` of the result is element
    /// `perm[j]` of `self`.
    pub fn permute_elements(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.batch)?;
        let mut rows = Vec::with_capacity(self.rows.len());
        for &src in perm {
            rows.extend_from_slice(&self.rows[src * self.seq_len..(src + 1) * self.seq_len]);
        }
        Ok(Self { rows, ..self.clone() })
    }
}

/// One (token, rank) assignment. `rank` is 1-based; `source` is the batch
/// element the token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub token: usize,
    pub rank: usize,
    pub expert: usize,
    pub weight: f64,
    pub dropped: bool,
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingPlan {
    pub batch: usize,
    pub seq_len: usize,
    pub experts: usize,
    pub top_k: usize,
    pub capacity: usize,
    /// Token-major: entries `i*k .. (i+1)*k` belong to token `i`, in rank order.
    pub entries: Vec<RouteEntry>,
}

impl RoutingPlan {
    pub fn shape(&self) -> BatchShape {
        BatchShape {
            batch: self.batch,
            seq_len: self.seq_len,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts
    }

    pub fn token_entries(&self, token: usize) -> &[RouteEntry] {
        &self.entries[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn dropped(&self) -> impl Iterator<Item = &RouteEntry> {
        self.entries.iter().filter(|e| e.dropped)
    }

    /// Non-dropped assignments per expert.
    pub fn kept_per_expert(&self) -> Vec<usize> {
        let mut counts = vec![0; self.experts];
        for e in self.entries.iter().filter(|e| !e.dropped) {
            counts[e.expert] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferSlot {
    pub token: usize,
    pub source: usize,
    pub rank: usize,
}

/// Per-expert buffers in fill order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBufferState {
    pub capacity: usize,
    pub buffers: Vec<Vec<BufferSlot>>,
}

impl ExpertBufferState {
    fn new(experts: usize, capacity: usize) -> Self {
        Self {
            capacity,
            buffers: vec![Vec::new(); experts],
        }
    }

    pub fn occupancy(&self, expert: usize) -> usize {
        self.buffers[expert].len()
    }

    pub fn total_occupancy(&self) -> usize {
        self.buffers.iter().map(Vec::len).sum()
    }

    fn try_push(&mut self, expert: usize, slot: BufferSlot) -> bool {
        let buf = &mut self.buffers[expert];
        if buf.len() < self.capacity {
            buf.push(slot);
            true
        } else {
            false
        }
    }
}

/// Sequential rank-major fill shared by every strategy. `choices[i]` lists
/// token `i`'s experts in rank order.
fn fill_buffers(
    gates: &GateMatrix,
    choices: &[Vec<usize>],
    top_k: usize,
    capacity: usize,
) -> (RoutingPlan, ExpertBufferState) {
    let shape = gates.shape();
    let mut entries = Vec::with_capacity(choices.len() * top_k);
    for (token, experts) in choices.iter().enumerate() {
        let row = gates.row(token);
        let mass: f64 = experts.iter().map(|&e| row[e]).sum();
        for (h, &expert) in experts.iter().enumerate() {
            entries.push(RouteEntry {
                token,
                rank: h + 1,
                expert,
                weight: row[expert] / mass,
                dropped: true,
                source: shape.source_of(token),
            });
        }
    }

    let mut state = ExpertBufferState::new(gates.num_experts(), capacity);
    for h in 0..top_k {
        for token in 0..choices.len() {
            let entry = &mut entries[token * top_k + h];
            let slot = BufferSlot {
                token,
                source: entry.source,
                rank: entry.rank,
            };
            entry.dropped = !state.try_push(entry.expert, slot);
        }
    }

    let plan = RoutingPlan {
        batch: shape.batch,
        seq_len: shape.seq_len,
        experts: gates.num_experts(),
        top_k,
        capacity,
        entries,
    };
    (plan, state)
}

fn check_top_k(gates: &GateMatrix, top_k: usize) -> Result<()> {
    if top_k == 0 || top_k > gates.num_experts() {
        return Err(param_err!(
            "top_k = {} must lie in 1..={}",
            top_k,
            gates.num_experts()
        ));
    }
    Ok(())
}

/// Top-k routing with a per-expert buffer of `capacity` slots, filled rank by
/// rank in flattened batch order. Full buffers drop the assignment.
pub fn route_vanilla(
    gates: &GateMatrix,
    top_k: usize,
    capacity: usize,
) -> Result<(RoutingPlan, ExpertBufferState)> {
    check_top_k(gates, top_k)?;
    let choices = gates
        .rows()
        .iter()
        .map(|row| topk_indices(row, top_k))
        .collect::<Result<Vec<_>>>()?;
    Ok(fill_buffers(gates, &choices, top_k, capacity))
}

/// Vanilla routing with room for every token; nothing is ever dropped.
pub fn route_unlimited(gates: &GateMatrix, top_k: usize) -> Result<(RoutingPlan, ExpertBufferState)> {
    route_vanilla(gates, top_k, gates.shape().tokens())
}

/// Like [`route_vanilla`], but each token's experts are drawn from its gate
/// distribution without replacement instead of taken as the top-k.
///
/// Token `i` draws from `rng.fork(i)`, so its experts depend only on its own
/// gate row and the generator state, never on the other tokens in the batch.
pub fn route_sampled(
    gates: &GateMatrix,
    top_k: usize,
    capacity: usize,
    rng: &Rng,
) -> Result<(RoutingPlan, ExpertBufferState)> {
    check_top_k(gates, top_k)?;
    let choices = gates
        .rows()
        .iter()
        .enumerate()
        .map(|(i, row)| sample_without_replacement(row, top_k, &mut rng.fork(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(fill_buffers(gates, &choices, top_k, capacity))
}

fn sample_without_replacement(row: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut remaining: Vec<usize> = (0..row.len()).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let mass: f64 = remaining.iter().map(|&e| row[e]).sum();
        let pos = if mass > 0.0 {
            let u = rng.next_f64() * mass;
            let mut acc = 0.0;
            // rounding can leave u just above the final cumulative sum
            let mut chosen = remaining
                .iter()
                .rposition(|&e| row[e] > 0.0)
                .unwrap_or(remaining.len() - 1);
            for (p, &e) in remaining.iter().enumerate() {
                acc += row[e];
                if u < acc {
                    chosen = p;
                    break;
                }
            }
            chosen
        } else {
            rng.next_below(remaining.len())?
        };
        picked.push(remaining.remove(pos));
    }
    Ok(picked)
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(param_err!("permutation has length {}, expected {}", perm.len(), n));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(param_err!("not a permutation of 0..{}", n));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Reorders batch elements: `out[j] = batch[perm[j]]`.
pub fn apply_permutation<T: Clone>(batch: &[T], perm: &[usize]) -> Result<Vec<T>> {
    check_permutation(perm, batch.len())?;
    Ok(perm.iter().map(|&p| batch[p].clone()).collect())
}

/// Inverse of [`apply_permutation`].
pub fn undo_permutation<T: Clone>(permuted: &[T], perm: &[usize]) -> Result<Vec<T>> {
    check_permutation(perm, permuted.len())?;
    let mut out: Vec<Option<T>> = vec![None; permuted.len()];
    for (j, &p) in perm.iter().enumerate() {
        out[p] = Some(permuted[j].clone());
    }
    Ok(out.into_iter().flatten().collect())
}

/// Uniformly shuffles whole sequences; returns the shuffled batch and the
/// permutation (`shuffled[j] = batch[perm[j]]`).
pub fn shuffle_batch<T: Clone>(batch: &[T], rng: &mut Rng) -> Result<(Vec<T>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(param_err!("cannot shuffle an empty batch"));
    }
    let perm = rng.permutation(batch.len())?;
    Ok((apply_permutation(batch, &perm)?, perm))
}

/// Slots held by batch element `source`, per expert.
pub fn occupancy_by_source(state: &ExpertBufferState, source: usize) -> Vec<usize> {
    state
        .buffers
        .iter()
        .map(|buf| buf.iter().filter(|s| s.source == source).count())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gates(batch: usize, seq_len: usize, rows: &[Vec<f64>]) -> GateMatrix {
        GateMatrix::new(BatchShape::new(batch, seq_len).unwrap(), Matrix::from_rows(rows).unwrap())
            .unwrap()
    }

    /// Two sequences of two tokens, every token prefers e1.
    fn worked_example() -> GateMatrix {
        gates(2, 2, &vec![vec![0.8, 0.2]; 4])
    }

    #[test]
    fn first_buffer_fills_first() {
        let (plan, state) = route_vanilla(&worked_example(), 1, 2).unwrap();
        let kept: Vec<(usize, bool)> = plan.entries.iter().map(|e| (e.expert, e.dropped)).collect();
        assert_eq!(kept, vec![(0, false), (0, false), (0, true), (0, true)]);
        assert_eq!(state.occupancy(0), 2);
        assert_eq!(state.occupancy(1), 0);
        assert_eq!(occupancy_by_source(&state, 0), vec![2, 0]);
        assert_eq!(occupancy_by_source(&state, 1), vec![0, 0]);
    }

    #[test]
    fn enough_capacity_drops_nothing() {
        let (plan, _) = route_vanilla(&worked_example(), 1, 4).unwrap();
        assert_eq!(plan.dropped().count(), 0);
    }

    #[test]
    fn rank_two_blocked_by_later_rank_one() {
        // victim first; its tokens prefer e1 then e2, the adversary's prefer e2
        let g = gates(
            2,
            2,
            &[
                vec![0.7, 0.3],
                vec![0.6, 0.4],
                vec![0.1, 0.9],
                vec![0.2, 0.8],
            ],
        );
        let (plan, _) = route_vanilla(&g, 2, 2).unwrap();
        let victim_first = plan.token_entries(0);
        assert!(!victim_first[0].dropped && victim_first[0].expert == 0);
        assert!(victim_first[1].dropped && victim_first[1].expert == 1);
        assert!(!plan.token_entries(1)[0].dropped);
        assert!(plan.token_entries(1)[1].dropped);
    }

    #[test]
    fn provenance_follows_fill_order() {
        let g = gates(2, 1, &[vec![0.6, 0.4], vec![0.3, 0.7]]);
        let (_, state) = route_vanilla(&g, 2, 2).unwrap();
        assert_eq!(
            state.buffers[0],
            vec![
                BufferSlot { token: 0, source: 0, rank: 1 },
                BufferSlot { token: 1, source: 1, rank: 2 }
            ]
        );
    }

    #[test]
    fn zero_capacity_drops_everything() {
        let (plan, state) = route_vanilla(&worked_example(), 2, 0).unwrap();
        assert!(plan.entries.iter().all(|e| e.dropped));
        assert_eq!(state.total_occupancy(), 0);
    }

    #[test]
    fn unlimited_single_token_takes_argmax() {
        let g = gates(1, 1, &[vec![0.2, 0.5, 0.3]]);
        let (plan, _) = route_unlimited(&g, 1).unwrap();
        assert_eq!(plan.entries[0].expert, 1);
        assert_eq!(plan.entries[0].weight, 1.0);
    }

    #[test]
    fn weights_renormalize_over_selected() {
        let g = gates(1, 1, &[vec![0.5, 0.2, 0.3]]);
        let (plan, _) = route_unlimited(&g, 2).unwrap();
        let w: Vec<f64> = plan.entries.iter().map(|e| e.weight).collect();
        assert_eq!(w, vec![0.5 / 0.8, 0.3 / 0.8]);
    }

    #[test]
    fn sampled_one_hot_and_exhaustive() {
        let g = gates(1, 3, &vec![vec![0.0, 1.0, 0.0, 0.0]; 3]);
        for seed in 0..20 {
            let (plan, _) = route_sampled(&g, 1, 3, &Rng::new(seed, 0)).unwrap();
            assert!(plan.entries.iter().all(|e| e.expert == 1));
            let (plan, _) = route_sampled(&g, 4, 3, &Rng::new(seed, 0)).unwrap();
            for t in 0..3 {
                let mut experts: Vec<usize> = plan.token_entries(t).iter().map(|e| e.expert).collect();
                experts.sort_unstable();
                assert_eq!(experts, vec![0, 1, 2, 3]);
            }
        }
    }

    #[test]
    fn sampled_uniform_frequencies() {
        let tokens = 100_000;
        let g = gates(tokens, 1, &vec![vec![0.25; 4]; tokens]);
        let (plan, _) = route_sampled(&g, 1, tokens, &Rng::new(77, 3)).unwrap();
        let counts = plan.kept_per_expert();
        for c in counts {
            assert!((c as f64 / tokens as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn shuffle_single_element_is_identity() {
        let (out, perm) = shuffle_batch(&[42u32], &mut Rng::new(0, 0)).unwrap();
        assert_eq!((out, perm), (vec![42], vec![0]));
    }

    #[test]
    fn shuffle_permutation_frequencies() {
        let mut rng = Rng::new(5, 9);
        let mut counts = [0usize; 6];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for _ in 0..10_000 {
            let (_, perm) = shuffle_batch(&['a', 'b', 'c'], &mut rng).unwrap();
            let idx = perms.iter().position(|p| p[..] == perm[..]).unwrap();
            counts[idx] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 1.0 / 6.0).abs() < 0.02);
        }
    }

    #[test]
    fn undo_inverts_apply() {
        let batch = vec![10, 20, 30, 40];
        let perm = vec![2, 0, 3, 1];
        let shuffled = apply_permutation(&batch, &perm).unwrap();
        assert_eq!(shuffled, vec![30, 10, 40, 20]);
        assert_eq!(undo_permutation(&shuffled, &perm).unwrap(), batch);
        assert!(apply_permutation(&batch, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn rejects_bad_gate_rows() {
        let shape = BatchShape::new(1, 1).unwrap();
        assert!(GateMatrix::new(shape, Matrix::from_rows(&[vec![0.5, 0.4]]).unwrap()).is_err());
        assert!(GateMatrix::new(shape, Matrix::from_rows(&[vec![1.5, -0.5]]).unwrap()).is_err());
        assert!(GateMatrix::new(shape, Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap()).is_err());
        assert!(route_vanilla(&worked_example(), 3, 1).is_err());
    }
}
