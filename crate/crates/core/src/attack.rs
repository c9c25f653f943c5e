//! Black-box random search over adversarial batch-mates.
//!
//! The adversary controls every batch element except the victim `x*` and
//! searches for token sequences whose routing fills the expert buffers the
//! victim needs. [`RandomSearch`] is the accept/reject loop: evaluate the
//! working batch, keep it if its loss is strictly below the best seen so far,
//! otherwise restore the best, then replace `r` random positions in every
//! adversarial sequence with random vocabulary ids.
//!
//! Two objectives share the loop. The integrity objective minimises the
//! margin `p[y] - max_{j != y} p[j]` on the victim's next-token distribution
//! and succeeds once it is negative. The denial objective minimises the
//! number of victim tokens a chosen expert processes in a chosen layer and
//! succeeds once that count is zero.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::model::{ForwardOutput, ForwardTrace, RoutingStrategy, ToyModel};
use crate::rng::Rng;
use crate::routing::occupancy_by_source;
use crate::tensor::{argmax, softmax_row};

/// PRNG stream for the adversary's initialisation and proposals.
pub const ATTACK_STREAM: u64 = 0x6174_7461_636b;

/// `scores[y] - max_{j != y} scores[j]`; negative exactly when `y` is not the argmax.
pub fn margin_loss(scores: &[f64], target: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Err(param_err!("margin needs at least two outcomes"));
    }
    if target >= scores.len() {
        return Err(param_err!("target {} outside 0..{}", target, scores.len()));
    }
    let competitor = scores
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(scores[target] - competitor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Integrity,
    Denial { layer: usize, expert: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScale {
    #[default]
    Probability,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Iteration budget `M`.
    pub iterations: usize,
    /// Positions replaced in each adversarial sequence per iteration, `r`.
    pub replace_per_seq: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Where `x*` sits in the batch.
    pub target_position: usize,
    pub seed: u64,
    pub objective: Objective,
    pub loss_scale: LossScale,
    /// Start the best-so-far loss at 999 instead of the first evaluation.
    pub sentinel_init: bool,
}

impl AttackConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(param_err!("batch_size must be at least 2 (one victim, one adversary)"));
        }
        if self.seq_len == 0 {
            return Err(param_err!("seq_len must be at least 1"));
        }
        if self.replace_per_seq == 0 || self.replace_per_seq > self.seq_len {
            return Err(param_err!(
                "replace_per_seq = {} must lie in 1..={} (seq_len)",
                self.replace_per_seq,
                self.seq_len
            ));
        }
        if self.target_position >= self.batch_size {
            return Err(param_err!(
                "target_position = {} must lie in 0..{} (batch_size)",
                self.target_position,
                self.batch_size
            ));
        }
        if vocab < 2 {
            return Err(param_err!("vocabulary must hold at least two tokens"));
        }
        Ok(())
    }
}

/// The victim input `x*` and the next token `y` it should produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Victim {
    pub tokens: Vec<u32>,
    pub target: u32,
}

/// Inserts `victim` among the adversarial sequences at `position`.
pub fn assemble_batch(adversarial: &[Vec<u32>], victim: &[u32], position: usize) -> Vec<Vec<u32>> {
    let mut batch = adversarial.to_vec();
    batch.insert(position.min(batch.len()), victim.to_vec());
    batch
}

/// Victim-side measurements from one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub margin: f64,
    pub p_target: f64,
    pub p_competitor: f64,
    pub predicted: usize,
    /// Dropped assignments of victim tokens, summed over layers.
    pub drops_from_victim: usize,
    /// `[layer][expert]` slots held by victim tokens.
    pub victim_occupancy: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub loss: f64,
    pub best_loss: f64,
    pub accepted: bool,
    pub p_target: f64,
    pub p_competitor: f64,
    pub drops_from_victim: usize,
    pub victim_occupancy: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub objective: Objective,
    pub iterations: Vec<IterationRecord>,
    pub initial_adversarial: Vec<Vec<u32>>,
    pub best_adversarial: Vec<Vec<u32>>,
    pub best_loss: Option<f64>,
    pub success: bool,
    /// First iteration whose accepted batch met the success condition.
    pub iterations_to_success: Option<usize>,
}

/// Number of victim tokens whose assignment to `(layer, expert)` survived.
pub fn denial_count(trace: &ForwardTrace, layer: usize, expert: usize, victim: usize) -> Result<usize> {
    let lt = trace
        .layers
        .get(layer)
        .ok_or_else(|| param_err!("layer {} out of range ({} layers)", layer, trace.layers.len()))?;
    if expert >= lt.buffers.buffers.len() {
        return Err(param_err!("expert {} out of range", expert));
    }
    if victim >= lt.plan.batch {
        return Err(param_err!("batch element {} out of range", victim));
    }
    Ok(occupancy_by_source(&lt.buffers, victim)[expert])
}

/// Accept/reject loop state. [`RandomSearch::run`] drives it to completion;
/// [`RandomSearch::select`] and [`RandomSearch::propose`] expose the two
/// halves of one iteration for inspection.
pub struct RandomSearch<'a> {
    model: &'a ToyModel,
    strategy: RoutingStrategy,
    victim: &'a Victim,
    cfg: AttackConfig,
    rng: Rng,
    current: Vec<Vec<u32>>,
    best: Vec<Vec<u32>>,
    best_loss: Option<f64>,
    last_proposal: Vec<(usize, usize)>,
    trace: AttackTrace,
}

impl<'a> RandomSearch<'a> {
    pub fn new(
        model: &'a ToyModel,
        strategy: RoutingStrategy,
        victim: &'a Victim,
        cfg: AttackConfig,
    ) -> Result<Self> {
        let vocab = model.config().vocab;
        cfg.validate(vocab)?;
        if victim.tokens.len() != cfg.seq_len {
            return Err(param_err!(
                "victim has {} tokens, attack expects seq_len {}",
                victim.tokens.len(),
                cfg.seq_len
            ));
        }
        if victim.target as usize >= vocab {
            return Err(param_err!("target id {} outside the vocabulary", victim.target));
        }
        if let Objective::Denial { layer, expert } = cfg.objective {
            if layer >= model.config().blocks || expert >= model.config().experts {
                return Err(param_err!("denial target ({}, {}) out of range", layer, expert));
            }
        }
        let mut rng = Rng::new(cfg.seed, ATTACK_STREAM);
        let mut initial = Vec::with_capacity(cfg.batch_size - 1);
        for _ in 0..cfg.batch_size - 1 {
            let seq = (0..cfg.seq_len)
                .map(|_| rng.next_below(vocab).map(|v| v as u32))
                .collect::<Result<Vec<_>>>()?;
            initial.push(seq);
        }
        let best_loss = cfg.sentinel_init.then_some(999.0);
        Ok(Self {
            model,
            strategy,
            victim,
            cfg,
            rng,
            current: initial.clone(),
            best: initial.clone(),
            best_loss,
            last_proposal: Vec::new(),
            trace: AttackTrace {
                objective: cfg.objective,
                iterations: Vec::new(),
                initial_adversarial: initial.clone(),
                best_adversarial: initial,
                best_loss: None,
                success: false,
                iterations_to_success: None,
            },
        })
    }

    pub fn current(&self) -> &[Vec<u32>] {
        &self.current
    }

    pub fn best(&self) -> &[Vec<u32>] {
        &self.best
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best_loss
    }

    /// `(sequence, position)` pairs rewritten by the latest proposal.
    pub fn last_proposal(&self) -> &[(usize, usize)] {
        &self.last_proposal
    }

    pub fn iterations_done(&self) -> usize {
        self.trace.iterations.len()
    }

    pub fn evaluate(&self, adversarial: &[Vec<u32>]) -> Result<Evaluation> {
        let batch = assemble_batch(adversarial, &self.victim.tokens, self.cfg.target_position);
        let out = self.model.forward(&batch, self.strategy)?;
        evaluate_victim(
            &out,
            self.cfg.target_position,
            self.victim.target as usize,
            self.cfg.objective,
            self.cfg.loss_scale,
        )
    }

    fn succeeded(&self, loss: f64) -> bool {
        match self.cfg.objective {
            Objective::Integrity => loss < 0.0,
            Objective::Denial { .. } => loss <= 0.0,
        }
    }

    /// Evaluates the working batch and applies the accept/reject rule.
    pub fn select(&mut self) -> Result<&IterationRecord> {
        let eval = self.evaluate(&self.current)?;
        let accepted = self.best_loss.is_none_or(|best| eval.loss < best);
        if accepted {
            self.best_loss = Some(eval.loss);
            self.best.clone_from(&self.current);
        } else {
            self.current.clone_from(&self.best);
        }
        let iteration = self.trace.iterations.len() + 1;
        let best_loss = self.best_loss.unwrap_or(eval.loss);
        if accepted && self.trace.iterations_to_success.is_none() && self.succeeded(eval.loss) {
            self.trace.iterations_to_success = Some(iteration);
        }
        self.trace.iterations.push(IterationRecord {
            iteration,
            loss: eval.loss,
            best_loss,
            accepted,
            p_target: eval.p_target,
            p_competitor: eval.p_competitor,
            drops_from_victim: eval.drops_from_victim,
            victim_occupancy: eval.victim_occupancy,
        });
        Ok(self.trace.iterations.last().expect("just pushed"))
    }

    /// Replaces `r` distinct random positions in every adversarial sequence.
    pub fn propose(&mut self) -> Result<()> {
        let vocab = self.model.config().vocab;
        self.last_proposal.clear();
        for (s, seq) in self.current.iter_mut().enumerate() {
            for pos in self.rng.choose_distinct(self.cfg.seq_len, self.cfg.replace_per_seq)? {
                seq[pos] = self.rng.next_below(vocab)? as u32;
                self.last_proposal.push((s, pos));
            }
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<()> {
        self.select()?;
        self.propose()
    }

    pub fn run(mut self) -> Result<(Vec<Vec<u32>>, AttackTrace)> {
        for _ in 0..self.cfg.iterations {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(mut self) -> (Vec<Vec<u32>>, AttackTrace) {
        let evaluated = !self.trace.iterations.is_empty();
        self.trace.best_loss = if evaluated { self.best_loss } else { None };
        self.trace.success = evaluated && self.best_loss.is_some_and(|l| self.succeeded(l));
        self.trace.best_adversarial.clone_from(&self.best);
        (self.best, self.trace)
    }
}

/// Victim-side loss and instrumentation for a forward output.
pub fn evaluate_victim(
    out: &ForwardOutput,
    victim: usize,
    target: usize,
    objective: Objective,
    scale: LossScale,
) -> Result<Evaluation> {
    let logits = out.last_logits(victim)?;
    let probs = softmax_row(logits)?;
    let margin = margin_loss(&probs, target)?;
    let p_target = probs[target];
    let p_competitor = p_target - margin;
    let loss = match objective {
        Objective::Integrity => match scale {
            LossScale::Probability => margin,
            LossScale::Logit => margin_loss(logits, target)?,
        },
        Objective::Denial { layer, expert } => denial_count(&out.trace, layer, expert, victim)? as f64,
    };
    let mut drops = 0;
    let mut occupancy = Vec::with_capacity(out.trace.layers.len());
    for layer in &out.trace.layers {
        drops += layer.plan.dropped().filter(|e| e.source == victim).count();
        occupancy.push(occupancy_by_source(&layer.buffers, victim));
    }
    Ok(Evaluation {
        loss,
        margin,
        p_target,
        p_competitor,
        predicted: argmax(&probs).unwrap_or(0),
        drops_from_victim: drops,
        victim_occupancy: occupancy,
    })
}

/// Random search with the integrity (margin) objective.
pub fn random_search(
    model: &ToyModel,
    strategy: RoutingStrategy,
    victim: &Victim,
    cfg: AttackConfig,
) -> Result<(Vec<Vec<u32>>, AttackTrace)> {
    let cfg = AttackConfig {
        objective: Objective::Integrity,
        ..cfg
    };
    RandomSearch::new(model, strategy, victim, cfg)?.run()
}

/// The same loop minimising the victim's token count at one expert.
pub fn random_search_denial(
    model: &ToyModel,
    strategy: RoutingStrategy,
    victim: &Victim,
    cfg: AttackConfig,
) -> Result<(Vec<Vec<u32>>, AttackTrace)> {
    if !matches!(cfg.objective, Objective::Denial { .. }) {
        return Err(param_err!("denial search needs a denial objective"));
    }
    RandomSearch::new(model, strategy, victim, cfg)?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub tokens: Vec<u32>,
    pub expected: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub tokens: Vec<u32>,
    pub expected: u32,
    /// Probe alone in a batch of one, same routing strategy.
    pub p_clean: f64,
    pub p_attacked: f64,
    pub delta: f64,
    pub predicted: u32,
    pub flipped: bool,
}

/// Batches each probe with `adversarial` at `position` and compares the
/// expected token's probability with the probe's solo run.
pub fn transfer_eval(
    model: &ToyModel,
    strategy: RoutingStrategy,
    adversarial: &[Vec<u32>],
    probes: &[Probe],
    position: usize,
) -> Result<Vec<TransferRow>> {
    let mut rows = Vec::with_capacity(probes.len());
    for probe in probes {
        let expected = probe.expected as usize;
        let clean = model
            .forward(core::slice::from_ref(&probe.tokens), strategy)?
            .next_token_distribution(0)?;
        if expected >= clean.len() {
            return Err(param_err!("expected id {} outside the vocabulary", expected));
        }
        let batch = assemble_batch(adversarial, &probe.tokens, position);
        let attacked = model.forward(&batch, strategy)?.next_token_distribution(position.min(adversarial.len()))?;
        let predicted = argmax(&attacked).unwrap_or(0);
        rows.push(TransferRow {
            tokens: probe.tokens.clone(),
            expected: probe.expected,
            p_clean: clean[expected],
            p_attacked: attacked[expected],
            delta: attacked[expected] - clean[expected],
            predicted: predicted as u32,
            flipped: predicted != expected,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::vec;

    #[test]
    fn margin_examples() {
        assert!((margin_loss(&[0.7, 0.3], 0).unwrap() - 0.4).abs() < 1e-15);
        assert!((margin_loss(&[0.3, 0.7], 0).unwrap() + 0.4).abs() < 1e-15);
        assert_eq!(margin_loss(&[0.25; 4], 2).unwrap(), 0.0);
        assert!(margin_loss(&[1.0], 0).is_err());
        assert!(margin_loss(&[0.5, 0.5], 2).is_err());
    }

    fn setup() -> (ToyModel, Victim, AttackConfig) {
        let cfg = ModelConfig {
            blocks: 1,
            d_model: 8,
            vocab: 16,
            max_seq_len: 4,
            experts: 3,
            top_k: 1,
            capacity_slack: 1.0,
            d_ff: 8,
            seed: 1,
        };
        let model = ToyModel::init(cfg).unwrap();
        let victim = Victim {
            tokens: vec![1, 2, 3, 4],
            target: 0,
        };
        let attack = AttackConfig {
            iterations: 0,
            replace_per_seq: 2,
            batch_size: 3,
            seq_len: 4,
            target_position: 2,
            seed: 5,
            objective: Objective::Integrity,
            loss_scale: LossScale::Probability,
            sentinel_init: false,
        };
        (model, victim, attack)
    }

    #[test]
    fn zero_iterations_returns_initial() {
        let (model, victim, cfg) = setup();
        let (best, trace) = random_search(&model, RoutingStrategy::Unlimited, &victim, cfg).unwrap();
        assert!(trace.iterations.is_empty());
        assert_eq!(best, trace.initial_adversarial);
        assert!(!trace.success);
    }

    #[test]
    fn config_validation() {
        let (model, victim, cfg) = setup();
        for bad in [
            AttackConfig { replace_per_seq: 0, ..cfg },
            AttackConfig { replace_per_seq: 5, ..cfg },
            AttackConfig { target_position: 3, ..cfg },
            AttackConfig { seq_len: 3, ..cfg },
            AttackConfig { batch_size: 1, target_position: 0, ..cfg },
        ] {
            assert!(RandomSearch::new(&model, RoutingStrategy::Unlimited, &victim, bad).is_err());
        }
        let denial = AttackConfig {
            objective: Objective::Denial { layer: 1, expert: 0 },
            ..cfg
        };
        assert!(RandomSearch::new(&model, RoutingStrategy::Unlimited, &victim, denial).is_err());
        assert!(random_search_denial(&model, RoutingStrategy::Unlimited, &victim, cfg).is_err());
    }

    #[test]
    fn sentinel_and_first_loss_agree() {
        let (model, victim, cfg) = setup();
        let strategy = RoutingStrategy::Vanilla { capacity: 3 };
        let cfg = AttackConfig { iterations: 30, ..cfg };
        let a = random_search(&model, strategy, &victim, cfg).unwrap();
        let b = random_search(&model, strategy, &victim, AttackConfig { sentinel_init: true, ..cfg }).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.best_loss, b.1.best_loss);
    }

    #[test]
    fn denial_count_errors() {
        let (model, _, _) = setup();
        let out = model.forward(&[vec![1, 2, 3, 4]], RoutingStrategy::Unlimited).unwrap();
        assert!(denial_count(&out.trace, 1, 0, 0).is_err());
        assert!(denial_count(&out.trace, 0, 3, 0).is_err());
        assert!(denial_count(&out.trace, 0, 0, 1).is_err());
        let total: usize = (0..3).map(|e| denial_count(&out.trace, 0, e, 0).unwrap()).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn assemble_places_victim() {
        let adv = vec![vec![1], vec![2]];
        assert_eq!(assemble_batch(&adv, &[9], 0), vec![vec![9], vec![1], vec![2]]);
        assert_eq!(assemble_batch(&adv, &[9], 2), vec![vec![1], vec![2], vec![9]]);
    }
}
