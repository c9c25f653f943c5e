//! Pinned attack fixtures and victim selection.
//!
//! A fixture freezes one successful integrity attack: the model config, the
//! deployment's buffer capacity, the victim `x*` with its expected token `y`,
//! a benign set of batch-mates and the adversarial batch-mates `X~A` found by
//! the search. Mitigation and transfer scenarios evaluate the fixture instead
//! of searching again, so their outcome does not depend on search luck.
//!
//! Victims are chosen by a fixed rule. Candidates are drawn uniformly from
//! the vocabulary with `Rng::new(victim_seed, VICTIM_STREAM)`. A candidate's
//! `y` is its argmax next token when run alone under unlimited routing. It is
//! accepted once, for [`STABILITY_CHECKS`] random benign batches in a row,
//! both vanilla routing and sampled routing at the deployment capacity still
//! predict `y`. The first benign batch is kept as the reference batch-mates.
//! The rule keeps only victims that every deployment under test serves
//! correctly under ordinary traffic, so a later flip can be attributed to the
//! adversary rather than to the deployment.

use std::fs;
use std::path::Path;

use moebuf_core::attack::{assemble_batch, random_search, AttackConfig, AttackTrace, LossScale, Objective, Victim};
use moebuf_core::tensor::argmax;
use moebuf_core::{BatchShape, ModelConfig, Rng, RoutingStrategy, ToyModel};
use serde::{Deserialize, Serialize};

use crate::error::{spec_err, Error, Result};

pub const FIXTURE_SCHEMA_VERSION: u32 = 1;
pub const VICTIM_STREAM: u64 = 0x7669_6374_696d;
pub const STABILITY_CHECKS: usize = 8;
pub const MAX_CANDIDATES: usize = 4096;

const BUILTIN: &str = include_str!("../fixtures/default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub seq_len: usize,
    pub target_position: usize,
    /// Vanilla buffer capacity of the attacked deployment.
    pub capacity: usize,
    pub victim_seed: u64,
    pub victim: Victim,
    pub benign: Vec<Vec<u32>>,
    pub attack_seed: u64,
    pub iterations: usize,
    pub replace_per_seq: usize,
    pub loss_scale: LossScale,
    pub iterations_to_success: usize,
    pub adversarial: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimSelection {
    pub victim: Victim,
    pub benign: Vec<Vec<u32>>,
    /// Candidates drawn before one passed, the accepted one included.
    pub candidates: usize,
}

fn predicted(model: &ToyModel, batch: &[Vec<u32>], strategy: RoutingStrategy, element: usize) -> Result<usize> {
    let dist = model.forward(batch, strategy)?.next_token_distribution(element)?;
    Ok(argmax(&dist).unwrap_or(0))
}

fn random_sequence(rng: &mut Rng, len: usize, vocab: usize) -> Result<Vec<u32>> {
    (0..len)
        .map(|_| Ok(rng.next_below(vocab)? as u32))
        .collect()
}

/// The victim's solo, unlimited-routing prediction.
pub fn clean_target(model: &ToyModel, tokens: &[u32]) -> Result<u32> {
    Ok(predicted(model, &[tokens.to_vec()], RoutingStrategy::Unlimited, 0)? as u32)
}

pub fn select_victim(
    model: &ToyModel,
    shape: BatchShape,
    position: usize,
    capacity: usize,
    victim_seed: u64,
) -> Result<VictimSelection> {
    let vocab = model.config().vocab;
    let mut rng = Rng::new(victim_seed, VICTIM_STREAM);
    let vanilla = RoutingStrategy::Vanilla { capacity };
    for candidate in 1..=MAX_CANDIDATES {
        let tokens = random_sequence(&mut rng, shape.seq_len, vocab)?;
        let y = clean_target(model, &tokens)? as usize;
        let mut first = None;
        let mut stable = true;
        for _ in 0..STABILITY_CHECKS {
            let mates = (0..shape.batch - 1)
                .map(|_| random_sequence(&mut rng, shape.seq_len, vocab))
                .collect::<Result<Vec<_>>>()?;
            let batch = assemble_batch(&mates, &tokens, position);
            let sampled = RoutingStrategy::Sampled {
                capacity,
                seed: rng.next_u64(),
            };
            if predicted(model, &batch, vanilla, position)? != y || predicted(model, &batch, sampled, position)? != y {
                stable = false;
                break;
            }
            first.get_or_insert(mates);
        }
        if stable {
            return Ok(VictimSelection {
                victim: Victim {
                    tokens,
                    target: y as u32,
                },
                benign: first.unwrap_or_default(),
                candidates: candidate,
            });
        }
    }
    Err(Error::Core(moebuf_core::Error::Parameter(format!(
        "no stable victim among {MAX_CANDIDATES} candidates"
    ))))
}

impl Fixture {
    pub fn shape(&self) -> Result<BatchShape> {
        Ok(BatchShape::new(self.batch_size, self.seq_len)?)
    }

    pub fn model(&self) -> Result<ToyModel> {
        Ok(ToyModel::init(self.model)?)
    }

    pub fn vanilla(&self) -> RoutingStrategy {
        RoutingStrategy::Vanilla {
            capacity: self.capacity,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            iterations: self.iterations,
            replace_per_seq: self.replace_per_seq,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            target_position: self.target_position,
            seed: self.attack_seed,
            objective: Objective::Integrity,
            loss_scale: self.loss_scale,
            sentinel_init: false,
        }
    }

    pub fn adversarial_batch(&self) -> Vec<Vec<u32>> {
        assemble_batch(&self.adversarial, &self.victim.tokens, self.target_position)
    }

    pub fn benign_batch(&self) -> Vec<Vec<u32>> {
        assemble_batch(&self.benign, &self.victim.tokens, self.target_position)
    }

    /// Re-runs the recorded search from scratch.
    pub fn replay(&self, model: &ToyModel) -> Result<(Vec<Vec<u32>>, AttackTrace)> {
        Ok(random_search(model, self.vanilla(), &self.victim, self.attack_config())?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != FIXTURE_SCHEMA_VERSION {
            return Err(spec_err(format!(
                "fixture schema_version {} is not supported",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.attack_config().validate(self.model.vocab)?;
        let shape = self.shape()?;
        let ok_seq = |s: &Vec<u32>| s.len() == shape.seq_len && s.iter().all(|&t| (t as usize) < self.model.vocab);
        if self.adversarial.len() + 1 != shape.batch
            || self.benign.len() + 1 != shape.batch
            || !self.adversarial.iter().all(ok_seq)
            || !self.benign.iter().all(ok_seq)
            || !ok_seq(&self.victim.tokens)
        {
            return Err(spec_err("fixture sequences do not match its batch shape or vocabulary"));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let fixture: Self = serde_json::from_str(text).map_err(|e| spec_err(format!("fixture: {e}")))?;
        fixture.validate()?;
        Ok(fixture)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| spec_err(format!("fixture {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// The fixture shipped with the crate, produced by the default demo.
pub fn builtin() -> Result<Fixture> {
    Fixture::from_json_str(BUILTIN)
}
