//! Experiment scenarios.
//!
//! Every scenario writes `report.json`, `trace.csv` and `plan.json` for each
//! run under `<output_dir>/<scenario>/[<variant>/]<seed>/` and a summary
//! `report.json` under `<output_dir>/<scenario>/`. Only the summary carries
//! a wall-clock field; everything else is a pure function of the spec.
//!
//! Run seeds seed the adversary and, for sampled routing, the deployment.
//! Mitigation and transfer evaluate a pinned fixture; there a flip counts as
//! an attack success only when the adversarial batch-mates change the
//! victim's prediction away from `y` while the fixture's benign batch-mates,
//! run through the identical deployment, leave it at `y`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use moebuf_core::attack::{
    assemble_batch, denial_count, evaluate_victim, transfer_eval, AttackConfig, AttackTrace, Evaluation, Objective,
    Probe, RandomSearch, TransferRow, Victim,
};
use moebuf_core::moe::MoEConfig;
use moebuf_core::routing::{apply_permutation, occupancy_by_source, route_vanilla, RouteEntry};
use moebuf_core::tensor::argmax;
use moebuf_core::{buffer_capacity, BatchShape, ForwardOutput, GateMatrix, Matrix, ModelConfig, Rng, RoutingStrategy, ToyModel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint;
use crate::error::{spec_err, Result};
use crate::fixture::{self, clean_target, select_victim, Fixture, VictimSelection};
use crate::spec::{ExperimentSpec, RoutingKind, Scenario};
use crate::trace::{attack_csv, write_json, write_text, PlanFile};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const SHUFFLE_STREAM: u64 = 0x7368_7566;
pub const PAIRED_STREAM: u64 = 0x7061_6972;
pub const PROBE_STREAM: u64 = 0x7072_6f62;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub config: ExperimentSpec,
    pub seeds: Vec<u64>,
    pub results: Value,
    /// Excluded from reproducibility comparisons.
    pub wall_clock_ms: u64,
}

/// One attack run, as written to its `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub seed: u64,
    pub routing: RoutingStrategy,
    pub target_position: usize,
    pub success: bool,
    pub iterations_to_success: Option<usize>,
    pub initial_loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub accepted: usize,
    /// Victim drops at the first evaluation.
    pub initial_drops: Option<usize>,
    /// First iteration at which any victim assignment was dropped.
    pub first_drop_iteration: Option<usize>,
    /// First iteration whose victim drops exceed the initial count.
    pub drop_event_iteration: Option<usize>,
    /// Evaluation of the best batch found.
    pub best: Evaluation,
    /// Best-so-far loss after each iteration.
    pub loss_curve: Vec<f64>,
    pub best_adversarial: Vec<Vec<u32>>,
}

impl AttackRun {
    fn new(seed: u64, routing: RoutingStrategy, cfg: &AttackConfig, trace: &AttackTrace, best: Evaluation) -> Self {
        let it = &trace.iterations;
        let initial_drops = it.first().map(|r| r.drops_from_victim);
        Self {
            seed,
            routing,
            target_position: cfg.target_position,
            success: trace.success,
            iterations_to_success: trace.iterations_to_success,
            initial_loss: it.first().map(|r| r.loss),
            best_loss: trace.best_loss,
            accepted: it.iter().filter(|r| r.accepted).count(),
            initial_drops,
            first_drop_iteration: it.iter().find(|r| r.drops_from_victim > 0).map(|r| r.iteration),
            drop_event_iteration: initial_drops
                .and_then(|d0| it.iter().find(|r| r.drops_from_victim > d0))
                .map(|r| r.iteration),
            best,
            loss_curve: it.iter().map(|r| r.best_loss).collect(),
            best_adversarial: trace.best_adversarial.clone(),
        }
    }
}

fn deployment(kind: RoutingKind, capacity: usize, seed: u64) -> RoutingStrategy {
    match kind {
        RoutingKind::Vanilla => RoutingStrategy::Vanilla { capacity },
        RoutingKind::Unlimited => RoutingStrategy::Unlimited,
        RoutingKind::Sampled => RoutingStrategy::Sampled { capacity, seed },
    }
}

fn run_dir(root: &Path, variant: Option<&str>, seed: u64) -> PathBuf {
    let mut dir = root.to_path_buf();
    if let Some(v) = variant {
        dir.push(v);
    }
    dir.push(seed.to_string());
    dir
}

fn load_model(spec: &ExperimentSpec) -> Result<ToyModel> {
    match &spec.checkpoint {
        Some(path) => checkpoint::load(path),
        None => Ok(ToyModel::init(spec.model)?),
    }
}

fn load_fixture(spec: &ExperimentSpec) -> Result<Fixture> {
    match &spec.fixture {
        Some(path) => Fixture::load(path),
        None => fixture::builtin(),
    }
}

/// Runs one search, writes its three artifacts and returns the summary.
fn attack_run(
    model: &ToyModel,
    strategy: RoutingStrategy,
    victim: &Victim,
    cfg: AttackConfig,
    dir: &Path,
) -> Result<(AttackRun, AttackTrace, ForwardOutput)> {
    let (best, trace) = RandomSearch::new(model, strategy, victim, cfg)?.run()?;
    let batch = assemble_batch(&best, &victim.tokens, cfg.target_position);
    let out = model.forward(&batch, strategy)?;
    let eval = evaluate_victim(
        &out,
        cfg.target_position,
        victim.target as usize,
        cfg.objective,
        cfg.loss_scale,
    )?;
    let run = AttackRun::new(cfg.seed, strategy, &cfg, &trace, eval);
    write_json(&dir.join("report.json"), &run)?;
    write_text(&dir.join("trace.csv"), &attack_csv(&trace))?;
    write_json(&dir.join("plan.json"), &PlanFile::new(strategy, &batch, &out.trace))?;
    Ok((run, trace, out))
}

/// Runs the scenario named by `spec` and writes every artifact.
pub fn run(spec: &ExperimentSpec) -> Result<ScenarioReport> {
    spec.validate()?;
    let spec = spec.clone().resolved();
    let started = Instant::now();
    let root = spec.output_dir.join(spec.scenario.name());
    info!("running {} into {}", spec.scenario.name(), root.display());
    let results = match spec.scenario {
        Scenario::Demo => demo(&spec, &root)?,
        Scenario::CapacitySweep => capacity_sweep(&spec, &root)?,
        Scenario::PositionStudy => position_study(&spec, &root)?,
        Scenario::Denial => denial(&spec, &root)?,
        Scenario::Transfer => transfer(&spec, &root)?,
        Scenario::MitigationSuite => mitigation_suite(&spec, &root)?,
    };
    let report = ScenarioReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: spec.scenario,
        seeds: spec.run_seeds(),
        config: spec,
        results,
        wall_clock_ms: started.elapsed().as_millis() as u64,
    };
    write_json(&root.join("report.json"), &report)?;
    Ok(report)
}

struct Setup {
    model: ToyModel,
    shape: BatchShape,
    position: usize,
    capacity: usize,
    selection: VictimSelection,
}

fn setup(spec: &ExperimentSpec, slack: Option<f64>) -> Result<Setup> {
    let model = load_model(spec)?;
    let shape = spec.attack.shape()?;
    let position = spec.attack.position();
    let mut moe = model.config().moe();
    moe.capacity_slack = slack.unwrap_or(moe.capacity_slack);
    let capacity = buffer_capacity(&moe, shape);
    let selection = select_victim(&model, shape, position, capacity, spec.victim_seed)?;
    info!(
        "victim {:?} -> {} after {} candidates",
        selection.victim.tokens, selection.victim.target, selection.candidates
    );
    Ok(Setup {
        model,
        shape,
        position,
        capacity,
        selection,
    })
}

fn demo(spec: &ExperimentSpec, root: &Path) -> Result<Value> {
    let s = setup(spec, None)?;
    let victim = &s.selection.victim;
    let mut runs = Vec::new();
    let mut pinned = None;
    for seed in spec.run_seeds() {
        let strategy = deployment(spec.routing, s.capacity, seed);
        let cfg = spec.attack.config(seed, Objective::Integrity);
        let (run, _, _) = attack_run(&s.model, strategy, victim, cfg, &run_dir(root, None, seed))?;
        info!("seed {seed}: success={} at {:?}", run.success, run.iterations_to_success);
        if run.success && pinned.is_none() && spec.routing == RoutingKind::Vanilla {
            pinned = Some(Fixture {
                schema_version: fixture::FIXTURE_SCHEMA_VERSION,
                model: *s.model.config(),
                batch_size: s.shape.batch,
                seq_len: s.shape.seq_len,
                target_position: s.position,
                capacity: s.capacity,
                victim_seed: spec.victim_seed,
                victim: victim.clone(),
                benign: s.selection.benign.clone(),
                attack_seed: seed,
                iterations: cfg.iterations,
                replace_per_seq: cfg.replace_per_seq,
                loss_scale: cfg.loss_scale,
                iterations_to_success: run.iterations_to_success.unwrap_or(0),
                adversarial: run.best_adversarial.clone(),
            });
        }
        runs.push(run);
    }
    let fixture_file = match &pinned {
        Some(f) => {
            let path = root.join("fixture.json");
            f.save(&path)?;
            Some("fixture.json")
        }
        None => None,
    };
    Ok(json!({
        "model": s.model.config(),
        "capacity": s.capacity,
        "capacity_ratio": s.capacity as f64 / s.shape.tokens() as f64,
        "victim": victim,
        "victim_candidates": s.selection.candidates,
        "benign": s.selection.benign,
        "successes": runs.iter().filter(|r| r.success).count(),
        "fixture": fixture_file,
        "runs": runs,
    }))
}

fn slack_label(c: f64) -> String {
    format!("c_{c}")
}

fn capacity_sweep(spec: &ExperimentSpec, root: &Path) -> Result<Value> {
    let s = setup(spec, None)?;
    let cfg = s.model.config();
    let full = cfg.experts as f64 / cfg.top_k as f64;
    let mut points: Vec<(f64, Option<&str>)> = spec.capacity_values.iter().map(|&c| (c, None)).collect();
    points.push((full, Some("full")));
    points.push((0.0, Some("zero")));
    let mut rows = Vec::new();
    let mut grid = Vec::new();
    for (c, endpoint) in points {
        let capacity = buffer_capacity(&MoEConfig { capacity_slack: c, ..cfg.moe() }, s.shape);
        let label = slack_label(c);
        let mut runs = Vec::new();
        for seed in spec.run_seeds() {
            let strategy = deployment(spec.routing, capacity, seed);
            let acfg = spec.attack.config(seed, Objective::Integrity);
            let dir = run_dir(root, Some(&label), seed);
            runs.push(attack_run(&s.model, strategy, &s.selection.victim, acfg, &dir)?.0);
        }
        let successes = runs.iter().filter(|r| r.success).count();
        let rate = successes as f64 / runs.len() as f64;
        info!("C = {c}: B_e = {capacity}, {successes}/{} succeeded", runs.len());
        if endpoint.is_none() {
            grid.push((c, rate));
        }
        rows.push(json!({
            "capacity_slack": c,
            "capacity": capacity,
            "capacity_ratio": capacity as f64 / s.shape.tokens() as f64,
            "endpoint": endpoint,
            "successes": successes,
            "success_rate": rate,
            "runs": runs,
        }));
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let trend = grid.windows(2).all(|w| w[1].1 <= w[0].1);
    let full_all_false = rows
        .iter()
        .filter(|r| r["endpoint"] == "full")
        .all(|r| r["successes"] == 0);
    Ok(json!({
        "victim": s.selection.victim,
        "points": rows,
        "trend_nonincreasing": trend,
        "full_capacity_all_false": full_all_false,
    }))
}

/// Plan-level rank-2 contention with the victim first: one victim token
/// whose second choice is expert 1, and two adversarial tokens whose first
/// choice is expert 1, against a two-slot buffer.
pub fn rank_two_contention() -> Result<Value> {
    // x* = two tokens preferring e0 then e1, placed first; capacity 2, k = 2.
    let shape = BatchShape::new(2, 2)?;
    let victim = [0.7, 0.3];
    let route = |mate: [f64; 2]| -> Result<Vec<RouteEntry>> {
        let rows = vec![victim.to_vec(), victim.to_vec(), mate.to_vec(), mate.to_vec()];
        let (plan, _) = route_vanilla(&GateMatrix::new(shape, Matrix::from_rows(&rows)?)?, 2, 2)?;
        Ok(plan.token_entries(0).to_vec())
    };
    let benign = route([0.7, 0.3])?;
    let adversarial = route([0.2, 0.8])?;
    Ok(json!({
        "victim_gates": victim,
        "capacity": 2,
        "benign_mate_entries": benign,
        "adversarial_mate_entries": adversarial,
        "rank1_kept": !benign[0].dropped && !adversarial[0].dropped,
        "rank2_dropped": !benign[1].dropped && adversarial[1].dropped && adversarial[1].expert == 1,
    }))
}

fn position_study(spec: &ExperimentSpec, root: &Path) -> Result<Value> {
    let base = load_model(spec)?;
    let base_cfg = *base.config();
    let shape = spec.attack.shape()?;
    let last = spec.attack.batch_size - 1;
    let ks: Vec<usize> = [1, 2].into_iter().filter(|&k| k <= base_cfg.experts).collect();
    let mut variants = Vec::new();
    let mut rates = serde_json::Map::new();
    let mut k1_first_invariant = true;
    for k in ks {
        // Keep B_e fixed across k by scaling the slack.
        let cfg = ModelConfig {
            top_k: k,
            capacity_slack: base_cfg.capacity_slack * base_cfg.top_k as f64 / k as f64,
            ..base_cfg
        };
        let model = ToyModel::from_matrices(cfg, base.matrices().into_iter().cloned().collect())?;
        let capacity = buffer_capacity(&cfg.moe(), shape);
        let sel = select_victim(&model, shape, last, capacity, spec.victim_seed)?;
        let clean = model
            .forward(std::slice::from_ref(&sel.victim.tokens), RoutingStrategy::Unlimited)?
            .last_logits(0)?
            .to_vec();
        for (place, position) in [("first", 0), ("last", last)] {
            let name = format!("k{k}_{place}");
            let mut runs = Vec::new();
            let mut unchanged_all = true;
            for seed in spec.run_seeds() {
                let strategy = deployment(spec.routing, capacity, seed);
                let acfg = AttackConfig {
                    target_position: position,
                    ..spec.attack.config(seed, Objective::Integrity)
                };
                let dir = run_dir(root, Some(&name), seed);
                let (run, trace, out) = attack_run(&model, strategy, &sel.victim, acfg, &dir)?;
                let initial = assemble_batch(&trace.initial_adversarial, &sel.victim.tokens, position);
                let init_out = model.forward(&initial, strategy)?;
                let unchanged = bits_equal(out.last_logits(position)?, &clean)
                    && bits_equal(init_out.last_logits(position)?, &clean);
                unchanged_all &= unchanged;
                runs.push(json!({ "xstar_logits_unchanged": unchanged, "run": run }));
            }
            let successes = runs.iter().filter(|r| r["run"]["success"] == true).count();
            if k == 1 && place == "first" {
                k1_first_invariant = successes == 0 && unchanged_all;
            }
            rates.insert(name.clone(), json!(successes as f64 / runs.len() as f64));
            variants.push(json!({
                "name": name,
                "top_k": k,
                "capacity_slack": cfg.capacity_slack,
                "capacity": capacity,
                "target_position": position,
                "victim": sel.victim,
                "successes": successes,
                "xstar_logits_unchanged": unchanged_all,
                "runs": runs,
            }));
        }
    }
    Ok(json!({
        "variants": variants,
        "success_rates": rates,
        "k1_first_invariant": k1_first_invariant,
        "rank2_contention": rank_two_contention()?,
    }))
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// The expert that processes most of the victim's tokens in `layer` when it
/// runs alone without capacity limits; ties go to the lower index.
pub fn preferred_expert(model: &ToyModel, tokens: &[u32], layer: usize) -> Result<usize> {
    let out = model.forward(&[tokens.to_vec()], RoutingStrategy::Unlimited)?;
    let counts = occupancy_by_source(&out.trace.layers[layer].buffers, 0);
    let as_f64: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    Ok(argmax(&as_f64).unwrap_or(0))
}

fn denial(spec: &ExperimentSpec, root: &Path) -> Result<Value> {
    let s = setup(spec, Some(spec.denial.capacity_slack))?;
    let victim = &s.selection.victim;
    let layer = spec.denial.layer;
    let expert = match spec.denial.expert {
        Some(e) => e,
        None => preferred_expert(&s.model, &victim.tokens, layer)?,
    };
    let solo = s.model.forward(std::slice::from_ref(&victim.tokens), RoutingStrategy::Unlimited)?;
    let solo_count = denial_count(&solo.trace, layer, expert, 0)?;
    let mut runs = Vec::new();
    for seed in spec.run_seeds() {
        let strategy = deployment(spec.routing, s.capacity, seed);
        let cfg = spec.attack.config(seed, Objective::Denial { layer, expert });
        let (run, trace, _) = attack_run(&s.model, strategy, victim, cfg, &run_dir(root, None, seed))?;
        let accepted: Vec<f64> = trace.iterations.iter().filter(|r| r.accepted).map(|r| r.loss).collect();
        let nonincreasing = accepted.windows(2).all(|w| w[1] <= w[0]);
        info!("seed {seed}: count {:?} -> {:?}", run.initial_loss, run.best_loss);
        runs.push(json!({ "count_nonincreasing_at_accepted": nonincreasing, "run": run }));
    }
    Ok(json!({
        "victim": victim,
        "layer": layer,
        "expert": expert,
        "capacity_slack": spec.denial.capacity_slack,
        "capacity": s.capacity,
        "solo_count": solo_count,
        "successes": runs.iter().filter(|r| r["run"]["success"] == true).count(),
        "runs": runs,
    }))
}

fn fixture_summary(f: &Fixture) -> Value {
    json!({
        "model": f.model,
        "capacity": f.capacity,
        "victim": f.victim,
        "attack_seed": f.attack_seed,
        "target_position": f.target_position,
    })
}

/// Probes sharing all but the last two victim tokens, led by the victim itself.
pub fn probe_family(model: &ToyModel, victim: &Victim, count: usize, seed: u64) -> Result<Vec<Probe>> {
    let vocab = model.config().vocab;
    let keep = victim.tokens.len().saturating_sub(2);
    let mut rng = Rng::new(seed, PROBE_STREAM);
    let mut probes = vec![Probe {
        tokens: victim.tokens.clone(),
        expected: victim.target,
    }];
    while probes.len() < count {
        let mut tokens = victim.tokens[..keep].to_vec();
        for _ in keep..victim.tokens.len() {
            tokens.push(rng.next_below(vocab)? as u32);
        }
        let expected = clean_target(model, &tokens)?;
        probes.push(Probe { tokens, expected });
    }
    Ok(probes)
}

fn transfer(spec: &ExperimentSpec, root: &Path) -> Result<Value> {
    let f = load_fixture(spec)?;
    let model = f.model()?;
    let mut runs = Vec::new();
    for seed in spec.run_seeds() {
        let strategy = deployment(spec.routing, f.capacity, seed);
        let probes = probe_family(&model, &f.victim, spec.probes, seed)?;
        let rows = transfer_eval(&model, strategy, &f.adversarial, &probes, f.target_position)?;
        let dir = run_dir(root, None, seed);
        write_text(&dir.join("trace.csv"), &transfer_csv(&rows))?;
        let batch = f.adversarial_batch();
        let out = model.forward(&batch, strategy)?;
        write_json(&dir.join("plan.json"), &PlanFile::new(strategy, &batch, &out.trace))?;
        let run = json!({
            "seed": seed,
            "routing": strategy,
            "flips": rows.iter().filter(|r| r.flipped).count(),
            "decreased": rows.iter().filter(|r| r.delta < 0.0).count(),
            "rows": rows,
        });
        write_json(&dir.join("report.json"), &run)?;
        runs.push(run);
    }
    Ok(json!({ "fixture": fixture_summary(&f), "runs": runs }))
}

fn transfer_csv(rows: &[TransferRow]) -> String {
    let mut out = String::from("probe,tokens,expected,p_clean,p_attacked,delta,predicted,flipped\n");
    for (i, r) in rows.iter().enumerate() {
        let tokens: Vec<String> = r.tokens.iter().map(u32::to_string).collect();
        out += &format!(
            "{i},{},{},{},{},{},{},{}\n",
            tokens.join(" "),
            r.expected,
            r.p_clean,
            r.p_attacked,
            r.delta,
            r.predicted,
            r.flipped
        );
    }
    out
}

/// One evaluation of the fixture's adversarial and benign batches under the
/// same deployment and ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub position: usize,
    pub predicted: usize,
    pub benign_predicted: usize,
    pub p_target: f64,
    pub benign_p_target: f64,
    /// The adversary moved the prediction off `y` and the benign batch did not.
    pub flipped: bool,
}

fn trial(
    model: &ToyModel,
    strategy: RoutingStrategy,
    adversarial: &[Vec<u32>],
    benign: &[Vec<u32>],
    position: usize,
    y: usize,
    index: usize,
) -> Result<(Trial, ForwardOutput)> {
    let out = model.forward(adversarial, strategy)?;
    let p = out.next_token_distribution(position)?;
    let q = model.forward(benign, strategy)?.next_token_distribution(position)?;
    let predicted = argmax(&p).unwrap_or(0);
    let benign_predicted = argmax(&q).unwrap_or(0);
    let t = Trial {
        trial: index,
        position,
        predicted,
        benign_predicted,
        p_target: p[y],
        benign_p_target: q[y],
        flipped: predicted != y && benign_predicted == y,
    };
    Ok((t, out))
}

fn trials_csv(trials: &[Trial]) -> String {
    let mut out = String::from("trial,position,predicted,benign_predicted,p_target,benign_p_target,flipped\n");
    for t in trials {
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            t.trial, t.position, t.predicted, t.benign_predicted, t.p_target, t.benign_p_target, t.flipped
        );
    }
    out
}

/// Largest absolute logit difference between two orderings of one batch,
/// after mapping the second run back to the original order.
fn ordering_divergence(
    model: &ToyModel,
    batch: &[Vec<u32>],
    perm: &[usize],
    strategy: RoutingStrategy,
) -> Result<(f64, ForwardOutput)> {
    let a = model.forward(batch, strategy)?;
    let b = model.forward(&apply_permutation(batch, perm)?, strategy)?;
    let t = a.shape.seq_len;
    let mut worst = 0.0f64;
    for (j, &src) in perm.iter().enumerate() {
        for pos in 0..t {
            let ra = a.logits.row(a.shape.token_index(src, pos));
            let rb = b.logits.row(b.shape.token_index(j, pos));
            for (x, y) in ra.iter().zip(rb) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok((worst, b))
}

fn mitigation_suite(spec: &ExperimentSpec, root: &Path) -> Result<Value> {
    let f = load_fixture(spec)?;
    let model = f.model()?;
    let shape = f.shape()?;
    let y = f.victim.target as usize;
    let adv = f.adversarial_batch();
    let ben = f.benign_batch();
    let pos = f.target_position;
    let full = shape.tokens();
    let cfg = model.config();

    let single = |name: &str, strategy: RoutingStrategy, seed: u64| -> Result<Trial> {
        let (t, out) = trial(&model, strategy, &adv, &ben, pos, y, 0)?;
        let dir = run_dir(root, Some(name), seed);
        write_json(&dir.join("report.json"), &json!({ "seed": seed, "routing": strategy, "trial": t }))?;
        write_text(&dir.join("trace.csv"), &trials_csv(std::slice::from_ref(&t)))?;
        write_json(&dir.join("plan.json"), &PlanFile::new(strategy, &adv, &out.trace))?;
        Ok(t)
    };

    let mut baseline = Vec::new();
    let mut large_c = Vec::new();
    let mut sampled = Vec::new();
    let mut shuffle = Vec::new();
    let mut paired = Vec::new();
    for seed in spec.run_seeds() {
        let base = deployment(spec.routing, f.capacity, seed);
        baseline.push(single("baseline", base, seed)?);
        large_c.push(single("large_c", RoutingStrategy::Vanilla { capacity: full }, seed)?);
        sampled.push(single(
            "sampled",
            RoutingStrategy::Sampled {
                capacity: f.capacity,
                seed,
            },
            seed,
        )?);

        let mut rng = Rng::new(seed, SHUFFLE_STREAM);
        let mut trials = Vec::new();
        let mut first_plan = None;
        for i in 0..spec.shuffles {
            let perm = rng.permutation(shape.batch)?;
            let at = perm.iter().position(|&p| p == pos).expect("permutation");
            let a = apply_permutation(&adv, &perm)?;
            let b = apply_permutation(&ben, &perm)?;
            let (t, out) = trial(&model, base, &a, &b, at, y, i)?;
            first_plan.get_or_insert_with(|| PlanFile::new(base, &a, &out.trace));
            trials.push(t);
        }
        let flips = trials.iter().filter(|t| t.flipped).count();
        let dir = run_dir(root, Some("shuffle"), seed);
        let summary = json!({
            "seed": seed,
            "routing": base,
            "shuffles": spec.shuffles,
            "flips": flips,
            "success": 2 * flips > spec.shuffles,
            "trials": trials,
        });
        write_json(&dir.join("report.json"), &summary)?;
        write_text(&dir.join("trace.csv"), &trials_csv(&trials))?;
        if let Some(plan) = first_plan {
            write_json(&dir.join("plan.json"), &plan)?;
        }
        shuffle.push(summary);

        let perm = Rng::new(seed, PAIRED_STREAM).permutation(shape.batch)?;
        let (adv_div, out) = ordering_divergence(&model, &adv, &perm, base)?;
        let (ben_div, _) = ordering_divergence(&model, &ben, &perm, base)?;
        let dir = run_dir(root, Some("paired"), seed);
        let summary = json!({
            "seed": seed,
            "routing": base,
            "permutation": perm,
            "adversarial_divergence": adv_div,
            "benign_divergence": ben_div,
        });
        write_json(&dir.join("report.json"), &summary)?;
        write_text(
            &dir.join("trace.csv"),
            &format!("ordering,max_logit_divergence\nadversarial,{adv_div}\nbenign,{ben_div}\n"),
        )?;
        let permuted = apply_permutation(&adv, &perm)?;
        write_json(&dir.join("plan.json"), &PlanFile::new(base, &permuted, &out.trace))?;
        paired.push(summary);
    }

    let flags = |ts: &[Trial]| ts.iter().map(|t| t.flipped).collect::<Vec<_>>();
    let shuffle_flags: Vec<bool> = shuffle.iter().map(|s| s["success"] == true).collect();
    Ok(json!({
        "fixture": fixture_summary(&f),
        "mitigations": {
            "baseline": { "routing": deployment(spec.routing, f.capacity, spec.seed), "success": flags(&baseline), "trials": baseline },
            "large_c": {
                "capacity_slack": cfg.experts as f64 / cfg.top_k as f64,
                "capacity": full,
                "success": flags(&large_c),
                "trials": large_c,
            },
            "sampled": { "capacity": f.capacity, "success": flags(&sampled), "trials": sampled },
            "shuffle": { "success": shuffle_flags, "runs": shuffle },
            "paired": { "runs": paired },
        },
    }))
}

/// Fails fast on anything the scenario needs from disk.
pub fn preflight(spec: &ExperimentSpec) -> Result<()> {
    spec.validate()?;
    if spec.scenario.uses_fixture() {
        let f = load_fixture(spec)?;
        let shape = f.shape()?;
        if f.target_position >= shape.batch {
            return Err(spec_err("fixture target_position out of range"));
        }
    }
    if let Some(path) = &spec.checkpoint {
        if !path.exists() {
            return Err(spec_err(format!("checkpoint {} does not exist", path.display())));
        }
    }
    Ok(())
}

/// Every run directory under `root` holds all three artifacts and the
/// scenario summary exists.
pub fn check_artifacts(root: &Path) -> Result<()> {
    fn walk(dir: &Path, missing: &mut Vec<String>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| crate::Error::io(dir, e))?;
        let mut subdirs = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| crate::Error::io(dir, e))?;
            if entry.path().is_dir() {
                subdirs.push(entry.path());
            }
        }
        if subdirs.is_empty() {
            for name in ["report.json", "trace.csv", "plan.json"] {
                if !dir.join(name).is_file() {
                    missing.push(dir.join(name).display().to_string());
                }
            }
        }
        for sub in subdirs {
            walk(&sub, missing)?;
        }
        Ok(())
    }
    let mut missing = Vec::new();
    if !root.join("report.json").is_file() {
        missing.push(root.join("report.json").display().to_string());
    }
    walk(root, &mut missing)?;
    if missing.is_empty() {
        Ok(())
    } else {
        Err(crate::Error::Io {
            path: missing.join(", "),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "artifact missing"),
        })
    }
}
