use moebuf_core::attack::{
    random_search, random_search_denial, AttackConfig, LossScale, Objective, RandomSearch, Victim,
};
use moebuf_core::{BatchShape, ModelConfig, Rng, RoutingStrategy, ToyModel};

fn small_model(seed: u64) -> ToyModel {
    ToyModel::init(ModelConfig {
        blocks: 1,
        d_model: 8,
        vocab: 16,
        max_seq_len: 4,
        experts: 3,
        top_k: 2,
        capacity_slack: 0.6,
        d_ff: 8,
        seed,
    })
    .unwrap()
}

fn cfg(seed: u64, iterations: usize) -> AttackConfig {
    AttackConfig {
        iterations,
        replace_per_seq: 2,
        batch_size: 3,
        seq_len: 4,
        target_position: 2,
        seed,
        objective: Objective::Integrity,
        loss_scale: LossScale::Probability,
        sentinel_init: false,
    }
}

fn victim(model: &ToyModel) -> Victim {
    let tokens = vec![1, 5, 9, 3];
    let d = model.forward(std::slice::from_ref(&tokens), RoutingStrategy::Unlimited).unwrap().next_token_distribution(0).unwrap();
    let target = moebuf_core::tensor::argmax(&d).unwrap() as u32;
    Victim { tokens, target }
}

fn diff_positions(a: &[Vec<u32>], b: &[Vec<u32>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (s, (x, y)) in a.iter().zip(b).enumerate() {
        for (p, (u, v)) in x.iter().zip(y).enumerate() {
            if u != v {
                out.push((s, p));
            }
        }
    }
    out
}

#[test]
fn accept_reject_contract_over_fuzzed_runs() {
    let mut rng = Rng::new(50, 50);
    for run in 0..50 {
        let model = small_model(rng.next_u64());
        let v = victim(&model);
        let capacity = rng.next_below(7).unwrap();
        let strategy = RoutingStrategy::Vanilla { capacity };
        let objective = if run % 2 == 0 {
            Objective::Integrity
        } else {
            Objective::Denial { layer: 0, expert: rng.next_below(3).unwrap() }
        };
        let c = AttackConfig { objective, ..cfg(rng.next_u64(), 0) };
        let mut search = RandomSearch::new(&model, strategy, &v, c).unwrap();
        let mut prev_best = f64::INFINITY;
        for _ in 0..25 {
            let best_before: Vec<Vec<u32>> = search.best().to_vec();
            let record = search.select().unwrap().clone();
            assert!(record.best_loss <= prev_best);
            prev_best = record.best_loss;
            if record.accepted {
                assert_eq!(search.best(), search.current());
            } else {
                // Rejected: the working batch is the stored best, bit for bit.
                assert_eq!(search.current(), best_before.as_slice());
                assert_eq!(search.best(), best_before.as_slice());
            }
            let before = search.current().to_vec();
            search.propose().unwrap();
            let touched = search.last_proposal().to_vec();
            assert_eq!(touched.len(), c.replace_per_seq * (c.batch_size - 1));
            for s in 0..c.batch_size - 1 {
                let mut pos: Vec<usize> = touched.iter().filter(|t| t.0 == s).map(|t| t.1).collect();
                pos.sort_unstable();
                pos.dedup();
                assert_eq!(pos.len(), c.replace_per_seq);
            }
            for d in diff_positions(&before, search.current()) {
                assert!(touched.contains(&d));
            }
        }
    }
}

#[test]
fn attack_is_a_pure_function_of_inputs() {
    let model = small_model(9);
    let v = victim(&model);
    let s = RoutingStrategy::Vanilla { capacity: 3 };
    assert_eq!(random_search(&model, s, &v, cfg(4, 40)).unwrap(), random_search(&model, s, &v, cfg(4, 40)).unwrap());
}

#[test]
fn unlimited_routing_leaves_loss_constant() {
    let model = small_model(2);
    let v = victim(&model);
    let (_, trace) = random_search(&model, RoutingStrategy::Unlimited, &v, cfg(1, 60)).unwrap();
    let first = trace.iterations[0].loss;
    assert!(trace.iterations.iter().all(|r| r.loss == first && r.best_loss == first));
    assert!(!trace.success);
}

#[test]
fn denial_with_full_capacity_is_constant() {
    let model = small_model(3);
    let v = victim(&model);
    let shape = BatchShape::new(3, 4).unwrap();
    let s = RoutingStrategy::Vanilla { capacity: shape.tokens() };
    let c = AttackConfig { objective: Objective::Denial { layer: 0, expert: 0 }, ..cfg(2, 40) };
    let (_, trace) = random_search_denial(&model, s, &v, c).unwrap();
    let first = trace.iterations[0].loss;
    assert!(trace.iterations.iter().all(|r| r.loss == first));
}

#[test]
fn denial_at_zero_capacity_succeeds_immediately() {
    let model = small_model(4);
    let v = victim(&model);
    let c = AttackConfig { objective: Objective::Denial { layer: 0, expert: 1 }, ..cfg(5, 10) };
    let (best, trace) = random_search_denial(&model, RoutingStrategy::Vanilla { capacity: 0 }, &v, c).unwrap();
    assert!(trace.success);
    assert_eq!(trace.iterations_to_success, Some(1));
    assert_eq!(best, trace.initial_adversarial);
}

#[test]
fn zero_budget_returns_initial_batch() {
    let model = small_model(5);
    let v = victim(&model);
    let (best, trace) = random_search(&model, RoutingStrategy::Vanilla { capacity: 2 }, &v, cfg(6, 0)).unwrap();
    assert!(trace.iterations.is_empty());
    assert_eq!(best, trace.initial_adversarial);
    assert!(!trace.success);
}
