//! Cross-sequence isolation of the toy model.
//!
//! Without capacity limits the only channel between batch elements is gone,
//! so the victim's logits must not move by a single bit whatever its
//! batch-mates are or wherever it sits. With top-1 routing and the victim
//! first, vanilla routing gives the same guarantee.

use moebuf_core::attack::assemble_batch;
use moebuf_core::routing::apply_permutation;
use moebuf_core::{ModelConfig, Rng, RoutingStrategy, ToyModel};

fn fuzzed_config(rng: &mut Rng, top_k: Option<usize>) -> ModelConfig {
    let experts = 1 + rng.next_below(4).unwrap();
    ModelConfig {
        blocks: 1 + rng.next_below(2).unwrap(),
        d_model: 4 + rng.next_below(9).unwrap(),
        vocab: 2 + rng.next_below(15).unwrap(),
        max_seq_len: 1 + rng.next_below(6).unwrap(),
        experts,
        top_k: top_k.unwrap_or(1 + rng.next_below(experts).unwrap()),
        capacity_slack: rng.next_f64() * 2.0,
        d_ff: 2 + rng.next_below(8).unwrap(),
        seed: rng.next_u64(),
    }
}

fn random_batch(rng: &mut Rng, b: usize, t: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..b)
        .map(|_| (0..t).map(|_| rng.next_below(vocab).unwrap() as u32).collect())
        .collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn unlimited_routing_isolates_victim() {
    let mut rng = Rng::new(2024, 0);
    for _ in 0..100 {
        let cfg = fuzzed_config(&mut rng, None);
        let model = ToyModel::init(cfg).unwrap();
        let b = 2 + rng.next_below(4).unwrap();
        let t = 1 + rng.next_below(cfg.max_seq_len).unwrap();
        let victim = random_batch(&mut rng, 1, t, cfg.vocab).remove(0);
        let pos = rng.next_below(b).unwrap();
        let solo = model.forward(std::slice::from_ref(&victim), RoutingStrategy::Unlimited).unwrap();
        let reference = bits(solo.logits.as_slice());
        for _ in 0..3 {
            let mates = random_batch(&mut rng, b - 1, t, cfg.vocab);
            let batch = assemble_batch(&mates, &victim, pos);
            let out = model.forward(&batch, RoutingStrategy::Unlimited).unwrap();
            let rows: Vec<f64> = (0..t).flat_map(|p| out.logits.row(out.shape.token_index(pos, p)).to_vec()).collect();
            assert_eq!(bits(&rows), reference);

            let perm = rng.permutation(b).unwrap();
            let shuffled = apply_permutation(&batch, &perm).unwrap();
            let out2 = model.forward(&shuffled, RoutingStrategy::Unlimited).unwrap();
            for (j, &src) in perm.iter().enumerate() {
                for p in 0..t {
                    assert_eq!(
                        bits(out2.logits.row(out2.shape.token_index(j, p))),
                        bits(out.logits.row(out.shape.token_index(src, p)))
                    );
                }
            }
        }
    }
}

#[test]
fn top1_victim_first_is_isolated_under_vanilla() {
    let mut rng = Rng::new(7, 7);
    for _ in 0..100 {
        let cfg = fuzzed_config(&mut rng, Some(1));
        let model = ToyModel::init(cfg).unwrap();
        let b = 2 + rng.next_below(4).unwrap();
        let t = 1 + rng.next_below(cfg.max_seq_len).unwrap();
        let capacity = rng.next_below(b * t + 1).unwrap();
        let strategy = RoutingStrategy::Vanilla { capacity };
        let victim = random_batch(&mut rng, 1, t, cfg.vocab).remove(0);
        let first = model
            .forward(&assemble_batch(&random_batch(&mut rng, b - 1, t, cfg.vocab), &victim, 0), strategy)
            .unwrap();
        let second = model
            .forward(&assemble_batch(&random_batch(&mut rng, b - 1, t, cfg.vocab), &victim, 0), strategy)
            .unwrap();
        assert_eq!(bits(first.last_logits(0).unwrap()), bits(second.last_logits(0).unwrap()));
    }
}

#[test]
fn distributions_normalised() {
    let mut rng = Rng::new(3, 3);
    for _ in 0..50 {
        let cfg = fuzzed_config(&mut rng, None);
        let model = ToyModel::init(cfg).unwrap();
        let t = cfg.max_seq_len;
        let batch = random_batch(&mut rng, 3, t, cfg.vocab);
        let out = model.forward(&batch, RoutingStrategy::Vanilla { capacity: 2 }).unwrap();
        for e in 0..3 {
            let d = out.next_token_distribution(e).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
