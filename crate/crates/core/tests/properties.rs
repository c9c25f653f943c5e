use moebuf_core::moe::{ExpertParams, MoEConfig};
use moebuf_core::routing::{apply_permutation, occupancy_by_source, route_sampled, route_unlimited, route_vanilla};
use moebuf_core::tensor::{softmax_row, topk_indices};
use moebuf_core::{buffer_capacity, BatchShape, GateMatrix, Matrix, MoELayerParams, Rng};
use proptest::prelude::*;

/// Batch shape, expert count and normalised gate rows.
fn gates_strategy() -> impl Strategy<Value = (BatchShape, Vec<Vec<f64>>)> {
    (1usize..=5, 1usize..=5, 1usize..=5).prop_flat_map(|(b, t, n)| {
        // Coarse integer weights make ties common.
        prop::collection::vec(prop::collection::vec(0u8..=4, n), b * t).prop_map(move |raw| {
            let rows = raw
                .into_iter()
                .map(|r| {
                    let r: Vec<f64> = r.into_iter().map(|v| f64::from(v) + 0.25).collect();
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect();
            (BatchShape::new(b, t).unwrap(), rows)
        })
    })
}

fn gate_matrix(shape: BatchShape, rows: &[Vec<f64>]) -> GateMatrix {
    GateMatrix::new(shape, Matrix::from_rows(rows).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let a = softmax_row(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = softmax_row(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_matches_sort(v in prop::collection::vec(0u8..6, 1..10), k in 1usize..10) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let k = k.min(v.len());
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(topk_indices(&v, k).unwrap(), idx[..k].to_vec());
    }

    #[test]
    fn capacity_monotone_in_slack(
        n in 1usize..9, k in 1usize..9, b in 1usize..9, t in 1usize..13,
        c1 in 0.0f64..5.0, dc in 0.0f64..5.0,
    ) {
        let k = k.min(n);
        let cfg = |c| MoEConfig { experts: n, top_k: k, capacity_slack: c, d_model: 1, d_ff: 1 };
        let shape = BatchShape::new(b, t).unwrap();
        prop_assert!(buffer_capacity(&cfg(c1), shape) <= buffer_capacity(&cfg(c1 + dc), shape));
    }

    #[test]
    fn rank1_prefix_independence((shape, rows) in gates_strategy(), k in 1usize..=2, cap in 0usize..8, seed: u64) {
        let n = rows[0].len();
        let k = k.min(n);
        let g = gate_matrix(shape, &rows);
        let mut altered = rows.clone();
        let mut rng = Rng::new(seed, 0);
        for row in altered.iter_mut().skip(shape.seq_len) {
            let j = rng.next_below(n).unwrap();
            row.iter_mut().for_each(|v| *v = 0.0);
            row[j] = 1.0;
        }
        let (p1, _) = route_vanilla(&g, k, cap).unwrap();
        let (p2, _) = route_vanilla(&gate_matrix(shape, &altered), k, cap).unwrap();
        for i in 0..shape.seq_len {
            prop_assert_eq!(p1.token_entries(i)[0], p2.token_entries(i)[0]);
        }
    }

    #[test]
    fn unlimited_permutation_equivariant((shape, rows) in gates_strategy(), k in 1usize..=3, seed: u64) {
        let k = k.min(rows[0].len());
        let g = gate_matrix(shape, &rows);
        let perm = Rng::new(seed, 1).permutation(shape.batch).unwrap();
        let (p, _) = route_unlimited(&g, k).unwrap();
        let (q, _) = route_unlimited(&g.permute_elements(&perm).unwrap(), k).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            for t in 0..shape.seq_len {
                let a = p.token_entries(shape.token_index(src, t));
                let b = q.token_entries(shape.token_index(j, t));
                for (x, y) in a.iter().zip(b) {
                    prop_assert_eq!((x.expert, x.rank, x.dropped), (y.expert, y.rank, y.dropped));
                    prop_assert_eq!(x.weight.to_bits(), y.weight.to_bits());
                }
            }
        }
    }

    #[test]
    fn source_counts_conserve_occupancy((shape, rows) in gates_strategy(), cap in 0usize..10) {
        let k = rows[0].len().min(2);
        let (_, state) = route_vanilla(&gate_matrix(shape, &rows), k, cap).unwrap();
        let mut total = vec![0usize; rows[0].len()];
        for s in 0..shape.batch {
            for (e, c) in occupancy_by_source(&state, s).into_iter().enumerate() {
                total[e] += c;
            }
        }
        for (e, c) in total.into_iter().enumerate() {
            prop_assert_eq!(c, state.occupancy(e));
        }
    }

    #[test]
    fn combine_rows_independent(seed: u64, b in 1usize..4, t in 1usize..4) {
        let cfg = MoEConfig { experts: 3, top_k: 2, capacity_slack: 1.0, d_model: 4, d_ff: 5 };
        let mut rng = Rng::new(seed, 2);
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.next_f64() - 0.5).unwrap();
        let experts = (0..3).map(|_| ExpertParams { w_in: m(4, 5), w_out: m(5, 4) }).collect();
        let layer = MoELayerParams::new(&cfg, m(4, 3), experts).unwrap();
        let shape = BatchShape::new(b, t).unwrap();
        let z = m(b * t, 4);
        let gates = GateMatrix::new(shape, layer.gate_rows(&z).unwrap()).unwrap();
        let (plan, _) = route_unlimited(&gates, 2).unwrap();
        let out = layer.combine(&z, &plan).unwrap();
        // Perturb every other row of z while keeping the plan fixed.
        let noisy = Matrix::from_fn(b * t, 4, |i, j| if i == 0 { z.get(i, j) } else { z.get(i, j) + 1.0 }).unwrap();
        let out2 = layer.combine(&noisy, &plan).unwrap();
        for (x, y) in out.row(0).iter().zip(out2.row(0)) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn full_capacity_matches_unlimited((shape, rows) in gates_strategy(), k in 1usize..=5, extra in 0usize..4) {
        let k = k.min(rows[0].len());
        let g = gate_matrix(shape, &rows);
        let (v, vs) = route_vanilla(&g, k, shape.tokens() + extra).unwrap();
        let (u, us) = route_unlimited(&g, k).unwrap();
        prop_assert_eq!(v.entries, u.entries);
        prop_assert_eq!(vs.buffers, us.buffers);
    }

    #[test]
    fn occupancy_never_exceeds_capacity((shape, rows) in gates_strategy(), k in 1usize..=5, cap in 0usize..12, seed: u64) {
        let k = k.min(rows[0].len());
        let g = gate_matrix(shape, &rows);
        let runs = [
            route_vanilla(&g, k, cap).unwrap(),
            route_sampled(&g, k, cap, &Rng::new(seed, 3)).unwrap(),
            route_unlimited(&g, k).unwrap(),
        ];
        for (i, (plan, state)) in runs.iter().enumerate() {
            let bound = if i == 2 { shape.tokens() } else { cap };
            for e in 0..rows[0].len() {
                prop_assert!(state.occupancy(e) <= bound);
                prop_assert_eq!(state.occupancy(e), plan.entries.iter().filter(|x| x.expert == e && !x.dropped).count());
            }
        }
    }
}

#[test]
fn order_sensitivity_witness_is_found() {
    // Search random small gate matrices for a batch permutation that changes
    // which assignments are dropped.
    let mut rng = Rng::new(11, 11);
    let mut found = None;
    for _ in 0..10_000 {
        let (b, t, n) = (2 + rng.next_below(2).unwrap(), 1 + rng.next_below(2).unwrap(), 2);
        let shape = BatchShape::new(b, t).unwrap();
        let rows: Vec<Vec<f64>> = (0..b * t)
            .map(|_| {
                let p = 0.1 + 0.8 * rng.next_f64();
                vec![p, 1.0 - p]
            })
            .collect();
        let g = gate_matrix(shape, &rows);
        let perm = rng.permutation(b).unwrap();
        let (p, _) = route_vanilla(&g, 1, 1).unwrap();
        let (q, _) = route_vanilla(&g.permute_elements(&perm).unwrap(), 1, 1).unwrap();
        let dropped_before: Vec<bool> = (0..b * t).map(|i| p.token_entries(i)[0].dropped).collect();
        let moved: Vec<bool> = (0..b * t)
            .map(|i| {
                let (src, pos) = (i / t, i % t);
                let j = perm.iter().position(|&x| x == src).unwrap();
                q.token_entries(j * t + pos)[0].dropped
            })
            .collect();
        if dropped_before != moved {
            found = Some((rows, perm, n));
            break;
        }
    }
    assert!(found.is_some(), "no order-sensitive instance found");
}

#[test]
fn permuted_batch_helpers_round_trip() {
    let batch = vec![vec![1u32], vec![2], vec![3], vec![4]];
    let perm = Rng::new(5, 5).permutation(4).unwrap();
    let shuffled = apply_permutation(&batch, &perm).unwrap();
    assert_eq!(moebuf_core::routing::undo_permutation(&shuffled, &perm).unwrap(), batch);
}
