//! Property tests for the format and kernel invariants.

use bst_core::bsr::{compression_report, decode, encode};
use bst_core::pruner::{block_l2_scores, prune_batch_to_bsr, select_topk_prune, PruneConfig};
use bst_core::round_half_up;
use bst_core::sparse_ops::bspmm;
use bst_core::tensor::{matmul_dense, rng_normal, DenseTensor, Rng};
use proptest::prelude::*;

/// Random dense matrix with a seeded generator plus some exact-zero blocks.
fn sparse_dense_matrix(
    seed: u64,
    block_rows: usize,
    block_cols: usize,
    br: usize,
    bc: usize,
    zero_every: usize,
) -> DenseTensor {
    let rows = block_rows * br;
    let cols = block_cols * bc;
    let mut rng = Rng::new(seed);
    let mut m = rng_normal(&mut rng, &[rows, cols], 0.0, 1.0).unwrap();
    for n in 0..block_rows {
        for c in 0..block_cols {
            if (n * block_cols + c) % zero_every == 0 {
                for r in 0..br {
                    let base = (n * br + r) * cols + c * bc;
                    m.data_mut()[base..base + bc].fill(0.0);
                }
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// decode(encode(x)) = x bit-exactly for any block geometry.
    #[test]
    fn bsr_round_trip(
        seed in 0u64..1000,
        block_rows in 1usize..8,
        block_cols in 1usize..8,
        br in 1usize..4,
        bc in 1usize..6,
        zero_every in 2usize..5,
    ) {
        let x = sparse_dense_matrix(seed, block_rows, block_cols, br, bc, zero_every);
        let m = encode(&x, br, bc).unwrap();
        prop_assert!(m.validate().is_empty());
        let back = decode(&m).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    /// Encoded value count never exceeds the dense element count, and the
    /// stored bytes follow the realized zero-block fraction exactly.
    #[test]
    fn bsr_size_law(
        seed in 0u64..1000,
        block_rows in 1usize..8,
        block_cols in 1usize..8,
        bc in 1usize..6,
        zero_every in 2usize..5,
    ) {
        let x = sparse_dense_matrix(seed, block_rows, block_cols, 1, bc, zero_every);
        let m = encode(&x, 1, bc).unwrap();
        prop_assert!(m.values.len() <= x.len());
        let value_bytes = ((1.0 - m.zero_block_fraction()) * m.dense_bytes() as f64).round() as u64;
        prop_assert_eq!(m.value_bytes(), value_bytes);
    }

    /// Per-sample count exactness and score ordering for arbitrary scores.
    #[test]
    fn topk_count_and_order(
        seed in 0u64..1000,
        n in 1usize..200,
        s10 in 0usize..=10,
    ) {
        let mut rng = Rng::new(seed);
        let scores: Vec<f32> = (0..n).map(|_| rng.next_f32() * 4.0).collect();
        let s = s10 as f64 / 10.0;
        let d = select_topk_prune(&scores, s).unwrap();
        prop_assert_eq!(d.k, round_half_up(s * n as f64).min(n));
        prop_assert_eq!(d.pruned_mask.iter().filter(|&&m| m).count(), d.k);
        let max_pruned = d.scores.iter().zip(&d.pruned_mask)
            .filter(|(_, &m)| m).map(|(s, _)| *s).fold(f32::MIN, f32::max);
        let min_kept = d.scores.iter().zip(&d.pruned_mask)
            .filter(|(_, &m)| !m).map(|(s, _)| *s).fold(f32::MAX, f32::min);
        if d.k > 0 && d.k < n {
            prop_assert!(max_pruned <= min_kept);
        }
    }

    /// bspmm equals the decode-then-dense oracle (bit-exact: zero blocks
    /// contribute exact zeros in the oracle and are skipped by the kernel).
    #[test]
    fn bspmm_matches_oracle(
        seed in 0u64..500,
        batch in 1usize..3,
        p in 1usize..6,
        blocks_per_row in 1usize..6,
        bc in 1usize..9,
        n in 1usize..48,
        s10 in 0usize..=10,
    ) {
        let d = blocks_per_row * bc;
        let mut rng = Rng::new(seed);
        let x = rng_normal(&mut rng, &[batch, p, d], 0.0, 1.0).unwrap();
        let cfg = PruneConfig::new(s10 as f64 / 10.0, bc).unwrap();
        let (m, _) = prune_batch_to_bsr(&x, &cfg).unwrap();
        let rhs = rng_normal(&mut rng, &[d, n], 0.0, 1.0).unwrap();
        let (y, stats) = bspmm(&m, &rhs).unwrap();
        let oracle = matmul_dense(&decode(&m).unwrap(), &rhs).unwrap();
        prop_assert_eq!(y.data(), oracle.data());
        // skip accounting: executed = (1 - zero fraction) * dense, exactly
        prop_assert_eq!(
            stats.macs_executed * stats.blocks_visited,
            stats.blocks_processed() * stats.macs_dense_equivalent
        );
    }

    /// Scores are invariant to which sample they sit in (locality), and the
    /// per-sample pruned count never depends on the other samples.
    #[test]
    fn prune_locality(
        seed in 0u64..500,
        p in 1usize..4,
        blocks in 1usize..5,
        bc in 1usize..5,
        s10 in 0usize..=10,
    ) {
        let d = blocks * bc;
        let mut rng = Rng::new(seed);
        let a = rng_normal(&mut rng, &[1, p, d], 0.0, 1.0).unwrap();
        let b = rng_normal(&mut rng, &[1, p, d], 0.0, 10.0).unwrap();
        let cfg = PruneConfig::new(s10 as f64 / 10.0, bc).unwrap();
        let (_, da) = prune_batch_to_bsr(&a, &cfg).unwrap();
        // Stack a and b; a's decision must be unchanged.
        let mut stacked = a.data().to_vec();
        stacked.extend_from_slice(b.data());
        let x = DenseTensor::new(vec![2, p, d], stacked).unwrap();
        let (_, ds) = prune_batch_to_bsr(&x, &cfg).unwrap();
        prop_assert_eq!(&da[0].pruned_mask, &ds[0].pruned_mask);
        prop_assert_eq!(ds[0].k, ds[1].k);
    }

    /// The index-cost overhead fraction is monotone non-increasing in both
    /// block size and sparsity for arbitrary geometries.
    #[test]
    fn overhead_fraction_monotone_random_geometry(
        rows in 1usize..64,
        cols_base in 1usize..32,
    ) {
        let cols = cols_base * 12; // divisible by 1,2,3,4,6,12
        let mut prev = f64::INFINITY;
        for bc in [1usize, 2, 3, 4, 6, 12] {
            let rep = compression_report(rows, cols, 1, bc, 0.4, 4, 4).unwrap();
            prop_assert!(rep.overhead_fraction <= prev + 1e-12);
            prev = rep.overhead_fraction;
        }
        let mut prev = f64::INFINITY;
        for s10 in 0..=10 {
            let rep = compression_report(rows, cols, 1, 4, s10 as f64 / 10.0, 4, 4).unwrap();
            prop_assert!(rep.overhead_fraction <= prev + 1e-12);
            prev = rep.overhead_fraction;
        }
    }

    /// Scoring is exactly the l2 norm of each segment.
    #[test]
    fn scores_match_f64_norms(seed in 0u64..1000, rows in 1usize..5, blocks in 1usize..6, bc in 1usize..6) {
        let mut rng = Rng::new(seed);
        let x = rng_normal(&mut rng, &[rows, blocks * bc], 0.0, 1.0).unwrap();
        let scores = block_l2_scores(&x, bc).unwrap();
        for (bi, score) in scores.iter().enumerate() {
            let seg = &x.data()[bi * bc..(bi + 1) * bc];
            let want = seg.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            prop_assert!((*score as f64 - want).abs() <= 1e-5);
        }
    }
}
