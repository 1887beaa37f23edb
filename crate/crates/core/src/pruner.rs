//! Magnitude-based structured pruning: per-block l2 scoring, top-k
//! selection, and conversion of pruned activation batches to BSR.
//!
//! Blocks are contiguous length-`b` row segments. Selection is local to a
//! sample: blocks are never compared across the mini-batch, so every sample
//! prunes exactly the same count `k = round(s * N)`.

use crate::bsr::{encode, BsrMatrix};
use crate::error::{CoreError, Result};
use crate::round_half_up;
use crate::tensor::DenseTensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of blocks forced to zero, in [0, 1].
    pub sparsity: f64,
    /// Elements per block (row segment length); block rows are fixed to 1.
    pub block_cols: usize,
}

impl PruneConfig {
    pub fn new(sparsity: f64, block_cols: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(CoreError::InvalidArgument(format!(
                "sparsity must be in [0, 1], got {sparsity}"
            )));
        }
        if block_cols == 0 {
            return Err(CoreError::InvalidArgument(
                "block_cols must be >= 1".into(),
            ));
        }
        Ok(Self {
            sparsity,
            block_cols,
        })
    }

    pub fn dense() -> Self {
        Self {
            sparsity: 0.0,
            block_cols: 1,
        }
    }
}

/// Outcome of top-k selection for one sample.
#[derive(Debug, Clone)]
pub struct PruneDecision {
    /// Per-block l2 norms in block order.
    pub scores: Vec<f32>,
    /// True where the block was pruned; exactly `k` bits set.
    pub pruned_mask: Vec<bool>,
    /// Number of pruned blocks, `round(s * N)` half-up.
    pub k: usize,
    /// Total blocks in the sample.
    pub n_blocks: usize,
}

/// l2 norm of every length-`b` row segment of a `[P, D]` matrix, in row-major
/// block order.
pub fn block_l2_scores(x: &DenseTensor, b: usize) -> Result<Vec<f32>> {
    let (rows, cols) = x.dims2()?;
    if b == 0 || cols % b != 0 {
        return Err(CoreError::BlockShape {
            rows,
            cols,
            br: 1,
            bc: b,
        });
    }
    Ok(block_l2_scores_raw(x.data(), b))
}

fn block_l2_scores_raw(data: &[f32], b: usize) -> Vec<f32> {
    data.chunks_exact(b)
        .map(|seg| seg.iter().map(|&v| v * v).sum::<f32>().sqrt())
        .collect()
}

/// Select the `k = round(s * N)` lowest-scoring blocks. Ties are broken by
/// pruning the lower block index first, so the decision is deterministic.
pub fn select_topk_prune(scores: &[f32], sparsity: f64) -> Result<PruneDecision> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(CoreError::InvalidArgument(format!(
            "sparsity must be in [0, 1], got {sparsity}"
        )));
    }
    let n = scores.len();
    let k = round_half_up(sparsity * n as f64).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by score keeps equal scores in index order.
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut mask = vec![false; n];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    Ok(PruneDecision {
        scores: scores.to_vec(),
        pruned_mask: mask,
        k,
        n_blocks: n,
    })
}

/// Apply per-sample top-k pruning to a `[B, P, D]` batch and encode the
/// result as one BSR matrix over the flattened `(B*P) x D` view (br=1,
/// bc=b). Samples are scored and selected independently, so each loses
/// exactly the same block count.
pub fn prune_batch_to_bsr(
    x: &DenseTensor,
    cfg: &PruneConfig,
) -> Result<(BsrMatrix, Vec<PruneDecision>)> {
    let (batch, p, d) = x.dims3()?;
    let b = cfg.block_cols;
    if b == 0 || d % b != 0 {
        return Err(CoreError::BlockShape {
            rows: p,
            cols: d,
            br: 1,
            bc: b,
        });
    }
    let sample_len = p * d;
    let mut pruned = x.data().to_vec();
    let decisions: Vec<PruneDecision> = pruned
        .par_chunks_mut(sample_len)
        .map(|sample| {
            let scores = block_l2_scores_raw(sample, b);
            let decision = select_topk_prune(&scores, cfg.sparsity)
                .expect("sparsity validated above");
            for (bi, &dead) in decision.pruned_mask.iter().enumerate() {
                if dead {
                    sample[bi * b..(bi + 1) * b].fill(0.0);
                }
            }
            decision
        })
        .collect();
    let flat = DenseTensor::new(vec![batch * p, d], pruned)?;
    Ok((encode(&flat, 1, b)?, decisions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsr::decode;
    use crate::tensor::{rng_normal, Rng};

    #[test]
    fn zero_input_zero_scores() {
        let x = DenseTensor::zeros(&[2, 6]);
        let s = block_l2_scores(&x, 3).unwrap();
        assert_eq!(s, vec![0.0; 4]);
    }

    #[test]
    fn score_345_triple() {
        let x = DenseTensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let s = block_l2_scores(&x, 2).unwrap();
        assert_eq!(s, vec![5.0]);
    }

    #[test]
    fn scores_hand_computed() {
        let x = DenseTensor::new(
            vec![1, 12],
            vec![1.0, 2.0, 3.0, 0.1, 0.1, 0.1, 4.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let s = block_l2_scores(&x, 3).unwrap();
        let expected = [3.7417f32, 0.1732, 4.0, 1.7321];
        for (got, want) in s.iter().zip(expected) {
            assert!((got - want).abs() <= 1e-4, "got {got}, want {want}");
        }
    }

    #[test]
    fn indivisible_block_rejected() {
        let x = DenseTensor::zeros(&[2, 7]);
        assert!(block_l2_scores(&x, 3).is_err());
    }

    #[test]
    fn topk_s0_and_s1() {
        let scores = [0.5f32, 1.5, 0.25];
        let d0 = select_topk_prune(&scores, 0.0).unwrap();
        assert_eq!(d0.k, 0);
        assert!(d0.pruned_mask.iter().all(|&m| !m));
        let d1 = select_topk_prune(&scores, 1.0).unwrap();
        assert_eq!(d1.k, 3);
        assert!(d1.pruned_mask.iter().all(|&m| m));
    }

    #[test]
    fn topk_prunes_two_smallest() {
        let scores = [3.7417f32, 0.1732, 4.0, 1.7321];
        let d = select_topk_prune(&scores, 0.5).unwrap();
        assert_eq!(d.k, 2);
        assert_eq!(d.pruned_mask, vec![false, true, false, true]);
    }

    #[test]
    fn topk_tie_break_lower_index_first() {
        let scores = [1.0f32, 1.0, 1.0, 2.0];
        let d = select_topk_prune(&scores, 0.5).unwrap();
        assert_eq!(d.pruned_mask, vec![true, true, false, false]);
    }

    #[test]
    fn count_exactness_over_grid() {
        for n in 1..=200usize {
            let scores: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin().abs()).collect();
            for s10 in 0..=10 {
                let s = s10 as f64 / 10.0;
                let d = select_topk_prune(&scores, s).unwrap();
                let expected = round_half_up(s * n as f64).min(n);
                assert_eq!(d.k, expected, "n={n} s={s}");
                assert_eq!(
                    d.pruned_mask.iter().filter(|&&m| m).count(),
                    expected,
                    "n={n} s={s}"
                );
            }
        }
    }

    #[test]
    fn order_correctness() {
        let mut rng = Rng::new(17);
        let x = rng_normal(&mut rng, &[4, 64], 0.0, 1.0).unwrap();
        let scores = block_l2_scores(&x, 8).unwrap();
        let d = select_topk_prune(&scores, 0.4).unwrap();
        let max_pruned = d
            .scores
            .iter()
            .zip(&d.pruned_mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| *s)
            .fold(f32::MIN, f32::max);
        let min_kept = d
            .scores
            .iter()
            .zip(&d.pruned_mask)
            .filter(|(_, &m)| !m)
            .map(|(s, _)| *s)
            .fold(f32::MAX, f32::min);
        assert!(max_pruned <= min_kept);
    }

    /// Among all ways to zero k blocks, top-k retains the maximal total
    /// squared norm. Brute force over every k-subset for N <= 8.
    #[test]
    fn topk_retains_max_norm_brute_force() {
        let mut rng = Rng::new(23);
        for n in 1..=8usize {
            let scores: Vec<f32> = (0..n).map(|_| rng.next_f32() * 3.0).collect();
            for k in 0..=n {
                let d = select_topk_prune(&scores, k as f64 / n as f64).unwrap();
                if d.k != k {
                    continue; // only exercise exact-k sparsities
                }
                let retained: f64 = scores
                    .iter()
                    .zip(&d.pruned_mask)
                    .filter(|(_, &m)| !m)
                    .map(|(s, _)| (*s as f64) * (*s as f64))
                    .sum();
                // enumerate all subsets of size k to prune
                let mut best = f64::MIN;
                for bits in 0u32..(1 << n) {
                    if bits.count_ones() as usize != k {
                        continue;
                    }
                    let kept: f64 = (0..n)
                        .filter(|i| bits & (1 << i) == 0)
                        .map(|i| (scores[i] as f64) * (scores[i] as f64))
                        .sum();
                    best = best.max(kept);
                }
                assert!(retained >= best - 1e-9, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn batch_prune_s0_round_trips() {
        let mut rng = Rng::new(3);
        let x = rng_normal(&mut rng, &[2, 4, 8], 0.0, 1.0).unwrap();
        let cfg = PruneConfig::new(0.0, 4).unwrap();
        let (m, decisions) = prune_batch_to_bsr(&x, &cfg).unwrap();
        assert!(decisions.iter().all(|d| d.k == 0));
        let back = decode(&m).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn batch_prune_no_cross_sample_starvation() {
        // Sample 0 all-large, sample 1 all-tiny: each still loses exactly
        // half its blocks.
        let mut data = vec![100.0f32; 16];
        data.extend(vec![0.001f32; 16]);
        let x = DenseTensor::new(vec![2, 2, 8], data).unwrap();
        let cfg = PruneConfig::new(0.5, 4).unwrap();
        let (_, decisions) = prune_batch_to_bsr(&x, &cfg).unwrap();
        assert_eq!(decisions.len(), 2);
        for d in &decisions {
            assert_eq!(d.n_blocks, 4);
            assert_eq!(d.k, 2);
        }
    }

    #[test]
    fn batch_prune_fig_style_example() {
        let x = DenseTensor::new(
            vec![1, 1, 12],
            vec![1.0, 2.0, 3.0, 0.1, 0.1, 0.1, 4.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let cfg = PruneConfig::new(0.5, 3).unwrap();
        let (m, decisions) = prune_batch_to_bsr(&x, &cfg).unwrap();
        assert_eq!(decisions[0].pruned_mask, vec![false, true, false, true]);
        assert_eq!(m.nnzb(), 2);
        let back = decode(&m).unwrap();
        assert_eq!(
            back.data(),
            &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn pruned_norm_never_exceeds_original() {
        let mut rng = Rng::new(8);
        let x = rng_normal(&mut rng, &[3, 4, 16], 0.0, 1.0).unwrap();
        for s10 in [0, 3, 5, 8, 10] {
            let cfg = PruneConfig::new(s10 as f64 / 10.0, 4).unwrap();
            let (m, _) = prune_batch_to_bsr(&x, &cfg).unwrap();
            let back = decode(&m).unwrap();
            assert!(back.frobenius_norm() <= x.frobenius_norm() + 1e-9);
        }
    }

    #[test]
    fn locality_permuting_samples_permutes_decisions() {
        let mut rng = Rng::new(31);
        let x = rng_normal(&mut rng, &[3, 2, 8], 0.0, 1.0).unwrap();
        let cfg = PruneConfig::new(0.5, 2).unwrap();
        let (_, d_orig) = prune_batch_to_bsr(&x, &cfg).unwrap();

        // Swap samples 0 and 2.
        let sample_len = 2 * 8;
        let mut swapped = x.data().to_vec();
        let (a, rest) = swapped.split_at_mut(sample_len);
        let (_, c) = rest.split_at_mut(sample_len);
        a.swap_with_slice(c);
        let xs = DenseTensor::new(vec![3, 2, 8], swapped).unwrap();
        let (_, d_swap) = prune_batch_to_bsr(&xs, &cfg).unwrap();

        assert_eq!(d_orig[0].pruned_mask, d_swap[2].pruned_mask);
        assert_eq!(d_orig[2].pruned_mask, d_swap[0].pruned_mask);
        assert_eq!(d_orig[1].pruned_mask, d_swap[1].pruned_mask);
    }
}
