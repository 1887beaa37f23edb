//! Wall-time benchmark of the block-sparse kernel against the dense matmul
//! on activation-shaped operands.

use anyhow::Result;
use bst_core::pruner::{prune_batch_to_bsr, PruneConfig};
use bst_core::sparse_ops::bspmm;
use bst_core::tensor::{matmul_dense, rng_normal, Rng};
use serde::Serialize;
use std::fmt::Write as _;
use std::time::Instant;

pub const DEFAULT_SHAPE: (usize, usize, usize) = (64, 196, 384);

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub kind: String,
    /// Block size; 0 for the dense baseline row.
    pub block: usize,
    pub sparsity: f64,
    pub median_ms: f64,
    pub macs_executed: u64,
    pub macs_dense_equivalent: u64,
    /// Dense-equivalent throughput in GMAC/s (dense work over wall time).
    pub dense_equiv_gmacs: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Run the sweep. The multiplied pair is the flattened activation
/// `(B*P) x D` against a square `D x D` dense operand.
pub fn run_bench(
    shape: (usize, usize, usize),
    blocks: &[usize],
    sparsities: &[f64],
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let (b, p, d) = shape;
    let reps = reps.max(1);
    let mut rng = Rng::new(seed);
    let x = rng_normal(&mut rng, &[b, p, d], 0.0, 1.0)?;
    let rhs = rng_normal(&mut rng, &[d, d], 0.0, 1.0)?;
    let x2 = x.clone().reshape(&[b * p, d])?;

    let mut rows = Vec::new();
    let dense_macs = (b * p * d * d) as u64;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        let y = matmul_dense(&x2, &rhs)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(&y);
        times.push(dt);
    }
    let dense_ms = median(times);
    rows.push(BenchRow {
        kind: "dense".into(),
        block: 0,
        sparsity: 0.0,
        median_ms: dense_ms,
        macs_executed: dense_macs,
        macs_dense_equivalent: dense_macs,
        dense_equiv_gmacs: dense_macs as f64 / dense_ms / 1e6,
    });

    for &block in blocks {
        if d % block != 0 {
            continue;
        }
        for &s in sparsities {
            let cfg = PruneConfig::new(s, block)?;
            let (m, _) = prune_batch_to_bsr(&x, &cfg)?;
            let mut times = Vec::with_capacity(reps);
            let mut stats = None;
            for _ in 0..reps {
                let t0 = Instant::now();
                let (y, st) = bspmm(&m, &rhs)?;
                let dt = t0.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(&y);
                times.push(dt);
                stats = Some(st);
            }
            let st = stats.expect("reps >= 1");
            let ms = median(times);
            rows.push(BenchRow {
                kind: "bspmm".into(),
                block,
                sparsity: s,
                median_ms: ms,
                macs_executed: st.macs_executed,
                macs_dense_equivalent: st.macs_dense_equivalent,
                dense_equiv_gmacs: st.macs_dense_equivalent as f64 / ms / 1e6,
            });
        }
    }
    Ok(rows)
}

pub fn render_csv(rows: &[BenchRow], meta: &str) -> String {
    let mut out = String::new();
    writeln!(out, "# {meta}").unwrap();
    writeln!(
        out,
        "kind,block,sparsity,median_ms,macs_executed,macs_dense_equivalent,dense_equiv_gmacs"
    )
    .unwrap();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.4},{},{},{:.3}",
            r.kind,
            r.block,
            r.sparsity,
            r.median_ms,
            r.macs_executed,
            r.macs_dense_equivalent,
            r.dense_equiv_gmacs
        )
        .unwrap();
    }
    out
}
