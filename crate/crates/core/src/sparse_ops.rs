//! Block-sparse compute kernels and the dense-forward/sparse-backward
//! linear operator.
//!
//! The BSpMM kernel is the CPU analog of a predicate-skipping GPU kernel: it
//! walks the output tile by tile, parses `crow`/`col` to find the stored
//! blocks of each block row, and skips absent blocks entirely. Reduction
//! order per output element is fixed (ascending block column, ascending
//! offset within a block), which is the same order the dense reference
//! matmul uses, so a fully dense BSR operand reproduces the oracle
//! bit-for-bit.

use crate::bsr::BsrMatrix;
use crate::error::{CoreError, Result};
use crate::pruner::{prune_batch_to_bsr, PruneConfig, PruneDecision};
use crate::tensor::{matmul_dense, transpose2d, DenseTensor};
use rayon::prelude::*;
use serde::Serialize;

/// Default output tile width of the BSpMM kernel.
pub const DEFAULT_N_TILE: usize = 64;

/// Work accounting for one BSpMM call. MACs are multiply-accumulate counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BspmmStats {
    /// Logical block slots consulted while parsing the sparse structure.
    pub blocks_visited: u64,
    /// Slots whose block is absent (skipped dot products).
    pub blocks_skipped: u64,
    pub macs_executed: u64,
    pub macs_dense_equivalent: u64,
}

impl BspmmStats {
    pub fn blocks_processed(&self) -> u64 {
        self.blocks_visited - self.blocks_skipped
    }

    /// Fraction of the dense-equivalent work actually executed.
    pub fn executed_fraction(&self) -> f64 {
        self.macs_executed as f64 / self.macs_dense_equivalent as f64
    }
}

/// `BsrMatrix[M x K] * DenseTensor[K x N]`, skipping absent blocks.
pub fn bspmm(a: &BsrMatrix, b: &DenseTensor) -> Result<(DenseTensor, BspmmStats)> {
    bspmm_tiled(a, b, DEFAULT_N_TILE)
}

pub fn bspmm_tiled(
    a: &BsrMatrix,
    b: &DenseTensor,
    n_tile: usize,
) -> Result<(DenseTensor, BspmmStats)> {
    a.ensure_valid()?;
    let (k, n) = b.dims2()?;
    if a.cols != k {
        return Err(CoreError::ShapeMismatch(format!(
            "bspmm inner extents differ: {}x{} vs {}x{}",
            a.rows, a.cols, k, n
        )));
    }
    let n_tile = n_tile.max(1);
    let mut out = vec![0f32; a.rows * n];
    let bd = b.data();
    let br = a.br;
    let bc = a.bc;
    // One worker per block row; each owns `br` output rows.
    out.par_chunks_mut(br * n)
        .enumerate()
        .for_each(|(block_row, rows_out)| {
            let mut tile_start = 0;
            while tile_start < n {
                let tile_end = (tile_start + n_tile).min(n);
                // Parse crow/col for this block row; absent blocks never
                // enter the loop, which is the skip.
                for (cb, block) in a.row_blocks(block_row) {
                    for r in 0..br {
                        let out_row = &mut rows_out[r * n..(r + 1) * n];
                        for (p, &av) in block[r * bc..(r + 1) * bc].iter().enumerate() {
                            let b_row = &bd[(cb * bc + p) * n..(cb * bc + p) * n + n];
                            for j in tile_start..tile_end {
                                out_row[j] += av * b_row[j];
                            }
                        }
                    }
                }
                tile_start = tile_end;
            }
        });
    let visited = a.total_blocks() as u64;
    let processed = a.nnzb() as u64;
    let stats = BspmmStats {
        blocks_visited: visited,
        blocks_skipped: visited - processed,
        macs_executed: processed * (br * bc) as u64 * n as u64,
        macs_dense_equivalent: (a.rows * a.cols) as u64 * n as u64,
    };
    Ok((DenseTensor::new(vec![a.rows, n], out)?, stats))
}

// ---------------------------------------------------------------------------
// Saved activations
// ---------------------------------------------------------------------------

/// Representation an activation is held in between forward and backward.
#[derive(Debug, Clone)]
pub enum SavedRepr {
    Bsr(BsrMatrix),
    /// Fallback when the block size does not divide the trailing extent;
    /// stored as the flattened `(B*P) x D` matrix.
    Dense(DenseTensor),
}

/// A pruned activation retained for the weight-gradient product.
#[derive(Debug, Clone)]
pub struct SavedActivation {
    pub repr: SavedRepr,
    /// `(B, P, D)` of the tensor the activation was taken from.
    pub original_shape: [usize; 3],
    pub cfg: PruneConfig,
}

impl SavedActivation {
    /// Prune and encode `x` (shape `[B, P, D]`). Falls back to a dense copy
    /// with a logged warning when the block size does not divide `D`.
    pub fn create(x: &DenseTensor, cfg: &PruneConfig) -> Result<Self> {
        let (batch, p, d) = x.dims3()?;
        let repr = if d % cfg.block_cols == 0 {
            let (m, _) = prune_batch_to_bsr(x, cfg)?;
            SavedRepr::Bsr(m)
        } else {
            log::warn!(
                "activation [{batch}, {p}, {d}] not divisible by block {}; saved dense",
                cfg.block_cols
            );
            SavedRepr::Dense(x.clone().reshape(&[batch * p, d])?)
        };
        Ok(Self {
            repr,
            original_shape: [batch, p, d],
            cfg: *cfg,
        })
    }

    /// As `create`, but also returns the per-sample decisions.
    pub fn create_with_decisions(
        x: &DenseTensor,
        cfg: &PruneConfig,
    ) -> Result<(Self, Vec<PruneDecision>)> {
        let (batch, p, d) = x.dims3()?;
        if d % cfg.block_cols == 0 {
            let (m, decisions) = prune_batch_to_bsr(x, cfg)?;
            Ok((
                Self {
                    repr: SavedRepr::Bsr(m),
                    original_shape: [batch, p, d],
                    cfg: *cfg,
                },
                decisions,
            ))
        } else {
            Ok((Self::create(x, cfg)?, Vec::new()))
        }
    }

    pub fn is_bsr(&self) -> bool {
        matches!(self.repr, SavedRepr::Bsr(_))
    }

    /// Flattened `(B*P) x D` dense view of the stored activation.
    pub fn decode2d(&self) -> Result<DenseTensor> {
        match &self.repr {
            SavedRepr::Bsr(m) => crate::bsr::decode(m),
            SavedRepr::Dense(t) => Ok(t.clone()),
        }
    }

    /// Bytes actually held (BSR: values + indices; dense fallback: the full
    /// buffer).
    pub fn stored_bytes(&self) -> u64 {
        match &self.repr {
            SavedRepr::Bsr(m) => m.value_bytes() + m.index_bytes(),
            SavedRepr::Dense(t) => t.len() as u64 * 4,
        }
    }

    pub fn dense_equivalent_bytes(&self) -> u64 {
        self.original_shape.iter().product::<usize>() as u64 * 4
    }
}

// ---------------------------------------------------------------------------
// SparseLinear operator
// ---------------------------------------------------------------------------

/// Weight gradient `dW = dy^T * x` with `x` the (possibly pruned) saved
/// activation as the sparse operand. Zero blocks of `x` contribute nothing
/// and are skipped; the reduction over flattened rows is ascending, matching
/// the dense oracle `matmul(dy^T, x)` bit-for-bit when nothing was pruned.
pub fn grad_weight(dy: &DenseTensor, saved: &SavedActivation) -> Result<DenseTensor> {
    let (rows, dout) = dy.dims2()?;
    let expected_rows = saved.original_shape[0] * saved.original_shape[1];
    if rows != expected_rows {
        return Err(CoreError::ShapeMismatch(format!(
            "grad_weight: dy has {rows} rows, saved activation has {expected_rows}"
        )));
    }
    match &saved.repr {
        SavedRepr::Dense(x) => matmul_dense(&transpose2d(dy)?, x),
        SavedRepr::Bsr(m) => {
            let din = m.cols;
            let dyd = dy.data();
            let br = m.br;
            let bc = m.bc;
            let mut dw = vec![0f32; dout * din];
            // Partition dW by output row; every worker scans the stored
            // blocks in (block row, block col) order so each dW element
            // reduces over activation rows in ascending order.
            dw.par_chunks_mut(din).enumerate().for_each(|(o, dw_row)| {
                for block_row in 0..m.block_rows() {
                    for (cb, block) in m.row_blocks(block_row) {
                        for r in 0..br {
                            let g = dyd[(block_row * br + r) * dout + o];
                            let dst = &mut dw_row[cb * bc..(cb + 1) * bc];
                            for (d, &v) in dst.iter_mut().zip(&block[r * bc..(r + 1) * bc]) {
                                *d += g * v;
                            }
                        }
                    }
                }
            });
            DenseTensor::new(vec![dout, din], dw)
        }
    }
}

/// Dense forward `y = x * W^T + bias` over `[B, P, Din]`, plus the pruned
/// copy of `x` saved for the backward pass. The output never sees the
/// pruning: it is computed from the unpruned input.
pub fn sparse_linear_forward(
    x: &DenseTensor,
    w: &DenseTensor,
    bias: &DenseTensor,
    cfg: &PruneConfig,
) -> Result<(DenseTensor, SavedActivation)> {
    let (batch, p, din) = x.dims3()?;
    let (dout, din_w) = w.dims2()?;
    if din != din_w || bias.len() != dout {
        return Err(CoreError::ShapeMismatch(format!(
            "linear: x [.., {din}] vs W [{dout}, {din_w}], bias {}",
            bias.len()
        )));
    }
    let x2 = x.clone().reshape(&[batch * p, din])?;
    let y2 = linear2d(&x2, w, bias)?;
    let saved = SavedActivation::create(x, cfg)?;
    Ok((y2.reshape(&[batch, p, dout])?, saved))
}

/// Plain dense linear on a `[R, Din]` matrix.
pub fn linear2d(x: &DenseTensor, w: &DenseTensor, bias: &DenseTensor) -> Result<DenseTensor> {
    let (dout, _) = w.dims2()?;
    let wt = transpose2d(w)?;
    let mut y = matmul_dense(x, &wt)?;
    let bd = bias.data();
    for row in y.data_mut().chunks_exact_mut(dout) {
        for (o, &b) in row.iter_mut().zip(bd) {
            *o += b;
        }
    }
    Ok(y)
}

/// Backward of the SparseLinear operator.
///
/// `dx` and `dbias` do not depend on the saved activation and come out
/// exactly as in dense training; only `dW` consumes the pruned copy.
pub fn sparse_linear_backward(
    dy: &DenseTensor,
    saved: &SavedActivation,
    w: &DenseTensor,
) -> Result<(DenseTensor, DenseTensor, DenseTensor)> {
    let (batch, p, dout) = dy.dims3()?;
    let (dout_w, din) = w.dims2()?;
    if dout != dout_w {
        return Err(CoreError::ShapeMismatch(format!(
            "backward: dy [.., {dout}] vs W [{dout_w}, {din}]"
        )));
    }
    let dy2 = dy.clone().reshape(&[batch * p, dout])?;
    let dx = matmul_dense(&dy2, w)?.reshape(&[batch, p, din])?;
    let dw = grad_weight(&dy2, saved)?;
    let mut dbias = vec![0f32; dout];
    for row in dy2.data().chunks_exact(dout) {
        for (b, &v) in dbias.iter_mut().zip(row) {
            *b += v;
        }
    }
    Ok((dx, dw, DenseTensor::new(vec![dout], dbias)?))
}
