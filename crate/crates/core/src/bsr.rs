//! Block Sparse Compressed Row matrices.
//!
//! A `BsrMatrix` stores the nonzero `br x bc` blocks of a logical dense
//! matrix together with a cumulative row pointer array (`crow`) and per-block
//! column indices (`col`). Index entries are 32-bit, the same width as the
//! f32 values, which is what the compression accounting assumes.

use crate::error::{CoreError, Result};
use crate::round_half_up;
use crate::tensor::DenseTensor;
use serde::Serialize;
use std::io::{Read, Write};

#[derive(Debug, Clone, PartialEq)]
pub struct BsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub br: usize,
    pub bc: usize,
    /// Length `rows/br + 1`; `crow[n+1] - crow[n]` is the stored-block count
    /// of block row `n`.
    pub crow: Vec<u32>,
    /// Block column index of each stored block, strictly increasing within a
    /// block row.
    pub col: Vec<u32>,
    /// Stored blocks in crow/col order, row-major within each block.
    pub values: Vec<f32>,
}

impl BsrMatrix {
    pub fn nnzb(&self) -> usize {
        self.col.len()
    }

    pub fn block_rows(&self) -> usize {
        self.rows / self.br
    }

    pub fn block_cols(&self) -> usize {
        self.cols / self.bc
    }

    /// Total logical block slots of the dense grid.
    pub fn total_blocks(&self) -> usize {
        self.block_rows() * self.block_cols()
    }

    /// Realized zero-block fraction.
    pub fn zero_block_fraction(&self) -> f64 {
        1.0 - self.nnzb() as f64 / self.total_blocks() as f64
    }

    pub fn value_bytes(&self) -> u64 {
        self.values.len() as u64 * 4
    }

    pub fn index_bytes(&self) -> u64 {
        (self.crow.len() + self.col.len()) as u64 * 4
    }

    pub fn dense_bytes(&self) -> u64 {
        (self.rows * self.cols) as u64 * 4
    }

    /// Stored blocks of one block row as `(block_col, values)` pairs.
    pub fn row_blocks(&self, block_row: usize) -> impl Iterator<Item = (usize, &[f32])> {
        let span = self.br * self.bc;
        let lo = self.crow[block_row] as usize;
        let hi = self.crow[block_row + 1] as usize;
        (lo..hi).map(move |slot| {
            (
                self.col[slot] as usize,
                &self.values[slot * span..(slot + 1) * span],
            )
        })
    }

    /// Checks every format invariant and returns all violations (empty when
    /// well-formed), not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.br == 0 || self.bc == 0 {
            out.push("block extents must be >= 1".into());
            return out;
        }
        if self.rows % self.br != 0 || self.cols % self.bc != 0 {
            out.push(format!(
                "block shape {}x{} does not divide {}x{}",
                self.br, self.bc, self.rows, self.cols
            ));
        }
        let nrows = self.rows / self.br.max(1);
        if self.crow.len() != nrows + 1 {
            out.push(format!(
                "crow length {} != block rows + 1 = {}",
                self.crow.len(),
                nrows + 1
            ));
            return out;
        }
        if self.crow[0] != 0 {
            out.push("crow[0] != 0".into());
        }
        if self.crow.windows(2).any(|w| w[1] < w[0]) {
            out.push("crow non-monotone".into());
        }
        if *self.crow.last().unwrap() as usize != self.col.len() {
            out.push(format!(
                "crow[last] = {} != nnzb = {}",
                self.crow.last().unwrap(),
                self.col.len()
            ));
        }
        let bcols = self.cols / self.bc.max(1);
        for n in 0..nrows {
            let lo = (self.crow[n] as usize).min(self.col.len());
            let hi = (self.crow[n + 1] as usize).clamp(lo, self.col.len());
            let row = &self.col[lo..hi];
            if row.windows(2).any(|w| w[1] <= w[0]) {
                out.push(format!("col not strictly increasing in block row {n}"));
            }
            if row.iter().any(|&c| c as usize >= bcols) {
                out.push(format!("col out of range in block row {n}"));
            }
        }
        if self.values.len() != self.col.len() * self.br * self.bc {
            out.push(format!(
                "values length {} != nnzb*br*bc = {}",
                self.values.len(),
                self.col.len() * self.br * self.bc
            ));
        }
        out
    }

    /// `validate` folded into a `Result`.
    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(CoreError::InvalidBsr(violations))
        }
    }
}

/// Stored-block count of one block row: `crow[n+1] - crow[n]`.
pub fn nnzb_in_row(m: &BsrMatrix, block_row: usize) -> Result<usize> {
    if block_row >= m.block_rows() {
        return Err(CoreError::OutOfRange(format!(
            "block row {block_row} >= {}",
            m.block_rows()
        )));
    }
    Ok((m.crow[block_row + 1] - m.crow[block_row]) as usize)
}

/// Encode a dense matrix, storing exactly the blocks that contain at least
/// one nonzero element (exact zero test; thresholding is the pruner's job).
pub fn encode(dense: &DenseTensor, br: usize, bc: usize) -> Result<BsrMatrix> {
    let (rows, cols) = dense.dims2()?;
    if br == 0 || bc == 0 || rows % br != 0 || cols % bc != 0 {
        return Err(CoreError::BlockShape { rows, cols, br, bc });
    }
    let d = dense.data();
    let nrows = rows / br;
    let ncols = cols / bc;
    let mut crow = Vec::with_capacity(nrows + 1);
    let mut col = Vec::new();
    let mut values = Vec::new();
    crow.push(0u32);
    for n in 0..nrows {
        for c in 0..ncols {
            let mut any = false;
            'scan: for r in 0..br {
                let base = (n * br + r) * cols + c * bc;
                for v in &d[base..base + bc] {
                    if *v != 0.0 {
                        any = true;
                        break 'scan;
                    }
                }
            }
            if any {
                col.push(c as u32);
                for r in 0..br {
                    let base = (n * br + r) * cols + c * bc;
                    values.extend_from_slice(&d[base..base + bc]);
                }
            }
        }
        crow.push(col.len() as u32);
    }
    Ok(BsrMatrix {
        rows,
        cols,
        br,
        bc,
        crow,
        col,
        values,
    })
}

/// Reconstruct the dense matrix; absent blocks are zero.
pub fn decode(m: &BsrMatrix) -> Result<DenseTensor> {
    m.ensure_valid()?;
    let mut out = vec![0f32; m.rows * m.cols];
    for n in 0..m.block_rows() {
        for (c, block) in m.row_blocks(n) {
            for r in 0..m.br {
                let dst = (n * m.br + r) * m.cols + c * m.bc;
                out[dst..dst + m.bc].copy_from_slice(&block[r * m.bc..(r + 1) * m.bc]);
            }
        }
    }
    DenseTensor::new(vec![m.rows, m.cols], out)
}

// ---------------------------------------------------------------------------
// Compression accounting
// ---------------------------------------------------------------------------

/// Byte-level accounting for a BSR encoding of an `R x C` matrix at nominal
/// sparsity `s`.
///
/// Stored-block counts are integral: `nnzb = N - round_half_up(s*N)` over the
/// `N` logical blocks, the same rounding rule the pruner uses for its top-k
/// count. `overhead_fraction` is the pure index cost `index_bytes /
/// dense_bytes`; `overhead_over_ideal` additionally charges the rounding gap
/// between the integral stored-value bytes and the nominal ideal `(1-s)`.
#[derive(Debug, Clone, Serialize)]
pub struct CompressionReport {
    pub rows: usize,
    pub cols: usize,
    pub br: usize,
    pub bc: usize,
    pub sparsity: f64,
    pub dense_bytes: u64,
    pub value_bytes: u64,
    pub index_bytes: u64,
    pub total_bytes: u64,
    pub overhead_fraction: f64,
}

impl CompressionReport {
    /// Compressed size relative to dense.
    pub fn compressed_fraction(&self) -> f64 {
        self.total_bytes as f64 / self.dense_bytes as f64
    }

    /// Overhead over the ideal compression `(1 - s)`, as a fraction. This is
    /// the quantity the reference overhead table prints (in percent).
    pub fn overhead_over_ideal(&self) -> f64 {
        self.compressed_fraction() - (1.0 - self.sparsity)
    }
}

pub fn compression_report(
    rows: usize,
    cols: usize,
    br: usize,
    bc: usize,
    sparsity: f64,
    value_unit_bytes: u64,
    index_unit_bytes: u64,
) -> Result<CompressionReport> {
    if br == 0 || bc == 0 || rows % br != 0 || cols % bc != 0 {
        return Err(CoreError::BlockShape { rows, cols, br, bc });
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(CoreError::InvalidArgument(format!(
            "sparsity must be in [0, 1], got {sparsity}"
        )));
    }
    let total_blocks = (rows / br) * (cols / bc);
    let pruned = round_half_up(sparsity * total_blocks as f64).min(total_blocks);
    let nnzb = (total_blocks - pruned) as u64;
    let dense_bytes = (rows * cols) as u64 * value_unit_bytes;
    let value_bytes = nnzb * (br * bc) as u64 * value_unit_bytes;
    let index_bytes = ((rows / br) as u64 + 1 + nnzb) * index_unit_bytes;
    Ok(CompressionReport {
        rows,
        cols,
        br,
        bc,
        sparsity,
        dense_bytes,
        value_bytes,
        index_bytes,
        total_bytes: value_bytes + index_bytes,
        overhead_fraction: index_bytes as f64 / dense_bytes as f64,
    })
}

/// Accounting for an already-materialized matrix (realized sparsity).
pub fn report_for_matrix(m: &BsrMatrix) -> CompressionReport {
    CompressionReport {
        rows: m.rows,
        cols: m.cols,
        br: m.br,
        bc: m.bc,
        sparsity: m.zero_block_fraction(),
        dense_bytes: m.dense_bytes(),
        value_bytes: m.value_bytes(),
        index_bytes: m.index_bytes(),
        total_bytes: m.value_bytes() + m.index_bytes(),
        overhead_fraction: m.index_bytes() as f64 / m.dense_bytes() as f64,
    }
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

const BSR_MAGIC: &[u8; 8] = b"BSTBSR01";

impl BsrMatrix {
    /// Serialize to the little-endian container documented in
    /// `docs/formats.md` (magic, dims, block shape, crow, col, values).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.ensure_valid()?;
        w.write_all(BSR_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        w.write_all(&(self.br as u32).to_le_bytes())?;
        w.write_all(&(self.bc as u32).to_le_bytes())?;
        w.write_all(&(self.nnzb() as u64).to_le_bytes())?;
        for v in &self.crow {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.col {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BSR_MAGIC {
            return Err(CoreError::Format("bad BSR magic".into()));
        }
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let br = read_u32(r)? as usize;
        let bc = read_u32(r)? as usize;
        let nnzb = read_u64(r)? as usize;
        if br == 0 || bc == 0 || rows % br != 0 || cols % bc != 0 {
            return Err(CoreError::Format("bad BSR block geometry".into()));
        }
        let nrows = rows / br;
        let mut crow = Vec::with_capacity(nrows + 1);
        for _ in 0..nrows + 1 {
            crow.push(read_u32(r)?);
        }
        let mut col = Vec::with_capacity(nnzb);
        for _ in 0..nnzb {
            col.push(read_u32(r)?);
        }
        let mut values = vec![0f32; nnzb * br * bc];
        let mut buf = [0u8; 4];
        for v in &mut values {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        let m = BsrMatrix {
            rows,
            cols,
            br,
            bc,
            crow,
            col,
            values,
        };
        m.ensure_valid()?;
        Ok(m)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
