//! Encoding-overhead table over a (sparsity, block size) grid.

use anyhow::Result;
use bst_core::bsr::compression_report;
use std::fmt::Write as _;

pub const DEFAULT_ROWS: usize = 196;
pub const DEFAULT_COLS: usize = 384;
pub const DEFAULT_BLOCKS: [usize; 8] = [1, 4, 8, 16, 32, 64, 128, 384];
pub const DEFAULT_SPARSITIES_PCT: [f64; 6] = [0.0, 20.0, 40.0, 60.0, 80.0, 100.0];

/// Overhead over ideal compression, in percent, per cell. A cell whose block
/// size does not divide the matrix is reported as an error string.
pub fn overhead_grid(
    rows: usize,
    cols: usize,
    blocks: &[usize],
    sparsities_pct: &[f64],
) -> Vec<Vec<Result<f64, String>>> {
    sparsities_pct
        .iter()
        .map(|&s_pct| {
            blocks
                .iter()
                .map(|&b| {
                    compression_report(rows, cols, 1, b, s_pct / 100.0, 4, 4)
                        .map(|rep| rep.overhead_over_ideal() * 100.0)
                        .map_err(|e| e.to_string())
                })
                .collect()
        })
        .collect()
}

pub fn render_csv(
    rows: usize,
    cols: usize,
    blocks: &[usize],
    sparsities_pct: &[f64],
) -> String {
    let grid = overhead_grid(rows, cols, blocks, sparsities_pct);
    let mut out = String::new();
    let blocks_str: Vec<String> = blocks.iter().map(|b| b.to_string()).collect();
    writeln!(
        out,
        "# bst overhead-table rows={rows} cols={cols} blocks={} sparsities_pct={:?}",
        blocks_str.join(","),
        sparsities_pct
    )
    .unwrap();
    writeln!(
        out,
        "s_pct,{}",
        blocks
            .iter()
            .map(|b| format!("b{b}"))
            .collect::<Vec<_>>()
            .join(",")
    )
    .unwrap();
    for (si, row) in grid.iter().enumerate() {
        write!(out, "{}", sparsities_pct[si]).unwrap();
        for cell in row {
            match cell {
                Ok(v) => write!(out, ",{v:.2}").unwrap(),
                Err(_) => write!(out, ",err").unwrap(),
            }
        }
        writeln!(out).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_reference_cells() {
        let csv = render_csv(
            DEFAULT_ROWS,
            DEFAULT_COLS,
            &DEFAULT_BLOCKS,
            &DEFAULT_SPARSITIES_PCT,
        );
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "s_pct,b1,b4,b8,b16,b32,b64,b128,b384");
        // s=0 row
        assert_eq!(lines[2], "0,100.26,25.26,12.76,6.51,3.39,1.82,1.04,0.52");
        // s=100 row: crow cost only
        assert_eq!(lines[7], "100,0.26,0.26,0.26,0.26,0.26,0.26,0.26,0.26");
    }

    #[test]
    fn indivisible_cell_reports_error() {
        let grid = overhead_grid(196, 384, &[5], &[0.0]);
        assert!(grid[0][0].is_err());
        let csv = render_csv(196, 384, &[5, 4], &[0.0]);
        assert!(csv.lines().last().unwrap().contains("err"));
    }
}
