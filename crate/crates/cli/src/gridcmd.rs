//! `grid` subcommand: dense baseline plus a (sparsity, block) sweep, with
//! accuracy deltas classified against the baseline.

use crate::config::RunConfig;
use crate::runner::train_model;
use anyhow::{Context, Result};
use bst_core::pruner::PruneConfig;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Accuracy classification relative to the dense baseline: above it,
/// within the acceptable band (1.5 percentage points), or degraded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellClass {
    AboveBaseline,
    Acceptable,
    Degraded,
}

pub const ACCEPTABLE_DROP_PP: f64 = 1.5;

pub fn classify(delta_pp: f64) -> CellClass {
    if delta_pp >= 0.0 {
        CellClass::AboveBaseline
    } else if delta_pp >= -ACCEPTABLE_DROP_PP {
        CellClass::Acceptable
    } else {
        CellClass::Degraded
    }
}

impl CellClass {
    pub fn name(&self) -> &'static str {
        match self {
            CellClass::AboveBaseline => "above-baseline",
            CellClass::Acceptable => "acceptable",
            CellClass::Degraded => "degraded",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridCell {
    pub sparsity: f64,
    pub block: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub delta_pp: f64,
    pub class: CellClass,
}

#[derive(Debug, Serialize)]
pub struct GridResult {
    pub baseline_test_accuracy: f64,
    pub cells: Vec<GridCell>,
}

/// Train the baseline and every (s, b) cell. Cells run as independent jobs
/// and are merged by key, so the output is deterministic regardless of
/// worker scheduling.
pub fn run_grid(
    cfg: &RunConfig,
    sparsities: &[f64],
    blocks: &[usize],
    seed: u64,
) -> Result<GridResult> {
    let mut base_cfg = cfg.clone();
    base_cfg.model.prune = PruneConfig::new(0.0, 1)
        .map_err(|e| anyhow::anyhow!("baseline prune config: {e}"))?;
    let baseline = train_model(&base_cfg, seed)?;

    let mut jobs = Vec::new();
    for &s in sparsities {
        for &b in blocks {
            jobs.push((s, b));
        }
    }
    let cells: Result<Vec<GridCell>> = jobs
        .par_iter()
        .map(|&(s, b)| {
            let mut cell_cfg = cfg.clone();
            cell_cfg.model.prune =
                PruneConfig::new(s, b).map_err(|e| anyhow::anyhow!("cell ({s},{b}): {e}"))?;
            let outcome =
                train_model(&cell_cfg, seed).with_context(|| format!("cell ({s},{b})"))?;
            let delta_pp = (outcome.test_accuracy - baseline.test_accuracy) * 100.0;
            Ok(GridCell {
                sparsity: s,
                block: b,
                train_accuracy: outcome.train_accuracy,
                test_accuracy: outcome.test_accuracy,
                delta_pp,
                class: classify(delta_pp),
            })
        })
        .collect();
    let mut cells = cells?;
    cells.sort_by(|a, b| {
        a.sparsity
            .total_cmp(&b.sparsity)
            .then(a.block.cmp(&b.block))
    });
    Ok(GridResult {
        baseline_test_accuracy: baseline.test_accuracy,
        cells,
    })
}

/// Heatmap CSV: one row per sparsity, one column per block size, cells are
/// accuracy deltas vs baseline in percentage points.
pub fn heatmap_csv(
    result: &GridResult,
    sparsities: &[f64],
    blocks: &[usize],
    meta: &str,
) -> String {
    let mut out = String::new();
    writeln!(out, "# {meta}").unwrap();
    writeln!(
        out,
        "# baseline_test_accuracy={:.6}",
        result.baseline_test_accuracy
    )
    .unwrap();
    writeln!(
        out,
        "sparsity,{}",
        blocks
            .iter()
            .map(|b| format!("b{b}"))
            .collect::<Vec<_>>()
            .join(",")
    )
    .unwrap();
    for &s in sparsities {
        write!(out, "{s}").unwrap();
        for &b in blocks {
            let cell = result
                .cells
                .iter()
                .find(|c| c.sparsity == s && c.block == b);
            match cell {
                Some(c) => write!(out, ",{:.3}", c.delta_pp).unwrap(),
                None => write!(out, ",err").unwrap(),
            }
        }
        writeln!(out).unwrap();
    }
    out
}

pub fn classes_csv(result: &GridResult, sparsities: &[f64], blocks: &[usize], meta: &str) -> String {
    let mut out = String::new();
    writeln!(out, "# {meta}").unwrap();
    writeln!(
        out,
        "sparsity,{}",
        blocks
            .iter()
            .map(|b| format!("b{b}"))
            .collect::<Vec<_>>()
            .join(",")
    )
    .unwrap();
    for &s in sparsities {
        write!(out, "{s}").unwrap();
        for &b in blocks {
            let cell = result
                .cells
                .iter()
                .find(|c| c.sparsity == s && c.block == b);
            match cell {
                Some(c) => write!(out, ",{}", c.class.name()).unwrap(),
                None => write!(out, ",err").unwrap(),
            }
        }
        writeln!(out).unwrap();
    }
    out
}

pub fn write_outputs(
    result: &GridResult,
    sparsities: &[f64],
    blocks: &[usize],
    meta: &str,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("heatmap.csv"),
        heatmap_csv(result, sparsities, blocks, meta),
    )?;
    fs::write(
        out_dir.join("classes.csv"),
        classes_csv(result, sparsities, blocks, meta),
    )?;
    fs::write(
        out_dir.join("cells.json"),
        serde_json::to_string_pretty(result)?,
    )?;
    Ok(())
}
