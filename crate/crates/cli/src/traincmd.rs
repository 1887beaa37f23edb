//! `train` subcommand: run one configuration and write its artifacts.

use crate::config::RunConfig;
use crate::runner::{train_model, TrainOutcome};
use anyhow::{Context, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct TrainMetrics {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f32,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub config: RunConfig,
}

pub fn loss_csv(cfg: &RunConfig, seed: u64, losses: &[(usize, usize, f32)]) -> String {
    let mut out = String::new();
    writeln!(out, "# bst train seed={seed} config={}", cfg.echo()).unwrap();
    writeln!(out, "step,epoch,loss").unwrap();
    for (step, epoch, loss) in losses {
        writeln!(out, "{step},{epoch},{loss}").unwrap();
    }
    out
}

/// Train and write `loss.csv`, `metrics.json`, `memory.json`, `memory.txt`
/// and `model.ckpt` into `out_dir`.
pub fn run(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<TrainMetrics> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let outcome = train_model(cfg, seed)?;
    write_artifacts(cfg, seed, &outcome, out_dir)
}

pub fn write_artifacts(
    cfg: &RunConfig,
    seed: u64,
    outcome: &TrainOutcome,
    out_dir: &Path,
) -> Result<TrainMetrics> {
    fs::write(out_dir.join("loss.csv"), loss_csv(cfg, seed, &outcome.losses))?;

    let metrics = TrainMetrics {
        seed,
        steps: outcome.losses.len(),
        final_loss: outcome.losses.last().map(|(_, _, l)| *l).unwrap_or(f32::NAN),
        train_accuracy: outcome.train_accuracy,
        test_accuracy: outcome.test_accuracy,
        config: cfg.clone(),
    };
    fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;

    let breakdown = outcome.ledger.component_breakdown()?;
    let census = bst_core::resmlp::activation_census(&cfg.model, cfg.train.batch_size);
    let savings = bst_core::memstat::savings_report(&census, &cfg.model.prune);
    #[derive(Serialize)]
    struct MemoryReport<'a> {
        breakdown: &'a bst_core::memstat::Breakdown,
        savings: &'a bst_core::memstat::SavingsReport,
    }
    fs::write(
        out_dir.join("memory.json"),
        serde_json::to_string_pretty(&MemoryReport {
            breakdown: &breakdown,
            savings: &savings,
        })?,
    )?;
    fs::write(
        out_dir.join("memory.txt"),
        format!("{}\n{}", breakdown.render_text(), savings.render_text()),
    )?;

    let mut ckpt = Vec::new();
    outcome.model.write_checkpoint(&mut ckpt)?;
    fs::write(out_dir.join("model.ckpt"), ckpt)?;

    Ok(metrics)
}
