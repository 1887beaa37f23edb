//! `memory-report` subcommand: component breakdown and pruning-savings
//! model for a configuration, no training involved.

use crate::config::RunConfig;
use crate::runner::analytic_ledger;
use anyhow::Result;
use bst_core::memstat::{savings_report, Breakdown, SavingsReport};
use bst_core::resmlp::activation_census;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct MemoryReport {
    pub batch_size: usize,
    pub breakdown: Breakdown,
    pub savings: SavingsReport,
}

pub fn build_report(cfg: &RunConfig, batch_size: usize) -> Result<MemoryReport> {
    let ledger = analytic_ledger(cfg, batch_size)?;
    let breakdown = ledger.component_breakdown()?;
    let census = activation_census(&cfg.model, batch_size);
    let savings = savings_report(&census, &cfg.model.prune);
    Ok(MemoryReport {
        batch_size,
        breakdown,
        savings,
    })
}

pub fn render_text(report: &MemoryReport) -> String {
    format!(
        "batch size {}\n\n{}\n{}",
        report.batch_size,
        report.breakdown.render_text(),
        report.savings.render_text()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_run_config;

    const TINY: &str = "\
[model]
channels = 3
height = 16
width = 16
patch_size = 4
hidden_dim = 32
depth = 2
classes = 5

[prune]
sparsity = 0.5
block = 8
";

    #[test]
    fn tiny_config_positive_and_consistent() {
        let cfg = parse_run_config(TINY).unwrap();
        let report = build_report(&cfg, 8).unwrap();
        let total: u64 = report.breakdown.rows.iter().map(|r| r.peak_bytes).sum();
        assert_eq!(total, report.breakdown.total_bytes);
        assert!(report.breakdown.rows.iter().all(|r| r.peak_bytes > 0));
        let pct: f64 = report.breakdown.rows.iter().map(|r| r.percent).sum();
        assert!((pct - 100.0).abs() <= 0.1);
        assert!(report.savings.delta_bytes < 0, "pruning should save here");
        let text = render_text(&report);
        assert!(text.contains("activations"));
    }
}
