//! Logical memory accounting.
//!
//! Instead of intercepting an allocator, the crate logs shape-derived byte
//! counts into a `MemLedger` grouped by component (input / model / optimizer
//! / activations), which is portable, deterministic, and sufficient to
//! reproduce footprint ratios. `savings_report` computes the analytic
//! dense-vs-compressed activation bytes of a model without running it.

use crate::error::{CoreError, Result};
use crate::pruner::PruneConfig;
use crate::round_half_up;
use crate::sparse_ops::SavedActivation;
use serde::Serialize;
use std::sync::Mutex;

pub const MIB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Input,
    Model,
    Optimizer,
    Activations,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Input,
        Component::Model,
        Component::Optimizer,
        Component::Activations,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::Input => "input",
            Component::Model => "model",
            Component::Optimizer => "optimizer",
            Component::Activations => "activations",
        }
    }

    fn index(&self) -> usize {
        match self {
            Component::Input => 0,
            Component::Model => 1,
            Component::Optimizer => 2,
            Component::Activations => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerEntry {
    pub component: Component,
    pub label: String,
    pub bytes: u64,
    /// For compressed activations, the bytes an unpruned copy would take.
    pub dense_equivalent: Option<u64>,
    pub alloc_seq: u64,
    pub release_seq: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocId(usize);

#[derive(Debug, Default)]
struct LedgerInner {
    seq: u64,
    entries: Vec<LedgerEntry>,
    current: [u64; 4],
    peak: [u64; 4],
    live: [usize; 4],
    peak_live: [usize; 4],
}

/// Append-only allocation log, safe for concurrent writers.
#[derive(Debug, Default)]
pub struct MemLedger {
    inner: Mutex<LedgerInner>,
}

impl MemLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, component: Component, label: &str, bytes: u64) -> AllocId {
        self.alloc_inner(component, label, bytes, None)
    }

    /// Log a saved activation: the compressed bytes it actually holds plus
    /// the dense-equivalent bytes for comparison.
    pub fn record_activation(&self, label: &str, saved: &SavedActivation) -> AllocId {
        self.alloc_inner(
            Component::Activations,
            label,
            saved.stored_bytes(),
            Some(saved.dense_equivalent_bytes()),
        )
    }

    fn alloc_inner(
        &self,
        component: Component,
        label: &str,
        bytes: u64,
        dense: Option<u64>,
    ) -> AllocId {
        let mut g = self.inner.lock().unwrap();
        g.seq += 1;
        let seq = g.seq;
        let c = component.index();
        g.current[c] += bytes;
        g.peak[c] = g.peak[c].max(g.current[c]);
        g.live[c] += 1;
        g.peak_live[c] = g.peak_live[c].max(g.live[c]);
        g.entries.push(LedgerEntry {
            component,
            label: label.to_string(),
            bytes,
            dense_equivalent: dense,
            alloc_seq: seq,
            release_seq: None,
        });
        AllocId(g.entries.len() - 1)
    }

    pub fn release(&self, id: AllocId) {
        let mut g = self.inner.lock().unwrap();
        g.seq += 1;
        let seq = g.seq;
        let entry = &mut g.entries[id.0];
        assert!(entry.release_seq.is_none(), "double release of {}", entry.label);
        entry.release_seq = Some(seq);
        let c = entry.component.index();
        let bytes = entry.bytes;
        g.current[c] -= bytes;
        g.live[c] -= 1;
    }

    pub fn current_bytes(&self, component: Component) -> u64 {
        self.inner.lock().unwrap().current[component.index()]
    }

    pub fn peak_bytes(&self, component: Component) -> u64 {
        self.inner.lock().unwrap().peak[component.index()]
    }

    pub fn live_count(&self, component: Component) -> usize {
        self.inner.lock().unwrap().live[component.index()]
    }

    pub fn peak_live_count(&self, component: Component) -> usize {
        self.inner.lock().unwrap().peak_live[component.index()]
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.inner.lock().unwrap().entries.clone()
    }

    /// Peak bytes and share per component. Errors on an empty ledger.
    pub fn component_breakdown(&self) -> Result<Breakdown> {
        let g = self.inner.lock().unwrap();
        if g.entries.is_empty() {
            return Err(CoreError::EmptyLedger);
        }
        let total: u64 = g.peak.iter().sum();
        let rows = Component::ALL
            .iter()
            .map(|c| {
                let bytes = g.peak[c.index()];
                BreakdownRow {
                    component: *c,
                    peak_bytes: bytes,
                    percent: if total > 0 {
                        100.0 * bytes as f64 / total as f64
                    } else {
                        0.0
                    },
                }
            })
            .collect();
        Ok(Breakdown {
            rows,
            total_bytes: total,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BreakdownRow {
    pub component: Component,
    pub peak_bytes: u64,
    pub percent: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Breakdown {
    pub rows: Vec<BreakdownRow>,
    pub total_bytes: u64,
}

impl Breakdown {
    pub fn row(&self, c: Component) -> &BreakdownRow {
        &self.rows[c.index()]
    }

    /// Aligned-text rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>12} {:>8}\n",
            "component", "MiB", "%"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>12.1} {:>8.1}\n",
                r.component.name(),
                r.peak_bytes as f64 / MIB,
                r.percent
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>12.1} {:>8.1}\n",
            "total",
            self.total_bytes as f64 / MIB,
            100.0
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Analytic savings model
// ---------------------------------------------------------------------------

/// One activation retained between forward and backward: `samples` stacked
/// `rows_per_sample x cols` matrices. `prunable` marks inputs of the
/// block-sparse linear operator; everything else is always saved dense.
#[derive(Debug, Clone, Serialize)]
pub struct ActivationSite {
    pub label: String,
    pub samples: usize,
    pub rows_per_sample: usize,
    pub cols: usize,
    pub prunable: bool,
}

impl ActivationSite {
    pub fn dense_bytes(&self) -> u64 {
        (self.samples * self.rows_per_sample * self.cols) as u64 * 4
    }

    pub fn eligible(&self, block_cols: usize) -> bool {
        self.prunable && block_cols >= 1 && self.cols % block_cols == 0
    }

    /// Analytic compressed bytes under per-sample top-k pruning: each sample
    /// holds `N - round(s*N)` blocks, value bytes plus crow/col indices.
    pub fn compressed_bytes(&self, cfg: &PruneConfig) -> u64 {
        if !self.eligible(cfg.block_cols) {
            return self.dense_bytes();
        }
        let b = cfg.block_cols;
        let n_per_sample = self.rows_per_sample * self.cols / b;
        let pruned = round_half_up(cfg.sparsity * n_per_sample as f64).min(n_per_sample);
        let nnzb = (self.samples * (n_per_sample - pruned)) as u64;
        let rows_total = (self.samples * self.rows_per_sample) as u64;
        let value_bytes = nnzb * b as u64 * 4;
        let index_bytes = (rows_total + 1 + nnzb) * 4;
        value_bytes + index_bytes
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSavings {
    pub label: String,
    pub dense_bytes: u64,
    pub compressed_bytes: u64,
    pub eligible: bool,
}

/// Per-layer and total activation bytes under a prune configuration.
///
/// `delta_bytes = compressed - dense`, so savings are negative, matching the
/// sign convention of the reference table this reproduces.
#[derive(Debug, Clone, Serialize)]
pub struct SavingsReport {
    pub sparsity: f64,
    pub block_cols: usize,
    pub layers: Vec<LayerSavings>,
    pub dense_total_bytes: u64,
    pub compressed_total_bytes: u64,
    pub delta_bytes: i64,
    pub delta_percent: f64,
}

pub fn savings_report(census: &[ActivationSite], cfg: &PruneConfig) -> SavingsReport {
    let layers: Vec<LayerSavings> = census
        .iter()
        .map(|site| LayerSavings {
            label: site.label.clone(),
            dense_bytes: site.dense_bytes(),
            compressed_bytes: site.compressed_bytes(cfg),
            eligible: site.eligible(cfg.block_cols),
        })
        .collect();
    let dense_total: u64 = layers.iter().map(|l| l.dense_bytes).sum();
    let compressed_total: u64 = layers.iter().map(|l| l.compressed_bytes).sum();
    let delta = compressed_total as i64 - dense_total as i64;
    SavingsReport {
        sparsity: cfg.sparsity,
        block_cols: cfg.block_cols,
        layers,
        dense_total_bytes: dense_total,
        compressed_total_bytes: compressed_total,
        delta_bytes: delta,
        delta_percent: 100.0 * delta as f64 / dense_total as f64,
    }
}

impl SavingsReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "sparsity {:.0}%, block size {}\n",
            self.sparsity * 100.0,
            self.block_cols
        ));
        out.push_str(&format!(
            "{:<16} {:>10} {:>12} {:>9}\n",
            "layer", "dense MiB", "stored MiB", "eligible"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<16} {:>10.2} {:>12.2} {:>9}\n",
                l.label,
                l.dense_bytes as f64 / MIB,
                l.compressed_bytes as f64 / MIB,
                if l.eligible { "yes" } else { "no" }
            ));
        }
        out.push_str(&format!(
            "total: dense {:.1} MiB, stored {:.1} MiB, delta {:+.1} MiB ({:+.1}%)\n",
            self.dense_total_bytes as f64 / MIB,
            self.compressed_total_bytes as f64 / MIB,
            self.delta_bytes as f64 / MIB,
            self.delta_percent
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::PruneConfig;
    use crate::sparse_ops::SavedActivation;
    use crate::tensor::{rng_normal, Rng};

    #[test]
    fn model_only_ledger_is_all_model() {
        let ledger = MemLedger::new();
        ledger.alloc(Component::Model, "weights", 1000);
        let b = ledger.component_breakdown().unwrap();
        assert_eq!(b.row(Component::Model).percent, 100.0);
        assert_eq!(b.total_bytes, 1000);
    }

    #[test]
    fn empty_ledger_errors() {
        let ledger = MemLedger::new();
        assert!(ledger.component_breakdown().is_err());
    }

    #[test]
    fn percentages_sum_to_hundred() {
        let ledger = MemLedger::new();
        ledger.alloc(Component::Input, "batch", 185);
        ledger.alloc(Component::Model, "weights", 596);
        ledger.alloc(Component::Optimizer, "momentum", 1211);
        ledger.alloc(Component::Activations, "x", 15992);
        let b = ledger.component_breakdown().unwrap();
        let sum: f64 = b.rows.iter().map(|r| r.percent).sum();
        assert!((sum - 100.0).abs() <= 0.1);
    }

    #[test]
    fn release_returns_current_to_zero_and_keeps_peak() {
        let ledger = MemLedger::new();
        let a = ledger.alloc(Component::Activations, "x0", 100);
        let b = ledger.alloc(Component::Activations, "x1", 50);
        assert_eq!(ledger.current_bytes(Component::Activations), 150);
        assert_eq!(ledger.peak_live_count(Component::Activations), 2);
        ledger.release(b);
        ledger.release(a);
        assert_eq!(ledger.current_bytes(Component::Activations), 0);
        assert_eq!(ledger.peak_bytes(Component::Activations), 150);
    }

    #[test]
    fn record_activation_overhead_at_s0_b64() {
        // 196x384 activation, s=0, b=64: stored/dense ~ 1.0182.
        let mut rng = Rng::new(1);
        let x = rng_normal(&mut rng, &[1, 196, 384], 0.5, 1.0).unwrap();
        let saved = SavedActivation::create(&x, &PruneConfig::new(0.0, 64).unwrap()).unwrap();
        let ledger = MemLedger::new();
        ledger.record_activation("embed", &saved);
        let stored = ledger.peak_bytes(Component::Activations) as f64;
        let dense = saved.dense_equivalent_bytes() as f64;
        assert!((stored / dense - 1.0182).abs() <= 0.0005, "{}", stored / dense);
    }

    #[test]
    fn record_activation_s1_is_crow_only() {
        let mut rng = Rng::new(2);
        let x = rng_normal(&mut rng, &[1, 8, 32], 0.0, 1.0).unwrap();
        let saved = SavedActivation::create(&x, &PruneConfig::new(1.0, 8).unwrap()).unwrap();
        assert_eq!(saved.stored_bytes(), (8 + 1) * 4);
    }

    #[test]
    fn dense_fallback_costs_dense() {
        let mut rng = Rng::new(3);
        let x = rng_normal(&mut rng, &[1, 4, 10], 0.0, 1.0).unwrap();
        let saved = SavedActivation::create(&x, &PruneConfig::new(0.5, 4).unwrap()).unwrap();
        assert_eq!(saved.stored_bytes(), saved.dense_equivalent_bytes());
    }

    #[test]
    fn conservation_on_realized_matrix() {
        // compressed = (1 - s_actual) * dense_value_bytes + index_bytes, exactly.
        let mut rng = Rng::new(4);
        let x = rng_normal(&mut rng, &[2, 8, 32], 0.0, 1.0).unwrap();
        let saved = SavedActivation::create(&x, &PruneConfig::new(0.6, 8).unwrap()).unwrap();
        if let crate::sparse_ops::SavedRepr::Bsr(m) = &saved.repr {
            let value_expected =
                ((1.0 - m.zero_block_fraction()) * m.dense_bytes() as f64).round() as u64;
            assert_eq!(m.value_bytes(), value_expected);
            assert_eq!(saved.stored_bytes(), m.value_bytes() + m.index_bytes());
        } else {
            panic!("expected BSR repr");
        }
    }

    #[test]
    fn savings_at_s0_show_slight_growth() {
        let census = vec![ActivationSite {
            label: "fc1".into(),
            samples: 4,
            rows_per_sample: 196,
            cols: 384,
            prunable: true,
        }];
        let rep = savings_report(&census, &PruneConfig::new(0.0, 64).unwrap());
        assert!(rep.delta_bytes > 0, "encoding overhead should show as growth");
        assert!(rep.delta_percent > 0.0 && rep.delta_percent < 2.0);
    }

    #[test]
    fn ineligible_layers_contribute_zero_savings() {
        let census = vec![ActivationSite {
            label: "gelu".into(),
            samples: 4,
            rows_per_sample: 196,
            cols: 384,
            prunable: false,
        }];
        let rep = savings_report(&census, &PruneConfig::new(0.8, 64).unwrap());
        assert_eq!(rep.delta_bytes, 0);
        assert!(!rep.layers[0].eligible);
    }

    #[test]
    fn savings_monotone_in_sparsity() {
        let census = vec![ActivationSite {
            label: "fc1".into(),
            samples: 8,
            rows_per_sample: 64,
            cols: 256,
            prunable: true,
        }];
        let mut prev = u64::MAX;
        for s10 in 0..=10 {
            let cfg = PruneConfig::new(s10 as f64 / 10.0, 16).unwrap();
            let rep = savings_report(&census, &cfg);
            assert!(rep.compressed_total_bytes <= prev);
            prev = rep.compressed_total_bytes;
        }
    }
}
