//! Shared training machinery behind `train` and `grid`.

use crate::config::{DataSettings, OptimizerKind, RunConfig};
use anyhow::{bail, Context, Result};
use bst_core::autograd::{Adam, Optimizer, SgdMomentum, Tape};
use bst_core::datasets::{
    batches, eval_batches, load_cifar10, normalize_pair, synth_patches, train_test_split, Dataset,
};
use bst_core::memstat::{Component, MemLedger};
use bst_core::resmlp::{activation_census, input_bytes, ResMlp};
use std::sync::Arc;

pub struct TrainOutcome {
    pub model: ResMlp,
    /// (step, epoch, loss) per optimizer step.
    pub losses: Vec<(usize, usize, f32)>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub ledger: Arc<MemLedger>,
}

pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSettings::Synthetic { samples } => {
            let geometry = (cfg.model.channels, cfg.model.height, cfg.model.width);
            let full = synth_patches(seed, *samples, cfg.model.num_classes, geometry)
                .context("building synthetic dataset")?;
            let (mut train, mut test) = train_test_split(&full, 0.8);
            normalize_pair(&mut train, &mut test);
            Ok((train, test))
        }
        DataSettings::Cifar10 { path } => {
            if (cfg.model.channels, cfg.model.height, cfg.model.width) != (3, 32, 32) {
                bail!(
                    "cifar10 requires a 3x32x32 model geometry, config has {}x{}x{}",
                    cfg.model.channels,
                    cfg.model.height,
                    cfg.model.width
                );
            }
            load_cifar10(path).context("loading CIFAR-10").map_err(Into::into)
        }
    }
}

pub fn make_optimizer(cfg: &RunConfig) -> Optimizer {
    match cfg.train.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(SgdMomentum::new(
            cfg.train.lr,
            cfg.train.momentum,
            cfg.train.weight_decay,
        )),
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.train.lr, 0.9, 0.999, 1e-8)),
    }
}

pub fn accuracy(model: &ResMlp, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    for batch in eval_batches(ds, batch_size) {
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &batch.images)?;
        let lv = tape.value(logits);
        let (rows, k) = lv.dims2()?;
        for r in 0..rows {
            let row = &lv.data()[r * k..(r + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == batch.labels[r] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Deterministic training run: fixed seed, drop-last batching, per-step loss
/// log, and a memory ledger covering input/model/optimizer/activations.
pub fn train_model(cfg: &RunConfig, seed: u64) -> Result<TrainOutcome> {
    let (train, test) = load_data(cfg, seed)?;
    let mut model = ResMlp::build(cfg.model, seed)?;
    let mut opt = make_optimizer(cfg);

    let ledger = Arc::new(MemLedger::new());
    ledger.alloc(
        Component::Input,
        "batch",
        input_bytes(&cfg.model, cfg.train.batch_size),
    );
    let model_bytes = model.param_count() as u64 * 4;
    ledger.alloc(Component::Model, "params", model_bytes);
    ledger.alloc(
        Component::Optimizer,
        "state",
        model_bytes * opt.state_factor(),
    );

    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.train.epochs {
        for batch in batches(&train, cfg.train.batch_size, seed, epoch as u64)? {
            model.store.zero_grads();
            let mut tape = Tape::with_ledger(ledger.clone());
            let (_, loss) = model.loss(&mut tape, &batch.images, &batch.labels)?;
            losses.push((step, epoch, tape.scalar(loss)));
            tape.backward(loss, &mut model.store)?;
            opt.step(&mut model.store);
            step += 1;
        }
    }

    let train_accuracy = accuracy(&model, &train, cfg.train.batch_size)?;
    let test_accuracy = accuracy(&model, &test, cfg.train.batch_size)?;
    Ok(TrainOutcome {
        model,
        losses,
        train_accuracy,
        test_accuracy,
        ledger,
    })
}

/// Analytic component breakdown for a configuration without training:
/// shape-derived input/model/optimizer bytes plus the dense activation
/// census at the given batch size.
pub fn analytic_ledger(cfg: &RunConfig, batch_size: usize) -> Result<Arc<MemLedger>> {
    let model = ResMlp::build(cfg.model, 0)?;
    let ledger = Arc::new(MemLedger::new());
    ledger.alloc(
        Component::Input,
        "batch",
        input_bytes(&cfg.model, batch_size),
    );
    let model_bytes = model.param_count() as u64 * 4;
    ledger.alloc(Component::Model, "params", model_bytes);
    ledger.alloc(
        Component::Optimizer,
        "state",
        model_bytes * make_optimizer(cfg).state_factor(),
    );
    for site in activation_census(&cfg.model, batch_size) {
        ledger.alloc(Component::Activations, &site.label, site.dense_bytes());
    }
    Ok(ledger)
}
