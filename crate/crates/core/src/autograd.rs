//! Minimal reverse-mode autodiff: a single-threaded tape of recorded ops
//! with saved context, parameter storage with gradient slots, and SGD/Adam
//! optimizers.
//!
//! The tape owns every intermediate value. Ops that need their input for the
//! backward pass register it with the memory ledger (when one is attached)
//! and release it the moment the consuming backward node has run, so
//! activation accounting follows the real forward/backward lifetime.

use crate::error::{CoreError, Result};
use crate::memstat::{AllocId, MemLedger};
use crate::pruner::PruneConfig;
use crate::sparse_ops::{sparse_linear_backward, sparse_linear_forward, SavedActivation};
use crate::tensor::{matmul_dense, transpose2d, DenseTensor};
use std::sync::Arc;

pub type Vid = usize;
pub type Pid = usize;

/// Trainable parameter with its gradient slot.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: DenseTensor,
    pub grad: DenseTensor,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseTensor) -> Pid {
        let grad = DenseTensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: Pid) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: Pid) -> &mut Param {
        &mut self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar parameter count.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    fn accumulate_grad(&mut self, id: Pid, g: &DenseTensor) {
        let dst = self.params[id].grad.data_mut();
        for (d, &s) in dst.iter_mut().zip(g.data()) {
            *d += s;
        }
    }
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Node {
    Leaf,
    Affine {
        x: Vid,
        alpha: Pid,
        beta: Pid,
        out: Vid,
        saved: Option<AllocId>,
    },
    Gelu {
        x: Vid,
        out: Vid,
        saved: Option<AllocId>,
    },
    SparseLinear {
        x: Vid,
        w: Pid,
        bias: Pid,
        out: Vid,
        saved: Option<SavedActivation>,
        ledger_id: Option<AllocId>,
    },
    DenseLinear {
        x: Vid,
        w: Pid,
        bias: Pid,
        out: Vid,
        saved: Option<AllocId>,
    },
    TransposeLast2 {
        x: Vid,
        out: Vid,
    },
    Add {
        a: Vid,
        b: Vid,
        out: Vid,
    },
    MeanPoolPatches {
        x: Vid,
        out: Vid,
    },
    CrossEntropy {
        logits: Vid,
        labels: Vec<usize>,
        softmax: DenseTensor,
        out: Vid,
        saved: Option<AllocId>,
    },
}

/// Recorded forward pass. One training step = one tape; backward visits the
/// nodes in exact reverse execution order and consumes each saved activation
/// exactly once.
pub struct Tape {
    values: Vec<DenseTensor>,
    grads: Vec<Option<DenseTensor>>,
    nodes: Vec<Node>,
    ledger: Option<Arc<MemLedger>>,
    live_saved: usize,
    peak_saved: usize,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            nodes: Vec::new(),
            ledger: None,
            live_saved: 0,
            peak_saved: 0,
            backward_done: false,
        }
    }

    pub fn with_ledger(ledger: Arc<MemLedger>) -> Self {
        let mut t = Self::new();
        t.ledger = Some(ledger);
        t
    }

    pub fn value(&self, v: Vid) -> &DenseTensor {
        &self.values[v]
    }

    pub fn grad(&self, v: Vid) -> Option<&DenseTensor> {
        self.grads[v].as_ref()
    }

    /// Scalar payload of a `[1]`-shaped value (e.g. a loss).
    pub fn scalar(&self, v: Vid) -> f32 {
        self.values[v].data()[0]
    }

    /// Peak number of simultaneously held saved activations.
    pub fn peak_saved_activations(&self) -> usize {
        self.peak_saved
    }

    fn push_value(&mut self, t: DenseTensor) -> Vid {
        self.values.push(t);
        self.grads.push(None);
        self.values.len() - 1
    }

    fn ledger_alloc_dense(&mut self, label: &str, t: &DenseTensor) -> Option<AllocId> {
        self.note_saved();
        self.ledger
            .as_ref()
            .map(|l| l.alloc(crate::memstat::Component::Activations, label, t.len() as u64 * 4))
    }

    fn note_saved(&mut self) {
        self.live_saved += 1;
        self.peak_saved = self.peak_saved.max(self.live_saved);
    }

    fn release_saved(&mut self, id: Option<AllocId>) {
        self.live_saved -= 1;
        if let (Some(l), Some(id)) = (self.ledger.as_ref(), id) {
            l.release(id);
        }
    }

    /// Register an input tensor as a leaf.
    pub fn leaf(&mut self, t: DenseTensor) -> Vid {
        let out = self.push_value(t);
        self.nodes.push(Node::Leaf);
        out
    }

    /// Per-channel `y = alpha .* x + beta` over the trailing extent.
    pub fn affine(
        &mut self,
        store: &ParamStore,
        x: Vid,
        alpha: Pid,
        beta: Pid,
        label: &str,
    ) -> Result<Vid> {
        let xv = &self.values[x];
        let d = *xv.shape().last().unwrap();
        let av = &store.get(alpha).value;
        let bv = &store.get(beta).value;
        if av.len() != d || bv.len() != d {
            return Err(CoreError::ShapeMismatch(format!(
                "affine: channel {d} vs alpha {} / beta {}",
                av.len(),
                bv.len()
            )));
        }
        let mut out = xv.clone();
        let (ad, bd) = (av.data(), bv.data());
        for row in out.data_mut().chunks_exact_mut(d) {
            for ((o, &a), &b) in row.iter_mut().zip(ad).zip(bd) {
                *o = a * *o + b;
            }
        }
        let saved = self.ledger_alloc_dense(label, &self.values[x].clone());
        let out = self.push_value(out);
        self.nodes.push(Node::Affine {
            x,
            alpha,
            beta,
            out,
            saved,
        });
        Ok(out)
    }

    pub fn gelu(&mut self, x: Vid, label: &str) -> Vid {
        let mut out = self.values[x].clone();
        for v in out.data_mut() {
            *v = gelu_scalar(*v);
        }
        let saved = self.ledger_alloc_dense(label, &self.values[x].clone());
        let out = self.push_value(out);
        self.nodes.push(Node::Gelu { x, out, saved });
        out
    }

    /// Dense-forward / sparse-backward linear over `[B, P, Din]`.
    pub fn sparse_linear(
        &mut self,
        store: &ParamStore,
        x: Vid,
        w: Pid,
        bias: Pid,
        cfg: &PruneConfig,
        label: &str,
    ) -> Result<Vid> {
        let (y, saved) = sparse_linear_forward(
            &self.values[x],
            &store.get(w).value,
            &store.get(bias).value,
            cfg,
        )?;
        self.note_saved();
        let ledger_id = self
            .ledger
            .as_ref()
            .map(|l| l.record_activation(label, &saved));
        let out = self.push_value(y);
        self.nodes.push(Node::SparseLinear {
            x,
            w,
            bias,
            out,
            saved: Some(saved),
            ledger_id,
        });
        Ok(out)
    }

    /// Always-dense linear over `[R, Din]` (classifier head).
    pub fn linear2d(
        &mut self,
        store: &ParamStore,
        x: Vid,
        w: Pid,
        bias: Pid,
        label: &str,
    ) -> Result<Vid> {
        let y = crate::sparse_ops::linear2d(
            &self.values[x],
            &store.get(w).value,
            &store.get(bias).value,
        )?;
        let saved = self.ledger_alloc_dense(label, &self.values[x].clone());
        let out = self.push_value(y);
        self.nodes.push(Node::DenseLinear {
            x,
            w,
            bias,
            out,
            saved,
        });
        Ok(out)
    }

    pub fn transpose_last2(&mut self, x: Vid) -> Result<Vid> {
        let t = transpose2d(&self.values[x])?;
        let out = self.push_value(t);
        self.nodes.push(Node::TransposeLast2 { x, out });
        Ok(out)
    }

    pub fn add(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.values[a].shape(),
                self.values[b].shape()
            )));
        }
        let mut out = self.values[a].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b].data()) {
            *o += v;
        }
        let out = self.push_value(out);
        self.nodes.push(Node::Add { a, b, out });
        Ok(out)
    }

    /// `[B, P, D] -> [B, D]`, mean over the patch axis.
    pub fn mean_pool_patches(&mut self, x: Vid) -> Result<Vid> {
        let (b, p, d) = self.values[x].dims3()?;
        let xd = self.values[x].data();
        let mut out = vec![0f32; b * d];
        for bi in 0..b {
            for pi in 0..p {
                let row = &xd[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                let dst = &mut out[bi * d..(bi + 1) * d];
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in &mut out[bi * d..(bi + 1) * d] {
                *o /= p as f32;
            }
        }
        let out = self.push_value(DenseTensor::new(vec![b, d], out)?);
        self.nodes.push(Node::MeanPoolPatches { x, out });
        Ok(out)
    }

    /// Mean cross-entropy over the batch, numerically stabilized by
    /// max-subtraction. Output is a `[1]` scalar.
    pub fn cross_entropy(&mut self, logits: Vid, labels: &[usize]) -> Result<Vid> {
        let (b, k) = self.values[logits].dims2()?;
        if labels.len() != b {
            return Err(CoreError::ShapeMismatch(format!(
                "cross_entropy: {b} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CoreError::LabelRange {
                label: bad,
                num_classes: k,
            });
        }
        let ld = self.values[logits].data();
        let mut softmax = vec![0f32; b * k];
        let mut loss = 0f32;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &ld[bi * k..(bi + 1) * k];
            let max = row.iter().fold(f32::MIN, |m, &v| m.max(v));
            let dst = &mut softmax[bi * k..(bi + 1) * k];
            let mut denom = 0f32;
            for (s, &v) in dst.iter_mut().zip(row) {
                *s = (v - max).exp();
                denom += *s;
            }
            for s in dst.iter_mut() {
                *s /= denom;
            }
            loss += -(dst[label].ln());
        }
        loss /= b as f32;
        let softmax = DenseTensor::new(vec![b, k], softmax)?;
        let saved = self.ledger_alloc_dense("softmax", &softmax);
        let out = self.push_value(DenseTensor::new(vec![1], vec![loss])?);
        self.nodes.push(Node::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            softmax,
            out,
            saved,
        });
        Ok(out)
    }

    fn accumulate(&mut self, v: Vid, g: DenseTensor) {
        match &mut self.grads[v] {
            Some(acc) => {
                for (d, &s) in acc.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn take_grad(&self, v: Vid) -> Option<DenseTensor> {
        self.grads[v].clone()
    }

    /// Reverse pass from a scalar loss. Every parameter reachable from the
    /// loss gets its gradient accumulated; saved activations are released as
    /// their consuming node runs.
    pub fn backward(&mut self, loss: Vid, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(CoreError::InvalidArgument(
                "backward already ran on this tape".into(),
            ));
        }
        if self.values[loss].len() != 1 {
            return Err(CoreError::InvalidArgument(
                "backward expects a scalar loss".into(),
            ));
        }
        self.backward_done = true;
        self.grads[loss] = Some(DenseTensor::new(
            self.values[loss].shape().to_vec(),
            vec![1.0],
        )?);

        for ni in (0..self.nodes.len()).rev() {
            // Take the node apart without borrowing self, so helper methods
            // stay usable inside the match.
            let node = std::mem::replace(&mut self.nodes[ni], Node::Leaf);
            match node {
                Node::Leaf => {}
                Node::Affine {
                    x,
                    alpha,
                    beta,
                    out,
                    saved,
                } => {
                    if let Some(dy) = self.take_grad(out) {
                        let d = store.get(alpha).value.len();
                        let xd = self.values[x].data();
                        let dyd = dy.data();
                        let alpha_d = store.get(alpha).value.data().to_vec();
                        let mut dalpha = vec![0f32; d];
                        let mut dbeta = vec![0f32; d];
                        let mut dx = vec![0f32; xd.len()];
                        for (row, (xrow, dxrow)) in dyd
                            .chunks_exact(d)
                            .zip(xd.chunks_exact(d).zip(dx.chunks_exact_mut(d)))
                        {
                            for i in 0..d {
                                dalpha[i] += xrow[i] * row[i];
                                dbeta[i] += row[i];
                                dxrow[i] = alpha_d[i] * row[i];
                            }
                        }
                        store.accumulate_grad(alpha, &DenseTensor::new(vec![d], dalpha)?);
                        store.accumulate_grad(beta, &DenseTensor::new(vec![d], dbeta)?);
                        self.accumulate(x, DenseTensor::new(self.values[x].shape().to_vec(), dx)?);
                    }
                    self.release_saved(saved);
                }
                Node::Gelu { x, out, saved } => {
                    if let Some(dy) = self.take_grad(out) {
                        let mut dx = self.values[x].clone();
                        for (v, &g) in dx.data_mut().iter_mut().zip(dy.data()) {
                            *v = gelu_grad_scalar(*v) * g;
                        }
                        self.accumulate(x, dx);
                    }
                    self.release_saved(saved);
                }
                Node::SparseLinear {
                    x,
                    w,
                    bias,
                    out,
                    saved,
                    ledger_id,
                } => {
                    let saved = saved.ok_or_else(|| {
                        CoreError::InvalidArgument("saved activation consumed twice".into())
                    })?;
                    if let Some(dy) = self.take_grad(out) {
                        let (dx, dw, dbias) =
                            sparse_linear_backward(&dy, &saved, &store.get(w).value)?;
                        store.accumulate_grad(w, &dw);
                        store.accumulate_grad(bias, &dbias);
                        self.accumulate(x, dx);
                    }
                    drop(saved);
                    self.release_saved(ledger_id);
                }
                Node::DenseLinear {
                    x,
                    w,
                    bias,
                    out,
                    saved,
                } => {
                    if let Some(dy) = self.take_grad(out) {
                        let dx = matmul_dense(&dy, &store.get(w).value)?;
                        let dw = matmul_dense(&transpose2d(&dy)?, &self.values[x])?;
                        let (_, dout) = dy.dims2()?;
                        let mut dbias = vec![0f32; dout];
                        for row in dy.data().chunks_exact(dout) {
                            for (b, &v) in dbias.iter_mut().zip(row) {
                                *b += v;
                            }
                        }
                        store.accumulate_grad(w, &dw);
                        store.accumulate_grad(bias, &DenseTensor::new(vec![dout], dbias)?);
                        self.accumulate(x, dx);
                    }
                    self.release_saved(saved);
                }
                Node::TransposeLast2 { x, out } => {
                    if let Some(dy) = self.take_grad(out) {
                        self.accumulate(x, transpose2d(&dy)?);
                    }
                }
                Node::Add { a, b, out } => {
                    if let Some(dy) = self.take_grad(out) {
                        self.accumulate(a, dy.clone());
                        self.accumulate(b, dy);
                    }
                }
                Node::MeanPoolPatches { x, out } => {
                    if let Some(dy) = self.take_grad(out) {
                        let (b, p, d) = self.values[x].dims3()?;
                        let mut dx = vec![0f32; b * p * d];
                        let dyd = dy.data();
                        let inv = 1.0 / p as f32;
                        for bi in 0..b {
                            let g = &dyd[bi * d..(bi + 1) * d];
                            for pi in 0..p {
                                let dst = &mut dx[(bi * p + pi) * d..(bi * p + pi + 1) * d];
                                for (o, &v) in dst.iter_mut().zip(g) {
                                    *o = v * inv;
                                }
                            }
                        }
                        self.accumulate(x, DenseTensor::new(vec![b, p, d], dx)?);
                    }
                }
                Node::CrossEntropy {
                    logits,
                    labels,
                    softmax,
                    out,
                    saved,
                } => {
                    if let Some(dloss) = self.take_grad(out) {
                        let scale = dloss.data()[0] / labels.len() as f32;
                        let (b, k) = softmax.dims2()?;
                        let mut dl = softmax.data().to_vec();
                        for (bi, &label) in labels.iter().enumerate() {
                            dl[bi * k + label] -= 1.0;
                        }
                        for v in &mut dl {
                            *v *= scale;
                        }
                        self.accumulate(logits, DenseTensor::new(vec![b, k], dl)?);
                    }
                    self.release_saved(saved);
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// SGD with momentum: `v <- mu*v + (g + wd*w); w <- w - lr*v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|p| vec![0f32; p.value.len()]).collect();
        }
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            let w = p.value.data_mut();
            let g = p.grad.data();
            for ((wi, &gi), v) in w.iter_mut().zip(g).zip(vel.iter_mut()) {
                *v = self.momentum * *v + gi + self.weight_decay * *wi;
                *wi -= self.lr * *v;
            }
        }
    }

    /// State bytes per parameter byte (one velocity buffer).
    pub const STATE_FACTOR: u64 = 1;
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0f32; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let w = p.value.data_mut();
            let g = p.grad.data();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// State bytes per parameter byte (two moment buffers).
    pub const STATE_FACTOR: u64 = 2;
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(SgdMomentum),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, store: &mut ParamStore) {
        match self {
            Optimizer::Sgd(o) => o.step(store),
            Optimizer::Adam(o) => o.step(store),
        }
    }

    pub fn state_factor(&self) -> u64 {
        match self {
            Optimizer::Sgd(_) => SgdMomentum::STATE_FACTOR,
            Optimizer::Adam(_) => Adam::STATE_FACTOR,
        }
    }
}
