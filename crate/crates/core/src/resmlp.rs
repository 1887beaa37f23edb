//! Patch embedding and the ResMLP-style block/model builder.
//!
//! A block applies a cross-patch linear over the transposed `[B, D, P]` view
//! and a two-layer channel MLP, each branch wrapped in a pre-affine and a
//! post-affine and added back residually:
//!
//! ```text
//! x1 = x  + post1(CrossPatchLinear(aff1(x)^T)^T)
//! x2 = x1 + post2(fc2(gelu(fc1(aff2(x1)))))
//! ```
//!
//! All linear layers except the classifier head are the dense-forward /
//! sparse-backward operator, so their saved activations are pruned and
//! BSR-encoded whenever the block size divides the trailing extent.

use crate::autograd::{ParamStore, Pid, Tape, Vid};
use crate::error::{CoreError, Result};
use crate::memstat::ActivationSite;
use crate::pruner::PruneConfig;
use crate::tensor::{rng_normal, DenseTensor, Rng};
use serde::Serialize;
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    /// MLP expansion factor (hidden layer = mlp_ratio * hidden_dim).
    pub mlp_ratio: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub prune: PruneConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
        {
            return Err(CoreError::InvalidArgument(format!(
                "patch size {} must divide image {}x{}",
                self.patch_size, self.height, self.width
            )));
        }
        if self.channels == 0
            || self.hidden_dim == 0
            || self.mlp_ratio == 0
            || self.num_classes == 0
        {
            return Err(CoreError::InvalidArgument(
                "channels, hidden_dim, mlp_ratio and num_classes must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Patch count P = (H/p) * (W/p).
    pub fn patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// Flattened patch length C * p^2.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Split `[B, C, H, W]` images into raster-ordered patches, each linearized
/// with the channel values of a pixel adjacent: element order within a patch
/// row is (pixel row, pixel col, channel).
pub fn patchify(img: &DenseTensor, patch_size: usize) -> Result<DenseTensor> {
    let shape = img.shape();
    if shape.len() != 4 {
        return Err(CoreError::Rank(format!(
            "patchify expects [B, C, H, W], got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "patch size {patch_size} must divide {h}x{w}"
        )));
    }
    let ph = h / patch_size;
    let pw = w / patch_size;
    let p = ph * pw;
    let k = c * patch_size * patch_size;
    let d = img.data();
    let mut out = vec![0f32; b * p * k];
    for bi in 0..b {
        for pi in 0..ph {
            for pj in 0..pw {
                let patch = pi * pw + pj;
                let dst_base = (bi * p + patch) * k;
                for u in 0..patch_size {
                    for v in 0..patch_size {
                        for ci in 0..c {
                            let src = ((bi * c + ci) * h + pi * patch_size + u) * w
                                + pj * patch_size
                                + v;
                            out[dst_base + (u * patch_size + v) * c + ci] = d[src];
                        }
                    }
                }
            }
        }
    }
    DenseTensor::new(vec![b, p, k], out)
}

struct BlockParams {
    aff1: (Pid, Pid),
    cross_patch: (Pid, Pid),
    post1: (Pid, Pid),
    aff2: (Pid, Pid),
    fc1: (Pid, Pid),
    fc2: (Pid, Pid),
    post2: (Pid, Pid),
}

pub struct ResMlp {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    embed: (Pid, Pid),
    blocks: Vec<BlockParams>,
    head_affine: (Pid, Pid),
    head: (Pid, Pid),
}

/// Damping applied to the residual branches at init.
const BRANCH_SCALE_INIT: f32 = 0.1;

impl ResMlp {
    /// Build a model with seed-stable initialization: linear weights are
    /// N(0, 1/sqrt(fan_in)), biases zero, pre-affines identity, post-affines
    /// a small constant scale.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.hidden_dim;
        let p = cfg.patches();
        let hidden = cfg.mlp_ratio * d;

        let linear = |store: &mut ParamStore,
                      rng: &mut Rng,
                      name: &str,
                      dout: usize,
                      din: usize|
         -> Result<(Pid, Pid)> {
            let std = 1.0 / (din as f32).sqrt();
            let w = store.add(
                format!("{name}.weight"),
                rng_normal(rng, &[dout, din], 0.0, std)?,
            );
            let b = store.add(format!("{name}.bias"), DenseTensor::zeros(&[dout]));
            Ok((w, b))
        };
        let affine = |store: &mut ParamStore, name: &str, dim: usize, scale: f32| {
            let a = store.add(format!("{name}.alpha"), DenseTensor::filled(&[dim], scale));
            let b = store.add(format!("{name}.beta"), DenseTensor::zeros(&[dim]));
            (a, b)
        };

        let embed = linear(&mut store, &mut rng, "embed", d, cfg.patch_dim())?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let aff1 = affine(&mut store, &format!("block{i}.aff1"), d, 1.0);
            let cross_patch = linear(&mut store, &mut rng, &format!("block{i}.xpatch"), p, p)?;
            let post1 = affine(
                &mut store,
                &format!("block{i}.post1"),
                d,
                BRANCH_SCALE_INIT,
            );
            let aff2 = affine(&mut store, &format!("block{i}.aff2"), d, 1.0);
            let fc1 = linear(&mut store, &mut rng, &format!("block{i}.fc1"), hidden, d)?;
            let fc2 = linear(&mut store, &mut rng, &format!("block{i}.fc2"), d, hidden)?;
            let post2 = affine(
                &mut store,
                &format!("block{i}.post2"),
                d,
                BRANCH_SCALE_INIT,
            );
            blocks.push(BlockParams {
                aff1,
                cross_patch,
                post1,
                aff2,
                fc1,
                fc2,
                post2,
            });
        }
        let head_affine = affine(&mut store, "head.affine", d, 1.0);
        let head = linear(&mut store, &mut rng, "head", cfg.num_classes, d)?;

        Ok(Self {
            cfg,
            store,
            embed,
            blocks,
            head_affine,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.element_count()
    }

    /// Forward pass from raw images to logits.
    pub fn forward(&self, tape: &mut Tape, images: &DenseTensor) -> Result<Vid> {
        let patches = patchify(images, self.cfg.patch_size)?;
        let prune = &self.cfg.prune;
        let x = tape.leaf(patches);
        let mut x =
            tape.sparse_linear(&self.store, x, self.embed.0, self.embed.1, prune, "embed")?;
        for (i, blk) in self.blocks.iter().enumerate() {
            let t = tape.affine(
                &self.store,
                x,
                blk.aff1.0,
                blk.aff1.1,
                &format!("block{i}.aff1"),
            )?;
            let t = tape.transpose_last2(t)?;
            let t = tape.sparse_linear(
                &self.store,
                t,
                blk.cross_patch.0,
                blk.cross_patch.1,
                prune,
                &format!("block{i}.xpatch"),
            )?;
            let t = tape.transpose_last2(t)?;
            let t = tape.affine(
                &self.store,
                t,
                blk.post1.0,
                blk.post1.1,
                &format!("block{i}.post1"),
            )?;
            let x1 = tape.add(x, t)?;

            let u = tape.affine(
                &self.store,
                x1,
                blk.aff2.0,
                blk.aff2.1,
                &format!("block{i}.aff2"),
            )?;
            let u = tape.sparse_linear(
                &self.store,
                u,
                blk.fc1.0,
                blk.fc1.1,
                prune,
                &format!("block{i}.fc1"),
            )?;
            let u = tape.gelu(u, &format!("block{i}.gelu"));
            let u = tape.sparse_linear(
                &self.store,
                u,
                blk.fc2.0,
                blk.fc2.1,
                prune,
                &format!("block{i}.fc2"),
            )?;
            let u = tape.affine(
                &self.store,
                u,
                blk.post2.0,
                blk.post2.1,
                &format!("block{i}.post2"),
            )?;
            x = tape.add(x1, u)?;
        }
        let pooled = tape.mean_pool_patches(x)?;
        let pooled = tape.affine(
            &self.store,
            pooled,
            self.head_affine.0,
            self.head_affine.1,
            "head.affine",
        )?;
        tape.linear2d(&self.store, pooled, self.head.0, self.head.1, "head")
    }

    /// Forward plus mean cross-entropy; returns (logits, loss).
    pub fn loss(
        &self,
        tape: &mut Tape,
        images: &DenseTensor,
        labels: &[usize],
    ) -> Result<(Vid, Vid)> {
        let logits = self.forward(tape, images)?;
        let loss = tape.cross_entropy(logits, labels)?;
        Ok((logits, loss))
    }

    /// Per-layer BSR eligibility of the saved activations under the model's
    /// prune configuration.
    pub fn eligibility_report(&self) -> Vec<EligibilityEntry> {
        activation_census(&self.cfg, 1)
            .into_iter()
            .map(|site| EligibilityEntry {
                layer: site.label.clone(),
                rows: site.rows_per_sample,
                cols: site.cols,
                prunable: site.prunable,
                eligible: site.eligible(self.cfg.prune.block_cols),
            })
            .collect()
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for p in self.store.iter() {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &e in p.value.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load parameter values from a checkpoint into this model. Names and
    /// shapes must match the built architecture.
    pub fn read_checkpoint<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(CoreError::Format("bad checkpoint magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        if count != self.store.len() {
            return Err(CoreError::Format(format!(
                "checkpoint has {count} params, model has {}",
                self.store.len()
            )));
        }
        for i in 0..count {
            r.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CoreError::Format("non-utf8 param name".into()))?;
            r.read_exact(&mut b4)?;
            let rank = u32::from_le_bytes(b4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b4)?;
                shape.push(u32::from_le_bytes(b4) as usize);
            }
            let param = self.store.get_mut(i);
            if param.name != name || param.value.shape() != shape.as_slice() {
                return Err(CoreError::Format(format!(
                    "checkpoint param {i} is {name} {shape:?}, model has {} {:?}",
                    param.name,
                    param.value.shape()
                )));
            }
            for v in param.value.data_mut() {
                r.read_exact(&mut b4)?;
                *v = f32::from_le_bytes(b4);
            }
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"BSTCKPT1";

#[derive(Debug, Clone, Serialize)]
pub struct EligibilityEntry {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub prunable: bool,
    pub eligible: bool,
}

/// Every activation the forward pass retains for backward, per batch of
/// `batch` samples, in tape order. This census mirrors `ResMlp::forward`
/// exactly; the memory reports are computed from it.
pub fn activation_census(cfg: &ModelConfig, batch: usize) -> Vec<ActivationSite> {
    let d = cfg.hidden_dim;
    let p = cfg.patches();
    let hidden = cfg.mlp_ratio * d;
    let mut sites = Vec::new();
    let mut push = |label: String, rows: usize, cols: usize, prunable: bool| {
        sites.push(ActivationSite {
            label,
            samples: batch,
            rows_per_sample: rows,
            cols,
            prunable,
        });
    };
    push("embed".into(), p, cfg.patch_dim(), true);
    for i in 0..cfg.depth {
        push(format!("block{i}.aff1"), p, d, false);
        push(format!("block{i}.xpatch"), d, p, true);
        push(format!("block{i}.post1"), p, d, false);
        push(format!("block{i}.aff2"), p, d, false);
        push(format!("block{i}.fc1"), p, d, true);
        push(format!("block{i}.gelu"), p, hidden, false);
        push(format!("block{i}.fc2"), p, hidden, true);
        push(format!("block{i}.post2"), p, d, false);
    }
    push("head.affine".into(), 1, d, false);
    push("head".into(), 1, d, false);
    push("softmax".into(), 1, cfg.num_classes, false);
    sites
}

/// Bytes of one input batch.
pub fn input_bytes(cfg: &ModelConfig, batch: usize) -> u64 {
    (batch * cfg.channels * cfg.height * cfg.width) as u64 * 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rng_normal, Rng};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: 3,
            height: 8,
            width: 8,
            patch_size: 4,
            hidden_dim: 16,
            mlp_ratio: 4,
            depth: 2,
            num_classes: 3,
            prune: PruneConfig::new(0.0, 4).unwrap(),
        }
    }

    #[test]
    fn patchify_whole_image_patch() {
        // H = W = patch_size: one patch holding the whole image interleaved.
        let img = DenseTensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 8]);
        // channel 0 entries are 0..3, channel 1 entries 4..7, interleaved.
        assert_eq!(p.data(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
    }

    #[test]
    fn patchify_imagenet_geometry() {
        let cfg = ModelConfig {
            channels: 3,
            height: 224,
            width: 224,
            patch_size: 16,
            hidden_dim: 384,
            mlp_ratio: 4,
            depth: 12,
            num_classes: 1000,
            prune: PruneConfig::dense(),
        };
        assert_eq!(cfg.patches(), 196);
        assert_eq!(cfg.patch_dim(), 768);
    }

    #[test]
    fn patchify_single_channel_raster_order() {
        // 2x2 single-channel image, patch 1: rows equal pixel values in
        // raster order.
        let img = DenseTensor::new(vec![1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let p = patchify(&img, 1).unwrap();
        assert_eq!(p.shape(), &[1, 4, 1]);
        assert_eq!(p.data(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn s12_param_count_near_fifteen_million() {
        let cfg = ModelConfig {
            channels: 3,
            height: 224,
            width: 224,
            patch_size: 16,
            hidden_dim: 384,
            mlp_ratio: 4,
            depth: 12,
            num_classes: 1000,
            prune: PruneConfig::new(0.5, 64).unwrap(),
        };
        let model = ResMlp::build(cfg, 1).unwrap();
        let count = model.param_count();
        assert!(
            (14_500_000..=15_500_000).contains(&count),
            "param count {count}"
        );
    }

    #[test]
    fn depth_zero_is_embed_pool_head() {
        let mut cfg = tiny_cfg();
        cfg.depth = 0;
        let model = ResMlp::build(cfg, 2).unwrap();
        let mut rng = Rng::new(3);
        let img = rng_normal(&mut rng, &[2, 3, 8, 8], 0.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &img).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 3]);
    }

    #[test]
    fn tiny_model_trains_one_step() {
        let model = ResMlp::build(tiny_cfg(), 4).unwrap();
        let mut store = model.store.clone();
        let mut rng = Rng::new(5);
        let img = rng_normal(&mut rng, &[2, 3, 8, 8], 0.0, 1.0).unwrap();
        let labels = vec![0usize, 2];
        let mut tape = Tape::new();
        let (_, loss) = model.loss(&mut tape, &img, &labels).unwrap();
        let before = tape.scalar(loss);
        assert!(before.is_finite());
        tape.backward(loss, &mut store).unwrap();
        let mut opt = crate::autograd::SgdMomentum::new(0.05, 0.9, 0.0);
        opt.step(&mut store);
        let moved = store
            .iter()
            .zip(model.store.iter())
            .any(|(a, b)| a.value.data() != b.value.data());
        assert!(moved, "a step should change parameters");
    }

    #[test]
    fn zero_branch_weights_make_block_identity() {
        let cfg = tiny_cfg();
        let mut model = ResMlp::build(cfg, 7).unwrap();
        // Zero every branch output path: cross-patch and fc2 weights/biases.
        for i in 0..model.store.len() {
            let p = model.store.get_mut(i);
            if p.name.contains("xpatch") || p.name.contains("fc2") {
                p.value.data_mut().fill(0.0);
            }
        }
        let mut rng = Rng::new(8);
        let img = rng_normal(&mut rng, &[1, 3, 8, 8], 0.0, 1.0).unwrap();

        // Blocks reduce to identity: logits equal a depth-0 model with the
        // same embed/head parameters.
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &img).unwrap();

        let mut cfg0 = cfg;
        cfg0.depth = 0;
        let mut model0 = ResMlp::build(cfg0, 7).unwrap();
        for i in 0..model0.store.len() {
            let name = model0.store.get(i).name.clone();
            let value = model
                .store
                .iter()
                .find(|p| p.name == name)
                .expect("matching param")
                .value
                .clone();
            model0.store.get_mut(i).value = value;
        }
        let mut tape0 = Tape::new();
        let logits0 = model0.forward(&mut tape0, &img).unwrap();
        assert_eq!(tape.value(logits), tape0.value(logits0));
    }

    #[test]
    fn census_matches_live_tape() {
        let cfg = tiny_cfg();
        let model = ResMlp::build(cfg, 9).unwrap();
        let batch = 2;
        let ledger = std::sync::Arc::new(crate::memstat::MemLedger::new());
        let mut tape = Tape::with_ledger(ledger.clone());
        let mut rng = Rng::new(10);
        let img = rng_normal(&mut rng, &[batch, 3, 8, 8], 0.0, 1.0).unwrap();
        let labels = vec![1usize, 0];
        let (_, loss) = model.loss(&mut tape, &img, &labels).unwrap();

        let census = activation_census(&cfg, batch);
        let entries = ledger.entries();
        assert_eq!(entries.len(), census.len(), "one ledger entry per site");
        for (site, entry) in census.iter().zip(&entries) {
            let dense = entry.dense_equivalent.unwrap_or(entry.bytes);
            assert_eq!(site.dense_bytes(), dense, "site {}", site.label);
        }

        // All saved activations live until backward, then released.
        let activ = crate::memstat::Component::Activations;
        assert_eq!(ledger.live_count(activ), census.len());
        let mut store = model.store.clone();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(ledger.live_count(activ), 0);
        assert_eq!(ledger.current_bytes(activ), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_cfg();
        let model = ResMlp::build(cfg, 11).unwrap();
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        let mut other = ResMlp::build(cfg, 999).unwrap();
        other.read_checkpoint(&mut buf.as_slice()).unwrap();
        for (a, b) in model.store.iter().zip(other.store.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "param {}", a.name);
        }
    }

    #[test]
    fn eligibility_follows_divisibility() {
        let mut cfg = tiny_cfg();
        cfg.prune = PruneConfig::new(0.5, 16).unwrap();
        let model = ResMlp::build(cfg, 12).unwrap();
        let report = model.eligibility_report();
        // hidden_dim 16 is divisible by 16, patch count 4 is not.
        let fc1 = report.iter().find(|e| e.layer == "block0.fc1").unwrap();
        assert!(fc1.eligible);
        let xp = report.iter().find(|e| e.layer == "block0.xpatch").unwrap();
        assert!(xp.prunable && !xp.eligible);
        let gelu = report.iter().find(|e| e.layer == "block0.gelu").unwrap();
        assert!(!gelu.prunable);
    }
}
