//! PatchGD and whole-image GD training loops, inference and checkpoints.

mod checkpoint;
mod config;
mod runlog;
mod schedule;

pub use checkpoint::{ArrayEntry, Checkpoint, Manifest};
pub use config::{Mode, Resolved, TrainConfig};
pub use runlog::{read_runlog, LogRow, RunLog, RUNLOG_HEADER};
pub use schedule::lr_schedule;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::memcost::{estimate_gd, estimate_patchgd, MemoryReport};
use crate::metrics::{accuracy, qwk};
use crate::model::{CompositeKind, CompositeModel, FeatureExtractor, HeadNet, ModelConfig, BACKBONE_PREFIX};
use crate::patching::{images_to_nchw, pad_to_grid, patches_nchw, GridSpec, Image, SamplerState};
use crate::seed::rng_for;
use crate::tensor::{Gradients, Graph, Optimizer, ParamStore, Scalar, Tensor, Var};
use crate::zblock::ZBlock;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_SAMPLER: u64 = 3;

/// Running sum of gradients, one tensor per parameter in store order.
#[derive(Debug, Clone)]
pub struct GradAccumulator<T> {
    sums: Vec<Tensor<T>>,
    count: usize,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            sums: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            count: 0,
        }
    }

    /// Adds one backward pass. Parameters the loss did not reach add zero.
    pub fn add(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            self.sums[id.index()].add_assign(g);
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sums(&self) -> &[Tensor<T>] {
        &self.sums
    }

    pub fn is_zero(&self) -> bool {
        self.count == 0 && self.sums.iter().all(|t| t.data().iter().all(|v| v.is_zero()))
    }

    /// Returns `U / divisor` and resets the buffers to zero.
    pub fn take_scaled(&mut self, divisor: usize) -> Vec<Tensor<T>> {
        let inv = T::one() / T::from_usize(divisor).unwrap();
        let out = self
            .sums
            .iter_mut()
            .map(|t| {
                let mut g = std::mem::replace(t, Tensor::zeros(t.shape()));
                if divisor != 1 {
                    g.scale_in_place(inv);
                }
                g
            })
            .collect();
        self.count = 0;
        out
    }
}

#[derive(Debug, Clone)]
pub enum Network {
    PatchGd { extractor: FeatureExtractor, head: HeadNet },
    Composite(CompositeModel),
}

/// Losses and predictions from one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterStats {
    /// Loss of every executed inner iteration.
    pub losses: Vec<f64>,
    pub updates: usize,
    /// Predictions from the last executed inner iteration.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub qwk: f64,
    pub predictions: Vec<usize>,
}

/// One inner iteration's graph: embeds each image's listed cells with
/// `f_θ1`, splices them into `z`, runs `g_θ2` on the images that received
/// patches and returns `(loss, logits)` for those images (batch mean).
/// `None` when no image received a patch.
#[allow(clippy::too_many_arguments)]
pub fn patchgd_inner_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    extractor: &FeatureExtractor,
    head: &HeadNet,
    z: &mut ZBlock<T>,
    images: &[&Image],
    labels: &[usize],
    cells: &[Vec<(usize, usize)>],
) -> Result<Option<(Var, Var)>> {
    if images.len() != z.batch() || labels.len() != z.batch() || cells.len() != z.batch() {
        return Err(Error::dim(
            "inner_iteration",
            format!(
                "{} images, {} labels, {} cell lists for a latent batch of {}",
                images.len(),
                labels.len(),
                cells.len(),
                z.batch()
            ),
        ));
    }
    z.begin_step();
    let active: Vec<usize> = (0..images.len()).filter(|&i| !cells[i].is_empty()).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let p = extractor.patch_size();
    let mut shape = vec![0, extractor.in_channels(), p, p];
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for &i in &active {
        let t = patches_nchw::<T>(images[i], &cells[i], p)?;
        shape[0] += cells[i].len();
        data.extend_from_slice(t.data());
        targets.extend(cells[i].iter().map(|&(a, b)| (i, a, b)));
    }
    let x = g.constant(Tensor::new(shape, data)?);
    let rows = extractor.embed(g, store, x)?;
    z.scatter(g, rows, &targets)?;
    let zt = z.read_images(g, &active)?;
    let logits = head.forward(g, store, zt)?;
    let y: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
    let loss = g.softmax_cross_entropy(logits, &y)?;
    Ok(Some((loss, logits)))
}

fn check_loss<T: Scalar>(g: &Graph<T>, loss: Var, context: String) -> Result<f64> {
    let v = g.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            name: context,
        });
    }
    Ok(v)
}

pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub net: Network,
    pub opt: Optimizer<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_accuracy: Option<f64>,
}

impl<T: Scalar> Trainer<T> {
    /// Builds the network for `cfg.mode` with seeded initial weights.
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(cfg.seed, &[STREAM_INIT]);
        let p = cfg.patch_size;
        let net = match cfg.mode {
            Mode::Patchgd => {
                let extractor = model_cfg.build_extractor(&mut store, &mut rng, p)?;
                let head = model_cfg.build_head(&mut store, &mut rng)?;
                Network::PatchGd { extractor, head }
            }
            Mode::Gd => Network::Composite(CompositeModel::build(
                CompositeKind::Gd,
                &mut store,
                &mut rng,
                &model_cfg,
                p,
            )?),
            Mode::GdExtended => Network::Composite(CompositeModel::build(
                CompositeKind::GdExtended,
                &mut store,
                &mut rng,
                &model_cfg,
                p,
            )?),
        };
        let opt = Optimizer::new(cfg.optimizer, &store, cfg.adam);
        let mut t = Self {
            cfg,
            model_cfg,
            store,
            net,
            opt,
            epoch: 0,
            best_val_accuracy: None,
        };
        if let Some(path) = t.cfg.init_backbone.clone() {
            let ck = Checkpoint::<T>::load(&path)?;
            let n = ck.restore_prefix(&path, &mut t.store, BACKBONE_PREFIX)?;
            log::info!("initialized {n} backbone tensors from {}", path.display());
        }
        Ok(t)
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        match &self.net {
            Network::PatchGd { extractor, .. } => extractor,
            Network::Composite(m) => m.backbone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    fn pad(&self, image: &Image) -> Image {
        pad_to_grid(image, self.cfg.patch_size, self.cfg.pad_value)
    }

    fn padded<'a>(&self, images: &[&'a Image], keep: &'a mut Vec<Image>) -> Vec<&'a Image> {
        let p = self.cfg.patch_size;
        if images.iter().all(|i| i.height % p == 0 && i.width % p == 0) {
            return images.to_vec();
        }
        *keep = images.iter().map(|i| self.pad(i)).collect();
        keep.iter().collect()
    }

    /// Memory model of one training step at `batch` images of
    /// `height × width`.
    pub fn memory_report(&self, height: usize, width: usize, batch: usize) -> Result<MemoryReport> {
        match &self.net {
            Network::PatchGd { extractor, head } => {
                let res = self.cfg.resolve(height, width)?;
                estimate_patchgd(
                    extractor,
                    head,
                    height,
                    width,
                    res.patches_per_step,
                    batch as u64,
                    T::DTYPE,
                    self.cfg.optimizer,
                )
            }
            Network::Composite(m) => {
                let g = GridSpec::padded(height, width, self.cfg.patch_size)?;
                estimate_gd(m, g.height, g.width, batch as u64, T::DTYPE, self.cfg.optimizer)
            }
        }
    }

    pub fn modeled_peak(&self, height: usize, width: usize, batch: usize) -> Result<u64> {
        Ok(self.memory_report(height, width, batch)?.peak_bytes)
    }

    /// One PatchGD outer iteration on a batch whose images share one size.
    pub fn patchgd_outer_iteration(
        &mut self,
        images: &[&Image],
        labels: &[usize],
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<OuterStats> {
        let Network::PatchGd { extractor, head } = &self.net else {
            return Err(Error::Contract("PatchGD iteration on a whole-image model".into()));
        };
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::dim(
                "outer_iteration",
                format!("{} images for {} labels", images.len(), labels.len()),
            ));
        }
        let mut keep = Vec::new();
        let images = self.padded(images, &mut keep);
        let res = self.cfg.resolve(images[0].height, images[0].width)?;
        let grid = res.grid;
        let eps = self.cfg.grad_accum;

        let mut z = ZBlock::new(images.len(), grid, extractor.embed_dim())?;
        z.fill(&images, extractor, &self.store, self.cfg.fill_chunk)?;
        let mut samplers = images
            .iter()
            .map(|_| SamplerState::new(&grid, self.cfg.max_coverage, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut acc = GradAccumulator::new(&self.store);
        let mut stats = OuterStats {
            losses: Vec::new(),
            updates: 0,
            predictions: Vec::new(),
        };

        for j in 1..=res.inner_iterations {
            let cells: Vec<Vec<(usize, usize)>> = samplers
                .iter_mut()
                .map(|s| {
                    s.next_cells(res.patches_per_step)
                        .map(|c| c.iter().map(|&i| grid.cell_position(i)).collect())
                        .unwrap_or_default()
                })
                .collect();
            let mut g = Graph::new();
            let Some((loss, logits)) =
                patchgd_inner_loss(&mut g, &self.store, extractor, head, &mut z, &images, labels, &cells)?
            else {
                break;
            };
            let lv = check_loss(&g, loss, format!("epoch {} inner iteration {j}", self.epoch))?;
            stats.losses.push(lv);
            stats.predictions = g.value(logits).argmax_rows();
            acc.add(&g.backward(loss)?);
            if j % eps == 0 {
                let grads = acc.take_scaled(eps);
                self.opt.step(&mut self.store, &grads, lr)?;
                stats.updates += 1;
            }
        }
        if self.cfg.flush_remainder && acc.count() > 0 {
            let n = acc.count();
            let grads = acc.take_scaled(n);
            self.opt.step(&mut self.store, &grads, lr)?;
            stats.updates += 1;
        }
        if stats.updates == 0 {
            return Err(Error::Config(format!(
                "sampler exhausted after {} inner iterations, before the first update (epsilon = {eps})",
                stats.losses.len()
            )));
        }
        Ok(stats)
    }

    /// Gradients of the mean whole-image loss, without updating.
    pub fn gd_gradients(&self, images: &[&Image], labels: &[usize]) -> Result<(f64, Vec<usize>, Vec<Tensor<T>>)> {
        let Network::Composite(model) = &self.net else {
            return Err(Error::Contract("GD iteration on a PatchGD model".into()));
        };
        let mut keep = Vec::new();
        let images = self.padded(images, &mut keep);
        let x = images_to_nchw::<T>(&images)?;
        let mut g = Graph::new();
        let logits = model.forward(&mut g, &self.store, &x)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let lv = check_loss(&g, loss, format!("epoch {} GD step", self.epoch))?;
        let preds = g.value(logits).argmax_rows();
        let mut acc = GradAccumulator::new(&self.store);
        acc.add(&g.backward(loss)?);
        Ok((lv, preds, acc.take_scaled(1)))
    }

    /// One mini-batch GD update; returns the loss before the update.
    pub fn gd_iteration(&mut self, images: &[&Image], labels: &[usize], lr: f64) -> Result<(f64, Vec<usize>)> {
        let (loss, preds, grads) = self.gd_gradients(images, labels)?;
        self.opt.step(&mut self.store, &grads, lr)?;
        Ok((loss, preds))
    }

    /// Logits for a batch via full latent-grid filling (PatchGD) or one
    /// whole-image pass. No sampling, no gradient tracking.
    pub fn logits(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let mut keep = Vec::new();
        let images = self.padded(images, &mut keep);
        let mut g = Graph::inference();
        let logits = match &self.net {
            Network::PatchGd { extractor, head } => {
                let grid = GridSpec::for_image(images[0], self.cfg.patch_size)?;
                let mut z = ZBlock::new(images.len(), grid, extractor.embed_dim())?;
                z.fill(&images, extractor, &self.store, self.cfg.fill_chunk)?;
                let zt = z.read(&mut g)?;
                head.forward(&mut g, &self.store, zt)?
            }
            Network::Composite(model) => {
                let x = images_to_nchw::<T>(&images)?;
                model.forward(&mut g, &self.store, &x)?
            }
        };
        Ok(g.value(logits).clone())
    }

    /// Class probabilities `[B, c]`.
    pub fn infer(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let logits = self.logits(images)?;
        let mut g = Graph::inference();
        let v = g.constant(logits);
        let p = g.softmax(v);
        Ok(g.value(p).clone())
    }

    pub fn evaluate(&self, images: &[&Image], labels: &[usize]) -> Result<EvalStats> {
        if images.is_empty() {
            return Err(Error::Validation("evaluation needs at least one sample".into()));
        }
        let mut total = 0.0;
        let mut preds = Vec::with_capacity(images.len());
        for (imgs, labs) in images
            .chunks(self.cfg.eval_batch)
            .zip(labels.chunks(self.cfg.eval_batch))
        {
            let logits = self.logits(imgs)?;
            let mut g = Graph::inference();
            let v = g.constant(logits);
            let loss = g.softmax_cross_entropy(v, labs)?;
            total += g.value(loss).item()?.to_f64().unwrap() * imgs.len() as f64;
            preds.extend(g.value(v).argmax_rows());
        }
        Ok(EvalStats {
            loss: total / images.len() as f64,
            accuracy: accuracy(&preds, labels)?,
            qwk: qwk(&preds, labels, self.model_cfg.classes)?,
            predictions: preds,
        })
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        lr_schedule(epoch, self.cfg.lr, self.cfg.warmup_epochs, self.cfg.schedule_epochs)
    }

    /// Trains one epoch over `images` in a seeded order; returns the mean
    /// loss, predictions aligned with `labels`, and the last learning rate.
    pub fn train_epoch(&mut self, images: &[&Image], labels: &[usize]) -> Result<(f64, Vec<usize>, f64)> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Validation(format!(
                "training needs matching non-empty images and labels ({} vs {})",
                images.len(),
                labels.len()
            )));
        }
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        let mut preds = vec![0; images.len()];
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            lr = self.lr_at(epoch as f64 + bi as f64 / batches.len() as f64);
            let imgs: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let labs: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, p) = match self.cfg.mode {
                Mode::Patchgd => {
                    let mut rng = rng_for(self.cfg.seed, &[STREAM_SAMPLER, epoch as u64, bi as u64]);
                    let s = self.patchgd_outer_iteration(&imgs, &labs, lr, &mut rng)?;
                    (s.losses.iter().sum::<f64>() / s.losses.len() as f64, s.predictions)
                }
                Mode::Gd | Mode::GdExtended => self.gd_iteration(&imgs, &labs, lr)?,
            };
            loss_sum += loss;
            for (&i, &pr) in idx.iter().zip(&p) {
                preds[i] = pr;
            }
        }
        Ok((loss_sum / batches.len() as f64, preds, lr))
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(
            self.cfg.mode.name(),
            self.epoch,
            self.best_val_accuracy,
            &self.store,
            &self.opt,
        )
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restores parameters, optimizer state and the epoch counter.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::<T>::load(path)?;
        if ck.manifest.mode != self.cfg.mode.name() {
            return Err(Error::load(
                path,
                format!(
                    "checkpoint is for mode `{}`, run is `{}`",
                    ck.manifest.mode, self.cfg.mode
                ),
            ));
        }
        ck.restore(path, &mut self.store, &mut self.opt)?;
        self.epoch = ck.manifest.epoch;
        self.best_val_accuracy = ck.manifest.best_val_accuracy;
        Ok(())
    }

    /// Runs the remaining epochs, logging train and validation rows and,
    /// with `out`, writing `last.ckpt` every epoch and `best.ckpt` whenever
    /// validation accuracy improves.
    pub fn fit(
        &mut self,
        train: (&[&Image], &[usize]),
        val: Option<(&[&Image], &[usize])>,
        log: &mut RunLog,
        out: Option<&Path>,
    ) -> Result<()> {
        let (h, w) = train
            .0
            .first()
            .map(|i| (i.height, i.width))
            .ok_or_else(|| Error::Validation("empty training set".into()))?;
        if self.cfg.mode == Mode::Patchgd {
            self.cfg.resolve(h, w)?;
        }
        let peak = self.modeled_peak(h, w, self.cfg.batch_size.min(train.0.len()))?;
        while self.epoch < self.cfg.epochs {
            let start = Instant::now();
            let (loss, preds, lr) = self.train_epoch(train.0, train.1)?;
            let epoch = self.epoch;
            let seconds = |s: &Instant| {
                if self.cfg.record_wall_clock {
                    s.elapsed().as_secs_f64()
                } else {
                    0.0
                }
            };
            log.push(LogRow {
                epoch,
                split: "train".into(),
                loss,
                accuracy: accuracy(&preds, train.1)?,
                qwk: qwk(&preds, train.1, self.model_cfg.classes)?,
                lr,
                peak_mem_bytes: peak,
                seconds: seconds(&start),
            })?;
            self.epoch += 1;
            let mut improved = false;
            if let Some((vi, vl)) = val {
                let s = self.evaluate(vi, vl)?;
                log.push(LogRow {
                    epoch,
                    split: "val".into(),
                    loss: s.loss,
                    accuracy: s.accuracy,
                    qwk: s.qwk,
                    lr,
                    peak_mem_bytes: peak,
                    seconds: seconds(&start),
                })?;
                if self.best_val_accuracy.is_none_or(|b| s.accuracy > b) {
                    self.best_val_accuracy = Some(s.accuracy);
                    improved = true;
                }
            }
            log::info!("epoch {epoch}: train loss {loss:.4}");
            if let Some(dir) = out {
                self.save_checkpoint(&dir.join("last.ckpt"))?;
                if improved {
                    self.save_checkpoint(&dir.join("best.ckpt"))?;
                }
            }
        }
        Ok(())
    }
}
