//! Synthetic data, augmentation, identity-balanced sampling, the composite
//! objective and the optimization loop.

mod augment;
mod optim;
mod sampler;
mod synth;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{augment, resize, AugmentConfig, Rect};
pub use optim::{schedule, AdamW, OptimizerState};
pub use sampler::pk_batches;
pub use synth::{synth_dataset, Dataset, Sample, SynthSpec};

use crate::arcface::{check_pk_batch, hs_arcface_loss, id_loss, triplet_loss, ArcMargin, Routing};
use crate::config::{sub_seed, RunConfig};
use crate::embedding::{orthogonal_loss, GumbelNoise};
use crate::model::{Bound, Forward, Mode, Model};
use crate::retrieval::{evaluate, Evaluation, RetrievalRun};
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};
use crate::{Error, Result};

/// The three component switches of the ablation study. All off is the
/// baseline: cross-entropy on both heads and no quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub embedding_space: bool,
    pub orthogonal_loss: bool,
    pub hs_arcface: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const BASELINE: Self = Self { embedding_space: false, orthogonal_loss: false, hs_arcface: false };
    pub const FULL: Self = Self { embedding_space: true, orthogonal_loss: true, hs_arcface: true };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub ids_per_batch: usize,
    pub instances_per_id: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub lambda_hs: f64,
    pub lambda_id: f64,
    pub lambda_tri: f64,
    pub lambda_orth: f64,
    pub triplet_margin: f64,
    pub label_smoothing: f64,
    pub arc_margin: f64,
    pub arc_scale: f64,
    pub pad: usize,
    pub erasing_prob: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            ids_per_batch: 8,
            instances_per_id: 8,
            lr: 3e-4,
            weight_decay: 0.05,
            warmup_fraction: 0.05,
            lambda_hs: 1.0,
            lambda_id: 1.0,
            lambda_tri: 1.0,
            lambda_orth: 0.1,
            triplet_margin: 0.3,
            label_smoothing: 0.1,
            arc_margin: 0.2,
            arc_scale: 20.0,
            pad: 10,
            erasing_prob: 0.5,
            ablation: Ablation::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.ids_per_batch < 2 || self.instances_per_id < 2 {
            return bad("ids_per_batch and instances_per_id must be >= 2".into());
        }
        if self.ids_per_batch * self.instances_per_id != self.batch_size {
            return bad(format!(
                "batch_size {} != ids_per_batch {} x instances_per_id {}",
                self.batch_size, self.ids_per_batch, self.instances_per_id
            ));
        }
        let lambdas = [self.lambda_hs, self.lambda_id, self.lambda_tri, self.lambda_orth];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be >= 0".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("need lr > 0, weight_decay >= 0, 0 <= warmup_fraction < 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..=1.0).contains(&self.erasing_prob) {
            return bad("label_smoothing and erasing_prob out of range".into());
        }
        ArcMargin { margin: self.arc_margin, scale: self.arc_scale }.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        Ok(())
    }

    pub fn arc(&self) -> ArcMargin {
        ArcMargin { margin: self.arc_margin, scale: self.arc_scale }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig { pad: self.pad, erasing_prob: self.erasing_prob, ..AugmentConfig::default() }
    }
}

/// Unweighted term values; `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Hierarchical margin loss, or global-head cross-entropy in the
    /// baseline.
    pub hs: f64,
    pub id: f64,
    /// Sum of the global and local triplet losses.
    pub tri: f64,
    pub orth: f64,
}

pub struct LossOutput<T> {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub forward: Forward<T>,
}

/// `λ_hs·hs + λ_id·id + λ_tri·(tri_global + tri_local) + λ_orth·orth` on a
/// `P x A` batch. Switched-off terms contribute nothing.
pub fn total_loss<T: Element>(
    g: &Graph<T>,
    model: &Model,
    p: &Bound,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    noise: &mut GumbelNoise,
) -> Result<LossOutput<T>> {
    check_pk_batch(labels)?;
    let ab = cfg.ablation;
    let f = model.forward(g, p, images, Mode::Train, ab.embedding_space, noise)?;
    let h = &f.heads;
    let hs = if ab.hs_arcface {
        hs_arcface_loss(g, h.global_feat, labels, p.var("centers"), cfg.arc(), Routing::Compute)?.0
    } else {
        id_loss(g, h.id_logits_global, labels, cfg.label_smoothing)?
    };
    let id = id_loss(g, h.id_logits, labels, cfg.label_smoothing)?;
    let tri = g.add(
        triplet_loss(g, h.global_pre, labels, cfg.triplet_margin)?,
        triplet_loss(g, h.local_pre, labels, cfg.triplet_margin)?,
    )?;
    let mut terms = vec![(hs, cfg.lambda_hs), (id, cfg.lambda_id), (tri, cfg.lambda_tri)];
    let orth = if ab.orthogonal_loss {
        let o = orthogonal_loss(g, p.var("codebook"))?;
        terms.push((o, cfg.lambda_orth));
        g.value(o).item().as_f64()
    } else {
        0.0
    };
    let mut total = g.scale(terms[0].0, T::of(terms[0].1))?;
    for &(v, w) in &terms[1..] {
        total = g.add(total, g.scale(v, T::of(w))?)?;
    }
    let val = |v: Var| g.value(v).item().as_f64();
    let (hs, id, tri) = (val(hs), val(id), val(tri));
    let breakdown = LossBreakdown {
        total: cfg.lambda_hs * hs + cfg.lambda_id * id + cfg.lambda_tri * tri + cfg.lambda_orth * orth,
        hs,
        id,
        tri,
        orth,
    };
    Ok(LossOutput { total, breakdown, forward: f })
}

/// Maps `[0, 1]` pixels to `[-1, 1]` and stacks them into `[B, 3, H, W]`.
pub fn stack_images(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::Data("images in a batch differ in size".into()));
        }
        data.extend(im.data().iter().map(|v| v * 2.0 - 1.0));
    }
    Ok(Tensor::new(shape, data)?)
}

/// Eval-mode descriptors of `samples`, resized to the model input.
pub fn describe(model: &Model, samples: &[Sample], quantize: bool) -> Result<Tensor<f32>> {
    let c = model.config();
    let mut rows = Vec::with_capacity(samples.len() * 2 * c.embed_dim);
    for chunk in samples.chunks(64) {
        let imgs: Vec<Tensor<f32>> = chunk.iter().map(|s| resize(&s.image, c.image_height, c.image_width)).collect();
        rows.extend(model.descriptors(&stack_images(&imgs)?, quantize)?.into_data());
    }
    Ok(Tensor::new([samples.len(), 2 * c.embed_dim], rows)?)
}

pub fn evaluate_split(model: &Model, query: &[Sample], gallery: &[Sample], quantize: bool) -> Result<Evaluation> {
    let labels = |s: &[Sample]| (s.iter().map(|x| x.id).collect(), s.iter().map(|x| x.camera).collect());
    let run = RetrievalRun::new(
        &describe(model, query, quantize)?,
        &describe(model, gallery, quantize)?,
        labels(query),
        labels(gallery),
    )?;
    evaluate(&run)
}

/// The synthetic dataset of a run, drawn from the run's `data` sub-seed.
pub fn run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    synth_dataset(&cfg.synth, sub_seed(cfg.seed, "data", 0))
}

/// Train images split into camera-0 queries and camera-1 gallery, for
/// checking that a model fits its own training data.
pub fn train_split_views(data: &Dataset) -> (Vec<Sample>, Vec<Sample>) {
    data.train.iter().cloned().partition(|s| s.camera == 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub map: f64,
    pub rank1: f64,
}

impl fmt::Display for EpochLog {
    /// `epoch loss_total loss_hs loss_id loss_tri loss_orth mAP rank1`,
    /// tab-separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, l.total, l.hs, l.id, l.tri, l.orth, self.map, self.rank1
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: OptimizerState,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "init", 0));
        let model = Model::new(cfg.model.clone(), &mut rng)?;
        let optimizer = OptimizerState::new(model.params().tensors());
        Ok(Self { model, optimizer })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

fn non_finite(step: u64, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => {
            Error::NonFiniteLoss { step, detail: format!("{op} produced a non-finite value") }
        }
        other => other,
    }
}

/// Trains until `cfg.train.epochs` epochs are complete, continuing from
/// `state`'s step. Calls `on_epoch` after every epoch's evaluation.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mc = &cfg.model;
    if let Some(s) = data.train.iter().chain(&data.query).chain(&data.gallery).find(|s| s.id >= mc.num_ids) {
        return Err(Error::Data(format!("identity {} outside num_ids {}", s.id, mc.num_ids)));
    }
    state.optimizer.check_shapes(state.model.params().tensors())?;
    let labels: Vec<usize> = data.train.iter().map(|s| s.id).collect();
    let epoch_batches = |epoch: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "sampler", epoch as u64));
        pk_batches(&labels, tc.ids_per_batch, tc.instances_per_id, &mut rng)
    };
    let plan = (0..tc.epochs).map(epoch_batches).collect::<Result<Vec<_>>>()?;
    if plan.iter().any(Vec::is_empty) {
        return Err(Error::Data("training split cannot fill a single batch".into()));
    }
    // first global step of each epoch, plus the total
    let offsets: Vec<u64> = std::iter::once(0)
        .chain(plan.iter().scan(0u64, |acc, b| {
            *acc += b.len() as u64;
            Some(*acc)
        }))
        .collect();
    let total = offsets[tc.epochs];
    let warmup = ((total as f64 * tc.warmup_fraction).ceil() as u64).max(1);
    let opt = AdamW { lr: tc.lr, weight_decay: tc.weight_decay, ..AdamW::default() };
    let aug = tc.augment();
    let mut log = Vec::new();

    let start_epoch = offsets.partition_point(|&o| o <= state.step()) - 1;
    for (epoch, batches) in plan.iter().enumerate().skip(start_epoch) {
        let skip = (state.step() - offsets[epoch]) as usize;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "erasing", epoch as u64));
        let mut noise = GumbelNoise::sampled(sub_seed(cfg.seed, "gumbel", epoch as u64));
        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            // augmentation draws happen for skipped batches too, so a resumed
            // epoch sees the same stream
            let imgs: Vec<Tensor<f32>> = batch
                .iter()
                .map(|&i| augment(&data.train[i].image, (mc.image_height, mc.image_width), &aug, &mut aug_rng).0)
                .collect();
            if b < skip {
                continue;
            }
            let step = state.step();
            let images = stack_images(&imgs)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let g = Graph::<f32>::new();
            let p = state.model.bind(&g);
            let out = total_loss(&g, &state.model, &p, &images, &batch_labels, tc, &mut noise)
                .map_err(|e| non_finite(step, e))?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { step, detail: format!("{:?}", out.breakdown) });
            }
            let grads = g.backward(out.total).map_err(|e| non_finite(step, e.into()))?;
            let vars = p.vars().to_vec();
            let lr = schedule(tc.lr, step, total, warmup);
            let t = step + 1;
            let OptimizerState { m, v, .. } = &mut state.optimizer;
            let names = state.model.params().names().to_vec();
            for (i, (name, var)) in names.iter().zip(vars).enumerate() {
                if !state.model.params().is_trainable(i) {
                    continue;
                }
                if let Some(grad) = grads.get(var) {
                    let param = &mut state.model.params_mut().tensors_mut()[i];
                    opt.update(param, grad, &mut m[i], &mut v[i], t, lr, decays(name));
                }
            }
            if let Some(stats) = &out.forward.heads.neck_stats {
                state.model.update_running_stats(stats);
            }
            state.optimizer.step = t;
            for (acc, x) in [
                (&mut sum.total, out.breakdown.total),
                (&mut sum.hs, out.breakdown.hs),
                (&mut sum.id, out.breakdown.id),
                (&mut sum.tri, out.breakdown.tri),
                (&mut sum.orth, out.breakdown.orth),
            ] {
                *acc += x;
            }
            count += 1;
        }
        let n = count.max(1) as f64;
        let eval = evaluate_split(&state.model, &data.query, &data.gallery, tc.ablation.embedding_space)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: LossBreakdown {
                total: sum.total / n,
                hs: sum.hs / n,
                id: sum.id / n,
                tri: sum.tri / n,
                orth: sum.orth / n,
            },
            map: eval.map,
            rank1: eval.rank(1),
        };
        on_epoch(&entry, state)?;
        log.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
