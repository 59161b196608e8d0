//! Training over the mixture of real and augmented images with the
//! combined objective
//!
//! ```text
//! alpha * mean CE(image logits, label weights) + beta * mean CE(mask logits, labels)
//! ```
//!
//! The mask term covers the augmented samples that carry a part mask.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annotation::{ImageId, ImageRecord, LabelTable, PartDataset};
use crate::augment::{
    black_out, cutmix, inpaint_augment, pick_partner, replace_parts, AugmentCache, AugmentationKind, InpaintSettings,
    LabelWeights,
};
use crate::backend::GenerativeBackend;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::BinaryMask;
use crate::model::{diffusion_vector, BackboneConfig, DiffusionSettings, ModelConfig, ModelState, OcclusionClassifier};
use crate::nn::{argmax, cross_entropy, one_hot};
use crate::occlusion::{select_part_combination, OcclusionPlan};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::InvalidArgument("alpha + beta must be positive".into()));
        }
        Ok(())
    }
}

/// Value and logit gradients of the combined objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEvaluation {
    pub loss: f64,
    pub image_term: f64,
    pub mask_term: f64,
    pub grad_image_logits: Vec<Vec<f64>>,
    pub grad_mask_logits: Vec<Vec<f64>>,
}

pub fn combined_loss(
    image_logits: &[Vec<f64>],
    image_targets: &[LabelWeights],
    mask_logits: &[Vec<f64>],
    mask_labels: &[usize],
    weights: &LossWeights,
) -> Result<f64> {
    combined_loss_with_grad(image_logits, image_targets, mask_logits, mask_labels, weights).map(|e| e.loss)
}

pub fn combined_loss_with_grad(
    image_logits: &[Vec<f64>],
    image_targets: &[LabelWeights],
    mask_logits: &[Vec<f64>],
    mask_labels: &[usize],
    weights: &LossWeights,
) -> Result<LossEvaluation> {
    weights.validate()?;
    if image_logits.len() != image_targets.len() || mask_logits.len() != mask_labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} image logits for {} targets, {} mask logits for {} labels",
            image_logits.len(),
            image_targets.len(),
            mask_logits.len(),
            mask_labels.len()
        )));
    }

    let mean_ce = |logits: &[Vec<f64>], targets: Vec<Vec<f64>>, scale: f64| -> Result<(f64, Vec<Vec<f64>>)> {
        if logits.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        let n = logits.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(logits.len());
        for (l, t) in logits.iter().zip(targets) {
            if l.len() != t.len() {
                return Err(Error::DimMismatch(format!("{} logits for {} classes", l.len(), t.len())));
            }
            let (loss, mut g) = cross_entropy(l, &t);
            total += loss;
            g.iter_mut().for_each(|v| *v *= scale / n);
            grads.push(g);
        }
        Ok((total / n, grads))
    };

    let mut dense_targets = Vec::with_capacity(image_targets.len());
    for (l, t) in image_logits.iter().zip(image_targets) {
        if (t.total() - 1.0).abs() > 1e-9 || t.entries().iter().any(|&(_, w)| w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "label weights must be non-negative and sum to 1, got {:?}",
                t.entries()
            )));
        }
        dense_targets.push(t.to_dense(l.len())?);
    }
    let mut mask_targets = Vec::with_capacity(mask_labels.len());
    for (l, &y) in mask_logits.iter().zip(mask_labels) {
        if y >= l.len() {
            return Err(Error::InvalidArgument(format!("mask label {y} outside 0..{}", l.len())));
        }
        mask_targets.push(one_hot(y, l.len()));
    }

    let (image_term, grad_image_logits) = mean_ce(image_logits, dense_targets, weights.alpha)?;
    let (mask_term, grad_mask_logits) = mean_ce(mask_logits, mask_targets, weights.beta)?;
    Ok(LossEvaluation {
        loss: weights.alpha * image_term + weights.beta * mask_term,
        image_term,
        mask_term,
        grad_image_logits,
        grad_mask_logits,
    })
}

/// One source image with its occlusion plan.
#[derive(Clone, Debug)]
pub struct SourceItem {
    pub record: ImageRecord,
    pub image: Image,
    pub plan: OcclusionPlan,
}

/// Loads every image of the dataset, computing any plan not supplied.
pub fn load_source_items(dataset: &PartDataset, plans: Option<&BTreeMap<ImageId, OcclusionPlan>>) -> Result<Vec<SourceItem>> {
    dataset
        .entries
        .iter()
        .map(|(record, ps)| {
            let plan = match plans.and_then(|p| p.get(&record.image_id)) {
                Some(p) => p.clone(),
                None => select_part_combination(ps)?,
            };
            Ok(SourceItem {
                record: record.clone(),
                image: dataset.load_image(record)?,
                plan,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub image_id: ImageId,
    /// Class of the source image.
    pub label: usize,
    pub image: Image,
    pub label_weights: LabelWeights,
    /// Part mask that produced an augmented sample; `None` means empty.
    pub mask: Option<BinaryMask>,
    /// `None` for real images.
    pub kind: Option<AugmentationKind>,
}

impl MixtureSample {
    pub fn is_augmented(&self) -> bool {
        self.kind.is_some()
    }

    pub fn mask_or_empty(&self) -> BinaryMask {
        self.mask
            .clone()
            .unwrap_or_else(|| BinaryMask::empty(self.image.width(), self.image.height()))
    }
}

/// All samples of one epoch; every epoch visits each sample once.
#[derive(Clone, Debug)]
pub struct TrainingMixture {
    pub samples: Vec<MixtureSample>,
    seed: u64,
}

impl TrainingMixture {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Seeded permutation of sample indices for `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(&[self.seed, epoch as u64, 0x5348])));
        order
    }
}

pub struct MixtureOptions<'a> {
    pub kind: Option<AugmentationKind>,
    pub seed: u64,
    /// Precomputed augmented images, used when present.
    pub cache: Option<&'a AugmentCache>,
    pub backend: Option<&'a dyn GenerativeBackend>,
    pub inpaint_steps: u32,
}

impl Default for MixtureOptions<'_> {
    fn default() -> Self {
        Self {
            kind: None,
            seed: 0,
            cache: None,
            backend: None,
            inpaint_steps: 1,
        }
    }
}

/// Seed used for the augmentation of one image.
pub fn augmentation_seed(run_seed: u64, image_id: ImageId, kind: AugmentationKind) -> u64 {
    seed::derive(&[run_seed, image_id.0, seed::hash_str(kind.name())])
}

/// Real images plus one augmented counterpart each (when a kind is set).
pub fn build_training_mixture(items: &[SourceItem], opts: &MixtureOptions<'_>) -> Result<TrainingMixture> {
    let mut samples = Vec::with_capacity(items.len() * 2);
    for (i, item) in items.iter().enumerate() {
        let label = item.record.class_label;
        samples.push(MixtureSample {
            image_id: item.record.image_id,
            label,
            image: item.image.clone(),
            label_weights: LabelWeights::one_hot(label),
            mask: None,
            kind: None,
        });
        if let Some(kind) = opts.kind {
            samples.push(augment_item(items, i, kind, opts)?);
        }
    }
    Ok(TrainingMixture {
        samples,
        seed: opts.seed,
    })
}

/// Produces the augmented sample for `items[i]`.
pub fn augment_item(items: &[SourceItem], i: usize, kind: AugmentationKind, opts: &MixtureOptions<'_>) -> Result<MixtureSample> {
    let item = &items[i];
    let id = item.record.image_id;
    let label = item.record.class_label;
    let aug_seed = augmentation_seed(opts.seed, id, kind);
    let mask = &item.plan.composite;
    if mask.width() != item.image.width() || mask.height() != item.image.height() {
        return Err(Error::DimMismatch(format!("plan for image {id} does not match the image size")));
    }

    let cached = match (opts.cache, kind.uses_part_mask()) {
        (Some(cache), true) => cache.load(id)?,
        _ => None,
    };
    let sample = match (kind, cached) {
        (_, Some(image)) => {
            image.ensure_same_shape(&item.image, "cached augmentation")?;
            crate::augment::AugmentedSample {
                image,
                label_weights: LabelWeights::one_hot(label),
                source_mask: Some(mask.clone()),
                cutmix: None,
                kind,
            }
        }
        (AugmentationKind::BlackOut, None) => black_out(&item.image, mask, label)?,
        (AugmentationKind::ReplaceParts, None) => {
            let j = pick_partner(items.len(), i, aug_seed)
                .ok_or_else(|| Error::InvalidArgument("replace-parts needs at least two images".into()))?;
            let donor = items[j].image.resize_nearest(item.image.width(), item.image.height());
            replace_parts(&item.image, mask, &donor, label)?
        }
        (AugmentationKind::CutMix, None) => {
            let j = pick_partner(items.len(), i, aug_seed)
                .ok_or_else(|| Error::InvalidArgument("cutmix needs at least two images".into()))?;
            let other = items[j].image.resize_nearest(item.image.width(), item.image.height());
            cutmix(&item.image, label, &other, items[j].record.class_label, aug_seed)?
        }
        (AugmentationKind::SDInpaint, None) => {
            let backend = opts.backend.ok_or_else(|| {
                Error::MissingAugmentation(format!(
                    "no cached inpainting for image {id}{}; run `occaug augment --method sd-inpaint` first or configure a backend",
                    opts.cache.map(|c| format!(" in {}", c.dir().display())).unwrap_or_default()
                ))
            })?;
            inpaint_augment(
                &item.image,
                &item.plan,
                &item.record.class_name,
                label,
                backend,
                &InpaintSettings {
                    seed: aug_seed,
                    steps: opts.inpaint_steps,
                },
            )?
        }
    };
    Ok(MixtureSample {
        image_id: id,
        label,
        image: sample.image,
        label_weights: sample.label_weights,
        mask: sample.source_mask,
        kind: Some(kind),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: Option<AugmentationKind>,
    pub loss: LossWeights,
    pub backbone: BackboneConfig,
    pub fusion: bool,
    /// Where and how diffusion features are taken when fusion is on.
    pub diffusion: Option<DiffusionSettings>,
    pub mask_grid: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 25,
            seed: 0,
            augmentation: None,
            loss: LossWeights::default(),
            backbone: BackboneConfig::default(),
            fusion: false,
            diffusion: None,
            mask_grid: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.mask_grid == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, epochs and mask_grid must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Clone, Debug)]
pub struct RunCheckpoint {
    pub model: OcclusionClassifier,
    pub labels: LabelTable,
    pub config: TrainConfig,
    pub metrics: Vec<EpochMetrics>,
    /// Backend parameter digest observed during training, when fusion is on.
    pub backend_checksum: Option<String>,
}

struct Prepared {
    input: Vec<f64>,
    diffusion: Option<Vec<f64>>,
    mask_input: Option<Vec<f64>>,
    targets: LabelWeights,
    label: usize,
}

fn resolve_diffusion(config: &TrainConfig, backend: &dyn GenerativeBackend) -> Result<(DiffusionSettings, usize)> {
    let caps = backend.capabilities()?;
    let settings = config.diffusion.clone().unwrap_or(DiffusionSettings {
        tap: caps.default_tap.clone(),
        timestep: caps.default_timestep,
        seed: config.seed,
    });
    let channels = caps
        .tap(&settings.tap)
        .ok_or_else(|| Error::Capability(format!("backend has no tap {:?}", settings.tap)))?
        .channels;
    Ok((settings, channels))
}

/// Trains a fresh model on `mixture` with SGD.
pub fn train(
    config: &TrainConfig,
    mixture: &TrainingMixture,
    labels: &LabelTable,
    backend: Option<&dyn GenerativeBackend>,
) -> Result<RunCheckpoint> {
    train_with_progress(config, mixture, labels, backend, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    mixture: &TrainingMixture,
    labels: &LabelTable,
    backend: Option<&dyn GenerativeBackend>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunCheckpoint> {
    config.validate()?;
    if mixture.is_empty() {
        return Err(Error::InvalidArgument("training mixture is empty".into()));
    }
    let mut config = config.clone();
    let (fusion_backend, diffusion_dim) = if config.fusion {
        let backend = backend.ok_or_else(|| {
            Error::InvalidArgument("fusion is enabled but no generative backend was configured".into())
        })?;
        let (settings, channels) = resolve_diffusion(&config, backend)?;
        config.diffusion = Some(settings);
        (Some(backend), Some(channels))
    } else {
        (None, None)
    };

    let mut model = OcclusionClassifier::new(
        &ModelConfig {
            backbone: config.backbone.clone(),
            num_classes: labels.len(),
            diffusion_dim,
            projection_dim: None,
            mask_grid: config.mask_grid,
        },
        config.seed,
    )?;

    let checksum_before = fusion_backend.map(|b| b.parameter_checksum()).transpose()?;

    let prepared = mixture
        .samples
        .iter()
        .map(|s| {
            if s.label >= labels.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has label {} outside the {}-class label table",
                    s.image_id,
                    s.label,
                    labels.len()
                )));
            }
            let diffusion = match (fusion_backend, &config.diffusion) {
                (Some(b), Some(settings)) => Some(diffusion_vector(b, &s.image, settings)?),
                _ => None,
            };
            Ok(Prepared {
                input: model.backbone.preprocess(&s.image)?,
                diffusion,
                mask_input: s.mask.as_ref().map(|m| model.mask_branch.input(m)),
                targets: s.label_weights.clone(),
                label: s.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = mixture.epoch_order(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad = model.zero_grad();
            let mut passes = Vec::with_capacity(batch.len());
            let mut image_logits = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            let mut mask_logits = Vec::new();
            let mut mask_labels = Vec::new();
            let mut mask_inputs = Vec::new();
            for &i in batch {
                let p = &prepared[i];
                let pass = model.forward(&p.input, p.diffusion.as_deref())?;
                if argmax(&pass.logits) == p.targets.dominant() {
                    correct += 1;
                }
                image_logits.push(pass.logits.clone());
                targets.push(p.targets.clone());
                passes.push(pass);
                if let (Some(mi), true) = (&p.mask_input, config.loss.beta > 0.0) {
                    mask_logits.push(model.mask_branch.linear.forward(mi)?);
                    mask_labels.push(p.label);
                    mask_inputs.push(mi);
                }
            }
            let eval = combined_loss_with_grad(&image_logits, &targets, &mask_logits, &mask_labels, &config.loss)?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += eval.loss * batch.len() as f64;

            for ((&i, pass), g) in batch.iter().zip(&passes).zip(&eval.grad_image_logits) {
                let p = &prepared[i];
                model.backward(&p.input, p.diffusion.as_deref(), pass, g, &mut grad)?;
            }
            for (mi, g) in mask_inputs.iter().zip(&eval.grad_mask_logits) {
                model.mask_branch.linear.backward(mi, g, &mut grad.mask);
            }
            model.sgd_step(&grad, config.learning_rate);
        }

        let m = EpochMetrics {
            epoch,
            loss: loss_sum / mixture.len() as f64,
            top1: correct as f64 / mixture.len() as f64,
        };
        on_epoch(&m);
        metrics.push(m);

        if let (Some(b), Some(before)) = (fusion_backend, &checksum_before) {
            let now = b.parameter_checksum()?;
            if &now != before {
                return Err(Error::Validation(format!(
                    "generative backend parameters changed during epoch {epoch}"
                )));
            }
        }
    }

    Ok(RunCheckpoint {
        model,
        labels: labels.clone(),
        config,
        metrics,
        backend_checksum: checksum_before,
    })
}

/// Combined objective of `model` over a whole mixture, without updates.
pub fn mixture_objective(
    model: &OcclusionClassifier,
    mixture: &TrainingMixture,
    weights: &LossWeights,
    diffusion: Option<(&dyn GenerativeBackend, &DiffusionSettings)>,
) -> Result<f64> {
    let mut image_logits = Vec::new();
    let mut targets = Vec::new();
    let mut mask_logits = Vec::new();
    let mut mask_labels = Vec::new();
    for s in &mixture.samples {
        image_logits.push(model.predict(&s.image, diffusion)?);
        targets.push(s.label_weights.clone());
        if let (Some(m), true) = (&s.mask, weights.beta > 0.0) {
            mask_logits.push(model.mask_branch.linear.forward(&model.mask_branch.input(m))?);
            mask_labels.push(s.label);
        }
    }
    combined_loss(&image_logits, &targets, &mask_logits, &mask_labels, weights)
}

const MODEL_FILE: &str = "model.json";
const RUN_FILE: &str = "run.json";
const LABELS_FILE: &str = "labels.csv";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Serialize, Deserialize)]
struct RunFile {
    config: TrainConfig,
    backend_checksum: Option<String>,
}

impl RunCheckpoint {
    /// Writes `model.json`, `run.json` (config snapshot), `labels.csv` and
    /// `metrics.csv`. An existing snapshot with a different config is
    /// never overwritten.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        Self::check_target(dir, &self.config)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(MODEL_FILE, serde_json::to_string_pretty(&self.model.state())?)?;
        write(
            RUN_FILE,
            serde_json::to_string_pretty(&RunFile {
                config: self.config.clone(),
                backend_checksum: self.backend_checksum.clone(),
            })?,
        )?;
        self.labels.write_csv(dir.join(LABELS_FILE))?;
        let mp = dir.join(METRICS_FILE);
        let mut w = csv::Writer::from_path(&mp)?;
        w.write_record(["epoch", "loss", "top1"])?;
        for m in &self.metrics {
            w.write_record([m.epoch.to_string(), m.loss.to_string(), m.top1.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }

    /// Fails when `dir` already holds a run with a different config.
    pub fn check_target(dir: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
        let run_path = dir.as_ref().join(RUN_FILE);
        if !run_path.exists() {
            return Ok(());
        }
        let text = std::fs::read_to_string(&run_path).map_err(|e| Error::io(&run_path, e))?;
        let existing: RunFile = serde_json::from_str(&text)?;
        // Fusion runs record the resolved diffusion settings.
        let same = existing.config == *config
            || (existing.config.diffusion.is_some()
                && config.diffusion.is_none()
                && TrainConfig {
                    diffusion: None,
                    ..existing.config.clone()
                } == *config);
        if !same {
            return Err(Error::Checkpoint(format!(
                "{} holds a run with a different config; refusing to overwrite",
                dir.as_ref().display()
            )));
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let state: ModelState = serde_json::from_str(&read(MODEL_FILE)?)?;
        let run: RunFile = serde_json::from_str(&read(RUN_FILE)?)?;
        let labels = LabelTable::read_csv(dir.join(LABELS_FILE))?;
        let mut metrics = Vec::new();
        let mut r = csv::Reader::from_path(dir.join(METRICS_FILE))?;
        for rec in r.deserialize::<EpochMetrics>() {
            metrics.push(rec?);
        }
        let model = OcclusionClassifier::from_state(state)?;
        if model.num_classes() != labels.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} classes but the label table has {}",
                model.num_classes(),
                labels.len()
            )));
        }
        Ok(Self {
            model,
            labels,
            config: run.config,
            metrics,
            backend_checksum: run.backend_checksum,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights::new(-1.0, 0.5).is_err());
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(f64::NAN, 1.0).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn mask_only_loss_matches_hand_cross_entropy() {
        // Three-class toy batch, alpha = 0.
        let mask_logits = vec![vec![2.0, 0.0, -1.0], vec![0.5, 0.5, 3.0]];
        let labels = [0, 2];
        let w = LossWeights::new(0.0, 0.7).unwrap();
        let loss = combined_loss(&[vec![9.0, 0.0, 0.0]], &[LabelWeights::one_hot(1)], &mask_logits, &labels, &w).unwrap();
        let ce0 = -(2f64.exp() / (2f64.exp() + 1.0 + (-1f64).exp())).ln();
        let ce1 = -(3f64.exp() / (2.0 * 0.5f64.exp() + 3f64.exp())).ln();
        assert!((loss - 0.7 * (ce0 + ce1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_targets() {
        let bad = LabelWeights::mix(0, 0.5, 1, 0.6);
        assert!(combined_loss(&[vec![0.0, 0.0]], &[bad], &[], &[], &LossWeights::default()).is_err());
    }

    #[test]
    fn empty_mask_batch_contributes_nothing() {
        let w = LossWeights::new(1.0, 5.0).unwrap();
        let e = combined_loss_with_grad(&[vec![0.0, 0.0]], &[LabelWeights::one_hot(0)], &[], &[], &w).unwrap();
        assert!((e.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(e.mask_term, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert_eq!((c.batch_size, c.learning_rate), (64, 1e-3));
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
