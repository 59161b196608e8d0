use occaug_core::annotation::{load_part_dataset, ImageRecord, LabelTable};
use occaug_core::augment::AugmentationKind;
use occaug_core::model::{classify_mask_branch, ModelConfig};
use occaug_core::nn::argmax;
use occaug_core::toy::{write_toy_dataset, ToyConfig};
use occaug_core::train::{
    build_training_mixture, load_source_items, mixture_objective, train, MixtureOptions, SourceItem, TrainConfig,
};
use occaug_core::{seed, BinaryMask, Error, Image, ImageId, OcclusionClassifier, OcclusionPlan, RunCheckpoint};
use rand::Rng;

fn toy_items(per_class: usize, seed: u64) -> (Vec<SourceItem>, LabelTable, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_toy_dataset(
        dir.path(),
        &ToyConfig {
            train_per_class: per_class,
            test_per_class: 1,
            seed,
        },
    )
    .unwrap();
    let ds = load_part_dataset(dir.path().join("train"), &paths.train_annotations).unwrap();
    (load_source_items(&ds, None).unwrap(), ds.labels.clone(), dir)
}

fn opts(kind: Option<AugmentationKind>, seed: u64) -> MixtureOptions<'static> {
    MixtureOptions {
        kind,
        seed,
        ..MixtureOptions::default()
    }
}

#[test]
fn mixture_length_and_balance() {
    let (items, _, _dir) = toy_items(3, 1);
    let s = items.len();
    let none = build_training_mixture(&items, &opts(None, 0)).unwrap();
    assert_eq!(none.len(), s);
    assert!(none.samples.iter().all(|x| x.mask.is_none() && x.mask_or_empty().is_empty()));

    let mix = build_training_mixture(&items, &opts(Some(AugmentationKind::BlackOut), 0)).unwrap();
    assert_eq!(mix.len(), 2 * s);
    let real = mix.samples.iter().filter(|x| !x.is_augmented()).count();
    assert_eq!(real, s);
    let mut order = mix.epoch_order(3);
    order.sort_unstable();
    assert_eq!(order, (0..2 * s).collect::<Vec<_>>());
}

#[test]
fn mixture_order_is_seeded() {
    let (items, _, _dir) = toy_items(2, 2);
    let a = build_training_mixture(&items, &opts(Some(AugmentationKind::CutMix), 9)).unwrap();
    let b = build_training_mixture(&items, &opts(Some(AugmentationKind::CutMix), 9)).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.epoch_order(0), b.epoch_order(0));
    assert_ne!(a.epoch_order(0), a.epoch_order(1));
}

#[test]
fn missing_inpaint_cache_names_augment_command() {
    let (items, _, _dir) = toy_items(1, 3);
    let err = build_training_mixture(&items, &opts(Some(AugmentationKind::SDInpaint), 0)).unwrap_err();
    assert!(matches!(err, Error::MissingAugmentation(_)));
    assert!(err.to_string().contains("occaug augment --method sd-inpaint"), "{err}");
}

#[test]
fn zero_learning_rate_keeps_parameters_and_initial_loss() {
    let (items, labels, _dir) = toy_items(2, 4);
    let mix = build_training_mixture(&items[..4], &opts(Some(AugmentationKind::BlackOut), 0)).unwrap();
    assert_eq!(mix.len(), 8);
    let config = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let fresh = OcclusionClassifier::new(
        &ModelConfig {
            backbone: config.backbone.clone(),
            num_classes: labels.len(),
            diffusion_dim: None,
            projection_dim: None,
            mask_grid: config.mask_grid,
        },
        config.seed,
    )
    .unwrap();
    let ckpt = train(&config, &mix, &labels, None).unwrap();
    assert_eq!(ckpt.model.checksum(), fresh.checksum());
    let initial = mixture_objective(&fresh, &mix, &config.loss, None).unwrap();
    assert!((ckpt.metrics[0].loss - initial).abs() < 1e-12, "{} vs {initial}", ckpt.metrics[0].loss);
}

/// Two classes that differ only in colour; a linear model separates them.
fn separable_items() -> (Vec<SourceItem>, LabelTable) {
    let mut rng = seed::rng(77);
    let labels = LabelTable::new(vec!["red".into(), "blue".into()]).unwrap();
    let items = (0..40u64)
        .map(|i| {
            let class = (i % 2) as usize;
            let image = Image::from_fn(64, 64, 3, |_, _, c| {
                let base: i32 = match (class, c) {
                    (0, 0) | (1, 2) => 180,
                    _ => 60,
                };
                (base + rng.random_range(-30..=30)) as u8
            });
            SourceItem {
                record: ImageRecord {
                    image_id: ImageId(i),
                    path: format!("{i}.png").into(),
                    class_label: class,
                    class_name: labels.name(class).unwrap().to_string(),
                    width: 64,
                    height: 64,
                },
                image,
                plan: OcclusionPlan {
                    image_id: ImageId(i),
                    selected_part_ids: vec![1],
                    composite: BinaryMask::from_fn(64, 64, |x, y| x < 20 && y < 20),
                    occluded_fraction: 400.0 / 4096.0,
                },
            }
        })
        .collect();
    (items, labels)
}

#[test]
fn separable_set_reaches_full_train_accuracy() {
    let (items, labels) = separable_items();
    let mix = build_training_mixture(&items, &opts(None, 0)).unwrap();
    let config = TrainConfig {
        epochs: 50,
        batch_size: 8,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let ckpt = train(&config, &mix, &labels, None).unwrap();
    let correct = mix
        .samples
        .iter()
        .filter(|s| argmax(&ckpt.model.predict(&s.image, None).unwrap()) == s.label)
        .count();
    assert_eq!(correct, mix.len());
}

#[test]
fn equal_seeds_give_identical_runs() {
    let (items, labels, _dir) = toy_items(3, 6);
    let mix = build_training_mixture(&items, &opts(Some(AugmentationKind::ReplaceParts), 1)).unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 0.05,
        seed: 1,
        ..TrainConfig::default()
    };
    let a = train(&config, &mix, &labels, None).unwrap();
    let b = train(&config, &mix, &labels, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model.checksum(), b.model.checksum());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (items, labels, dir) = toy_items(2, 7);
    let mix = build_training_mixture(&items, &opts(Some(AugmentationKind::CutMix), 2)).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 0.05,
        augmentation: Some(AugmentationKind::CutMix),
        ..TrainConfig::default()
    };
    let ckpt = train(&config, &mix, &labels, None).unwrap();
    let out = dir.path().join("ckpt");
    ckpt.save(&out).unwrap();
    let loaded = RunCheckpoint::load(&out).unwrap();
    assert_eq!(loaded.config, ckpt.config);
    assert_eq!(loaded.metrics, ckpt.metrics);
    assert_eq!(loaded.labels, ckpt.labels);
    for s in &mix.samples {
        let a = ckpt.model.predict(&s.image, None).unwrap();
        let b = loaded.model.predict(&s.image, None).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    // Same config: overwrite allowed. Different config: refused.
    ckpt.save(&out).unwrap();
    let mut other = ckpt.clone();
    other.config.epochs = 9;
    assert!(matches!(other.save(&out), Err(Error::Checkpoint(_))));
}

#[test]
fn divergent_training_aborts_with_context() {
    let (items, labels) = separable_items();
    let mix = build_training_mixture(&items, &opts(None, 0)).unwrap();
    let config = TrainConfig {
        epochs: 5,
        batch_size: 4,
        learning_rate: 1e300,
        ..TrainConfig::default()
    };
    match train(&config, &mix, &labels, None) {
        Err(Error::NonFiniteLoss { epoch, step }) => assert!(epoch < 5 && step < 10),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn mask_branch_beats_chance_on_toy_silhouettes() {
    let (items, labels, _dir) = toy_items(30, 8);
    let mix = build_training_mixture(&items, &opts(Some(AugmentationKind::BlackOut), 0)).unwrap();
    let config = TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 0.1,
        loss: occaug_core::LossWeights::new(1.0, 1.0).unwrap(),
        ..TrainConfig::default()
    };
    let ckpt = train(&config, &mix, &labels, None).unwrap();
    let masked: Vec<_> = mix.samples.iter().filter_map(|s| s.mask.as_ref().map(|m| (m, s.label))).collect();
    let correct = masked
        .iter()
        .filter(|(m, y)| argmax(&classify_mask_branch(m, &ckpt.model).unwrap()) == *y)
        .count();
    let acc = correct as f64 / masked.len() as f64;
    assert!(acc > 1.0 / 3.0, "mask-branch accuracy {acc}");
}

#[test]
fn fusion_without_backend_is_rejected() {
    let (items, labels, _dir) = toy_items(1, 9);
    let mix = build_training_mixture(&items, &opts(None, 0)).unwrap();
    let config = TrainConfig {
        fusion: true,
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&config, &mix, &labels, None), Err(Error::InvalidArgument(_))));
}
