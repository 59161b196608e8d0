use std::collections::BTreeMap;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use occaug_core::annotation::{load_image_dataset, load_part_dataset_with, validate_partset, LoadOptions, OverlapMode};
use occaug_core::augment::{AugmentCache, AugmentationKind, ManifestRow};
use occaug_core::backend::{inpaint_prompt, wire, BackendSpec, GenerativeBackend, MockBackend};
use occaug_core::eval::{evaluate_real_folder, evaluate_under_occlusion, AccuracyTable, EvalConfig, DEFAULT_LEVELS};
use occaug_core::model::{BackboneConfig, DiffusionSettings};
use occaug_core::occlusion::{read_plan_dir, select_part_combination, write_plan_dir, DEFAULT_PATCH_SIZE};
use occaug_core::toy::{write_toy_dataset, ToyConfig};
use occaug_core::train::{
    augment_item, augmentation_seed, build_training_mixture, load_source_items, train_with_progress, LossWeights,
    MixtureOptions, RunCheckpoint, TrainConfig,
};
use serde_json::json;

use crate::config::{self, EvalFile, TrainFile};
use crate::{AugmentArgs, EvalArgs, MakeToyArgs, PrepareArgs, ServeArgs, TrainArgs};

/// Bad flags or config values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<occaug_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return 1;
        }
    }
    2
}

fn open_backend(spec: &str) -> Result<Arc<dyn GenerativeBackend>> {
    let spec = if spec.trim() == "local" {
        BackendSpec::Local {
            program: std::env::current_exe()?.to_string_lossy().into_owned(),
            args: vec!["backend-worker".into()],
        }
    } else {
        BackendSpec::parse(spec)?
    };
    spec.open().with_context(|| format!("opening backend {spec:?}"))
}

fn parse_method(name: &str) -> Result<Option<AugmentationKind>> {
    if name == "none" {
        return Ok(None);
    }
    name.parse::<AugmentationKind>().map(Some).map_err(|_| {
        usage(format!(
            "unknown method {name:?}; expected none, {}",
            AugmentationKind::ALL.map(|k| k.name()).join(", ")
        ))
    })
}

fn image_root(images: Option<&Path>, annotations: &Path) -> PathBuf {
    images
        .map(Path::to_path_buf)
        .unwrap_or_else(|| annotations.parent().unwrap_or(Path::new(".")).to_path_buf())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn make_toy(a: &MakeToyArgs) -> Result<()> {
    let paths = write_toy_dataset(
        &a.out,
        &ToyConfig {
            train_per_class: a.train_per_class,
            test_per_class: a.test_per_class,
            seed: a.seed,
        },
    )?;
    println!("train annotations: {}", paths.train_annotations.display());
    println!("test annotations:  {}", paths.test_annotations.display());
    println!("occluded folder:   {}", paths.real_folder.display());
    Ok(())
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let report_path = a.out.join("report.json");
    let options = LoadOptions {
        overlap: if a.lenient { OverlapMode::Lenient } else { OverlapMode::Strict },
    };
    let ds = match load_part_dataset_with(image_root(None, &a.annotations), &a.annotations, options) {
        Ok(ds) => ds,
        Err(e) => {
            write_json(&report_path, &json!({"status": "invalid", "error": e.to_string()}))?;
            return Err(e).context(format!("validation report written to {}", report_path.display()));
        }
    };

    let mut plans = Vec::with_capacity(ds.entries.len());
    let mut histogram = BTreeMap::<usize, usize>::new();
    let mut issues = Vec::new();
    for (_, ps) in &ds.entries {
        let v = validate_partset(ps);
        if !v.is_clean() {
            issues.push(json!({"image_id": ps.image_id(), "report": v}));
        }
        *histogram.entry(ps.n()).or_default() += 1;
        plans.push(select_part_combination(ps)?);
    }
    write_plan_dir(a.out.join("plans"), &plans)?;
    let mean_fraction = plans.iter().map(|p| p.occluded_fraction).sum::<f64>() / plans.len().max(1) as f64;
    write_json(
        &report_path,
        &json!({
            "status": "ok",
            "images_total": ds.report.images_total,
            "images_planned": plans.len(),
            "skipped_no_parts": ds.report.skipped_no_parts,
            "dropped_degenerate": ds.report.dropped_degenerate,
            "overlaps_resolved": ds.report.overlaps_resolved,
            "issues": issues,
            "mean_occluded_fraction": mean_fraction,
            "part_count_histogram": histogram,
        }),
    )?;
    println!(
        "{} plans written to {}; mean occluded fraction {:.4}",
        plans.len(),
        a.out.join("plans").display(),
        mean_fraction
    );
    Ok(())
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    let kind = parse_method(&a.method)?.ok_or_else(|| usage("augment needs a method other than none"))?;
    if kind == AugmentationKind::CutMix {
        return Err(usage(
            "cutmix mixes two images per sample and is applied on the fly by `occaug train`; nothing to cache",
        ));
    }
    let ds = load_part_dataset_with(image_root(a.images.as_deref(), &a.annotations), &a.annotations, LoadOptions::default())?;
    let plans = a.plans.as_ref().map(read_plan_dir).transpose()?;
    let items = load_source_items(&ds, plans.as_ref())?;
    let backend = match kind {
        AugmentationKind::SDInpaint => Some(open_backend(&a.backend)?),
        _ => None,
    };
    let opts = MixtureOptions {
        kind: Some(kind),
        seed: a.seed,
        cache: None,
        backend: backend.as_deref(),
        inpaint_steps: a.steps,
    };

    let cache = AugmentCache::new(&a.cache, kind);
    std::fs::create_dir_all(cache.dir()).with_context(|| format!("creating {}", cache.dir().display()))?;
    let mut manifest = cache.read_manifest()?;
    let mut created = 0usize;
    for (i, item) in items.iter().enumerate() {
        let id = item.record.image_id;
        if cache.contains(id) && manifest.contains_key(&id.0) {
            continue;
        }
        let sample = match augment_item(&items, i, kind, &opts) {
            Ok(s) => s,
            Err(e) => {
                cache.write_manifest(&manifest)?;
                cache.mark_incomplete(true)?;
                return Err(e).context(format!(
                    "augmentation stopped after {created} new images; partial cache kept in {}",
                    cache.dir().display()
                ));
            }
        };
        cache.store(id, &sample.image)?;
        manifest.insert(
            id.0,
            ManifestRow {
                image_id: id.0,
                kind: kind.name().to_string(),
                seed: augmentation_seed(a.seed, id, kind),
                mask_file: format!("{id}.json"),
                prompt: match kind {
                    AugmentationKind::SDInpaint => inpaint_prompt(&item.record.class_name),
                    _ => String::new(),
                },
            },
        );
        created += 1;
    }
    cache.write_manifest(&manifest)?;
    cache.mark_incomplete(false)?;
    println!("{created} new images, {} cached in {}", manifest.len(), cache.dir().display());
    Ok(())
}

fn train_config(f: &TrainFile, kind: Option<AugmentationKind>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let db = BackboneConfig::default();
    let seed = f.seed.unwrap_or(d.seed);
    let size = f.input_size;
    Ok(TrainConfig {
        batch_size: f.batch_size.unwrap_or(d.batch_size),
        learning_rate: f.learning_rate.unwrap_or(d.learning_rate),
        epochs: f.epochs.unwrap_or(d.epochs),
        seed,
        augmentation: kind,
        loss: LossWeights::new(f.alpha.unwrap_or(d.loss.alpha), f.beta.unwrap_or(d.loss.beta))?,
        backbone: BackboneConfig {
            input_width: size.unwrap_or(db.input_width),
            input_height: size.unwrap_or(db.input_height),
            grid: f.grid.unwrap_or(db.grid),
            feature_dim: f.feature_dim.unwrap_or(db.feature_dim),
            ..db
        },
        fusion: f.fusion.unwrap_or(false),
        diffusion: match (&f.tap, f.timestep) {
            (None, None) => None,
            (tap, t) => Some(DiffusionSettings {
                tap: tap.clone().unwrap_or_else(|| "mid".into()),
                timestep: t.unwrap_or(50),
                seed,
            }),
        },
        mask_grid: f.mask_grid.unwrap_or(d.mask_grid),
    })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut f: TrainFile = config::load(a.config.as_deref())?;
    f.seed = a.seed.or(f.seed);
    f.method = a.method.clone().or(f.method);
    f.backend = a.backend.clone().or(f.backend);
    f.out = a.out.clone().or(f.out);
    f.annotations = a.annotations.clone().or(f.annotations);
    f.epochs = a.epochs.or(f.epochs);
    f.cache = a.cache.clone().or(f.cache);

    let annotations = f.annotations.clone().ok_or_else(|| usage("train needs `annotations` (config key or --annotations)"))?;
    let out = f.out.clone().ok_or_else(|| usage("train needs `out` (config key or --out)"))?;
    let kind = parse_method(f.method.as_deref().unwrap_or("none"))?;
    let overlap = match f.overlap.as_deref() {
        None | Some("strict") => OverlapMode::Strict,
        Some("lenient") => OverlapMode::Lenient,
        Some(other) => return Err(usage(format!("overlap must be strict or lenient, got {other:?}"))),
    };
    let config = train_config(&f, kind)?;
    RunCheckpoint::check_target(&out, &config)?;

    let ds = load_part_dataset_with(image_root(f.images.as_deref(), &annotations), &annotations, LoadOptions { overlap })?;
    let plans = f.plans.as_ref().map(read_plan_dir).transpose()?;
    let items = load_source_items(&ds, plans.as_ref())?;
    let backend = f.backend.as_deref().map(open_backend).transpose()?;
    let cache = match (kind, &f.cache) {
        (Some(k), Some(root)) if k.uses_part_mask() => Some(AugmentCache::new(root, k)),
        _ => None,
    };
    let mixture = build_training_mixture(
        &items,
        &MixtureOptions {
            kind,
            seed: config.seed,
            cache: cache.as_ref(),
            backend: backend.as_deref(),
            inpaint_steps: f.inpaint_steps.unwrap_or(1),
        },
    )?;
    eprintln!(
        "training on {} samples ({} images, method {})",
        mixture.len(),
        items.len(),
        kind.map_or("none", |k| k.name())
    );
    let ckpt = train_with_progress(&config, &mixture, &ds.labels, backend.as_deref(), |m| {
        eprintln!("epoch {:>3}  loss {:.5}  top1 {:.4}", m.epoch, m.loss, m.top1);
    })?;
    ckpt.save(&out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut f: EvalFile = config::load(a.config.as_deref())?;
    f.checkpoint = a.checkpoint.clone().or(f.checkpoint);
    f.annotations = a.annotations.clone().or(f.annotations);
    f.folder = a.folder.clone().or(f.folder);
    f.seed = a.seed.or(f.seed);
    f.method = a.method.clone().or(f.method);
    f.backend = a.backend.clone().or(f.backend);
    f.out = a.out.clone().or(f.out);

    let ckpt_dir = f.checkpoint.clone().ok_or_else(|| usage("eval needs `checkpoint`"))?;
    let out = f.out.clone().ok_or_else(|| usage("eval needs `out`"))?;
    if f.annotations.is_none() && f.folder.is_none() {
        return Err(usage("eval needs `annotations`, `folder`, or both"));
    }
    let ckpt = RunCheckpoint::load(&ckpt_dir).with_context(|| format!("loading checkpoint {}", ckpt_dir.display()))?;
    let backend = f.backend.as_deref().map(open_backend).transpose()?;

    if let Some(annotations) = &f.annotations {
        let ds = load_image_dataset(image_root(f.images.as_deref(), annotations), annotations)?;
        let cfg = EvalConfig {
            levels: f.levels.clone().unwrap_or_else(|| DEFAULT_LEVELS.to_vec()),
            seed: f.seed.unwrap_or(0),
            patch_size: f.patch_size.unwrap_or(DEFAULT_PATCH_SIZE),
            classes: f.classes.clone(),
            diffusion: None,
        };
        let method = f
            .method
            .clone()
            .unwrap_or_else(|| ckpt.config.augmentation.map_or("none", |k| k.name()).to_string());
        let row = evaluate_under_occlusion(&ckpt, &ds, &cfg, backend.as_deref(), &method)?;
        let csv = out.join("report.csv");
        let mut table = if csv.exists() { AccuracyTable::read_csv(&csv)? } else { AccuracyTable::default() };
        table.upsert(row);
        let paths = table.emit(&out, "report")?;
        print!("{}", table.to_markdown()?);
        println!("report written to {}", paths.csv.display());
    }

    if let Some(folder) = &f.folder {
        let fe = evaluate_real_folder(&ckpt, folder, backend.as_deref(), None)?;
        for c in &fe.skipped_classes {
            eprintln!("skipped class folder {c:?}: not in the checkpoint label table");
        }
        write_json(
            &out.join("folder.json"),
            &json!({
                "top1": fe.top1,
                "top5": fe.top5,
                "images": fe.images,
                "skipped_classes": fe.skipped_classes,
                "skipped_files": fe.skipped_files,
            }),
        )?;
        println!("folder {}: top1 {:.4} / top5 {:.4} over {} images", folder.display(), fe.top1, fe.top5, fe.images);
    }
    Ok(())
}

pub fn serve_backend(a: &ServeArgs) -> Result<()> {
    let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    wire::serve_tcp(Arc::new(MockBackend::new()), listener)?;
    Ok(())
}

pub fn backend_worker() -> Result<()> {
    let backend = MockBackend::new();
    wire::serve(&backend, std::io::stdin().lock(), std::io::stdout().lock())?;
    Ok(())
}
