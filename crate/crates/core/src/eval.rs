//! Scoring checkpoints under simulated patch occlusion and on folders of
//! really occluded images, plus report rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotation::{ImageDataset, ImageRecord};
use crate::augment::black_out_pixels;
use crate::backend::GenerativeBackend;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::DiffusionSettings;
use crate::occlusion::{measured_information_loss, simulate_patch_occlusion, DEFAULT_PATCH_SIZE};
use crate::seed;
use crate::train::RunCheckpoint;

pub const DEFAULT_LEVELS: [u32; 5] = [0, 20, 40, 60, 80];

/// Fraction of samples whose label ranks among the `k` largest logits.
/// Ties rank the smaller class index first; `k` is clamped to the class
/// count.
pub fn top_k_accuracy(logits: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let Some(&ly) = row.get(y) else { return false };
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > ly || (v == ly && j < y))
                .count();
            rank < k.min(row.len())
        })
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub levels: Vec<u32>,
    pub seed: u64,
    pub patch_size: u32,
    /// Restrict scoring to these class names.
    pub classes: Option<Vec<String>>,
    /// Overrides the diffusion settings stored in the checkpoint.
    pub diffusion: Option<DiffusionSettings>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS.to_vec(),
            seed: 0,
            patch_size: DEFAULT_PATCH_SIZE,
            classes: None,
            diffusion: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidArgument("at least one loss level is required".into()));
        }
        if let Some(l) = self.levels.iter().find(|&&l| l > 100) {
            return Err(Error::InvalidArgument(format!("loss level {l}% is outside 0..=100")));
        }
        if self.patch_size == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        Ok(())
    }
}

/// Seed of the occlusion mask for one image at one level.
pub fn mask_seed(global: u64, image_id: u64, level: u32) -> u64 {
    seed::derive(&[global, image_id, u64::from(level)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub level: u32,
    pub top1: f64,
    pub top5: f64,
    /// Mean fraction of pixels actually blacked out.
    pub measured_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    pub arch: String,
    pub cells: Vec<AccuracyCell>,
}

impl AccuracyRow {
    pub fn cell(&self, level: u32) -> Option<&AccuracyCell> {
        self.cells.iter().find(|c| c.level == level)
    }
}

/// Architecture label of a checkpoint, as shown in reports.
pub fn arch_label(ckpt: &RunCheckpoint) -> String {
    let id = &ckpt.config.backbone.id;
    if ckpt.model.uses_fusion() {
        format!("{id}+diffusion")
    } else {
        id.clone()
    }
}

fn diffusion_for<'a>(
    ckpt: &'a RunCheckpoint,
    cfg: &'a EvalConfig,
    backend: Option<&'a dyn GenerativeBackend>,
) -> Result<Option<(&'a dyn GenerativeBackend, &'a DiffusionSettings)>> {
    if !ckpt.model.uses_fusion() {
        return Ok(None);
    }
    let backend = backend.ok_or_else(|| {
        Error::InvalidArgument(
            "checkpoint fuses diffusion features; pass --backend to evaluate it".into(),
        )
    })?;
    let settings = cfg
        .diffusion
        .as_ref()
        .or(ckpt.config.diffusion.as_ref())
        .ok_or_else(|| Error::Checkpoint("fusing checkpoint has no diffusion settings".into()))?;
    Ok(Some((backend, settings)))
}

/// Records of `dataset` whose class is in the checkpoint label table (and
/// in the class filter), with their checkpoint labels.
pub fn scored_records<'a>(
    ckpt: &RunCheckpoint,
    dataset: &'a ImageDataset,
    cfg: &EvalConfig,
) -> Vec<(&'a ImageRecord, usize)> {
    dataset
        .records
        .iter()
        .filter(|r| cfg.classes.as_ref().is_none_or(|c| c.contains(&r.class_name)))
        .filter_map(|r| ckpt.labels.label_of(&r.class_name).map(|l| (r, l)))
        .collect()
}

/// One report row: accuracy at every configured loss level.
pub fn evaluate_under_occlusion(
    ckpt: &RunCheckpoint,
    dataset: &ImageDataset,
    cfg: &EvalConfig,
    backend: Option<&dyn GenerativeBackend>,
    method: &str,
) -> Result<AccuracyRow> {
    cfg.validate()?;
    let diffusion = diffusion_for(ckpt, cfg, backend)?;
    let records = scored_records(ckpt, dataset, cfg);
    if records.is_empty() {
        return Err(Error::Validation(
            "no evaluation images share a class with the checkpoint".into(),
        ));
    }
    let images = records
        .iter()
        .map(|(r, _)| dataset.load_image(r))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = records.iter().map(|&(_, l)| l).collect();
    let ids: Vec<u64> = records.iter().map(|(r, _)| r.image_id.0).collect();
    let cells = cfg
        .levels
        .iter()
        .map(|&level| evaluate_level(ckpt, &images, &ids, &labels, level, cfg, diffusion))
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyRow {
        method: method.to_string(),
        arch: arch_label(ckpt),
        cells,
    })
}

/// Accuracy of `ckpt` on images blacked out at one level.
pub fn evaluate_level(
    ckpt: &RunCheckpoint,
    images: &[Image],
    ids: &[u64],
    labels: &[usize],
    level: u32,
    cfg: &EvalConfig,
    diffusion: Option<(&dyn GenerativeBackend, &DiffusionSettings)>,
) -> Result<AccuracyCell> {
    let mut logits = Vec::with_capacity(images.len());
    let mut loss_sum = 0.0;
    for (image, &id) in images.iter().zip(ids) {
        let logit = if level == 0 {
            ckpt.model.predict(image, diffusion)?
        } else {
            let mask = simulate_patch_occlusion(
                image.width(),
                image.height(),
                level,
                mask_seed(cfg.seed, id, level),
                cfg.patch_size.min(image.width()).min(image.height()),
            )?;
            loss_sum += measured_information_loss(&mask);
            ckpt.model.predict(&black_out_pixels(image, &mask)?, diffusion)?
        };
        logits.push(logit);
    }
    Ok(AccuracyCell {
        level,
        top1: top_k_accuracy(&logits, labels, 1)?,
        top5: top_k_accuracy(&logits, labels, 5)?,
        measured_loss: loss_sum / images.len().max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FolderEvaluation {
    pub top1: f64,
    pub top5: f64,
    pub images: usize,
    /// Class folders whose name is not in the label table.
    pub skipped_classes: Vec<String>,
    /// Files that are not PNG images.
    pub skipped_files: Vec<PathBuf>,
}

/// Scores every `<folder>/<class_name>/*.png` image.
pub fn evaluate_real_folder(
    ckpt: &RunCheckpoint,
    folder: impl AsRef<Path>,
    backend: Option<&dyn GenerativeBackend>,
    diffusion: Option<&DiffusionSettings>,
) -> Result<FolderEvaluation> {
    let folder = folder.as_ref();
    let cfg = EvalConfig {
        diffusion: diffusion.cloned(),
        ..EvalConfig::default()
    };
    let diffusion = diffusion_for(ckpt, &cfg, backend)?;
    let sorted_entries = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<Vec<_>>>()?;
        v.sort();
        Ok(v)
    };

    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut skipped_classes = Vec::new();
    let mut skipped_files = Vec::new();
    for class_dir in sorted_entries(folder)? {
        if !class_dir.is_dir() {
            skipped_files.push(class_dir);
            continue;
        }
        let name = class_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let Some(label) = ckpt.labels.label_of(&name) else {
            skipped_classes.push(name);
            continue;
        };
        for file in sorted_entries(&class_dir)? {
            let is_png = file
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !file.is_file() || !is_png {
                skipped_files.push(file);
                continue;
            }
            logits.push(ckpt.model.predict(&Image::load(&file)?, diffusion)?);
            labels.push(label);
        }
    }
    if logits.is_empty() {
        return Err(Error::Validation(format!(
            "{} contains no PNG images under known class folders",
            folder.display()
        )));
    }
    Ok(FolderEvaluation {
        top1: top_k_accuracy(&logits, &labels, 1)?,
        top5: top_k_accuracy(&logits, &labels, 5)?,
        images: logits.len(),
        skipped_classes,
        skipped_files,
    })
}

/// Rows keyed by (method, arch), one column per loss level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    method: String,
    arch: String,
    level: u32,
    top1: f64,
    top5: f64,
    measured_loss: f64,
}

impl AccuracyTable {
    /// Replaces any existing row with the same (method, arch).
    pub fn upsert(&mut self, row: AccuracyRow) {
        match self.rows.iter_mut().find(|r| r.method == row.method && r.arch == row.arch) {
            Some(r) => *r = row,
            None => self.rows.push(row),
        }
    }

    /// Sorted union of levels over all rows.
    pub fn levels(&self) -> Vec<u32> {
        self.rows
            .iter()
            .flat_map(|r| r.cells.iter().map(|c| c.level))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Validation("accuracy table is empty".into()));
        }
        for r in &self.rows {
            for c in &r.cells {
                if !(0.0 <= c.top1 && c.top1 <= c.top5 && c.top5 <= 1.0) {
                    return Err(Error::Validation(format!(
                        "{} / {} at {}%: need 0 <= top1 <= top5 <= 1, got {} / {}",
                        r.method, r.arch, c.level, c.top1, c.top5
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            for c in &r.cells {
                w.serialize(CsvRow {
                    method: r.method.clone(),
                    arch: r.arch.clone(),
                    level: c.level,
                    top1: c.top1,
                    top5: c.top5,
                    measured_loss: c.measured_loss,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut table = AccuracyTable::default();
        for rec in csv::Reader::from_path(path.as_ref())?.deserialize::<CsvRow>() {
            let rec = rec?;
            let cell = AccuracyCell {
                level: rec.level,
                top1: rec.top1,
                top5: rec.top5,
                measured_loss: rec.measured_loss,
            };
            match table.rows.iter_mut().find(|r| r.method == rec.method && r.arch == rec.arch) {
                Some(r) => r.cells.push(cell),
                None => table.rows.push(AccuracyRow {
                    method: rec.method,
                    arch: rec.arch,
                    cells: vec![cell],
                }),
            }
        }
        Ok(table)
    }

    /// Percent cells formatted `top1 / top5`.
    pub fn to_markdown(&self) -> Result<String> {
        self.validate()?;
        let levels = self.levels();
        let mut s = String::from("| Method | Architecture |");
        for l in &levels {
            let _ = write!(s, " {l}% |");
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(levels.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} | {} |", r.method, r.arch);
            for l in &levels {
                match r.cell(*l) {
                    Some(c) => {
                        let _ = write!(s, " {:.2} / {:.2} |", c.top1 * 100.0, c.top5 * 100.0);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        Ok(s)
    }

    /// Top-1 versus loss level, one colored polyline per row on a white
    /// canvas with a legend swatch per row in the top-right corner.
    pub fn render_plot(&self) -> Result<Image> {
        self.validate()?;
        const W: u32 = 480;
        const H: u32 = 320;
        const M: i64 = 30;
        let mut img = Image::filled(W, H, 3, 255);
        let levels = self.levels();
        let (lo, hi) = (f64::from(levels[0]), f64::from(*levels.last().unwrap_or(&100)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let px = |level: u32| M + ((f64::from(level) - lo) / span * (f64::from(W) - 2.0 * M as f64)).round() as i64;
        let py = |acc: f64| i64::from(H) - M - (acc * (f64::from(H) - 2.0 * M as f64)).round() as i64;

        let axis = [60u8, 60, 60];
        draw_line(&mut img, (M, i64::from(H) - M), (i64::from(W) - M, i64::from(H) - M), axis);
        draw_line(&mut img, (M, M), (M, i64::from(H) - M), axis);
        for &l in &levels {
            let x = px(l);
            draw_line(&mut img, (x, i64::from(H) - M), (x, i64::from(H) - M + 5), axis);
        }

        for (i, row) in self.rows.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut cells = row.cells.clone();
            cells.sort_by_key(|c| c.level);
            let pts: Vec<(i64, i64)> = cells.iter().map(|c| (px(c.level), py(c.top1))).collect();
            for w in pts.windows(2) {
                for d in 0..2 {
                    draw_line(&mut img, (w[0].0, w[0].1 + d), (w[1].0, w[1].1 + d), color);
                }
            }
            for &(x, y) in &pts {
                fill_rect(&mut img, x - 2, y - 2, x + 3, y + 3, color);
            }
            let ly = M + 12 * i as i64;
            fill_rect(&mut img, i64::from(W) - M - 20, ly, i64::from(W) - M, ly + 8, color);
        }
        Ok(img)
    }

    /// Writes `<stem>.csv`, `<stem>.md` and `<stem>.png` into `dir`.
    pub fn emit(&self, dir: impl AsRef<Path>, stem: &str) -> Result<ReportPaths> {
        let dir = dir.as_ref();
        let paths = ReportPaths {
            csv: dir.join(format!("{stem}.csv")),
            markdown: dir.join(format!("{stem}.md")),
            plot: dir.join(format!("{stem}.png")),
        };
        self.write_csv(&paths.csv)?;
        std::fs::write(&paths.markdown, self.to_markdown()?).map_err(|e| Error::io(&paths.markdown, e))?;
        self.render_plot()?.save(&paths.plot)?;
        Ok(paths)
    }
}

#[derive(Clone, Debug)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub plot: PathBuf,
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn put(img: &mut Image, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && x < i64::from(img.width()) && y < i64::from(img.height()) {
        img.pixel_mut(x as u32, y as u32).copy_from_slice(&color);
    }
}

fn fill_rect(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    for y in y0..y1 {
        for x in x0..x1 {
            put(img, x, y, color);
        }
    }
}

/// Bresenham.
fn draw_line(img: &mut Image, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}
