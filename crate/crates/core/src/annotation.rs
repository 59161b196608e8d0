//! COCO-style single-object part annotations.
//!
//! The expected document has the usual `images`, `annotations` and
//! `categories` arrays. Categories are object classes; every image names
//! its class through `category_id`, and every annotation is one part of
//! that image's object:
//!
//! ```json
//! {
//!   "images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 64, "category_id": 3}],
//!   "annotations": [{"id": 10, "image_id": 1, "segmentation": [[0,0, 10,0, 10,10, 0,10]]}],
//!   "categories": [{"id": 3, "name": "bird"}]
//! }
//! ```
//!
//! `segmentation` is either a list of polygons (flat `x,y` lists) or a
//! COCO RLE object (`{"size": [h, w], "counts": [...] | "..."}`, column-major).
//! The optional `part_id` field overrides the annotation id as the part id.
//! A JSON `area` field is ignored; part areas are always the rasterized
//! pixel counts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{BinaryMask, Rle};

/// Opaque image identifier. Dataset order is ascending id.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u64);

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub class_label: usize,
    pub class_name: String,
    pub width: u32,
    pub height: u32,
}

/// A simple polygon given by its vertices in pixel coordinates. Pixel
/// `(x, y)` is inside when its centre `(x + 0.5, y + 0.5)` is inside under
/// the even-odd rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon(pub Vec<(f64, f64)>);

impl Polygon {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    Polygons(Vec<Polygon>),
    Rle(Rle),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartAnnotation {
    part_id: u64,
    geometry: Geometry,
    area: u64,
}

impl PartAnnotation {
    /// Rasterizes `geometry` once to cache its area. Fails if any pixel
    /// falls outside a `width` x `height` image.
    pub fn new(part_id: u64, geometry: Geometry, width: u32, height: u32) -> Result<Self> {
        let area = rasterize_geometry(&geometry, width, height)?.popcount();
        Ok(Self {
            part_id,
            geometry,
            area,
        })
    }

    pub fn from_mask(part_id: u64, mask: &BinaryMask) -> Self {
        Self {
            part_id,
            geometry: Geometry::Rle(mask.to_rle()),
            area: mask.popcount(),
        }
    }

    pub fn part_id(&self) -> u64 {
        self.part_id
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn area(&self) -> u64 {
        self.area
    }
}

/// The disjoint part masks of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSet {
    image_id: ImageId,
    width: u32,
    height: u32,
    parts: Vec<PartAnnotation>,
}

impl PartSet {
    pub fn new(image_id: ImageId, width: u32, height: u32, parts: Vec<PartAnnotation>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Validation(format!(
                "image {image_id}: a part set needs at least one part"
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &parts {
            if !seen.insert(p.part_id) {
                return Err(Error::Validation(format!(
                    "image {image_id}: duplicate part id {}",
                    p.part_id
                )));
            }
        }
        Ok(Self {
            image_id,
            width,
            height,
            parts,
        })
    }

    pub fn image_id(&self) -> ImageId {
        self.image_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn n(&self) -> usize {
        self.parts.len()
    }

    pub fn parts(&self) -> &[PartAnnotation] {
        &self.parts
    }

    pub fn part(&self, part_id: u64) -> Option<&PartAnnotation> {
        self.parts.iter().find(|p| p.part_id == part_id)
    }

    pub fn mask_of(&self, part: &PartAnnotation) -> Result<BinaryMask> {
        rasterize_mask(part, self.width, self.height)
    }
}

/// Rasterizes a part to a `width` x `height` mask.
pub fn rasterize_mask(part: &PartAnnotation, width: u32, height: u32) -> Result<BinaryMask> {
    rasterize_geometry(&part.geometry, width, height)
}

fn rasterize_geometry(geometry: &Geometry, width: u32, height: u32) -> Result<BinaryMask> {
    match geometry {
        Geometry::Rle(rle) => {
            if rle.width != width || rle.height != height {
                return Err(Error::DimMismatch(format!(
                    "rle is {}x{}, image is {width}x{height}",
                    rle.width, rle.height
                )));
            }
            rle.decode()
        }
        Geometry::Polygons(polys) => {
            let mut mask = BinaryMask::empty(width, height);
            let mut clipped = BTreeSet::new();
            for poly in polys {
                scanline_fill(poly, |x, y| {
                    if x >= 0 && y >= 0 && (x as u64) < u64::from(width) && (y as u64) < u64::from(height) {
                        mask.set(x as u32, y as u32, true);
                    } else {
                        clipped.insert((x, y));
                    }
                });
            }
            if clipped.is_empty() {
                Ok(mask)
            } else {
                Err(Error::OutOfBounds {
                    clipped: clipped.len() as u64,
                })
            }
        }
    }
}

/// Calls `emit(x, y)` for every pixel whose centre lies inside `poly`
/// (even-odd rule). Coordinates may be negative or past the image edge.
fn scanline_fill(poly: &Polygon, mut emit: impl FnMut(i64, i64)) {
    let pts = &poly.0;
    if pts.len() < 3 {
        return;
    }
    let (min_y, max_y) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
    let mut xs = Vec::new();
    let first_row = (min_y - 0.5).ceil() as i64;
    let last_row = (max_y - 0.5).floor() as i64;
    for row in first_row..=last_row {
        let yc = row as f64 + 0.5;
        xs.clear();
        for i in 0..pts.len() {
            let (ax, ay) = pts[i];
            let (bx, by) = pts[(i + 1) % pts.len()];
            if (ay > yc) != (by > yc) {
                xs.push(ax + (yc - ay) * (bx - ax) / (by - ay));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // Centres x + 0.5 in [left, right).
            let start = (pair[0] - 0.5).ceil() as i64;
            let end = (pair[1] - 0.5).ceil() as i64;
            for col in start..end {
                emit(col, row);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub part_a: u64,
    pub part_b: u64,
    pub overlap_count: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub overlaps: Vec<PairOverlap>,
    /// `(part_id, clipped pixel count)`; a count of 0 means the part's
    /// geometry does not match the image dimensions at all.
    pub out_of_bounds: Vec<(u64, u64)>,
    pub degenerate: Vec<u64>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.overlaps.is_empty() && self.out_of_bounds.is_empty() && self.degenerate.is_empty()
    }
}

/// Reports pairwise overlaps, out-of-bounds parts and zero-area parts.
pub fn validate_partset(ps: &PartSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut masks: Vec<(u64, BinaryMask)> = Vec::with_capacity(ps.n());
    for part in &ps.parts {
        match ps.mask_of(part) {
            Ok(m) => {
                if m.is_empty() {
                    report.degenerate.push(part.part_id);
                }
                masks.push((part.part_id, m));
            }
            Err(Error::OutOfBounds { clipped }) => report.out_of_bounds.push((part.part_id, clipped)),
            Err(_) => report.out_of_bounds.push((part.part_id, 0)),
        }
    }
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let count = masks[i]
                .1
                .intersection_count(&masks[j].1)
                .expect("masks rasterized at the part set's dims");
            if count > 0 {
                let (a, b) = (masks[i].0.min(masks[j].0), masks[i].0.max(masks[j].0));
                report.overlaps.push(PairOverlap {
                    part_a: a,
                    part_b: b,
                    overlap_count: count,
                });
            }
        }
    }
    report
}

/// Bijection between class labels `0..n` and class names.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    names: Vec<String>,
}

impl LabelTable {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Validation("duplicate class names in label table".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.get(label).map(String::as_str)
    }

    pub fn label_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["class_label", "class_name"])?;
        for (i, n) in self.names.iter().enumerate() {
            w.write_record([i.to_string(), n.clone()])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let mut names = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let label: usize = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Validation(format!("label table row {row}: bad class_label")))?;
            if label != row {
                return Err(Error::Validation(format!(
                    "label table row {row}: labels must be 0..n in order, got {label}"
                )));
            }
            names.push(rec.get(1).unwrap_or_default().to_string());
        }
        Self::new(names)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverlapMode {
    /// Overlapping parts are a validation error.
    #[default]
    Strict,
    /// Contested pixels go to the part with the lower id.
    Lenient,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapResolution {
    pub image_id: ImageId,
    pub kept_part: u64,
    pub trimmed_part: u64,
    pub pixels: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub images_total: usize,
    pub images_loaded: usize,
    /// Images without any (non-degenerate) part annotation.
    pub skipped_no_parts: Vec<ImageId>,
    /// `(image_id, part_id)` of zero-area parts that were dropped.
    pub dropped_degenerate: Vec<(ImageId, u64)>,
    pub overlaps_resolved: Vec<OverlapResolution>,
}

/// Images with their parts, ready for augmentation.
#[derive(Clone, Debug)]
pub struct PartDataset {
    pub root: PathBuf,
    pub labels: LabelTable,
    pub entries: Vec<(ImageRecord, PartSet)>,
    pub report: LoadReport,
}

impl PartDataset {
    pub fn load_image(&self, record: &ImageRecord) -> Result<Image> {
        load_record_image(&self.root, record)
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.entries.iter().map(|(r, _)| r)
    }
}

/// All images of a COCO file, annotated or not. Used for evaluation.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub root: PathBuf,
    pub labels: LabelTable,
    pub records: Vec<ImageRecord>,
}

impl ImageDataset {
    pub fn load_image(&self, record: &ImageRecord) -> Result<Image> {
        load_record_image(&self.root, record)
    }
}

fn load_record_image(root: &Path, record: &ImageRecord) -> Result<Image> {
    let img = Image::load(root.join(&record.path))?;
    if img.width() != record.width || img.height() != record.height {
        return Err(Error::DimMismatch(format!(
            "image {} is {}x{} on disk but annotated as {}x{}",
            record.image_id,
            img.width(),
            img.height(),
            record.width,
            record.height
        )));
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    pub overlap: OverlapMode,
}

/// Loads a part dataset in strict mode.
pub fn load_part_dataset(root: impl AsRef<Path>, annotation_file: impl AsRef<Path>) -> Result<PartDataset> {
    load_part_dataset_with(root, annotation_file, LoadOptions::default())
}

pub fn load_part_dataset_with(
    root: impl AsRef<Path>,
    annotation_file: impl AsRef<Path>,
    options: LoadOptions,
) -> Result<PartDataset> {
    let text = read_text(annotation_file.as_ref())?;
    parse_part_dataset(root.as_ref(), &text, options)
}

pub fn load_image_dataset(root: impl AsRef<Path>, annotation_file: impl AsRef<Path>) -> Result<ImageDataset> {
    let text = read_text(annotation_file.as_ref())?;
    let doc = CocoDocument::parse(&text)?;
    let (labels, records) = doc.image_records()?;
    Ok(ImageDataset {
        root: root.as_ref().to_path_buf(),
        labels,
        records: records.into_values().collect(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Builds a [`PartDataset`] from the text of a COCO document.
pub fn parse_part_dataset(root: &Path, text: &str, options: LoadOptions) -> Result<PartDataset> {
    let doc = CocoDocument::parse(text)?;
    let (labels, records) = doc.image_records()?;

    let unknown: BTreeSet<u64> = doc
        .annotations
        .iter()
        .map(|a| a.image_id)
        .filter(|id| !records.contains_key(&ImageId(*id)))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownImages(unknown.into_iter().collect()));
    }

    let mut by_image: BTreeMap<ImageId, Vec<&CocoAnnotation>> = BTreeMap::new();
    for ann in &doc.annotations {
        by_image.entry(ImageId(ann.image_id)).or_default().push(ann);
    }

    let mut report = LoadReport {
        images_total: records.len(),
        ..LoadReport::default()
    };
    let mut entries = Vec::new();
    let mut strict_failures = Vec::new();

    for (id, record) in records {
        let anns = by_image.remove(&id).unwrap_or_default();
        let mut parts = Vec::with_capacity(anns.len());
        for ann in anns {
            let geometry = ann.segmentation.to_geometry(record.width, record.height).map_err(|e| {
                Error::Validation(format!("image {id}, annotation {}: {e}", ann.id))
            })?;
            let part_id = ann.part_id.unwrap_or(ann.id);
            let part = PartAnnotation::new(part_id, geometry, record.width, record.height).map_err(|e| {
                Error::Validation(format!("image {id}, part {part_id}: {e}"))
            })?;
            if part.area == 0 {
                report.dropped_degenerate.push((id, part_id));
            } else {
                parts.push(part);
            }
        }
        if parts.is_empty() {
            report.skipped_no_parts.push(id);
            continue;
        }
        parts.sort_by_key(|p| p.part_id);
        let mut ps = PartSet::new(id, record.width, record.height, parts)?;
        let validation = validate_partset(&ps);
        if !validation.overlaps.is_empty() {
            match options.overlap {
                OverlapMode::Strict => {
                    for o in &validation.overlaps {
                        strict_failures.push(format!(
                            "image {id}: parts {} and {} overlap in {} pixel(s)",
                            o.part_a, o.part_b, o.overlap_count
                        ));
                    }
                    continue;
                }
                OverlapMode::Lenient => {
                    ps = resolve_overlaps(&ps, &mut report.overlaps_resolved)?;
                }
            }
        }
        entries.push((record, ps));
    }

    if !strict_failures.is_empty() {
        return Err(Error::Validation(strict_failures.join("; ")));
    }
    report.images_loaded = entries.len();
    Ok(PartDataset {
        root: root.to_path_buf(),
        labels,
        entries,
        report,
    })
}

/// Trims every part by the union of all lower-id parts.
fn resolve_overlaps(ps: &PartSet, log: &mut Vec<OverlapResolution>) -> Result<PartSet> {
    let mut claimed: Vec<(u64, BinaryMask)> = Vec::with_capacity(ps.n());
    let mut parts = Vec::with_capacity(ps.n());
    for part in &ps.parts {
        let mut m = ps.mask_of(part)?;
        for (kept, earlier) in &claimed {
            let shared = m.intersection_count(earlier)?;
            if shared > 0 {
                log.push(OverlapResolution {
                    image_id: ps.image_id,
                    kept_part: *kept,
                    trimmed_part: part.part_id,
                    pixels: shared,
                });
                m.subtract(earlier)?;
            }
        }
        parts.push(PartAnnotation::from_mask(part.part_id, &m));
        claimed.push((part.part_id, m));
    }
    parts.retain(|p| p.area > 0);
    PartSet::new(ps.image_id, ps.width, ps.height, parts)
}

#[derive(Debug, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
    category_id: u64,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    segmentation: CocoSegmentation,
    #[serde(default)]
    part_id: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CocoSegmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [u32; 2], counts: CocoCounts },
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CocoCounts {
    List(Vec<u32>),
    Compressed(String),
}

impl CocoDocument {
    fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })
    }

    fn image_records(&self) -> Result<(LabelTable, BTreeMap<ImageId, ImageRecord>)> {
        let mut cats: Vec<&CocoCategory> = self.categories.iter().collect();
        cats.sort_by_key(|c| c.id);
        let labels = LabelTable::new(cats.iter().map(|c| c.name.clone()).collect())?;
        let label_of_cat: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

        let mut records = BTreeMap::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Validation(format!("image {} has zero size", img.id)));
            }
            let class_label = *label_of_cat.get(&img.category_id).ok_or_else(|| {
                Error::Validation(format!(
                    "image {} references unknown category {}",
                    img.id, img.category_id
                ))
            })?;
            let record = ImageRecord {
                image_id: ImageId(img.id),
                path: PathBuf::from(&img.file_name),
                class_label,
                class_name: labels.name(class_label).unwrap_or_default().to_string(),
                width: img.width,
                height: img.height,
            };
            if records.insert(record.image_id, record).is_some() {
                return Err(Error::Validation(format!("duplicate image id {}", img.id)));
            }
        }
        Ok((labels, records))
    }
}

impl CocoSegmentation {
    fn to_geometry(&self, width: u32, height: u32) -> Result<Geometry> {
        match self {
            CocoSegmentation::Polygons(polys) => {
                let mut out = Vec::with_capacity(polys.len());
                for flat in polys {
                    if flat.len() % 2 != 0 {
                        return Err(Error::Validation("polygon has an odd coordinate count".into()));
                    }
                    out.push(Polygon(flat.chunks_exact(2).map(|p| (p[0], p[1])).collect()));
                }
                Ok(Geometry::Polygons(out))
            }
            CocoSegmentation::Rle { size, counts } => {
                let [h, w] = *size;
                if h != height || w != width {
                    return Err(Error::DimMismatch(format!(
                        "rle size {w}x{h} differs from image {width}x{height}"
                    )));
                }
                let counts = match counts {
                    CocoCounts::List(c) => c.clone(),
                    CocoCounts::Compressed(s) => decode_coco_counts(s)?,
                };
                Ok(Geometry::Rle(column_major_to_row_major(w, h, &counts)?))
            }
        }
    }
}

/// Decodes the compact COCO RLE string (6-bit groups, delta-coded from
/// the third run on).
fn decode_coco_counts(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let mut x: i64 = 0;
        let mut k = 0;
        loop {
            if p >= bytes.len() {
                return Err(Error::Validation("truncated compressed rle".into()));
            }
            let c = i64::from(bytes[p]) - 48;
            if !(0..64).contains(&c) {
                return Err(Error::Validation(format!("invalid rle byte {:?}", bytes[p] as char)));
            }
            x |= (c & 0x1f) << (5 * k);
            let more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more {
                if c & 0x10 != 0 {
                    x |= -1i64 << (5 * k);
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u32::try_from(c).map_err(|_| Error::Validation("negative rle run".into())))
        .collect()
}

fn column_major_to_row_major(width: u32, height: u32, counts: &[u32]) -> Result<Rle> {
    let col_major = Rle {
        width: height,
        height: width,
        counts: counts.to_vec(),
    }
    .decode()?;
    // `col_major` is the transpose: its pixel (y, x) is image pixel (x, y).
    Ok(BinaryMask::from_fn(width, height, |x, y| col_major.get(y, x)).to_rle())
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_part(id: u64, x0: f64, y0: f64, x1: f64, y1: f64, w: u32, h: u32) -> PartAnnotation {
        PartAnnotation::new(id, Geometry::Polygons(vec![Polygon::rect(x0, y0, x1, y1)]), w, h).unwrap()
    }

    #[test]
    fn rectangle_area() {
        let p = rect_part(1, 0.0, 0.0, 10.0, 10.0, 64, 64);
        assert_eq!(rasterize_mask(&p, 64, 64).unwrap().popcount(), 100);
        assert_eq!(p.area(), 100);
    }

    #[test]
    fn full_image_polygon() {
        let p = rect_part(1, 0.0, 0.0, 37.0, 21.0, 37, 21);
        assert_eq!(p.area(), 37 * 21);
    }

    #[test]
    fn out_of_bounds_reports_clipped_pixels() {
        let err = PartAnnotation::new(
            1,
            Geometry::Polygons(vec![Polygon::rect(60.0, 0.0, 70.0, 2.0)]),
            64,
            64,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { clipped: 12 }), "{err:?}");
    }

    #[test]
    fn overlapping_rectangles_reported() {
        let ps = PartSet::new(
            ImageId(1),
            32,
            32,
            vec![
                rect_part(1, 0.0, 0.0, 10.0, 10.0, 32, 32),
                rect_part(2, 5.0, 5.0, 15.0, 15.0, 32, 32),
            ],
        )
        .unwrap();
        let report = validate_partset(&ps);
        assert_eq!(
            report.overlaps,
            vec![PairOverlap {
                part_a: 1,
                part_b: 2,
                overlap_count: 25
            }]
        );
    }

    #[test]
    fn degenerate_part_flagged() {
        let ps = PartSet::new(
            ImageId(1),
            16,
            16,
            vec![
                rect_part(1, 0.0, 0.0, 4.0, 4.0, 16, 16),
                PartAnnotation::new(2, Geometry::Polygons(vec![Polygon(vec![(1.0, 1.0), (5.0, 1.0), (9.0, 1.0)])]), 16, 16)
                    .unwrap(),
            ],
        )
        .unwrap();
        let r = validate_partset(&ps);
        assert_eq!(r.degenerate, vec![2]);
        assert!(r.overlaps.is_empty());
    }

    #[test]
    fn empty_partset_rejected() {
        assert!(PartSet::new(ImageId(3), 4, 4, vec![]).is_err());
    }

    #[test]
    fn compressed_counts_match_list_counts() {
        // Runs from the fourth on are delta-coded against run i - 2:
        // 4 - 5 = -1 -> 0x1f -> 'O'.
        assert_eq!(decode_coco_counts("352O").unwrap(), vec![3, 5, 2, 4]);
        // Multi-group value: 100 = 0b00011_00100 -> groups 4|0x20, 3.
        assert_eq!(decode_coco_counts("T3").unwrap(), vec![100]);
    }

    #[test]
    fn column_major_conversion() {
        // 2x3 (w x h) mask with only pixel (1, 0) set: column-major index 3.
        let rle = column_major_to_row_major(2, 3, &[3, 1, 2]).unwrap();
        let m = rle.decode().unwrap();
        assert!(m.get(1, 0));
        assert_eq!(m.popcount(), 1);
    }

    #[test]
    fn parse_error_reports_byte_offset() {
        let text = "{\n  \"images\": [,]\n}";
        match parse_part_dataset(Path::new("."), text, LoadOptions::default()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(&text[offset..offset + 1], ","),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_table_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = LabelTable::new(vec!["cat".into(), "dog, big".into()]).unwrap();
        let p = dir.path().join("labels.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(LabelTable::read_csv(&p).unwrap(), t);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("class_label,class_name\n0,cat\n"));
    }
}
