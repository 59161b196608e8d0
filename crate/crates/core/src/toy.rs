//! Procedural shapes dataset: three classes of 64x64 images, each with two
//! to four disjoint rectangular or elliptical parts and COCO-style
//! annotations.
//!
//! Layout written by [`write_toy_dataset`]:
//!
//! ```text
//! <root>/train/annotations.json   <root>/train/images/<id>.png
//! <root>/test/annotations.json    <root>/test/images/<id>.png
//! <root>/real/<class>/<id>.png    test images with a gray occluder
//! ```

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::annotation::{rasterize_mask, Geometry, PartAnnotation, Polygon};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::BinaryMask;
use crate::seed;

pub const TOY_CLASSES: [&str; 3] = ["orb", "crate", "totem"];
pub const TOY_SIZE: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            train_per_class: 100,
            test_per_class: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyImage {
    pub id: u64,
    pub class_label: usize,
    pub image: Image,
    /// `(part_id, outline)` in pixel coordinates.
    pub parts: Vec<(u64, Polygon)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Polygon {
    const VERTICES: usize = 32;
    Polygon(
        (0..VERTICES)
            .map(|i| {
                let t = i as f64 / VERTICES as f64 * std::f64::consts::TAU;
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect(),
    )
}

fn class_shape(class: usize, j: usize) -> Shape {
    match class {
        0 => Shape::Ellipse,
        1 => Shape::Rect,
        _ if j % 2 == 0 => Shape::Rect,
        _ => Shape::Ellipse,
    }
}

fn class_color(class: usize, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut c = [0u8; 3];
    for (ch, v) in c.iter_mut().enumerate() {
        let base = if ch == class { 200 } else { 70 };
        *v = (base + rng.random_range(-35i32..=35)).clamp(0, 255) as u8;
    }
    c
}

/// One image of class `class`; `id` also seeds the content.
pub fn generate_toy_image(id: u64, class: usize, run_seed: u64) -> Result<ToyImage> {
    if class >= TOY_CLASSES.len() {
        return Err(Error::InvalidArgument(format!("toy class {class} out of range")));
    }
    let mut rng = seed::rng(seed::derive(&[run_seed, id, class as u64]));
    let s = TOY_SIZE;
    let bg: i32 = rng.random_range(70..=130);
    let mut image = Image::from_fn(s, s, 3, |_, _, _| 0);
    for v in image.data_mut() {
        *v = (bg + rng.random_range(-12i32..=12)).clamp(0, 255) as u8;
    }

    // Parts live in distinct quadrants, so they never overlap.
    let n = rng.random_range(2..=4usize);
    let mut cells = [0usize, 1, 2, 3];
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    let half = f64::from(s / 2);
    let mut parts = Vec::with_capacity(n);
    for (j, &cell) in cells[..n].iter().enumerate() {
        let (ox, oy) = ((cell % 2) as f64 * half, (cell / 2) as f64 * half);
        let w = f64::from(rng.random_range(14u32..=28));
        let h = f64::from(rng.random_range(14u32..=28));
        let x0 = ox + 2.0 + f64::from(rng.random_range(0..=(28 - w as u32)));
        let y0 = oy + 2.0 + f64::from(rng.random_range(0..=(28 - h as u32)));
        let poly = match class_shape(class, j) {
            Shape::Rect => Polygon::rect(x0, y0, x0 + w, y0 + h),
            Shape::Ellipse => ellipse(x0 + w / 2.0, y0 + h / 2.0, w / 2.0, h / 2.0),
        };
        let part_id = j as u64 + 1;
        let part = PartAnnotation::new(part_id, Geometry::Polygons(vec![poly.clone()]), s, s)?;
        let mask = rasterize_mask(&part, s, s)?;
        paint(&mut image, &mask, class_color(class, &mut rng), &mut rng);
        parts.push((part_id, poly));
    }
    Ok(ToyImage {
        id,
        class_label: class,
        image,
        parts,
    })
}

fn paint(image: &mut Image, mask: &BinaryMask, color: [u8; 3], rng: &mut ChaCha8Rng) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let px = image.pixel_mut(x, y);
                for (v, &c) in px.iter_mut().zip(&color) {
                    *v = (i32::from(c) + rng.random_range(-10i32..=10)).clamp(0, 255) as u8;
                }
            }
        }
    }
}

/// Balanced split, classes interleaved, ids starting at `first_id`.
pub fn generate_split(per_class: usize, first_id: u64, run_seed: u64) -> Result<Vec<ToyImage>> {
    (0..per_class * TOY_CLASSES.len())
        .map(|i| generate_toy_image(first_id + i as u64, i % TOY_CLASSES.len(), run_seed))
        .collect()
}

fn coco_document(images: &[ToyImage]) -> serde_json::Value {
    let mut annotations = Vec::new();
    let mut next_ann = 1u64;
    for im in images {
        for (part_id, poly) in &im.parts {
            let flat: Vec<f64> = poly.0.iter().flat_map(|&(x, y)| [x, y]).collect();
            annotations.push(json!({
                "id": next_ann,
                "image_id": im.id,
                "part_id": part_id,
                "segmentation": [flat],
            }));
            next_ann += 1;
        }
    }
    json!({
        "images": images.iter().map(|im| json!({
            "id": im.id,
            "file_name": format!("images/{}.png", im.id),
            "width": im.image.width(),
            "height": im.image.height(),
            "category_id": im.class_label + 1,
        })).collect::<Vec<_>>(),
        "annotations": annotations,
        "categories": TOY_CLASSES.iter().enumerate()
            .map(|(i, name)| json!({"id": i + 1, "name": name}))
            .collect::<Vec<_>>(),
    })
}

fn write_split(dir: &Path, images: &[ToyImage]) -> Result<PathBuf> {
    for im in images {
        im.image.save(dir.join("images").join(format!("{}.png", im.id)))?;
    }
    let path = dir.join("annotations.json");
    let text = serde_json::to_string_pretty(&coco_document(images))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Paints a gray rectangle over roughly a third of the image.
fn real_occluder(image: &Image, id: u64, run_seed: u64) -> Image {
    let mut rng = seed::rng(seed::derive(&[run_seed, id, 0x7EA1]));
    let mut out = image.clone();
    let (w, h) = (image.width(), image.height());
    let rw = rng.random_range(w / 3..=w / 2);
    let rh = rng.random_range(h / 2..=h * 3 / 4);
    let x0 = rng.random_range(0..=w - rw);
    let y0 = rng.random_range(0..=h - rh);
    let shade: u8 = rng.random_range(90..=160);
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            out.pixel_mut(x, y).fill(shade);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ToyPaths {
    pub train_annotations: PathBuf,
    pub test_annotations: PathBuf,
    pub real_folder: PathBuf,
}

/// Writes the train, test and occluded folder splits under `root`.
pub fn write_toy_dataset(root: impl AsRef<Path>, config: &ToyConfig) -> Result<ToyPaths> {
    let root = root.as_ref();
    let train = generate_split(config.train_per_class, 1, config.seed)?;
    let test = generate_split(config.test_per_class, 100_001, config.seed)?;
    let train_annotations = write_split(&root.join("train"), &train)?;
    let test_annotations = write_split(&root.join("test"), &test)?;
    let real_folder = root.join("real");
    for im in &test {
        real_occluder(&im.image, im.id, config.seed)
            .save(real_folder.join(TOY_CLASSES[im.class_label]).join(format!("{}.png", im.id)))?;
    }
    Ok(ToyPaths {
        train_annotations,
        test_annotations,
        real_folder,
    })
}
