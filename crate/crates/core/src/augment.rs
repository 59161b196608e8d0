//! The augmentation operators: black-out, CutMix, replace-parts and
//! diffusion inpainting, plus the on-disk cache of augmented images.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::annotation::ImageId;
use crate::backend::{inpaint_prompt, GenerativeBackend, InpaintRequest};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::BinaryMask;
use crate::occlusion::OcclusionPlan;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AugmentationKind {
    #[serde(rename = "black-out")]
    BlackOut,
    #[serde(rename = "cutmix")]
    CutMix,
    #[serde(rename = "replace-parts")]
    ReplaceParts,
    #[serde(rename = "sd-inpaint")]
    SDInpaint,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 4] = [
        AugmentationKind::BlackOut,
        AugmentationKind::CutMix,
        AugmentationKind::ReplaceParts,
        AugmentationKind::SDInpaint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::BlackOut => "black-out",
            AugmentationKind::CutMix => "cutmix",
            AugmentationKind::ReplaceParts => "replace-parts",
            AugmentationKind::SDInpaint => "sd-inpaint",
        }
    }

    /// Kinds driven by the part masks (all but CutMix).
    pub fn uses_part_mask(self) -> bool {
        self != AugmentationKind::CutMix
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown augmentation {s:?} (expected black-out, cutmix, replace-parts or sd-inpaint)"
                ))
            })
    }
}

/// Sparse per-class label weights; non-negative and summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelWeights(Vec<(usize, f64)>);

impl LabelWeights {
    pub fn one_hot(label: usize) -> Self {
        Self(vec![(label, 1.0)])
    }

    /// `weight_a` on `a`, `1 - weight_a` on `b`. Zero weights are dropped.
    pub fn mix(a: usize, weight_a: f64, b: usize, weight_b: f64) -> Self {
        if a == b {
            return Self::one_hot(a);
        }
        let mut v: Vec<(usize, f64)> = [(a, weight_a), (b, weight_b)]
            .into_iter()
            .filter(|&(_, w)| w > 0.0)
            .collect();
        v.sort_by_key(|&(l, _)| l);
        Self(v)
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    pub fn weight(&self, label: usize) -> f64 {
        self.0.iter().find(|(l, _)| *l == label).map_or(0.0, |(_, w)| *w)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, w)| w).sum()
    }

    /// The label carrying the most weight (lowest label on ties).
    pub fn dominant(&self) -> usize {
        self.0
            .iter()
            .fold(None::<(usize, f64)>, |best, &(l, w)| match best {
                Some((_, bw)) if bw >= w => best,
                _ => Some((l, w)),
            })
            .map_or(0, |(l, _)| l)
    }

    pub fn to_dense(&self, num_classes: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; num_classes];
        for &(l, w) in &self.0 {
            *out.get_mut(l).ok_or_else(|| {
                Error::InvalidArgument(format!("label {l} outside 0..{num_classes}"))
            })? += w;
        }
        Ok(out)
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn area(&self) -> u64 {
        u64::from(self.x1.saturating_sub(self.x0)) * u64::from(self.y1.saturating_sub(self.y0))
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// The pasted rectangle of a CutMix sample. The weight of the first image
/// is `lambda = 1 - area / total`, kept as the integer pair for exact checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutMixPatch {
    pub rect: Rect,
    pub area: u64,
    pub total: u64,
}

impl CutMixPatch {
    pub fn lambda(&self) -> f64 {
        (self.total - self.area) as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub image: Image,
    pub label_weights: LabelWeights,
    /// Set for the mask-driven kinds.
    pub source_mask: Option<BinaryMask>,
    pub cutmix: Option<CutMixPatch>,
    pub kind: AugmentationKind,
}

fn check_mask(image: &Image, mask: &BinaryMask) -> Result<()> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::DimMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// The masking kernel: pixels under the mask take the replacement's value,
/// all others are copied from `base`.
pub fn composite(base: &Image, mask: &BinaryMask, replacement: &Image) -> Result<Image> {
    check_mask(base, mask)?;
    base.ensure_same_shape(replacement, "replacement image")?;
    let mut out = base.clone();
    let ch = base.channels() as usize;
    let src = replacement.data();
    for (i, px) in out.data_mut().chunks_exact_mut(ch).enumerate() {
        if mask.bits()[i] {
            px.copy_from_slice(&src[i * ch..(i + 1) * ch]);
        }
    }
    Ok(out)
}

/// Zeroes every channel under the mask. Shared by training-time
/// black-out and evaluation-time simulated occlusion.
pub fn black_out_pixels(image: &Image, mask: &BinaryMask) -> Result<Image> {
    let black = Image::zeros(image.width(), image.height(), image.channels());
    composite(image, mask, &black)
}

pub fn black_out(image: &Image, mask: &BinaryMask, label: usize) -> Result<AugmentedSample> {
    Ok(AugmentedSample {
        image: black_out_pixels(image, mask)?,
        label_weights: LabelWeights::one_hot(label),
        source_mask: Some(mask.clone()),
        cutmix: None,
        kind: AugmentationKind::BlackOut,
    })
}

/// Copies masked pixels from `donor` at the same coordinates. The donor
/// must already have the image's dimensions.
pub fn replace_parts(image: &Image, mask: &BinaryMask, donor: &Image, label: usize) -> Result<AugmentedSample> {
    Ok(AugmentedSample {
        image: composite(image, mask, donor)?,
        label_weights: LabelWeights::one_hot(label),
        source_mask: Some(mask.clone()),
        cutmix: None,
        kind: AugmentationKind::ReplaceParts,
    })
}

/// Samples a CutMix box: `lambda ~ Beta(1, 1)`, box sides scaled by
/// `sqrt(1 - lambda)`, centre uniform over the image, clipped to it.
pub fn cutmix_rect(width: u32, height: u32, seed: u64) -> Rect {
    let mut rng = seed::rng(seed);
    let lambda: f64 = Beta::new(1.0, 1.0).expect("valid beta").sample(&mut rng);
    let cut = (1.0 - lambda).sqrt();
    let cut_w = (f64::from(width) * cut) as i64;
    let cut_h = (f64::from(height) * cut) as i64;
    let cx = i64::from(rng.random_range(0..width));
    let cy = i64::from(rng.random_range(0..height));
    let clip = |v: i64, hi: u32| v.clamp(0, i64::from(hi)) as u32;
    Rect {
        x0: clip(cx - cut_w / 2, width),
        y0: clip(cy - cut_h / 2, height),
        x1: clip(cx + cut_w / 2, width),
        y1: clip(cy + cut_h / 2, height),
    }
}

/// Pastes `rect` of `image_b` onto `image_a` and mixes the labels by area.
pub fn cutmix_with_rect(
    image_a: &Image,
    label_a: usize,
    image_b: &Image,
    label_b: usize,
    rect: Rect,
) -> Result<AugmentedSample> {
    image_a.ensure_same_shape(image_b, "cutmix images")?;
    let (w, h) = (image_a.width(), image_a.height());
    if rect.x1 > w || rect.y1 > h || rect.x0 > rect.x1 || rect.y0 > rect.y1 {
        return Err(Error::InvalidArgument(format!("cutmix box {rect:?} outside {w}x{h}")));
    }
    let region = BinaryMask::from_fn(w, h, |x, y| rect.contains(x, y));
    let patch = CutMixPatch {
        rect,
        area: rect.area(),
        total: u64::from(w) * u64::from(h),
    };
    let lambda = patch.lambda();
    Ok(AugmentedSample {
        image: composite(image_a, &region, image_b)?,
        label_weights: LabelWeights::mix(label_a, lambda, label_b, 1.0 - lambda),
        source_mask: None,
        cutmix: Some(patch),
        kind: AugmentationKind::CutMix,
    })
}

pub fn cutmix(image_a: &Image, label_a: usize, image_b: &Image, label_b: usize, seed: u64) -> Result<AugmentedSample> {
    image_a.ensure_same_shape(image_b, "cutmix images")?;
    let rect = cutmix_rect(image_a.width(), image_a.height(), seed);
    cutmix_with_rect(image_a, label_a, image_b, label_b, rect)
}

#[derive(Clone, Debug)]
pub struct InpaintSettings {
    pub seed: u64,
    pub steps: u32,
}

/// Fills the plan's occluded parts with the backend, prompted with the
/// class name. Pixels outside the mask are always the original ones.
pub fn inpaint_augment(
    image: &Image,
    plan: &OcclusionPlan,
    class_name: &str,
    label: usize,
    backend: &dyn GenerativeBackend,
    settings: &InpaintSettings,
) -> Result<AugmentedSample> {
    check_mask(image, &plan.composite)?;
    let output = if plan.composite.is_empty() {
        image.clone()
    } else {
        let req = InpaintRequest {
            image: image.clone(),
            mask: plan.composite.clone(),
            prompt: inpaint_prompt(class_name),
            seed: settings.seed,
            steps: settings.steps,
        };
        let filled = backend.inpaint(&req).map_err(|e| Error::Backend {
            image_id: plan.image_id.to_string(),
            source: Box::new(e),
        })?;
        composite(image, &plan.composite, &filled)?
    };
    Ok(AugmentedSample {
        image: output,
        label_weights: LabelWeights::one_hot(label),
        source_mask: Some(plan.composite.clone()),
        cutmix: None,
        kind: AugmentationKind::SDInpaint,
    })
}

/// Picks a partner index uniformly among `0..n` excluding `current`.
pub fn pick_partner(n: usize, current: usize, seed: u64) -> Option<usize> {
    if n < 2 {
        return None;
    }
    let r = seed::rng(seed).random_range(0..n - 1);
    Some(if r >= current { r + 1 } else { r })
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_id: u64,
    pub kind: String,
    pub seed: u64,
    pub mask_file: String,
    pub prompt: String,
}

/// `<cache_root>/<method>/<image_id>.png` plus `manifest.csv`. A run that
/// stops early leaves an `INCOMPLETE` marker beside the manifest.
#[derive(Clone, Debug)]
pub struct AugmentCache {
    dir: PathBuf,
}

const MANIFEST: &str = "manifest.csv";
const INCOMPLETE: &str = "INCOMPLETE";

impl AugmentCache {
    pub fn new(cache_root: impl AsRef<Path>, kind: AugmentationKind) -> Self {
        Self {
            dir: cache_root.as_ref().join(kind.name()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn image_path(&self, id: ImageId) -> PathBuf {
        self.dir.join(format!("{id}.png"))
    }

    pub fn contains(&self, id: ImageId) -> bool {
        self.image_path(id).is_file()
    }

    pub fn load(&self, id: ImageId) -> Result<Option<Image>> {
        let p = self.image_path(id);
        if p.is_file() {
            Image::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn store(&self, id: ImageId, image: &Image) -> Result<()> {
        image.save(self.image_path(id))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    pub fn read_manifest(&self) -> Result<BTreeMap<u64, ManifestRow>> {
        let p = self.manifest_path();
        let mut rows = BTreeMap::new();
        if p.is_file() {
            let mut r = csv::Reader::from_path(&p)?;
            for row in r.deserialize::<ManifestRow>() {
                let row = row?;
                rows.insert(row.image_id, row);
            }
        }
        Ok(rows)
    }

    /// Writes rows sorted by image id.
    pub fn write_manifest(&self, rows: &BTreeMap<u64, ManifestRow>) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let p = self.manifest_path();
        let mut w = csv::Writer::from_path(&p)?;
        if rows.is_empty() {
            w.write_record(["image_id", "kind", "seed", "mask_file", "prompt"])?;
        }
        for row in rows.values() {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    pub fn mark_incomplete(&self, incomplete: bool) -> Result<()> {
        let p = self.dir.join(INCOMPLETE);
        if incomplete {
            std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
            std::fs::write(&p, b"augment run did not finish; rerun to resume\n").map_err(|e| Error::io(&p, e))
        } else if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))
        } else {
            Ok(())
        }
    }

    pub fn is_incomplete(&self) -> bool {
        self.dir.join(INCOMPLETE).exists()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    fn gradient(w: u32, h: u32) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| (x * 7 + y * 13 + u32::from(c) * 50 + 1) as u8)
    }

    #[test]
    fn kind_names_round_trip() {
        for k in AugmentationKind::ALL {
            assert_eq!(k.name().parse::<AugmentationKind>().unwrap(), k);
        }
        assert!("mixup".parse::<AugmentationKind>().is_err());
    }

    #[test]
    fn black_out_identity_and_full() {
        let img = gradient(8, 6);
        let s = black_out(&img, &BinaryMask::empty(8, 6), 2).unwrap();
        assert_eq!(s.image, img);
        assert_eq!(s.label_weights, LabelWeights::one_hot(2));
        let s = black_out(&img, &BinaryMask::full(8, 6), 2).unwrap();
        assert!(s.image.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn black_out_rejects_dim_mismatch() {
        assert!(matches!(
            black_out(&gradient(8, 6), &BinaryMask::empty(6, 8), 0),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn replace_parts_extremes() {
        let img = gradient(8, 8);
        let donor = Image::filled(8, 8, 3, 200);
        assert_eq!(replace_parts(&img, &BinaryMask::empty(8, 8), &donor, 1).unwrap().image, img);
        let full = replace_parts(&img, &BinaryMask::full(8, 8), &donor, 1).unwrap();
        assert_eq!(full.image, donor);
        assert_eq!(full.label_weights, LabelWeights::one_hot(1));
        assert!(replace_parts(&img, &BinaryMask::empty(8, 8), &gradient(8, 4), 1).is_err());
    }

    #[test]
    fn cutmix_boundaries() {
        let a = gradient(10, 10);
        let b = Image::filled(10, 10, 3, 9);
        let none = cutmix_with_rect(&a, 0, &b, 1, Rect { x0: 3, y0: 3, x1: 3, y1: 7 }).unwrap();
        assert_eq!(none.image, a);
        assert_eq!(none.label_weights, LabelWeights::one_hot(0));
        let all = cutmix_with_rect(&a, 0, &b, 1, Rect { x0: 0, y0: 0, x1: 10, y1: 10 }).unwrap();
        assert_eq!(all.image, b);
        assert_eq!(all.label_weights, LabelWeights::one_hot(1));
    }

    #[test]
    fn cutmix_quarter_box() {
        let a = Image::zeros(224, 224, 3);
        let b = Image::filled(224, 224, 3, 1);
        let s = cutmix_with_rect(&a, 4, &b, 7, Rect { x0: 50, y0: 60, x1: 162, y1: 172 }).unwrap();
        let p = s.cutmix.unwrap();
        assert_eq!((p.area, p.total), (12544, 50176));
        assert_eq!(p.lambda(), 0.75);
        assert_eq!(s.label_weights.weight(4), 0.75);
        assert_eq!(s.label_weights.weight(7), 0.25);
    }

    #[test]
    fn cutmix_same_label_is_one_hot() {
        let a = gradient(8, 8);
        let s = cutmix(&a, 3, &a, 3, 11).unwrap();
        assert_eq!(s.label_weights, LabelWeights::one_hot(3));
    }

    #[test]
    fn cutmix_rect_stays_inside() {
        for seed in 0..200 {
            let r = cutmix_rect(37, 23, seed);
            assert!(r.x0 <= r.x1 && r.x1 <= 37 && r.y0 <= r.y1 && r.y1 <= 23, "{r:?}");
        }
    }

    #[test]
    fn inpaint_empty_mask_short_circuits() {
        struct Unreachable;
        impl GenerativeBackend for Unreachable {
            fn capabilities(&self) -> Result<crate::backend::CapabilityReport> {
                unreachable!()
            }
            fn inpaint(&self, _: &InpaintRequest) -> Result<Image> {
                panic!("backend must not be called for an empty mask")
            }
            fn extract_features(&self, _: &crate::backend::FeatureRequest) -> Result<crate::backend::DiffusionFeatureMap> {
                unreachable!()
            }
            fn parameter_checksum(&self) -> Result<String> {
                unreachable!()
            }
        }
        let img = gradient(16, 16);
        let plan = OcclusionPlan {
            image_id: ImageId(1),
            selected_part_ids: vec![],
            composite: BinaryMask::empty(16, 16),
            occluded_fraction: 0.0,
        };
        let s = inpaint_augment(&img, &plan, "cat", 0, &Unreachable, &InpaintSettings { seed: 0, steps: 1 }).unwrap();
        assert_eq!(s.image, img);
    }

    #[test]
    fn inpaint_errors_carry_image_id() {
        let img = gradient(12, 12);
        let mut mask = BinaryMask::empty(12, 12);
        mask.set(3, 3, true);
        let plan = OcclusionPlan {
            image_id: ImageId(77),
            selected_part_ids: vec![1],
            composite: mask,
            occluded_fraction: 1.0 / 144.0,
        };
        let err = inpaint_augment(&img, &plan, "cat", 0, &MockBackend::new(), &InpaintSettings { seed: 0, steps: 1 })
            .unwrap_err();
        assert!(matches!(err, Error::Backend { ref image_id, .. } if image_id == "77"), "{err}");
    }

    #[test]
    fn partner_never_self() {
        assert_eq!(pick_partner(1, 0, 5), None);
        for seed in 0..100 {
            for cur in 0..4 {
                let p = pick_partner(4, cur, seed).unwrap();
                assert!(p < 4 && p != cur);
            }
        }
    }

    #[test]
    fn dominant_label() {
        assert_eq!(LabelWeights::mix(2, 0.3, 5, 0.7).dominant(), 5);
        assert_eq!(LabelWeights::mix(2, 0.5, 5, 0.5).dominant(), 2);
    }
}
