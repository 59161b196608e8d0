//! Occlusion masks: part-combination selection for training and random
//! grid-patch occlusion for evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::annotation::{ImageId, PartSet};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskRecord};
use crate::seed;

/// Default side of an evaluation occlusion patch, in pixels.
pub const DEFAULT_PATCH_SIZE: u32 = 16;

/// Exhaustive subset search is only used for overlapping part sets.
const MAX_EXHAUSTIVE_PARTS: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionPlan {
    pub image_id: ImageId,
    /// Sorted ascending.
    pub selected_part_ids: Vec<u64>,
    pub composite: BinaryMask,
    pub occluded_fraction: f64,
}

impl OcclusionPlan {
    pub fn mask_record(&self) -> MaskRecord {
        MaskRecord {
            image_id: self.image_id.0,
            rle: self.composite.to_rle(),
        }
    }
}

/// Number of parts occluded for an object with `n` parts: half, rounded up.
pub fn parts_to_occlude(n: usize) -> usize {
    n.div_ceil(2)
}

/// Picks the `ceil(n/2)` parts whose union covers the most pixels. Equal
/// areas are broken towards the lexicographically smallest sorted id tuple.
pub fn select_part_combination(ps: &PartSet) -> Result<OcclusionPlan> {
    let k = parts_to_occlude(ps.n());
    let masks = ps
        .parts()
        .iter()
        .map(|p| ps.mask_of(p).map(|m| (p.part_id(), m)))
        .collect::<Result<Vec<_>>>()?;

    let mut union = BinaryMask::empty(ps.width(), ps.height());
    for (_, m) in &masks {
        union.union_with(m)?;
    }
    let total: u64 = masks.iter().map(|(_, m)| m.popcount()).sum();

    let selected = if union.popcount() == total {
        // Disjoint parts: union area is additive, so the best subset is the
        // k largest parts.
        let mut ranked: Vec<(u64, u64)> = masks.iter().map(|(id, m)| (*id, m.popcount())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut ids: Vec<u64> = ranked[..k].iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        ids
    } else {
        best_overlapping_subset(&masks, k)?
    };

    let composite = compose_mask(ps, &selected)?;
    Ok(OcclusionPlan {
        image_id: ps.image_id(),
        occluded_fraction: measured_information_loss(&composite),
        selected_part_ids: selected,
        composite,
    })
}

fn best_overlapping_subset(masks: &[(u64, BinaryMask)], k: usize) -> Result<Vec<u64>> {
    if masks.len() > MAX_EXHAUSTIVE_PARTS {
        return Err(Error::InvalidArgument(format!(
            "{} overlapping parts is too many for exhaustive selection",
            masks.len()
        )));
    }
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by_key(|&i| masks[i].0);

    let mut best: Option<(u64, Vec<u64>)> = None;
    for_each_combination(order.len(), k, |combo| {
        let mut u = BinaryMask::empty(masks[0].1.width(), masks[0].1.height());
        for &c in combo {
            u.union_with(&masks[order[c]].1).expect("same dims");
        }
        let ids: Vec<u64> = combo.iter().map(|&c| masks[order[c]].0).collect();
        let better = match &best {
            None => true,
            Some((area, best_ids)) => u.popcount() > *area || (u.popcount() == *area && ids < *best_ids),
        };
        if better {
            best = Some((u.popcount(), ids));
        }
    });
    Ok(best.map(|(_, ids)| ids).unwrap_or_default())
}

/// Visits every k-subset of `0..n` as an ascending index slice.
fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Union of the masks of the listed parts.
pub fn compose_mask(ps: &PartSet, ids: &[u64]) -> Result<BinaryMask> {
    let mut out = BinaryMask::empty(ps.width(), ps.height());
    for &id in ids {
        let part = ps.part(id).ok_or(Error::UnknownPart(id))?;
        out.union_with(&ps.mask_of(part)?)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl CellRect {
    pub fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }
}

/// Square patches anchored at (0, 0); the last row and column may be
/// narrower than `patch_size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub cells: Vec<CellRect>,
}

impl PatchGrid {
    pub fn new(width: u32, height: u32, patch_size: u32) -> Result<Self> {
        if patch_size == 0 || patch_size > width.min(height) {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} must be in 1..={} for a {width}x{height} image",
                width.min(height)
            )));
        }
        let mut cells = Vec::new();
        for y0 in (0..height).step_by(patch_size as usize) {
            for x0 in (0..width).step_by(patch_size as usize) {
                cells.push(CellRect {
                    x0,
                    y0,
                    x1: (x0 + patch_size).min(width),
                    y1: (y0 + patch_size).min(height),
                });
            }
        }
        Ok(Self {
            width,
            height,
            patch_size,
            cells,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Cells to black out for a target loss in percent.
    pub fn cells_for_loss(&self, target_loss: u32) -> usize {
        (f64::from(target_loss) / 100.0 * self.cells.len() as f64).round() as usize
    }
}

/// Blacks out `round(target_loss% * cells)` distinct grid cells chosen
/// uniformly at random from `seed`.
pub fn simulate_patch_occlusion(
    width: u32,
    height: u32,
    target_loss: u32,
    seed: u64,
    patch_size: u32,
) -> Result<BinaryMask> {
    if target_loss > 100 {
        return Err(Error::InvalidArgument(format!(
            "target loss {target_loss}% is outside 0..=100"
        )));
    }
    let grid = PatchGrid::new(width, height, patch_size)?;
    let count = grid.cells_for_loss(target_loss);
    let mut mask = BinaryMask::empty(width, height);
    let mut rng = seed::rng(seed);
    for i in index::sample(&mut rng, grid.cell_count(), count) {
        let c = grid.cells[i];
        mask.fill_rect(c.x0, c.y0, c.x1, c.y1);
    }
    Ok(mask)
}

/// Fraction of all image pixels that the mask removes.
pub fn measured_information_loss(mask: &BinaryMask) -> f64 {
    mask.coverage()
}

/// On-disk form of an [`OcclusionPlan`], one JSON file per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub image_id: ImageId,
    pub selected_part_ids: Vec<u64>,
    pub occluded_fraction: f64,
    /// A [`MaskRecord`] line.
    pub mask: String,
}

impl From<&OcclusionPlan> for PlanFile {
    fn from(p: &OcclusionPlan) -> Self {
        Self {
            image_id: p.image_id,
            selected_part_ids: p.selected_part_ids.clone(),
            occluded_fraction: p.occluded_fraction,
            mask: p.mask_record().to_string(),
        }
    }
}

impl TryFrom<PlanFile> for OcclusionPlan {
    type Error = Error;

    fn try_from(f: PlanFile) -> Result<Self> {
        let record: MaskRecord = f.mask.parse()?;
        if record.image_id != f.image_id.0 {
            return Err(Error::Validation(format!(
                "plan for image {} carries a mask for image {}",
                f.image_id, record.image_id
            )));
        }
        Ok(Self {
            image_id: f.image_id,
            selected_part_ids: f.selected_part_ids,
            composite: record.rle.decode()?,
            occluded_fraction: f.occluded_fraction,
        })
    }
}

/// Writes one `<image_id>.json` plan file per plan into `dir`.
pub fn write_plan_dir(dir: impl AsRef<Path>, plans: &[OcclusionPlan]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for plan in plans {
        let path = dir.join(format!("{}.json", plan.image_id));
        let text = serde_json::to_string_pretty(&PlanFile::from(plan))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads every `*.json` plan file of `dir`.
pub fn read_plan_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<ImageId, OcclusionPlan>> {
    let dir = dir.as_ref();
    let mut plans = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let plan = OcclusionPlan::try_from(serde_json::from_str::<PlanFile>(&text)?)?;
        plans.insert(plan.image_id, plan);
    }
    Ok(plans)
}
