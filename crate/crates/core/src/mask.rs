//! Binary masks and their run-length encoding.
//!
//! Runs are row-major and always start with a (possibly empty) run of
//! zeros, alternating thereafter. This is the storage format for part
//! masks and the payload of the text records used to hand occlusion
//! plans between pipeline stages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    popcount: u64,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("popcount", &self.popcount)
            .finish()
    }
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
            popcount: 0,
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            bits: vec![true; n],
            popcount: n as u64,
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        let n = width as usize * height as usize;
        if bits.len() != n {
            return Err(Error::DimMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        let popcount = bits.iter().filter(|&&b| b).count() as u64;
        Ok(Self {
            width,
            height,
            bits,
            popcount,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        let mut popcount = 0;
        for y in 0..height {
            for x in 0..width {
                let b = f(x, y);
                popcount += u64::from(b);
                bits.push(b);
            }
        }
        Self {
            width,
            height,
            bits,
            popcount,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn popcount(&self) -> u64 {
        self.popcount
    }

    pub fn pixel_count(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.popcount == 0
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = y as usize * self.width as usize + x as usize;
        if self.bits[i] != value {
            self.bits[i] = value;
            if value {
                self.popcount += 1;
            } else {
                self.popcount -= 1;
            }
        }
    }

    /// Sets every pixel of the half-open rectangle `[x0, x1) x [y0, y1)`,
    /// clipped to the mask.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set(x, y, true);
            }
        }
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn ensure_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        self.ensure_same_dims(other)?;
        let mut popcount = 0;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
            popcount += u64::from(*a);
        }
        self.popcount = popcount;
        Ok(())
    }

    /// Number of pixels set in both masks.
    pub fn intersection_count(&self, other: &BinaryMask) -> Result<u64> {
        self.ensure_same_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count() as u64)
    }

    /// Clears every pixel that is set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) -> Result<()> {
        self.ensure_same_dims(other)?;
        let mut popcount = 0;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !b;
            popcount += u64::from(*a);
        }
        self.popcount = popcount;
        Ok(())
    }

    /// Fraction of image pixels covered by the mask.
    pub fn coverage(&self) -> f64 {
        let total = self.pixel_count();
        if total == 0 {
            0.0
        } else {
            self.popcount as f64 / total as f64
        }
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            width: self.width,
            height: self.height,
            counts,
        }
    }
}

/// Row-major run-length encoding of a [`BinaryMask`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rle {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&c| u64::from(c))
            .sum()
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total = u64::from(self.width) * u64::from(self.height);
        let sum: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        if sum != total {
            return Err(Error::DimMismatch(format!(
                "run lengths sum to {sum}, expected {total} for {}x{}",
                self.width, self.height
            )));
        }
        let mut bits = Vec::with_capacity(total as usize);
        let mut value = false;
        for &c in &self.counts {
            bits.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        BinaryMask::from_bits(self.width, self.height, bits)
    }
}

/// One cached mask: `image_id width height runs`, with runs comma-separated.
///
/// ```text
/// 17 64 64 0,10,54,10,3920
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRecord {
    pub image_id: u64,
    pub rle: Rle,
}

impl fmt::Display for MaskRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} ",
            self.image_id, self.rle.width, self.rle.height
        )?;
        for (i, c) in self.rle.counts.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for MaskRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Parse {
            offset: 0,
            message: format!("mask record: {what}"),
        };
        let mut fields = s.split_ascii_whitespace();
        let mut next_u = |name: &str| -> Result<u64> {
            fields
                .next()
                .ok_or_else(|| bad(&format!("missing {name}")))?
                .parse::<u64>()
                .map_err(|e| bad(&format!("{name}: {e}")))
        };
        let image_id = next_u("image_id")?;
        let width = u32::try_from(next_u("width")?).map_err(|_| bad("width overflow"))?;
        let height = u32::try_from(next_u("height")?).map_err(|_| bad("height overflow"))?;
        let runs = fields.next().ok_or_else(|| bad("missing runs"))?;
        if fields.next().is_some() {
            return Err(bad("trailing fields"));
        }
        let counts = runs
            .split(',')
            .map(|c| c.parse::<u32>().map_err(|e| bad(&format!("run: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let rle = Rle {
            width,
            height,
            counts,
        };
        rle.decode()?;
        Ok(Self { image_id, rle })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn popcount_tracks_set() {
        let mut m = BinaryMask::empty(4, 4);
        m.set(1, 1, true);
        m.set(1, 1, true);
        m.set(2, 3, true);
        assert_eq!(m.popcount(), 2);
        m.set(1, 1, false);
        assert_eq!(m.popcount(), 1);
    }

    #[test]
    fn rle_starts_with_zero_run() {
        let m = BinaryMask::full(3, 2);
        assert_eq!(m.to_rle().counts, vec![0, 6]);
        assert_eq!(BinaryMask::empty(3, 2).to_rle().counts, vec![6]);
    }

    #[test]
    fn decode_rejects_wrong_total() {
        let rle = Rle {
            width: 2,
            height: 2,
            counts: vec![1, 2],
        };
        assert!(rle.decode().is_err());
    }

    #[test]
    fn record_text_form() {
        let mut m = BinaryMask::empty(4, 2);
        m.fill_rect(1, 0, 3, 1);
        let rec = MaskRecord {
            image_id: 9,
            rle: m.to_rle(),
        };
        assert_eq!(rec.to_string(), "9 4 2 1,2,5");
        assert_eq!(rec.to_string().parse::<MaskRecord>().unwrap(), rec);
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            let m = BinaryMask::from_fn(w, h, |x, y| crate::seed::derive(&[seed, x.into(), y.into()]) % 3 == 0);
            let rle = m.to_rle();
            prop_assert_eq!(rle.area(), m.popcount());
            prop_assert_eq!(rle.decode().unwrap(), m.clone());
            let rec = MaskRecord { image_id: 1, rle };
            prop_assert_eq!(rec.to_string().parse::<MaskRecord>().unwrap().rle.decode().unwrap(), m);
        }
    }
}
