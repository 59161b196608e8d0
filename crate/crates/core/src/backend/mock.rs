//! Deterministic stand-in for a diffusion model.
//!
//! Inpainting rule: every masked pixel in channel `c` becomes
//! `clamp(round(mean_c) + noise, 0, 255)`, where `mean_c` is the mean of
//! channel `c` over the boundary ring (unmasked pixels with at least one
//! masked 8-neighbour; 128 if the ring is empty) and
//! `noise = splitmix64(seed ^ splitmix64(i)) % 3 - 1` with
//! `i = (y * width + x) * channels + c`. Unmasked pixels are copied.
//!
//! Feature rule (tap `mid`): the image is average-pooled over 8x8 cells
//! (intensities scaled to `[0, 1]`) and each cell is mapped to 8 channels
//! by `tanh(bias + W * pooled)` with a fixed seeded `W` and `bias`. The
//! map for an all-zero image is therefore `tanh(bias)` everywhere.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{CapabilityReport, DiffusionFeatureMap, FeatureRequest, GenerativeBackend, InpaintRequest, TapShape};
use crate::error::Result;
use crate::image::Image;
use crate::seed::{self, splitmix64};

pub const MOCK_FEATURE_CHANNELS: usize = 8;
pub const MOCK_POOL: u32 = 8;
/// Widest supported input (RGBA).
const MAX_INPUT_CHANNELS: usize = 4;
const PARAMETER_SEED: u64 = 0x0CC1_05E5;
const EMPTY_RING_FILL: f64 = 128.0;

#[derive(Clone, Debug)]
pub struct MockBackend {
    /// `MOCK_FEATURE_CHANNELS x MAX_INPUT_CHANNELS`, row-major.
    projection: Vec<f32>,
    bias: Vec<f32>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        let mut rng = seed::rng(PARAMETER_SEED);
        let projection = (0..MOCK_FEATURE_CHANNELS * MAX_INPUT_CHANNELS)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                (v * 1.5) as f32
            })
            .collect();
        let bias = (0..MOCK_FEATURE_CHANNELS)
            .map(|_| rng.random_range(-0.5f32..0.5))
            .collect();
        Self { projection, bias }
    }

    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// The feature map the mock returns for an all-zero image.
    pub fn zero_input_value(&self, channel: usize) -> f32 {
        self.bias[channel].tanh()
    }
}

/// Noise term of the published inpainting rule.
pub fn mock_noise(seed: u64, index: u64) -> i32 {
    (splitmix64(seed ^ splitmix64(index)) % 3) as i32 - 1
}

impl GenerativeBackend for MockBackend {
    fn capabilities(&self) -> Result<CapabilityReport> {
        Ok(CapabilityReport {
            backend: "mock".into(),
            version: "mock-1".into(),
            dims_multiple: MOCK_POOL,
            taps: vec![TapShape {
                name: "mid".into(),
                channels: MOCK_FEATURE_CHANNELS,
                downsample: MOCK_POOL,
            }],
            default_tap: "mid".into(),
            schedule: (0, 999),
            default_timestep: 50,
            default_steps: 1,
            max_parallel_requests: None,
        })
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<Image> {
        self.capabilities()?.check_inpaint(req)?;
        let (w, h) = (req.image.width(), req.image.height());
        let ch = req.image.channels() as usize;
        let mut out = req.image.clone();
        if req.mask.is_empty() {
            return Ok(out);
        }

        let mut sums = vec![0u64; ch];
        let mut ring = 0u64;
        for y in 0..h {
            for x in 0..w {
                if req.mask.get(x, y) || !touches_mask(&req.mask, x, y) {
                    continue;
                }
                ring += 1;
                for (s, &v) in sums.iter_mut().zip(req.image.pixel(x, y)) {
                    *s += u64::from(v);
                }
            }
        }
        let base: Vec<i32> = sums
            .iter()
            .map(|&s| {
                let mean = if ring == 0 { EMPTY_RING_FILL } else { s as f64 / ring as f64 };
                mean.round() as i32
            })
            .collect();

        for y in 0..h {
            for x in 0..w {
                if !req.mask.get(x, y) {
                    continue;
                }
                let px = out.pixel_mut(x, y);
                for c in 0..ch {
                    let i = (u64::from(y) * u64::from(w) + u64::from(x)) * ch as u64 + c as u64;
                    px[c] = (base[c] + mock_noise(req.seed, i)).clamp(0, 255) as u8;
                }
            }
        }
        Ok(out)
    }

    fn extract_features(&self, req: &FeatureRequest) -> Result<DiffusionFeatureMap> {
        let caps = self.capabilities()?;
        caps.check_features(req)?;
        let img = &req.image;
        let ch = (img.channels() as usize).min(MAX_INPUT_CHANNELS);
        let gh = (img.height() / MOCK_POOL) as usize;
        let gw = (img.width() / MOCK_POOL) as usize;
        let cell_px = f64::from(MOCK_POOL * MOCK_POOL) * 255.0;

        let mut values = vec![0f32; MOCK_FEATURE_CHANNELS * gh * gw];
        let mut pooled = [0f64; MAX_INPUT_CHANNELS];
        for gy in 0..gh {
            for gx in 0..gw {
                pooled.fill(0.0);
                for y in 0..MOCK_POOL {
                    for x in 0..MOCK_POOL {
                        let px = img.pixel(gx as u32 * MOCK_POOL + x, gy as u32 * MOCK_POOL + y);
                        for c in 0..ch {
                            pooled[c] += f64::from(px[c]);
                        }
                    }
                }
                for p in pooled.iter_mut() {
                    *p /= cell_px;
                }
                for k in 0..MOCK_FEATURE_CHANNELS {
                    let mut acc = f64::from(self.bias[k]);
                    for c in 0..ch {
                        acc += f64::from(self.projection[k * MAX_INPUT_CHANNELS + c]) * pooled[c];
                    }
                    values[(k * gh + gy) * gw + gx] = acc.tanh() as f32;
                }
            }
        }
        DiffusionFeatureMap::new(MOCK_FEATURE_CHANNELS, gh, gw, values)
    }

    fn parameter_checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for v in self.projection.iter().chain(&self.bias) {
            hasher.update(v.to_le_bytes());
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

fn touches_mask(mask: &crate::mask::BinaryMask, x: u32, y: u32) -> bool {
    let (w, h) = (i64::from(mask.width()), i64::from(mask.height()));
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
            if nx >= 0 && ny >= 0 && nx < w && ny < h && mask.get(nx as u32, ny as u32) {
                return true;
            }
        }
    }
    false
}
