//! Frozen generative model access: mask-conditioned inpainting and
//! intermediate U-Net feature extraction.
//!
//! Three implementations share the [`GenerativeBackend`] trait:
//!
//! * [`MockBackend`], a deterministic, dependency-free stand-in,
//! * [`RemoteBackend`], a client for a service speaking the [`wire`] protocol over TCP,
//! * [`LocalProcessBackend`], the same protocol over a child process's stdio.
//!
//! None of them exposes a way to update model parameters.

mod cache;
mod mock;
mod remote;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::{FeatureCache, FeatureKey};
pub use mock::{mock_noise, MockBackend, MOCK_FEATURE_CHANNELS, MOCK_POOL};
pub use remote::{LocalProcessBackend, RemoteBackend};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::BinaryMask;

/// Prompt template used for inpainting.
pub fn inpaint_prompt(class_name: &str) -> String {
    format!("A class of {class_name}")
}

/// Feature extraction is conditioned on the empty prompt.
pub const NULL_PROMPT: &str = "";

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintRequest {
    pub image: Image,
    pub mask: BinaryMask,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRequest {
    pub image: Image,
    pub prompt: String,
    pub timestep: u32,
    pub tap: String,
    pub seed: u64,
}

impl FeatureRequest {
    /// Request at the backend's default tap and timestep with the null prompt.
    pub fn with_defaults(image: Image, caps: &CapabilityReport, seed: u64) -> Self {
        Self {
            image,
            prompt: NULL_PROMPT.to_string(),
            timestep: caps.default_timestep,
            tap: caps.default_tap.clone(),
            seed,
        }
    }
}

/// Intermediate activation `channels x height x width`, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionFeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DiffusionFeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::DimMismatch(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapShape {
    pub name: String,
    pub channels: usize,
    /// Spatial downsampling factor relative to the input image.
    pub downsample: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityReport {
    pub backend: String,
    pub version: String,
    /// Image sides must be divisible by this.
    pub dims_multiple: u32,
    pub taps: Vec<TapShape>,
    pub default_tap: String,
    /// Inclusive timestep range accepted by feature extraction.
    pub schedule: (u32, u32),
    pub default_timestep: u32,
    pub default_steps: u32,
    /// `None` means unbounded.
    pub max_parallel_requests: Option<u32>,
}

impl CapabilityReport {
    /// Contract expected from a Stable Diffusion 2.x inpainting and
    /// feature service (latent factor 8, four down blocks, one mid block,
    /// four up blocks).
    pub fn stable_diffusion_v2() -> Self {
        let tap = |name: &str, channels, downsample| TapShape {
            name: name.to_string(),
            channels,
            downsample,
        };
        Self {
            backend: "stable-diffusion".into(),
            version: "sd-2.1".into(),
            dims_multiple: 8,
            taps: vec![
                tap("down_0", 320, 16),
                tap("down_1", 640, 32),
                tap("down_2", 1280, 64),
                tap("down_3", 1280, 64),
                tap("mid", 1280, 64),
                tap("up_0", 1280, 32),
                tap("up_1", 1280, 16),
                tap("up_2", 640, 8),
                tap("up_3", 320, 8),
            ],
            default_tap: "mid".into(),
            schedule: (0, 999),
            // Light noising.
            default_timestep: 50,
            default_steps: 50,
            max_parallel_requests: Some(1),
        }
    }

    pub fn tap(&self, name: &str) -> Option<&TapShape> {
        self.taps.iter().find(|t| t.name == name)
    }

    /// Feature map shape `(c, h, w)` for an image of the given size.
    pub fn feature_shape(&self, tap: &str, width: u32, height: u32) -> Option<(usize, usize, usize)> {
        self.tap(tap).map(|t| {
            (
                t.channels,
                (height / t.downsample).max(1) as usize,
                (width / t.downsample).max(1) as usize,
            )
        })
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let m = self.dims_multiple.max(1);
        if image.width() % m != 0 || image.height() % m != 0 {
            return Err(Error::Capability(format!(
                "{} requires image sides divisible by {m}, got {}x{}",
                self.backend,
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    pub fn check_inpaint(&self, req: &InpaintRequest) -> Result<()> {
        self.check_image(&req.image)?;
        if req.mask.width() != req.image.width() || req.mask.height() != req.image.height() {
            return Err(Error::DimMismatch(format!(
                "mask {}x{} vs image {}x{}",
                req.mask.width(),
                req.mask.height(),
                req.image.width(),
                req.image.height()
            )));
        }
        if req.steps == 0 {
            return Err(Error::InvalidArgument("inpainting needs at least one step".into()));
        }
        Ok(())
    }

    pub fn check_features(&self, req: &FeatureRequest) -> Result<()> {
        self.check_image(&req.image)?;
        if self.tap(&req.tap).is_none() {
            let names: Vec<&str> = self.taps.iter().map(|t| t.name.as_str()).collect();
            return Err(Error::Capability(format!(
                "unknown tap {:?}; valid taps: {}",
                req.tap,
                names.join(", ")
            )));
        }
        let (lo, hi) = self.schedule;
        if req.timestep < lo || req.timestep > hi {
            return Err(Error::Capability(format!(
                "timestep {} outside schedule {lo}..={hi}",
                req.timestep
            )));
        }
        Ok(())
    }
}

pub trait GenerativeBackend: Send + Sync {
    fn capabilities(&self) -> Result<CapabilityReport>;

    /// Fills the masked region; pixels outside the mask are preserved up
    /// to the backend's reconstruction tolerance.
    fn inpaint(&self, req: &InpaintRequest) -> Result<Image>;

    fn extract_features(&self, req: &FeatureRequest) -> Result<DiffusionFeatureMap>;

    /// Digest of the model parameters, used to verify the model stays frozen.
    fn parameter_checksum(&self) -> Result<String>;
}

impl<B: GenerativeBackend + ?Sized> GenerativeBackend for Arc<B> {
    fn capabilities(&self) -> Result<CapabilityReport> {
        (**self).capabilities()
    }

    fn inpaint(&self, req: &InpaintRequest) -> Result<Image> {
        (**self).inpaint(req)
    }

    fn extract_features(&self, req: &FeatureRequest) -> Result<DiffusionFeatureMap> {
        (**self).extract_features(req)
    }

    fn parameter_checksum(&self) -> Result<String> {
        (**self).parameter_checksum()
    }
}

/// Which backend a run uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendSpec {
    Mock,
    /// A child process speaking the wire protocol on stdin/stdout.
    Local { program: String, args: Vec<String> },
    /// A TCP service speaking the wire protocol.
    Remote { addr: String },
}

impl BackendSpec {
    /// Parses `mock`, `local:<program> [args...]` or `remote:<host:port>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "mock" {
            return Ok(BackendSpec::Mock);
        }
        if let Some(addr) = s.strip_prefix("remote:") {
            if addr.is_empty() {
                return Err(Error::InvalidArgument("remote backend needs an address".into()));
            }
            return Ok(BackendSpec::Remote { addr: addr.to_string() });
        }
        if let Some(cmd) = s.strip_prefix("local:") {
            let mut words = cmd.split_whitespace().map(str::to_string);
            let program = words
                .next()
                .ok_or_else(|| Error::InvalidArgument("local backend needs a program".into()))?;
            return Ok(BackendSpec::Local {
                program,
                args: words.collect(),
            });
        }
        Err(Error::InvalidArgument(format!(
            "unknown backend {s:?} (expected mock, local:<cmd> or remote:<addr>)"
        )))
    }

    pub fn open(&self) -> Result<Arc<dyn GenerativeBackend>> {
        Ok(match self {
            BackendSpec::Mock => Arc::new(MockBackend::new()),
            BackendSpec::Local { program, args } => Arc::new(LocalProcessBackend::spawn(program, args)?),
            BackendSpec::Remote { addr } => Arc::new(RemoteBackend::connect(addr)?),
        })
    }
}
