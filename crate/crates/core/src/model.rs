//! The classifier: a pluggable backbone producing `l_f`, optional fusion
//! with pooled diffusion features, a class head, and the separate mask
//! branch used by the auxiliary mask loss.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{FeatureRequest, GenerativeBackend, NULL_PROMPT};
use crate::error::{Error, Result};
use crate::fusion::{classify, fuse, pool_features, ClassHead, ClassifierFeatures, FusedFeatures, FusionConfig, FusionHead};
use crate::image::Image;
use crate::mask::BinaryMask;
use crate::nn::{Linear, LinearGrad};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub id: String,
    pub input_width: u32,
    pub input_height: u32,
    /// Pooling grid side.
    pub grid: u32,
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            id: PooledMlp::ID.into(),
            input_width: 64,
            input_height: 64,
            grid: 8,
            feature_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneActivation {
    pub features: Vec<f64>,
    /// Whatever the backbone needs to run its backward pass.
    pub tape: Vec<f64>,
}

/// A feature extractor producing the penultimate features `l_f`.
///
/// Parameters are exposed as one flat vector so that optimizers,
/// checkpoints and checksums do not depend on the architecture.
pub trait Backbone: Send + Sync + std::fmt::Debug {
    fn config(&self) -> &BackboneConfig;

    fn feature_dim(&self) -> usize {
        self.config().feature_dim
    }

    /// Fixed, parameter-free input transform (resize, pool, normalize).
    fn preprocess(&self, image: &Image) -> Result<Vec<f64>>;

    fn forward(&self, input: &[f64]) -> Result<BackboneActivation>;

    /// Accumulates `dL/dθ` into `grad` (length [`Backbone::param_count`]).
    fn backward(&self, input: &[f64], act: &BackboneActivation, grad_features: &[f64], grad: &mut [f64]);

    fn param_count(&self) -> usize;

    fn parameters(&self) -> Vec<f64>;

    fn set_parameters(&mut self, params: &[f64]) -> Result<()>;

    fn sgd_step(&mut self, grad: &[f64], lr: f64);

    fn box_clone(&self) -> Box<dyn Backbone>;
}

impl Clone for Box<dyn Backbone> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Known backbone ids.
pub const BACKBONES: &[&str] = &[PooledMlp::ID];

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<Box<dyn Backbone>> {
    match config.id.as_str() {
        PooledMlp::ID => Ok(Box::new(PooledMlp::new(config.clone(), seed)?)),
        other => Err(Error::InvalidArgument(format!(
            "unknown backbone {other:?}; available: {}",
            BACKBONES.join(", ")
        ))),
    }
}

/// Average-pools the RGB image on a `grid x grid` lattice and applies one
/// ReLU layer. Small enough to train on a CPU in seconds.
#[derive(Clone, Debug)]
pub struct PooledMlp {
    config: BackboneConfig,
    layer: Linear,
}

impl PooledMlp {
    pub const ID: &'static str = "pooled-mlp";
    const CHANNELS: usize = 3;

    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        if config.grid == 0
            || config.feature_dim == 0
            || config.grid > config.input_width.min(config.input_height)
        {
            return Err(Error::InvalidArgument(format!("invalid backbone config {config:?}")));
        }
        let in_dim = Self::CHANNELS * (config.grid * config.grid) as usize;
        let layer = Linear::random(in_dim, config.feature_dim, seed);
        Ok(Self { config, layer })
    }

    pub fn input_dim(&self) -> usize {
        self.layer.in_dim
    }
}

/// Mean of each cell of a `grid x grid` lattice over `w x h` values
/// produced by `value(x, y)`. Cells use integer boundaries `i * w / grid`.
fn pool_grid(w: u32, h: u32, grid: u32, mut value: impl FnMut(u32, u32) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity((grid * grid) as usize);
    for gy in 0..grid {
        let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
        for gx in 0..grid {
            let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += value(x, y);
                }
            }
            out.push(sum / f64::from((x1 - x0) * (y1 - y0)));
        }
    }
    out
}

impl Backbone for PooledMlp {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn preprocess(&self, image: &Image) -> Result<Vec<f64>> {
        let img = image.resize_nearest(self.config.input_width, self.config.input_height);
        let ch = img.channels() as usize;
        let mut out = Vec::with_capacity(self.input_dim());
        for c in 0..Self::CHANNELS {
            let src = if ch >= Self::CHANNELS { c } else { 0 };
            out.extend(pool_grid(img.width(), img.height(), self.config.grid, |x, y| {
                f64::from(img.pixel(x, y)[src]) / 255.0
            }));
        }
        Ok(out)
    }

    fn forward(&self, input: &[f64]) -> Result<BackboneActivation> {
        let pre = self.layer.forward(input)?;
        Ok(BackboneActivation {
            features: pre.iter().map(|&v| v.max(0.0)).collect(),
            tape: pre,
        })
    }

    fn backward(&self, input: &[f64], act: &BackboneActivation, grad_features: &[f64], grad: &mut [f64]) {
        let g_pre: Vec<f64> = grad_features
            .iter()
            .zip(&act.tape)
            .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
            .collect();
        let mut lg = LinearGrad::zeros_like(&self.layer);
        self.layer.backward(input, &g_pre, &mut lg);
        let nw = lg.weight.len();
        for (d, s) in grad[..nw].iter_mut().zip(&lg.weight) {
            *d += s;
        }
        for (d, s) in grad[nw..].iter_mut().zip(&lg.bias) {
            *d += s;
        }
    }

    fn param_count(&self) -> usize {
        self.layer.param_count()
    }

    fn parameters(&self) -> Vec<f64> {
        self.layer.params().copied().collect()
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Checkpoint(format!(
                "backbone expects {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let nw = self.layer.weight.len();
        self.layer.weight.copy_from_slice(&params[..nw]);
        self.layer.bias.copy_from_slice(&params[nw..]);
        Ok(())
    }

    fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        let nw = self.layer.weight.len();
        self.layer.sgd_step(
            &LinearGrad {
                weight: grad[..nw].to_vec(),
                bias: grad[nw..].to_vec(),
            },
            lr,
        );
    }

    fn box_clone(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

/// Classifies a part mask rendered as a one-channel image: coverage
/// fractions on a `grid x grid` lattice followed by one linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskBranch {
    pub grid: u32,
    pub linear: Linear,
}

impl MaskBranch {
    /// Zero-initialized, so every mask starts at uniform logits.
    pub fn new(grid: u32, num_classes: usize) -> Self {
        Self {
            grid,
            linear: Linear::zeros((grid * grid) as usize, num_classes),
        }
    }

    pub fn input(&self, mask: &BinaryMask) -> Vec<f64> {
        pool_grid(mask.width(), mask.height(), self.grid, |x, y| f64::from(u8::from(mask.get(x, y))))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffusionSettings {
    pub tap: String,
    pub timestep: u32,
    pub seed: u64,
}

/// Pooled diffusion features `pool(l_d)` of an image (null prompt).
pub fn diffusion_vector(backend: &dyn GenerativeBackend, image: &Image, settings: &DiffusionSettings) -> Result<Vec<f64>> {
    let fm = backend.extract_features(&FeatureRequest {
        image: image.clone(),
        prompt: NULL_PROMPT.to_string(),
        timestep: settings.timestep,
        tap: settings.tap.clone(),
        seed: settings.seed,
    })?;
    Ok(pool_features(&fm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    /// Channel count of the diffusion features; `None` disables fusion.
    pub diffusion_dim: Option<usize>,
    /// Defaults to the backbone width.
    pub projection_dim: Option<usize>,
    pub mask_grid: u32,
}

#[derive(Clone, Debug)]
pub struct OcclusionClassifier {
    pub backbone: Box<dyn Backbone>,
    pub fusion: Option<FusionHead>,
    pub head: ClassHead,
    pub mask_branch: MaskBranch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    pub backbone: BackboneActivation,
    pub fused: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradients for every trainable part of an [`OcclusionClassifier`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub backbone: Vec<f64>,
    pub fusion: Option<LinearGrad>,
    pub head: LinearGrad,
    pub mask: LinearGrad,
}

impl ModelGrad {
    pub fn scale(&mut self, s: f64) {
        self.backbone.iter_mut().for_each(|g| *g *= s);
        if let Some(f) = &mut self.fusion {
            f.scale(s);
        }
        self.head.scale(s);
        self.mask.scale(s);
    }
}

impl OcclusionClassifier {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        let backbone = build_backbone(&config.backbone, seed::derive(&[seed, 1]))?;
        let df = backbone.feature_dim();
        let fusion = match config.diffusion_dim {
            Some(c) => Some(FusionHead::identity(FusionConfig {
                classifier_dim: df,
                diffusion_dim: c,
                projection_dim: config.projection_dim.unwrap_or(df),
            })?),
            None => None,
        };
        let head_dim = fusion.as_ref().map_or(df, |f| f.config.projection_dim);
        Ok(Self {
            head: ClassHead::new(head_dim, config.num_classes, seed::derive(&[seed, 2])),
            mask_branch: MaskBranch::new(config.mask_grid, config.num_classes),
            backbone,
            fusion,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn uses_fusion(&self) -> bool {
        self.fusion.is_some()
    }

    pub fn input_size(&self) -> (u32, u32) {
        let c = self.backbone.config();
        (c.input_width, c.input_height)
    }

    pub fn forward(&self, input: &[f64], diffusion: Option<&[f64]>) -> Result<ForwardPass> {
        let act = self.backbone.forward(input)?;
        let fused = match (&self.fusion, diffusion) {
            (Some(f), Some(ld)) => fuse(&ClassifierFeatures(act.features.clone()), ld, f)?.0,
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "model fuses diffusion features but none were supplied".into(),
                ))
            }
            (None, _) => act.features.clone(),
        };
        let logits = classify(&FusedFeatures(fused.clone()), &self.head)?;
        Ok(ForwardPass {
            backbone: act,
            fused,
            logits,
        })
    }

    /// Backpropagates `dL/dlogits` into `grad`.
    pub fn backward(
        &self,
        input: &[f64],
        diffusion: Option<&[f64]>,
        pass: &ForwardPass,
        grad_logits: &[f64],
        grad: &mut ModelGrad,
    ) -> Result<()> {
        let g_fused = self.head.backward(&pass.fused, grad_logits, &mut grad.head);
        let g_lf = match (&self.fusion, &mut grad.fusion) {
            (Some(f), Some(fg)) => f.backward(
                &pass.backbone.features,
                diffusion.ok_or_else(|| Error::InvalidArgument("missing diffusion features".into()))?,
                &g_fused,
                fg,
            )?,
            _ => g_fused,
        };
        self.backbone.backward(input, &pass.backbone, &g_lf, &mut grad.backbone);
        Ok(())
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            backbone: vec![0.0; self.backbone.param_count()],
            fusion: self.fusion.as_ref().map(|f| LinearGrad::zeros_like(&f.projection)),
            head: LinearGrad::zeros_like(&self.head.linear),
            mask: LinearGrad::zeros_like(&self.mask_branch.linear),
        }
    }

    pub fn sgd_step(&mut self, grad: &ModelGrad, lr: f64) {
        self.backbone.sgd_step(&grad.backbone, lr);
        if let (Some(f), Some(g)) = (&mut self.fusion, &grad.fusion) {
            f.projection.sgd_step(g, lr);
        }
        self.head.linear.sgd_step(&grad.head, lr);
        self.mask_branch.linear.sgd_step(&grad.mask, lr);
    }

    /// Class logits for an image. Fusing models need the backend, which
    /// sees exactly the image being classified.
    pub fn predict(
        &self,
        image: &Image,
        diffusion: Option<(&dyn GenerativeBackend, &DiffusionSettings)>,
    ) -> Result<Vec<f64>> {
        let input = self.backbone.preprocess(image)?;
        let ld = match (&self.fusion, diffusion) {
            (Some(_), Some((backend, settings))) => Some(diffusion_vector(backend, image, settings)?),
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "model fuses diffusion features: a generative backend is required".into(),
                ))
            }
            (None, _) => None,
        };
        Ok(self.forward(&input, ld.as_deref())?.logits)
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            backbone: self.backbone.config().clone(),
            backbone_params: self.backbone.parameters(),
            fusion: self.fusion.clone(),
            head: self.head.clone(),
            mask_branch: self.mask_branch.clone(),
        }
    }

    pub fn from_state(state: ModelState) -> Result<Self> {
        let mut backbone = build_backbone(&state.backbone, 0)?;
        backbone.set_parameters(&state.backbone_params)?;
        Ok(Self {
            backbone,
            fusion: state.fusion,
            head: state.head,
            mask_branch: state.mask_branch,
        })
    }

    /// SHA-256 over every parameter in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.backbone.parameters() {
            h.update(v.to_le_bytes());
        }
        if let Some(f) = &self.fusion {
            f.projection.params().for_each(|v| h.update(v.to_le_bytes()));
        }
        self.head.linear.params().for_each(|v| h.update(v.to_le_bytes()));
        self.mask_branch.linear.params().for_each(|v| h.update(v.to_le_bytes()));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Logits of the mask branch. The mask must have the model's input size.
pub fn classify_mask_branch(mask: &BinaryMask, model: &OcclusionClassifier) -> Result<Vec<f64>> {
    let (w, h) = model.input_size();
    if mask.width() != w || mask.height() != h {
        return Err(Error::DimMismatch(format!(
            "mask is {}x{}, model input is {w}x{h}",
            mask.width(),
            mask.height()
        )));
    }
    model.mask_branch.linear.forward(&model.mask_branch.input(mask))
}

/// Serializable snapshot of a classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub backbone: BackboneConfig,
    pub backbone_params: Vec<f64>,
    pub fusion: Option<FusionHead>,
    pub head: ClassHead,
    pub mask_branch: MaskBranch,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(diffusion_dim: Option<usize>) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_width: 16,
                input_height: 16,
                grid: 4,
                feature_dim: 6,
                ..BackboneConfig::default()
            },
            num_classes: 3,
            diffusion_dim,
            projection_dim: None,
            mask_grid: 4,
        }
    }

    #[test]
    fn unknown_backbone_lists_available() {
        let cfg = BackboneConfig {
            id: "swin-b".into(),
            ..BackboneConfig::default()
        };
        let err = build_backbone(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("pooled-mlp"));
    }

    #[test]
    fn preprocess_pools_per_channel() {
        let bb = PooledMlp::new(config(None).backbone, 0).unwrap();
        let img = Image::from_fn(16, 16, 3, |x, _, c| if c == 0 && x < 8 { 255 } else { 0 });
        let v = bb.preprocess(&img).unwrap();
        assert_eq!(v.len(), 48);
        assert_eq!(&v[..4], &[1.0, 1.0, 0.0, 0.0]);
        assert!(v[16..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_branch_uniform_for_empty_mask() {
        let m = OcclusionClassifier::new(&config(None), 1).unwrap();
        let logits = classify_mask_branch(&BinaryMask::empty(16, 16), &m).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        assert!(classify_mask_branch(&BinaryMask::empty(8, 8), &m).is_err());
    }

    #[test]
    fn identical_masks_identical_logits() {
        let mut m = OcclusionClassifier::new(&config(None), 1).unwrap();
        m.mask_branch.linear = Linear::random(16, 3, 4);
        let mut a = BinaryMask::empty(16, 16);
        a.fill_rect(2, 2, 9, 7);
        let b = a.clone();
        assert_eq!(classify_mask_branch(&a, &m).unwrap(), classify_mask_branch(&b, &m).unwrap());
    }

    #[test]
    fn fusing_model_needs_diffusion_input() {
        let m = OcclusionClassifier::new(&config(Some(8)), 1).unwrap();
        let img = Image::zeros(16, 16, 3);
        assert!(m.predict(&img, None).is_err());
    }

    #[test]
    fn zero_diffusion_matches_backbone_only_path() {
        let fused = OcclusionClassifier::new(&config(Some(8)), 5).unwrap();
        let plain = OcclusionClassifier::new(&config(None), 5).unwrap();
        let img = Image::from_fn(16, 16, 3, |x, y, c| (x * 9 + y * 3 + u32::from(c) * 40) as u8);
        let input = plain.backbone.preprocess(&img).unwrap();
        let a = fused.forward(&input, Some(&[0.0; 8])).unwrap().logits;
        let b = plain.forward(&input, None).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn state_round_trip_is_exact() {
        let m = OcclusionClassifier::new(&config(Some(8)), 3).unwrap();
        let json = serde_json::to_string(&m.state()).unwrap();
        let back = OcclusionClassifier::from_state(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
    }
}
