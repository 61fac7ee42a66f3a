//! End-to-end stereo network and its training loss.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::context::{ContextBundle, ContextEncoder};
use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::nn::{avg_pool2, VarStore};
use crate::refinement::{Refinement, RefinementConfig, RefinementOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub refinement: RefinementConfig,
    /// Per-iteration decay of the sequence loss weights.
    pub loss_gamma: f64,
    /// Ground truth at or above this disparity is left out of the loss.
    pub max_disparity_clip: f64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            refinement: RefinementConfig::toy(),
            loss_gamma: 0.9,
            max_disparity_clip: 192.0,
        }
    }

    pub fn b5() -> Self {
        Self {
            backbone: BackboneConfig::b5(),
            refinement: RefinementConfig::b5(),
            ..Self::toy()
        }
    }

    pub fn b5_truncated() -> Self {
        Self {
            backbone: BackboneConfig::b5_truncated(),
            ..Self::b5()
        }
    }

    /// Look up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "b5" => Ok(Self::b5()),
            "b5_truncated" => Ok(Self::b5_truncated()),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected toy, b5 or b5_truncated)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.refinement.validate()?;
        if !(self.loss_gamma > 0.0 && self.loss_gamma < 1.0) {
            return Err(Error::Config(format!("loss_gamma {} must lie in (0, 1)", self.loss_gamma)));
        }
        if !(self.max_disparity_clip > 0.0) {
            return Err(Error::Config("max_disparity_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// (B, 1, H, W) disparity after each iteration; the last is the prediction.
    pub predictions: Vec<Tensor>,
    pub update_norms: Vec<f64>,
}

impl ModelOutput {
    pub fn last(&self) -> &Tensor {
        self.predictions.last().expect("at least one iteration")
    }
}

#[derive(Clone)]
pub struct StereoModel {
    cfg: ModelConfig,
    vars: VarStore,
    backbone: Backbone,
    context: ContextEncoder,
    refine: Refinement,
}

impl StereoModel {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let vars = VarStore::new(seed, dtype, device.clone());
        let root = vars.root();
        let backbone = Backbone::new(&root.pp("backbone"), &cfg.backbone)?;
        let context = ContextEncoder::new(&root.pp("context"), &cfg.backbone, cfg.refinement.hidden)?;
        let refine = Refinement::new(&root.pp("refine"), &cfg.refinement)?;
        Ok(Self {
            cfg: cfg.clone(),
            vars,
            backbone,
            context,
            refine,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vars
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn refinement(&self) -> &Refinement {
        &self.refine
    }

    pub fn dtype(&self) -> DType {
        self.vars.dtype()
    }

    pub fn device(&self) -> &Device {
        self.vars.device()
    }

    /// Features on the 1/8 grid for both views plus the left context.
    pub fn encode(&self, left: &Tensor, right: &Tensor) -> Result<(Tensor, Tensor, ContextBundle)> {
        if left.dims() != right.dims() {
            return Err(Error::Shape(format!(
                "left {:?} and right {:?} images differ",
                left.dims(),
                right.dims()
            )));
        }
        let b = left.dim(0)?;
        let pyr = self.backbone.extract_features(&Tensor::cat(&[left, right], 0)?)?;
        let (pl, pr) = pyr.split_batch(b)?;
        let ctx = self.context.encode_context(&pl)?;
        Ok((avg_pool2(&pl.fused)?, avg_pool2(&pr.fused)?, ctx))
    }

    /// Run the network on (B, 3, H, W) images in [0, 1].
    pub fn forward(&self, left: &Tensor, right: &Tensor, iterations: usize) -> Result<ModelOutput> {
        let (fl, fr, ctx) = self.encode(left, right)?;
        let RefinementOutput {
            predictions,
            update_norms,
            ..
        } = self.refine.iterate(&fl, &fr, &ctx, iterations)?;
        Ok(ModelOutput {
            predictions,
            update_norms,
        })
    }

    /// Final prediction for one image pair with the evaluation iteration count.
    pub fn predict(&self, left: &RgbImage, right: &RgbImage) -> Result<Array2<f32>> {
        let l = image_to_tensor(left, self.dtype(), self.device())?;
        let r = image_to_tensor(right, self.dtype(), self.device())?;
        let out = self.forward(&l, &r, self.cfg.refinement.iterations_eval)?;
        disparity_to_array(out.last(), 0)
    }
}

/// (1, 3, H, W) tensor with values in [0, 1].
pub fn image_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), device)?.to_dtype(dtype)?)
}

/// Pull one (H, W) disparity map out of a (B, 1, H, W) batch.
pub fn disparity_to_array(t: &Tensor, index: usize) -> Result<Array2<f32>> {
    let (_, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected one disparity channel, got {c}")));
    }
    let v: Vec<f32> = t.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("length matches dims"))
}

/// A training batch: images, ground truth with invalid pixels zeroed, and
/// the loss mask.
#[derive(Clone, Debug)]
pub struct Batch {
    pub left: Tensor,
    pub right: Tensor,
    pub gt: Tensor,
    /// 1 where the pixel contributes to the loss, else 0; u8.
    pub valid: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&StereoSample], max_disparity: f64, dtype: DType, device: &Device) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot build an empty batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut lefts = Vec::with_capacity(samples.len());
        let mut rights = Vec::with_capacity(samples.len());
        let mut gt = Vec::with_capacity(samples.len() * h * w);
        let mut valid = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "batch mixes {h}x{w} and {}x{} samples",
                    s.height(),
                    s.width()
                )));
            }
            lefts.push(image_to_tensor(&s.left, dtype, device)?);
            rights.push(image_to_tensor(&s.right, dtype, device)?);
            for (d, v) in s.gt_disparity.iter().zip(s.valid.iter()) {
                let ok = *v && d.is_finite() && (*d as f64) < max_disparity;
                gt.push(if ok { *d } else { 0.0 });
                valid.push(ok as u8);
            }
        }
        let n = samples.len();
        Ok(Self {
            left: Tensor::cat(&lefts, 0)?,
            right: Tensor::cat(&rights, 0)?,
            gt: Tensor::from_vec(gt, (n, 1, h, w), device)?.to_dtype(dtype)?,
            valid: Tensor::from_vec(valid, (n, 1, h, w), device)?,
        })
    }
}

/// Σ_k γ^(K-1-k) · mean over valid pixels of |pred_k − gt|.
///
/// `valid` is a u8 mask of the same shape as `gt`; invalid pixels are
/// masked out before the residual is taken, so non-finite ground truth
/// there is harmless.
pub fn sequence_loss(predictions: &[Tensor], gt: &Tensor, valid: &Tensor, gamma: f64) -> Result<Tensor> {
    if predictions.is_empty() {
        return Err(Error::Config("sequence loss needs at least one prediction".into()));
    }
    if valid.dims() != gt.dims() {
        return Err(Error::Shape(format!("mask {:?} vs ground truth {:?}", valid.dims(), gt.dims())));
    }
    let n_valid: f64 = valid.to_dtype(DType::F64)?.sum_all()?.to_scalar()?;
    if n_valid == 0.0 {
        return Err(Error::EmptyDomain("sequence loss on a sample with no valid pixels".into()));
    }
    let zeros = gt.zeros_like()?;
    let gt = valid.where_cond(gt, &zeros)?;
    let k = predictions.len();
    let mut total: Option<Tensor> = None;
    for (i, p) in predictions.iter().enumerate() {
        if p.dims() != gt.dims() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", p.dims(), gt.dims())));
        }
        let p = valid.where_cond(p, &zeros)?;
        let weight = gamma.powi((k - 1 - i) as i32);
        let term = ((p - &gt)?.abs()?.sum_all()? * (weight / n_valid))?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}
