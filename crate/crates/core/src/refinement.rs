//! Recurrent disparity refinement with structural context post-fusion.
//!
//! Three convolutional GRUs run at 1/32, 1/16 and 1/8 of the input size.
//! At every step the gate inputs are the correlation samples, the current
//! disparity and the left-image context triple, and the same triple is added
//! again as a residual inside each gate:
//!
//! ```text
//! x  = [corr, d, c_k, c_r, c_h]
//! z  = σ(Conv([h, x]) + c_k)
//! r  = σ(Conv([h, x]) + c_r)
//! h~ = tanh(Conv([r ⊙ h, x]) + c_h)
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```
//!
//! Disparity updates are decoded coarse to fine, each finer decoder seeing
//! the ×2-interpolated coarser update, and the finest update is added to the
//! disparity on the 1/8 grid.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::context::{ContextBundle, ContextLevel, GRU_SCALES};
use crate::correlation::{build_pyramid, lookup, CorrelationPyramid, DEFAULT_LEVELS, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::nn::{all_finite, avg_pool2, im2col_same, resize_bilinear, sigmoid, Conv2d, Path};

/// Ratio between the input resolution and the finest recurrent grid.
pub const UPSAMPLE_FACTOR: usize = 8;

/// Where the left-image context enters the recurrent update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Context in the gate input concatenation and as gate residuals.
    Full,
    /// Context only as gate residuals; its slots in the input are zero.
    ResidualOnly,
    /// No context anywhere (including the initial hidden state).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementConfig {
    /// Hidden channels D_h at every resolution.
    pub hidden: usize,
    pub iterations_train: usize,
    pub iterations_eval: usize,
    pub fusion_mode: FusionMode,
    pub decoder_channels: usize,
    pub corr_levels: usize,
    pub corr_radius: usize,
    /// Stop gradients through the correlation sampling positions and the
    /// disparity fed back into the next step.
    pub detach_coords: bool,
}

impl RefinementConfig {
    pub fn b5() -> Self {
        Self {
            hidden: 96,
            decoder_channels: 128,
            ..Self::toy()
        }
    }

    pub fn toy() -> Self {
        Self {
            hidden: 32,
            iterations_train: 22,
            iterations_eval: 32,
            fusion_mode: FusionMode::Full,
            decoder_channels: 32,
            corr_levels: DEFAULT_LEVELS,
            corr_radius: DEFAULT_RADIUS,
            detach_coords: true,
        }
    }

    pub fn fusion_enabled(&self) -> bool {
        self.fusion_mode != FusionMode::None
    }

    pub fn with_fusion(mut self, enabled: bool) -> Self {
        self.fusion_mode = if enabled { FusionMode::Full } else { FusionMode::None };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations_train == 0 || self.iterations_eval == 0 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        if self.hidden == 0 || self.decoder_channels == 0 || self.corr_levels == 0 {
            return Err(Error::Config(
                "hidden, decoder_channels and corr_levels must be positive".into(),
            ));
        }
        Ok(())
    }

    fn corr_channels(&self) -> usize {
        self.corr_levels * (2 * self.corr_radius + 1)
    }

    /// Width of x_k (without the coarser hidden-state block).
    pub fn input_channels(&self) -> usize {
        self.corr_channels() + 1 + 3 * self.hidden
    }
}

/// The three context maps added inside the gates.
#[derive(Clone, Copy, Debug)]
pub struct GateContext<'a> {
    pub ck: &'a Tensor,
    pub cr: &'a Tensor,
    pub ch: &'a Tensor,
}

impl<'a> GateContext<'a> {
    pub fn from_level(level: &'a ContextLevel) -> Self {
        Self {
            ck: &level.ck,
            cr: &level.cr,
            ch: &level.ch,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvGru {
    convz: Conv2d,
    convr: Conv2d,
    convq: Conv2d,
    hidden: usize,
}

/// Gate activations of one step.
#[derive(Clone, Debug)]
pub struct GruGates {
    pub z: Tensor,
    pub r: Tensor,
    pub candidate: Tensor,
}

impl ConvGru {
    pub fn new(path: &Path, hidden: usize, input: usize) -> Result<Self> {
        Ok(Self {
            convz: Conv2d::new(&path.pp("convz"), hidden + input, hidden, 3, 1, 1)?,
            convr: Conv2d::new(&path.pp("convr"), hidden + input, hidden, 3, 1, 1)?,
            convq: Conv2d::new(&path.pp("convq"), hidden + input, hidden, 3, 1, 1)?,
            hidden,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.convz.in_channels() - self.hidden
    }

    fn check(&self, h: &Tensor, x: &Tensor, ctx: Option<&GateContext>) -> Result<()> {
        let hc = h.dim(1)?;
        if hc != self.hidden {
            return Err(Error::Shape(format!("hidden state has {hc} channels, GRU expects {}", self.hidden)));
        }
        let xc = x.dim(1)?;
        if xc != self.input_channels() {
            return Err(Error::Shape(format!(
                "GRU input has {xc} channels, expected {}",
                self.input_channels()
            )));
        }
        if let Some(c) = ctx {
            for (name, t) in [("c_k", c.ck), ("c_r", c.cr), ("c_h", c.ch)] {
                if t.dims() != h.dims() {
                    return Err(Error::Shape(format!(
                        "context {name} {:?} does not match hidden state {:?}",
                        t.dims(),
                        h.dims()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn gates(&self, h: &Tensor, x: &Tensor, ctx: Option<&GateContext>) -> Result<GruGates> {
        self.check(h, x, ctx)?;
        let (b, _, hh, ww) = h.dims4()?;
        let hx = im2col_same(&Tensor::cat(&[h, x], 1)?, 3)?;
        let mut zp = self.convz.forward_unfolded(&hx, b, hh, ww)?;
        let mut rp = self.convr.forward_unfolded(&hx, b, hh, ww)?;
        if let Some(c) = ctx {
            zp = (zp + c.ck)?;
            rp = (rp + c.cr)?;
        }
        let z = sigmoid(&zp)?;
        let r = sigmoid(&rp)?;
        let rhx = Tensor::cat(&[&(&r * h)?, x], 1)?;
        let mut qp = self.convq.forward(&rhx)?;
        if let Some(c) = ctx {
            qp = (qp + c.ch)?;
        }
        Ok(GruGates {
            z,
            r,
            candidate: qp.tanh()?,
        })
    }

    /// One gated update. `ctx = None` is the plain gated update without
    /// context residuals.
    pub fn gru_step(&self, h: &Tensor, x: &Tensor, ctx: Option<&GateContext>) -> Result<Tensor> {
        let g = self.gates(h, x, ctx)?;
        let keep = (g.z.ones_like()? - &g.z)?;
        Ok(((keep * h)? + (&g.z * &g.candidate)?)?)
    }
}

/// Two convolutions ending in a single disparity-update channel.
#[derive(Clone, Debug)]
pub struct UpdateDecoder {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl UpdateDecoder {
    pub fn new(path: &Path, hidden: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&path.pp("conv1"), hidden, channels, 3, 1, 1)?,
            conv2: Conv2d::new(&path.pp("conv2"), channels, 1, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        self.conv2.forward(&self.conv1.forward(h)?.relu()?)
    }
}

/// Predicts 3×3 softmax weights per fine pixel and reconstructs the full
/// resolution disparity as a convex combination of the coarse neighbourhood,
/// multiplied by the upsampling factor.
#[derive(Clone, Debug)]
pub struct ConvexUpsampler {
    conv1: Conv2d,
    conv2: Conv2d,
    factor: usize,
}

impl ConvexUpsampler {
    pub fn new(path: &Path, hidden: usize, channels: usize, factor: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&path.pp("conv1"), hidden, channels, 3, 1, 1)?,
            conv2: Conv2d::new(&path.pp("conv2"), channels, 9 * factor * factor, 1, 1, 0)?,
            factor,
        })
    }

    pub fn mask(&self, h: &Tensor) -> Result<Tensor> {
        Ok((self.conv2.forward(&self.conv1.forward(h)?.relu()?)? * 0.25)?)
    }

    pub fn forward(&self, disparity: &Tensor, h: &Tensor) -> Result<Tensor> {
        convex_upsample(disparity, &self.mask(h)?, self.factor)
    }
}

/// `disparity` (B, 1, H, W), `mask` logits (B, 9·f², H, W) -> (B, 1, f·H, f·W).
pub fn convex_upsample(disparity: &Tensor, mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, _, h, w) = disparity.dims4()?;
    let f = factor;
    let mask = mask.reshape((b, 9, f * f, h, w))?;
    let max = mask.max_keepdim(1)?.detach();
    let e = mask.broadcast_sub(&max)?.exp()?;
    let weights = e.broadcast_div(&e.sum_keepdim(1)?)?;
    // replicate-padded 3×3 neighbourhoods of the scaled disparity
    let scaled = (disparity * f as f64)?;
    let padded = scaled.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut taps = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            taps.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    let nb = Tensor::cat(&taps, 1)?.reshape((b, 9, 1, h, w))?;
    let up = weights.broadcast_mul(&nb)?.sum(1)?; // B, f², H, W
    let up = up
        .reshape((b, f, f, h, w))?
        .permute((0, 3, 1, 4, 2))?
        .contiguous()?
        .reshape((b, 1, h * f, w * f))?;
    Ok(up)
}

/// Per-resolution hidden states and the 1/8-grid disparity.
#[derive(Clone, Debug)]
pub struct RefinementState {
    /// Ordered as [`GRU_SCALES`].
    pub hidden: [Tensor; 3],
    pub disparity: Tensor,
    pub iteration: usize,
}

#[derive(Clone, Debug)]
pub struct RefinementOutput {
    /// Full-resolution disparity after each iteration.
    pub predictions: Vec<Tensor>,
    /// max |Δd| on the 1/8 grid for each iteration, in full-resolution px.
    pub update_norms: Vec<f64>,
    pub state: RefinementState,
}

#[derive(Clone, Debug)]
pub struct Refinement {
    cfg: RefinementConfig,
    grus: [ConvGru; 3],
    decoders: [UpdateDecoder; 3],
    proj16: Conv2d,
    proj8: Conv2d,
    upsample: ConvexUpsampler,
}

impl Refinement {
    pub fn new(path: &Path, cfg: &RefinementConfig) -> Result<Self> {
        cfg.validate()?;
        let x = cfg.input_channels();
        let hd = cfg.hidden;
        let res = |s: usize| path.pp(format!("res{s}"));
        Ok(Self {
            cfg: cfg.clone(),
            grus: [
                ConvGru::new(&res(8).pp("gru"), hd, x + hd)?,
                ConvGru::new(&res(16).pp("gru"), hd, x + hd)?,
                ConvGru::new(&res(32).pp("gru"), hd, x)?,
            ],
            decoders: [
                UpdateDecoder::new(&res(8).pp("decoder"), hd, cfg.decoder_channels)?,
                UpdateDecoder::new(&res(16).pp("decoder"), hd, cfg.decoder_channels)?,
                UpdateDecoder::new(&res(32).pp("decoder"), hd, cfg.decoder_channels)?,
            ],
            proj16: Conv2d::new(&path.pp("proj16"), 1, hd, 1, 1, 0)?,
            proj8: Conv2d::new(&path.pp("proj8"), 1, hd, 1, 1, 0)?,
            upsample: ConvexUpsampler::new(&path.pp("upsample"), hd, cfg.decoder_channels, UPSAMPLE_FACTOR)?,
        })
    }

    pub fn config(&self) -> &RefinementConfig {
        &self.cfg
    }

    pub fn gru(&self, scale: usize) -> &ConvGru {
        &self.grus[scale_index(scale)]
    }

    pub fn upsampler(&self) -> &ConvexUpsampler {
        &self.upsample
    }

    /// Multi-scale update decoding, hidden states ordered as [`GRU_SCALES`].
    /// Returns the updates in the same order.
    pub fn decode_updates(&self, hidden: &[Tensor; 3]) -> Result<[Tensor; 3]> {
        let d32 = self.decoders[2].forward(&hidden[2])?;
        let up = upsample2(&d32)?;
        let d16 = self.decoders[1].forward(&(&hidden[1] + self.proj16.forward(&up)?)?)?;
        let up = upsample2(&d16)?;
        let d8 = self.decoders[0].forward(&(&hidden[0] + self.proj8.forward(&up)?)?)?;
        Ok([d8, d16, d32])
    }

    /// Initial state: tanh context hidden states (zeros when fusion is off)
    /// and zero disparity on the 1/8 grid.
    pub fn initial_state(&self, ctx: &ContextBundle) -> Result<RefinementState> {
        let hidden = match self.cfg.fusion_mode {
            FusionMode::None => [
                ctx.levels[0].h0.zeros_like()?,
                ctx.levels[1].h0.zeros_like()?,
                ctx.levels[2].h0.zeros_like()?,
            ],
            _ => [
                ctx.levels[0].h0.clone(),
                ctx.levels[1].h0.clone(),
                ctx.levels[2].h0.clone(),
            ],
        };
        let (b, _, h, w) = hidden[0].dims4()?;
        let disparity = Tensor::zeros((b, 1, h, w), hidden[0].dtype(), hidden[0].device())?;
        Ok(RefinementState {
            hidden,
            disparity,
            iteration: 0,
        })
    }

    /// One refinement iteration in place; returns the full-resolution
    /// disparity and the finest update.
    pub fn step(
        &self,
        pyramid: &CorrelationPyramid,
        ctx: &ContextBundle,
        state: &mut RefinementState,
    ) -> Result<(Tensor, Tensor)> {
        let k = state.iteration;
        let d = if self.cfg.detach_coords {
            state.disparity.detach()
        } else {
            state.disparity.clone()
        };
        let corr8 = lookup(pyramid, &d, self.cfg.corr_radius, self.cfg.detach_coords)?;
        let corr16 = avg_pool2(&corr8)?;
        let corr32 = avg_pool2(&corr16)?;
        // disparity expressed in each grid's own pixel units
        let d16 = (avg_pool2(&d)? * 0.5)?;
        let d32 = (avg_pool2(&d16)? * 0.5)?;

        let in_concat = self.cfg.fusion_mode == FusionMode::Full;
        let residual = self.cfg.fusion_mode != FusionMode::None;
        let gate_input = |corr: &Tensor, disp: &Tensor, lvl: &ContextLevel| -> Result<Tensor> {
            if in_concat {
                Ok(Tensor::cat(&[corr, disp, &lvl.ck, &lvl.cr, &lvl.ch], 1)?)
            } else {
                let z = lvl.ck.zeros_like()?;
                Ok(Tensor::cat(&[corr, disp, &z, &z, &z], 1)?)
            }
        };
        let gctx: Vec<GateContext> = ctx.levels.iter().map(GateContext::from_level).collect();
        let pick = |i: usize| if residual { Some(&gctx[i]) } else { None };

        let x32 = gate_input(&corr32, &d32, &ctx.levels[2])?;
        let h32 = self.grus[2].gru_step(&state.hidden[2], &x32, pick(2))?;
        self.check_finite(&h32, k, 32, "hidden state")?;

        let x16 = gate_input(&corr16, &d16, &ctx.levels[1])?;
        let x16 = Tensor::cat(&[&x16, &upsample2(&h32)?], 1)?;
        let h16 = self.grus[1].gru_step(&state.hidden[1], &x16, pick(1))?;
        self.check_finite(&h16, k, 16, "hidden state")?;

        let x8 = gate_input(&corr8, &d, &ctx.levels[0])?;
        let x8 = Tensor::cat(&[&x8, &upsample2(&h16)?], 1)?;
        let h8 = self.grus[0].gru_step(&state.hidden[0], &x8, pick(0))?;
        self.check_finite(&h8, k, 8, "hidden state")?;

        state.hidden = [h8, h16, h32];
        let [delta8, _, _] = self.decode_updates(&state.hidden)?;
        let next = (&d + &delta8)?;
        self.check_finite(&next, k, 8, "disparity")?;
        let full = self.upsample.forward(&next, &state.hidden[0])?;
        state.disparity = next;
        state.iteration += 1;
        Ok((full, delta8))
    }

    fn check_finite(&self, t: &Tensor, iteration: usize, resolution: usize, what: &str) -> Result<()> {
        if all_finite(t)? {
            Ok(())
        } else {
            Err(Error::NonFinite {
                iteration,
                resolution,
                what: what.to_string(),
            })
        }
    }

    /// Run the loop from left/right features on the 1/8 grid.
    pub fn iterate(
        &self,
        f_left: &Tensor,
        f_right: &Tensor,
        ctx: &ContextBundle,
        iterations: usize,
    ) -> Result<RefinementOutput> {
        if iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        let pyramid = build_pyramid(f_left, f_right, self.cfg.corr_levels)?;
        let mut state = self.initial_state(ctx)?;
        if state.disparity.dims()[2..] != f_left.dims()[2..] {
            return Err(Error::Shape(format!(
                "context grid {:?} does not match correlation grid {:?}",
                state.disparity.dims(),
                f_left.dims()
            )));
        }
        let mut predictions = Vec::with_capacity(iterations);
        let mut update_norms = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (full, delta) = self.step(&pyramid, ctx, &mut state)?;
            let norm: f64 = delta
                .detach()
                .abs()?
                .max_all()?
                .to_dtype(DType::F64)?
                .to_scalar()?;
            update_norms.push(norm * UPSAMPLE_FACTOR as f64);
            predictions.push(full);
        }
        Ok(RefinementOutput {
            predictions,
            update_norms,
            state,
        })
    }
}

fn scale_index(scale: usize) -> usize {
    GRU_SCALES
        .iter()
        .position(|s| *s == scale)
        .unwrap_or_else(|| panic!("no recurrent grid at 1/{scale}"))
}

/// ×2 bilinear interpolation.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};

    fn rand_t(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    fn gru(vs: &VarStore) -> ConvGru {
        ConvGru::new(&vs.root().pp("g"), 4, 6).unwrap()
    }

    #[test]
    fn saturated_update_gate() {
        let vs = VarStore::new(1, DType::F64, Device::Cpu);
        let g = gru(&vs);
        let h = rand_t(&[1, 4, 3, 5], 1, 0.9);
        let x = rand_t(&[1, 6, 3, 5], 2, 1.0);
        let c = rand_t(&[1, 4, 3, 5], 3, 0.5);
        let ctx = GateContext { ck: &c, cr: &c, ch: &c };

        vs.assign("g.convz.bias", &Tensor::full(-1e4f64, 4, &Device::Cpu).unwrap()).unwrap();
        let next = g.gru_step(&h, &x, Some(&ctx)).unwrap();
        assert_eq!(max_abs(&(&next - &h).unwrap()), 0.0);

        vs.assign("g.convz.bias", &Tensor::full(1e4f64, 4, &Device::Cpu).unwrap()).unwrap();
        let next = g.gru_step(&h, &x, Some(&ctx)).unwrap();
        let cand = g.gates(&h, &x, Some(&ctx)).unwrap().candidate;
        assert_eq!(max_abs(&(&next - &cand).unwrap()), 0.0);
    }

    #[test]
    fn context_channel_mismatch_rejected() {
        let vs = VarStore::new(1, DType::F64, Device::Cpu);
        let g = gru(&vs);
        let h = rand_t(&[1, 4, 3, 5], 1, 0.9);
        let x = rand_t(&[1, 6, 3, 5], 2, 1.0);
        let c = rand_t(&[1, 3, 3, 5], 3, 0.5);
        let ctx = GateContext { ck: &c, cr: &c, ch: &c };
        assert!(matches!(g.gru_step(&h, &x, Some(&ctx)), Err(Error::Shape(_))));
        let bad_x = rand_t(&[1, 5, 3, 5], 2, 1.0);
        assert!(matches!(g.gru_step(&h, &bad_x, None), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_scales_and_zero_state() {
        let vs = VarStore::new(2, DType::F64, Device::Cpu);
        let r = Refinement::new(&vs.root().pp("refine"), &RefinementConfig::toy()).unwrap();
        let hs = [
            rand_t(&[1, 32, 8, 16], 1, 1.0),
            rand_t(&[1, 32, 4, 8], 2, 1.0),
            rand_t(&[1, 32, 2, 4], 3, 1.0),
        ];
        let out = r.decode_updates(&hs).unwrap();
        assert_eq!(out[0].dims(), &[1, 1, 8, 16]);
        assert_eq!(out[1].dims(), &[1, 1, 4, 8]);
        assert_eq!(out[2].dims(), &[1, 1, 2, 4]);

        for (name, var) in vs.named_vars() {
            if name.ends_with("bias") && (name.contains("decoder") || name.contains("proj")) {
                vs.assign(&name, &var.zeros_like().unwrap()).unwrap();
            }
        }
        let zeros = [hs[0].zeros_like().unwrap(), hs[1].zeros_like().unwrap(), hs[2].zeros_like().unwrap()];
        for d in r.decode_updates(&zeros).unwrap() {
            assert_eq!(max_abs(&d), 0.0);
        }
    }

    #[test]
    fn interpolating_a_constant() {
        let x = Tensor::full(-1.75f64, (2, 1, 3, 4), &Device::Cpu).unwrap();
        let y = upsample2(&x).unwrap();
        assert_eq!(y.dims(), &[2, 1, 6, 8]);
        assert!(max_abs(&(y + 1.75).unwrap()) < 1e-12);
    }

    #[test]
    fn convex_upsampling_scales_constant_field() {
        let d = Tensor::full(1.5f64, (1, 1, 3, 4), &Device::Cpu).unwrap();
        let mask = rand_t(&[1, 9 * 64, 3, 4], 4, 3.0);
        let up = convex_upsample(&d, &mask, 8).unwrap();
        assert_eq!(up.dims(), &[1, 1, 24, 32]);
        assert!(max_abs(&(up - 12.0).unwrap()) < 1e-12);
    }

    #[test]
    fn convex_upsampling_is_a_convex_combination() {
        let d = rand_t(&[1, 1, 3, 4], 5, 4.0);
        let mask = rand_t(&[1, 9 * 4, 3, 4], 6, 3.0);
        let up = convex_upsample(&d, &mask, 2).unwrap();
        let lo: f64 = (d.min_all().unwrap().to_scalar::<f64>().unwrap()) * 2.0;
        let hi: f64 = (d.max_all().unwrap().to_scalar::<f64>().unwrap()) * 2.0;
        let v: Vec<f64> = up.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12));
    }

    #[test]
    fn config_validation() {
        let mut c = RefinementConfig::toy();
        c.iterations_eval = 0;
        assert!(c.validate().is_err());
        assert!(RefinementConfig::toy().with_fusion(false).fusion_mode == FusionMode::None);
        assert_eq!(RefinementConfig::toy().input_channels(), 36 + 1 + 96);
    }
}
