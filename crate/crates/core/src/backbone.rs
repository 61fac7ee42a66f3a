//! Four-stage transformer feature extractor.
//!
//! Each stage tokenizes its input with an overlapping strided convolution,
//! runs pre-norm transformer blocks whose attention attends to a spatially
//! reduced key/value set, and mixes position information in with a
//! depth-wise convolution inside the feed-forward branch. The four stage
//! outputs (1/4 .. 1/32 scale) are fused at 1/4 scale by bilinear upsampling,
//! channel concatenation and a 1×1 convolution.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Conv2d, DepthwiseConv3x3, LayerNorm, Linear, Path};

pub const NUM_STAGES: usize = 4;
/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_depths: [usize; NUM_STAGES],
    pub stage_channels: [usize; NUM_STAGES],
    /// Key/value token reduction ratio R per stage.
    pub stage_reduction: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub patch_kernel: [usize; NUM_STAGES],
    pub patch_stride: [usize; NUM_STAGES],
    pub patch_padding: [usize; NUM_STAGES],
    pub fused_channels: usize,
    pub mlp_ratio: usize,
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
}

impl BackboneConfig {
    /// Reference configuration.
    pub fn b5() -> Self {
        Self {
            stage_depths: [3, 6, 40, 3],
            stage_channels: [64, 128, 320, 512],
            stage_reduction: [64, 16, 4, 1],
            num_heads: [1, 2, 5, 8],
            fused_channels: 128,
            ..Self::toy()
        }
    }

    /// `b5` widths with one block per stage.
    pub fn b5_truncated() -> Self {
        Self {
            stage_depths: [1, 1, 1, 1],
            ..Self::b5()
        }
    }

    /// Desk-scale configuration used for tests and the acceptance runs.
    pub fn toy() -> Self {
        Self {
            stage_depths: [1, 1, 1, 1],
            stage_channels: [8, 16, 24, 32],
            stage_reduction: [16, 4, 2, 1],
            num_heads: [1, 1, 2, 4],
            patch_kernel: [7, 3, 3, 3],
            patch_stride: [4, 2, 2, 2],
            patch_padding: [3, 1, 1, 1],
            fused_channels: 32,
            mlp_ratio: 4,
            input_mean: [0.5; 3],
            input_std: [0.5; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for i in 0..NUM_STAGES {
            if self.stage_depths[i] == 0 || self.stage_channels[i] == 0 || self.num_heads[i] == 0 {
                return bad(format!("stage {} has a zero depth, width or head count", i + 1));
            }
            if self.stage_channels[i] % self.num_heads[i] != 0 {
                return bad(format!(
                    "stage {} channels {} not divisible by {} heads",
                    i + 1,
                    self.stage_channels[i],
                    self.num_heads[i]
                ));
            }
            if self.stage_reduction[i] == 0 {
                return bad(format!("stage {} reduction ratio must be >= 1", i + 1));
            }
            if i > 0 && self.stage_channels[i] < self.stage_channels[i - 1] {
                return bad("stage channels must be nondecreasing".into());
            }
            if self.patch_kernel[i] <= self.patch_stride[i] {
                return bad(format!("stage {} patch kernel must exceed its stride", i + 1));
            }
        }
        if self.patch_stride != [4, 2, 2, 2] {
            return bad("patch strides must produce the 1/4..1/32 scale chain [4,2,2,2]".into());
        }
        if self.fused_channels == 0 || self.mlp_ratio == 0 {
            return bad("fused_channels and mlp_ratio must be positive".into());
        }
        if self.input_std.iter().any(|s| *s <= 0.0) {
            return bad("input_std must be positive".into());
        }
        Ok(())
    }

    /// Downsampling factor (relative to the input) at the output of stage `i`.
    pub fn stage_scale(&self, i: usize) -> usize {
        self.patch_stride[..=i].iter().product()
    }
}

/// Split a reduction ratio into a (rows, cols) patch with rows·cols = R,
/// as square as possible.
pub fn reduction_patch(ratio: usize) -> (usize, usize) {
    let mut rows = (ratio as f64).sqrt().floor() as usize;
    while rows > 1 && ratio % rows != 0 {
        rows -= 1;
    }
    (rows.max(1), ratio / rows.max(1))
}

/// (B, C, H, W) -> (B, H·W, C)
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// (B, H·W, C) -> (B, C, H, W)
pub fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens cannot form a {h}x{w} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::Dimension(format!(
            "input {h}x{w}: height and width must be positive multiples of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct OverlapPatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl OverlapPatchEmbed {
    pub fn new(
        path: &Path,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&path.pp("proj"), in_ch, out_ch, kernel, stride, padding)?,
            norm: LayerNorm::new(&path.pp("norm"), out_ch)?,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    /// Convolution only, returning an NCHW map (no token normalization).
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(x)
    }

    /// Returns normalized tokens (B, N, C) and the token grid size.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.proj.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        let tokens = self.norm.forward(&map_to_tokens(&y)?)?;
        Ok((tokens, h, w))
    }
}

/// Multi-head attention whose keys and values come from a token set reduced
/// by ratio R: each (ph × pw) patch of tokens is reshaped into one token of
/// width C·R, then linearly mapped back to width C.
#[derive(Clone, Debug)]
pub struct EfficientSelfAttention {
    q: Linear,
    reduce: Option<(Linear, LayerNorm)>,
    k: Linear,
    v: Linear,
    proj: Linear,
    heads: usize,
    ratio: usize,
}

impl EfficientSelfAttention {
    pub fn new(path: &Path, channels: usize, heads: usize, ratio: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        let reduce = if ratio > 1 {
            Some((
                Linear::new(&path.pp("reduce"), channels * ratio, channels)?,
                LayerNorm::new(&path.pp("reduce_norm"), channels)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&path.pp("q"), channels, channels)?,
            reduce,
            k: Linear::new(&path.pp("k"), channels, channels)?,
            v: Linear::new(&path.pp("v"), channels, channels)?,
            proj: Linear::new(&path.pp("proj"), channels, channels)?,
            heads,
            ratio,
        })
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    /// Reshape (B, N, C) tokens on an h×w grid to (B, N/R, C·R).
    pub fn reshape_reduce(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        if n != h * w {
            return Err(Error::Shape(format!("{n} tokens cannot form a {h}x{w} grid")));
        }
        let (ph, pw) = reduction_patch(self.ratio);
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::Dimension(format!(
                "token grid {h}x{w} not divisible by the {ph}x{pw} reduction patch (R={})",
                self.ratio
            )));
        }
        let x = x
            .reshape((b, h / ph, ph, w / pw, pw, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?;
        Ok(x.reshape((b, n / self.ratio, c * self.ratio))?)
    }

    /// Reduced keys/values source: (B, N/R, C).
    pub fn reduced_tokens(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        match &self.reduce {
            Some((lin, norm)) => {
                let wide = self.reshape_reduce(x, h, w)?;
                norm.forward(&lin.forward(&wide)?)
            }
            None => Ok(x.clone()),
        }
    }

    /// Output tokens and attention weights (B, heads, N, N/R).
    pub fn forward_with_weights(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let kv_src = self.reduced_tokens(x, h, w)?;
        let m = kv_src.dim(1)?;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, n)?;
        let k = split(self.k.forward(&kv_src)?, m)?;
        let v = split(self.v.forward(&kv_src)?, m)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let weights = softmax_last(&scores)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        Ok((self.proj.forward(&out)?, weights))
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, h, w)?.0)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Feed-forward branch with a depth-wise 3×3 convolution between the two
/// linear layers, which supplies position information without positional
/// embeddings.
#[derive(Clone, Debug)]
pub struct MixFfn {
    fc1: Linear,
    dw: DepthwiseConv3x3,
    fc2: Linear,
}

impl MixFfn {
    pub fn new(path: &Path, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&path.pp("fc1"), channels, hidden)?,
            dw: DepthwiseConv3x3::new(&path.pp("dw"), hidden)?,
            fc2: Linear::new(&path.pp("fc2"), hidden, channels)?,
        })
    }

    /// MLP(GELU(DWConv(MLP(x)))) without the residual.
    pub fn branch(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let y = tokens_to_map(&y, h, w)?;
        let y = self.dw.forward(&y)?;
        let y = map_to_tokens(&y)?.gelu_erf()?;
        self.fc2.forward(&y)
    }

    /// Full Mix-FFN including the residual connection.
    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok((x + self.branch(x, h, w)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: EfficientSelfAttention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl TransformerBlock {
    pub fn new(path: &Path, channels: usize, heads: usize, ratio: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&path.pp("attn").pp("norm"), channels)?,
            attn: EfficientSelfAttention::new(&path.pp("attn"), channels, heads, ratio)?,
            norm2: LayerNorm::new(&path.pp("ffn").pp("norm"), channels)?,
            ffn: MixFfn::new(&path.pp("ffn"), channels, channels * mlp_ratio)?,
        })
    }

    pub fn attention(&self) -> &EfficientSelfAttention {
        &self.attn
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        let y = self.ffn.branch(&self.norm2.forward(&x)?, h, w)?;
        Ok((x + y)?)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    embed: OverlapPatchEmbed,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Stage {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mut t, h, w) = self.embed.forward(x)?;
        for block in &self.blocks {
            t = block.forward(&t, h, w)?;
        }
        tokens_to_map(&self.norm.forward(&t)?, h, w)
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }
}

/// Per-stage maps and the fused 1/4-scale map, all NCHW.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
    pub f32: Tensor,
    pub fused: Tensor,
}

impl FeaturePyramid {
    /// Split a pyramid computed on a concatenated batch into two halves.
    pub fn split_batch(&self, first: usize) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let half = |t: &Tensor| -> Result<(Tensor, Tensor)> {
            let n = t.dim(0)?;
            Ok((t.narrow(0, 0, first)?, t.narrow(0, first, n - first)?))
        };
        let (a4, b4) = half(&self.f4)?;
        let (a8, b8) = half(&self.f8)?;
        let (a16, b16) = half(&self.f16)?;
        let (a32, b32) = half(&self.f32)?;
        let (af, bf) = half(&self.fused)?;
        Ok((
            FeaturePyramid { f4: a4, f8: a8, f16: a16, f32: a32, fused: af },
            FeaturePyramid { f4: b4, f8: b8, f16: b16, f32: b32, fused: bf },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
    fuse: Conv2d,
}

impl Backbone {
    pub fn new(path: &Path, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut in_ch = 3;
        for i in 0..NUM_STAGES {
            let sp = path.pp(format!("stage{}", i + 1));
            let ch = cfg.stage_channels[i];
            let embed = OverlapPatchEmbed::new(
                &sp.pp("embed"),
                in_ch,
                ch,
                cfg.patch_kernel[i],
                cfg.patch_stride[i],
                cfg.patch_padding[i],
            )?;
            let blocks = (0..cfg.stage_depths[i])
                .map(|j| {
                    TransformerBlock::new(
                        &sp.pp(format!("block{j}")),
                        ch,
                        cfg.num_heads[i],
                        cfg.stage_reduction[i],
                        cfg.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&sp.pp("norm"), ch)?;
            stages.push(Stage { embed, blocks, norm });
            in_ch = ch;
        }
        let total: usize = cfg.stage_channels.iter().sum();
        let fuse = Conv2d::new(&path.pp("fuse"), total, cfg.fused_channels, 1, 1, 0)?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            fuse,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Map [0, 1] RGB to the configured normalized range.
    pub fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        let dev = image.device();
        let dt = image.dtype();
        let mean = Tensor::new(&self.cfg.input_mean, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&self.cfg.input_std, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        Ok(image.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Extract the pyramid from a batch of [0, 1] RGB images (B, 3, H, W).
    pub fn extract_features(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        check_divisible(h, w)?;
        let mut x = self.normalize(image)?;
        let mut maps = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            x = stage.forward(&x)?;
            maps.push(x.clone());
        }
        let (_, _, h4, w4) = maps[0].dims4()?;
        let mut cat = vec![maps[0].clone()];
        for m in &maps[1..] {
            cat.push(resize_bilinear(m, h4, w4)?);
        }
        let fused = self.fuse.forward(&Tensor::cat(&cat, 1)?)?;
        let mut it = maps.into_iter();
        Ok(FeaturePyramid {
            f4: it.next().expect("stage 1"),
            f8: it.next().expect("stage 2"),
            f16: it.next().expect("stage 3"),
            f32: it.next().expect("stage 4"),
            fused,
        })
    }
}

/// Stage-1 tokenization of a raw image, rejecting sizes the rest of the
/// network cannot handle.
pub fn overlap_patch_embed(embed: &OverlapPatchEmbed, image: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = image.dims4()?;
    check_divisible(h, w)?;
    embed.project(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use candle_core::{DType, Device};

    fn vs() -> VarStore {
        VarStore::new(11, DType::F64, Device::Cpu)
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn patch_embed_scale_arithmetic() {
        let store = vs();
        let e = OverlapPatchEmbed::new(&store.root().pp("e"), 3, 8, 7, 4, 3).unwrap();
        let y = overlap_patch_embed(&e, &rand(&[1, 3, 64, 128], 1)).unwrap();
        assert_eq!(y.dims(), &[1, 8, 16, 32]);
        let y = overlap_patch_embed(&e, &rand(&[1, 3, 32, 32], 2)).unwrap();
        assert_eq!(y.dims(), &[1, 8, 8, 8]);
        assert_eq!(e.output_size(32, 32), (8, 8));
    }

    #[test]
    fn patch_embed_of_zero_image_is_bias() {
        let store = vs();
        let e = OverlapPatchEmbed::new(&store.root().pp("e"), 3, 5, 7, 4, 3).unwrap();
        let y = overlap_patch_embed(&e, &Tensor::zeros((1, 3, 32, 64), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let bias: Vec<f64> = store.get("e.proj.bias").unwrap().to_vec1().unwrap();
        let y: Vec<Vec<Vec<f64>>> = y.squeeze(0).unwrap().to_vec3().unwrap();
        for (c, plane) in y.iter().enumerate() {
            for row in plane {
                for v in row {
                    assert!((v - bias[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn patch_embed_rejects_bad_dims() {
        let store = vs();
        let e = OverlapPatchEmbed::new(&store.root().pp("e"), 3, 5, 7, 4, 3).unwrap();
        let err = overlap_patch_embed(&e, &rand(&[1, 3, 48, 64], 3)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn attention_reduction_arithmetic() {
        let store = vs();
        let a = EfficientSelfAttention::new(&store.root().pp("a"), 8, 1, 4).unwrap();
        let x = rand(&[1, 256, 8], 4);
        let wide = a.reshape_reduce(&x, 16, 16).unwrap();
        assert_eq!(wide.dims(), &[1, 64, 32]);
        assert_eq!(a.reduced_tokens(&x, 16, 16).unwrap().dims(), &[1, 64, 8]);
        let (y, w) = a.forward_with_weights(&x, 16, 16).unwrap();
        assert_eq!(y.dims(), &[1, 256, 8]);
        assert_eq!(w.dims(), &[1, 1, 256, 64]);
    }

    #[test]
    fn attention_identity_reduction() {
        let store = vs();
        let a = EfficientSelfAttention::new(&store.root().pp("a"), 8, 2, 1).unwrap();
        let x = rand(&[2, 12, 8], 5);
        let (y, w) = a.forward_with_weights(&x, 3, 4).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert_eq!(w.dims(), &[2, 2, 12, 12]);
    }

    #[test]
    fn attention_rejects_indivisible_grid() {
        let store = vs();
        let a = EfficientSelfAttention::new(&store.root().pp("a"), 8, 1, 4).unwrap();
        let x = rand(&[1, 15, 8], 6);
        assert!(matches!(a.forward(&x, 3, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let store = vs();
        let a = EfficientSelfAttention::new(&store.root().pp("a"), 8, 2, 4).unwrap();
        let x = rand(&[1, 64, 8], 7);
        let (_, w) = a.forward_with_weights(&x, 8, 8).unwrap();
        let sums: Vec<f64> = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let store = vs();
        let a = EfficientSelfAttention::new(&store.root().pp("a"), 8, 2, 4).unwrap();
        let row = rand(&[1, 1, 8], 8);
        let x = row.broadcast_as((1, 64, 8)).unwrap().contiguous().unwrap();
        let y: Vec<Vec<f64>> = a.forward(&x, 8, 8).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        // direct evaluation: with identical keys the softmax is uniform and
        // the output is the projected value of the single distinct token
        for r in &y[1..] {
            for (p, q) in r.iter().zip(&y[0]) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduction_patches() {
        assert_eq!(reduction_patch(1), (1, 1));
        assert_eq!(reduction_patch(2), (1, 2));
        assert_eq!(reduction_patch(4), (2, 2));
        assert_eq!(reduction_patch(16), (4, 4));
        assert_eq!(reduction_patch(64), (8, 8));
    }

    #[test]
    fn mix_ffn_residual_passthrough() {
        let store = vs();
        let f = MixFfn::new(&store.root().pp("f"), 6, 24).unwrap();
        store.assign("f.fc2.weight", &Tensor::zeros((6, 24), DType::F64, &Device::Cpu).unwrap()).unwrap();
        store.assign("f.fc2.bias", &Tensor::zeros(6, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let x = Tensor::zeros((1, 16 * 32, 6), DType::F64, &Device::Cpu).unwrap();
        let y = f.forward(&x, 16, 32).unwrap();
        assert_eq!(y.dims(), &[1, 512, 6]);
        let d: f64 = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
        let x = rand(&[1, 512, 6], 9);
        let y = f.forward(&x, 16, 32).unwrap();
        let d: f64 = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn mix_ffn_any_size_finite() {
        let store = vs();
        let f = MixFfn::new(&store.root().pp("f"), 5, 20).unwrap();
        for (h, w) in [(16, 16), (32, 24), (16, 32)] {
            let x = rand(&[1, h * w, 5], (h * w) as u64);
            let y = f.forward(&x, h, w).unwrap();
            assert_eq!(y.dims(), x.dims());
            assert!(crate::nn::all_finite(&y).unwrap());
        }
    }

    #[test]
    fn configs_validate() {
        BackboneConfig::toy().validate().unwrap();
        BackboneConfig::b5().validate().unwrap();
        let mut bad = BackboneConfig::toy();
        bad.num_heads[1] = 3;
        assert!(bad.validate().is_err());
        let mut bad = BackboneConfig::toy();
        bad.stage_channels = [16, 8, 24, 32];
        assert!(bad.validate().is_err());
        assert_eq!(BackboneConfig::toy().stage_scale(3), 32);
    }

    #[test]
    fn toy_pyramid_shapes() {
        let store = vs();
        let bb = Backbone::new(&store.root().pp("backbone"), &BackboneConfig::toy()).unwrap();
        let img = rand(&[1, 3, 64, 128], 10).affine(0.5, 0.5).unwrap();
        let p = bb.extract_features(&img).unwrap();
        assert_eq!(p.f4.dims(), &[1, 8, 16, 32]);
        assert_eq!(p.f8.dims(), &[1, 16, 8, 16]);
        assert_eq!(p.f16.dims(), &[1, 24, 4, 8]);
        assert_eq!(p.f32.dims(), &[1, 32, 2, 4]);
        assert_eq!(p.fused.dims(), &[1, 32, 16, 32]);
        let q = bb.extract_features(&img).unwrap();
        let d: f64 = (&p.fused - &q.fused).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
        assert!(matches!(
            bb.extract_features(&rand(&[1, 3, 64, 100], 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn parameter_names_follow_schema() {
        let store = vs();
        let _ = Backbone::new(&store.root().pp("backbone"), &BackboneConfig::toy()).unwrap();
        let names: Vec<String> = store.named_vars().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n == "backbone.stage1.block0.attn.q.weight"));
        assert!(names.iter().any(|n| n == "backbone.stage3.block0.ffn.dw.weight"));
        assert!(names.iter().any(|n| n == "backbone.fuse.weight"));
        assert!(names.iter().all(|n| n.starts_with("backbone.stage") || n.starts_with("backbone.fuse")));
    }
}
