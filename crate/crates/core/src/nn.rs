//! Parameter storage and the small set of differentiable layers the network
//! is built from. Every layer is composed of primitive tensor ops so that
//! backpropagation works for both `f32` training and `f64` gradient checks.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter store. Cloning shares the underlying storage.
#[derive(Clone)]
pub struct VarStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Path {
        Path {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// All variables in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("var store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let inner = self.inner.lock().expect("var store poisoned");
        inner.vars.get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite an existing variable in place, checking the shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("var store poisoned");
        if inner.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => (0..n)
                .map(|_| inner.rng.gen_range(-bound..=bound))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Const(f64),
    Uniform(f64),
}

/// A dotted prefix into a [`VarStore`].
#[derive(Clone)]
pub struct Path {
    store: VarStore,
    prefix: String,
}

impl Path {
    pub fn pp(&self, name: impl AsRef<str>) -> Path {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Path {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.pp(name).prefix;
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// 2-D convolution on NCHW tensors.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        path: &Path,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self::with_init(
            path,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            Init::Uniform(bound),
            Init::Uniform(bound),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        path: &Path,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        let weight = path.var("weight", &[out_ch, in_ch, kernel, kernel], weight_init)?;
        let bias = Some(path.var("bias", &[out_ch], bias_init)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Apply a stride-1 same-padded convolution to columns already produced
    /// by [`im2col_same`], letting several convolutions share one unfold.
    pub fn forward_unfolded(&self, cols: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        let wm = self.weight.reshape((out_ch, in_ch * k * k))?;
        let y = wm.broadcast_matmul(cols)?.reshape((b, out_ch, h, w))?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, out_ch, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_ch, in_ch, k, _) = self.weight.dims4()?;
        let (b, c, h, w) = x.dims4()?;
        if c != in_ch {
            return Err(Error::Shape(format!(
                "conv expects {in_ch} input channels, got {c}"
            )));
        }
        let y = if k == 1 && self.stride == 1 && self.padding == 0 {
            let wm = self.weight.reshape((out_ch, in_ch))?;
            wm.broadcast_matmul(&x.reshape((b, c, h * w))?)?
                .reshape((b, out_ch, h, w))?
        } else if self.stride == 1 && 2 * self.padding + 1 == k {
            // im2col; the backward of the native conv kernel is much slower
            let cols = im2col_same(x, k)?;
            let wm = self.weight.reshape((out_ch, in_ch * k * k))?;
            wm.broadcast_matmul(&cols)?.reshape((b, out_ch, h, w))?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, out_ch, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Unfold k×k same-padded neighbourhoods: (B, C, H, W) -> (B, C·k·k, H·W),
/// channel-major to match a (O, C, k, k) weight layout.
pub fn im2col_same(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let p = k / 2;
    let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut taps = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            taps.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Ok(Tensor::stack(&taps, 2)?.reshape((b, c * k * k, h * w))?)
}

/// Per-channel 3×3 convolution with same padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(path: &Path, channels: usize) -> Result<Self> {
        let bound = 1.0 / 3.0;
        Ok(Self {
            weight: path.var("weight", &[channels, 1, 3, 3], Init::Uniform(bound))?,
            bias: path.var("bias", &[channels], Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let wt = self.weight.reshape((c, 9))?;
        let mut acc: Option<Tensor> = None;
        for dy in 0..3 {
            for dx in 0..3 {
                let tap = xp.narrow(2, dy, h)?.narrow(3, dx, w)?;
                let wk = wt.narrow(1, dy * 3 + dx, 1)?.reshape((1, c, 1, 1))?;
                let term = tap.broadcast_mul(&wk)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        let acc = acc.expect("nine taps");
        Ok(acc.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Affine map over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    weight_t: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(path: &Path, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(path, in_dim, out_dim, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn with_init(
        path: &Path,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        // stored (out, in) like the usual checkpoint layout
        let weight = path.var("weight", &[out_dim, in_dim], weight_init)?;
        let bias = path.var("bias", &[out_dim], bias_init)?;
        Ok(Self {
            weight_t: weight.t()?,
            bias,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight_t)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(path: &Path, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: path.var("weight", &[dim], Init::Const(1.0))?,
            bias: path.var("bias", &[dim], Init::Const(0.0))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Row-stochastic matrix (out × in) for half-pixel-centred linear
/// interpolation along one axis, with edge clamping.
pub fn linear_resize_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let f = src - i0 as f64;
        m[o * input + i0] += 1.0 - f;
        m[o * input + i1] += f;
    }
    m
}

/// Bilinear resize of an NCHW tensor to (out_h, out_w).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let mw = Tensor::from_vec(linear_resize_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(dt)?
        .t()?;
    let mh = Tensor::from_vec(linear_resize_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dt)?;
    // along W: (B·C·H, W) x (W, out_w)
    let y = x.reshape((b * c * h, w))?.matmul(&mw)?;
    // along H: (out_h, H) x (B·C, H, out_w)
    let y = y.reshape((b * c, h, out_w))?;
    let y = mh.broadcast_matmul(&y)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// 2×2 average pooling; spatial dims must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "average pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok(x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .mean(5)?
        .mean(3)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + exp(-x)), written with primitives so it differentiates
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Check that every element of `x` is finite.
pub fn all_finite(x: &Tensor) -> Result<bool> {
    let v: Vec<f64> = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(v.iter().all(|a| a.is_finite()))
}
