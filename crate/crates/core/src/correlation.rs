//! Scanline correlation pyramid and windowed lookup.
//!
//! Level 0 holds, for every left pixel (i, j) and displacement d, the scaled
//! dot product `<f_left(i, j), f_right(i, j - d)> / sqrt(C)`; displacements
//! that leave the image read as 0. Level l+1 is level l average-pooled by 2
//! along the displacement axis (zero-padded to even length first).

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_RADIUS: usize = 4;

#[derive(Clone, Debug)]
pub struct CorrelationPyramid {
    /// (B, H, W, D_l) per level.
    levels: Vec<Tensor>,
}

impl CorrelationPyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l]
    }

    /// Length of the per-pixel feature vector produced by [`lookup`].
    pub fn feature_len(&self, radius: usize) -> usize {
        self.levels.len() * (2 * radius + 1)
    }
}

/// Build an `levels`-level pyramid from (B, C, H, W) feature maps on the
/// correlation grid.
pub fn build_pyramid(f_left: &Tensor, f_right: &Tensor, levels: usize) -> Result<CorrelationPyramid> {
    if f_left.dims() != f_right.dims() {
        return Err(Error::Shape(format!(
            "left features {:?} vs right features {:?}",
            f_left.dims(),
            f_right.dims()
        )));
    }
    if levels == 0 {
        return Err(Error::Config("correlation pyramid needs at least one level".into()));
    }
    let (b, c, h, w) = f_left.dims4()?;
    let fl = f_left.permute((0, 2, 3, 1))?.contiguous()?; // B H W C
    let fr = f_right.permute((0, 2, 1, 3))?.contiguous()?; // B H C W
    let all_pairs = (fl.matmul(&fr)? * (1.0 / (c as f64).sqrt()))?; // B H Wl Wr

    // re-index (j, j') -> (j, d = j - j')
    let mut idx = Vec::with_capacity(w * w);
    let mut mask = Vec::with_capacity(w * w);
    for j in 0..w {
        for d in 0..w {
            idx.push(j.saturating_sub(d) as u32);
            mask.push(if d <= j { 1.0 } else { 0.0 });
        }
    }
    let dev = f_left.device();
    let idx = Tensor::from_vec(idx, (1, 1, w, w), dev)?
        .broadcast_as((b, h, w, w))?
        .contiguous()?;
    let mask = Tensor::from_vec(mask, (1, 1, w, w), dev)?.to_dtype(f_left.dtype())?;
    let vol0 = all_pairs.gather(&idx, 3)?.broadcast_mul(&mask)?;

    let mut out = vec![vol0];
    for _ in 1..levels {
        let prev = out.last().expect("level 0");
        let d = prev.dim(3)?;
        let padded = if d % 2 == 1 { prev.pad_with_zeros(3, 0, 1)? } else { prev.clone() };
        let dp = padded.dim(3)?;
        out.push(padded.reshape((b, h, w, dp / 2, 2))?.mean(4)?);
    }
    Ok(CorrelationPyramid { levels: out })
}

/// Sample every level around the current disparity.
///
/// `disparity` is (B, 1, H, W) in correlation-grid pixels. At level l the
/// volume is linearly interpolated at `d / 2^l + k` for `k` in `[-r, r]`;
/// samples outside the volume contribute 0. Returns (B, L·(2r+1), H, W),
/// level-major.
///
/// With `detach_coords` the sampling positions are constants for
/// backpropagation and gradients reach only the volume values.
pub fn lookup(
    pyramid: &CorrelationPyramid,
    disparity: &Tensor,
    radius: usize,
    detach_coords: bool,
) -> Result<Tensor> {
    let vol0 = &pyramid.levels[0];
    let (b, h, w, _) = vol0.dims4()?;
    let (db, dc, dh, dw) = disparity.dims4()?;
    if (db, dc, dh, dw) != (b, 1, h, w) {
        return Err(Error::Shape(format!(
            "disparity {:?} does not match correlation grid ({b}, 1, {h}, {w})",
            disparity.dims()
        )));
    }
    let dt = vol0.dtype();
    let dev = vol0.device();
    let taps = 2 * radius + 1;
    let n = b * h * w;

    let d_host: Vec<f64> = disparity.detach().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    if d_host.iter().any(|v| !v.is_finite()) {
        return Err(Error::NaNInput("disparity in correlation lookup"));
    }
    // (B, H, W, 1) view of the disparity for the differentiable path
    let d_bhw = disparity.permute((0, 2, 3, 1))?;
    let offsets: Vec<f64> = (0..taps).map(|k| k as f64 - radius as f64).collect();
    let offsets_t = Tensor::from_vec(offsets.clone(), (1, 1, 1, taps), dev)?.to_dtype(dt)?;

    let mut per_level = Vec::with_capacity(pyramid.levels.len());
    for (l, vol) in pyramid.levels.iter().enumerate() {
        let len = vol.dim(3)?;
        let scale = 1.0 / (1u64 << l) as f64;
        let mut i0 = Vec::with_capacity(n * taps);
        let mut i1 = Vec::with_capacity(n * taps);
        let mut m0 = Vec::with_capacity(n * taps);
        let mut m1 = Vec::with_capacity(n * taps);
        let mut floors = Vec::with_capacity(n * taps);
        let mut fracs = Vec::with_capacity(n * taps);
        for &d in &d_host {
            for &k in &offsets {
                let p = d * scale + k;
                let f = p.floor();
                floors.push(f);
                fracs.push(p - f);
                let a = f as i64;
                let inside = |i: i64| i >= 0 && (i as usize) < len;
                let clamp = |i: i64| i.clamp(0, len as i64 - 1) as u32;
                i0.push(clamp(a));
                i1.push(clamp(a + 1));
                m0.push(if inside(a) { 1.0 } else { 0.0 });
                m1.push(if inside(a + 1) { 1.0 } else { 0.0 });
            }
        }
        let shape = (b, h, w, taps);
        let i0 = Tensor::from_vec(i0, shape, dev)?;
        let i1 = Tensor::from_vec(i1, shape, dev)?;
        let m0 = Tensor::from_vec(m0, shape, dev)?.to_dtype(dt)?;
        let m1 = Tensor::from_vec(m1, shape, dev)?.to_dtype(dt)?;
        let frac = if detach_coords {
            Tensor::from_vec(fracs, shape, dev)?.to_dtype(dt)?
        } else {
            let floors = Tensor::from_vec(floors, shape, dev)?.to_dtype(dt)?;
            (&d_bhw * scale)?.broadcast_add(&offsets_t)?.sub(&floors)?
        };
        let w0 = ((frac.ones_like()? - &frac)? * m0)?;
        let w1 = (frac * m1)?;
        let v0 = vol.gather(&i0, 3)?;
        let v1 = vol.gather(&i1, 3)?;
        per_level.push(((v0 * w0)? + (v1 * w1)?)?);
    }
    let feats = Tensor::cat(&per_level, 3)?; // B H W L·taps
    Ok(feats.permute((0, 3, 1, 2))?.contiguous()?)
}
