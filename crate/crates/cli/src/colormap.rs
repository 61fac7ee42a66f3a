//! Fixed disparity colormap.
//!
//! Values are scaled linearly from `[min, max]` to `[0, 1]` and mapped
//! through a piecewise-linear ramp over nine anchors sampled from viridis.
//! Non-finite values are drawn black.

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

pub const COLORMAP_NAME: &str = "viridis-9";

const ANCHORS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Sidecar written next to every colormapped image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorScale {
    pub colormap: String,
    pub min: f64,
    pub max: f64,
}

impl ColorScale {
    /// Range from the finite values of `map`, or the given bounds.
    pub fn fit(map: ArrayView2<f32>, min: Option<f64>, max: Option<f64>) -> Self {
        let finite = map.iter().filter(|v| v.is_finite()).map(|v| *v as f64);
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
        Self {
            colormap: COLORMAP_NAME.into(),
            min: min.unwrap_or(lo),
            max: max.unwrap_or(hi),
        }
    }
}

pub fn color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(ANCHORS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    let mix = |c: usize| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

pub fn colorize(map: ArrayView2<f32>, scale: &ColorScale) -> RgbImage {
    let (h, w) = map.dim();
    let span = (scale.max - scale.min).max(1e-12);
    RgbImage::from_fn(w as u32, h as u32, |u, v| {
        let d = map[[v as usize, u as usize]];
        if d.is_finite() {
            color((d as f64 - scale.min) / span)
        } else {
            Rgb([0, 0, 0])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn endpoints_hit_anchors() {
        assert_eq!(color(0.0), Rgb(ANCHORS[0]));
        assert_eq!(color(1.0), Rgb(ANCHORS[8]));
        assert_eq!(color(-3.0), Rgb(ANCHORS[0]));
        assert_eq!(color(0.5), Rgb(ANCHORS[4]));
    }

    #[test]
    fn fit_ignores_non_finite() {
        let m = array![[1.0f32, f32::INFINITY], [3.0, f32::NAN]];
        let s = ColorScale::fit(m.view(), None, None);
        assert_eq!((s.min, s.max), (1.0, 3.0));
        let img = colorize(m.view(), &s);
        assert_eq!(*img.get_pixel(1, 0), Rgb([0, 0, 0]));
        assert_eq!(*img.get_pixel(0, 1), Rgb(ANCHORS[8]));
    }
}
