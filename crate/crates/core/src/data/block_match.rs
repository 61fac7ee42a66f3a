//! Classical sum-of-absolute-differences block matcher with parabolic
//! sub-pixel refinement. Used as an independent check on generated scenes.

use image::RgbImage;
use ndarray::Array2;

fn gray(img: &RgbImage) -> Array2<f32> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(v, u)| {
        let p = img.get_pixel(u as u32, v as u32).0;
        (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0
    })
}

/// Winner-take-all disparity for every left pixel, searching
/// `0..=max_disparity` (limited to in-image matches) with a
/// `(2·radius+1)²` window clamped at the borders.
pub fn block_match(left: &RgbImage, right: &RgbImage, max_disparity: usize, radius: usize) -> Array2<f32> {
    let l = gray(left);
    let r = gray(right);
    let (h, w) = l.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    let rad = radius as isize;
    let mut costs = vec![0f32; max_disparity + 1];
    for v in 0..h {
        for u in 0..w {
            let dmax = max_disparity.min(u);
            for (d, cost) in costs.iter_mut().enumerate().take(dmax + 1) {
                let mut s = 0.0;
                for dy in -rad..=rad {
                    let y = (v as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -rad..=rad {
                        let xl = (u as isize + dx).clamp(0, w as isize - 1) as usize;
                        let xr = (u as isize - d as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += (l[[y, xl]] - r[[y, xr]]).abs();
                    }
                }
                *cost = s;
            }
            let best = (0..=dmax)
                .min_by(|&a, &b| costs[a].total_cmp(&costs[b]))
                .unwrap_or(0);
            let mut d = best as f32;
            if best > 0 && best < dmax {
                let (c0, c1, c2) = (costs[best - 1], costs[best], costs[best + 1]);
                let denom = c0 - 2.0 * c1 + c2;
                if denom > 0.0 {
                    d += 0.5 * (c0 - c2) / denom;
                }
            }
            out[[v, u]] = d;
        }
    }
    out
}
