//! Deterministic procedural stereo scenes with opaque and transparent
//! objects.
//!
//! The background is a colored random-dot texture on a slanted disparity
//! plane. Objects are fronto-parallel rectangles or ellipses at larger
//! (integer) disparities. Opaque objects show their own tinted dot texture.
//! Transparent objects blend a weak copy of that texture (weight α) with the
//! background texture *as seen at the background disparity*, so local
//! texture matching votes for the background while the ground truth is the
//! object's disparity.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::CameraRig;
use super::sample::{ObjectPose, ObjectShape, SceneMeta, StereoSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive object count range.
    pub objects: [usize; 2],
    /// Overall disparity range in px; the background occupies the lower
    /// part and objects the upper half.
    pub disparity_range: [f64; 2],
    /// Probability that an object is transparent.
    pub transparency_fraction: f64,
    pub alpha_range: [f64; 2],
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 64,
            objects: [1, 3],
            disparity_range: [2.0, 24.0],
            transparency_fraction: 0.5,
            alpha_range: [0.1, 0.4],
        }
    }
}

impl ToySceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.width % 32 != 0 || self.height % 32 != 0 {
            return bad(format!("image size {}x{} must be positive multiples of 32", self.width, self.height));
        }
        let [dmin, dmax] = self.disparity_range;
        if !(dmin > 0.0 && dmax > dmin) {
            return bad(format!("disparity range {dmin}..{dmax} must be positive and increasing"));
        }
        if dmax.ceil() - (dmin + 0.5 * (dmax - dmin)).ceil() < 0.0 {
            return bad("disparity range leaves no integer object disparity".into());
        }
        if dmax + 2.0 * self.max_half_width() + 2.0 >= self.width as f64 {
            return bad(format!(
                "disparity up to {dmax} px plus object width exceeds the {} px image width",
                self.width
            ));
        }
        if self.objects[0] > self.objects[1] {
            return bad("object count range must be increasing".into());
        }
        if !(0.0..=1.0).contains(&self.transparency_fraction) {
            return bad("transparency_fraction must lie in [0, 1]".into());
        }
        let [a0, a1] = self.alpha_range;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) {
            return bad("alpha_range must be an increasing subrange of [0, 1]".into());
        }
        Ok(())
    }

    fn max_half_width(&self) -> f64 {
        self.width as f64 / 6.0
    }

    fn background_range(&self) -> (f64, f64) {
        let [dmin, dmax] = self.disparity_range;
        (dmin, dmin + 0.35 * (dmax - dmin))
    }

    fn object_range(&self) -> (i64, i64) {
        let [dmin, dmax] = self.disparity_range;
        ((dmin + 0.5 * (dmax - dmin)).ceil() as i64, dmax.floor() as i64)
    }
}

type Texture = Array2<[f32; 3]>;

fn dot_texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Texture {
    Array2::from_shape_simple_fn((h, w), || [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()])
}

fn tinted_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, tint: [f32; 3]) -> Texture {
    Array2::from_shape_simple_fn((h, w), || {
        let g = 0.25 + 0.75 * rng.gen::<f32>();
        [tint[0] * g, tint[1] * g, tint[2] * g]
    })
}

fn sample_row(tex: &Texture, v: usize, u: f64) -> [f32; 3] {
    let w = tex.ncols();
    let u = u.clamp(0.0, (w - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(w - 1);
    let f = (u - i0 as f64) as f32;
    let a = tex[[v, i0]];
    let b = tex[[v, i1]];
    [
        a[0] + f * (b[0] - a[0]),
        a[1] + f * (b[1] - a[1]),
        a[2] + f * (b[2] - a[2]),
    ]
}

fn blend(a: [f32; 3], b: [f32; 3], alpha: f32) -> [f32; 3] {
    [
        alpha * a[0] + (1.0 - alpha) * b[0],
        alpha * a[1] + (1.0 - alpha) * b[1],
        alpha * a[2] + (1.0 - alpha) * b[2],
    ]
}

fn to_rgb(c: [f32; 3]) -> Rgb<u8> {
    let q = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([q(c[0]), q(c[1]), q(c[2])])
}

/// Background disparity plane `a + b·v/H + c·u/W`.
#[derive(Clone, Copy, Debug)]
struct Plane {
    a: f64,
    b: f64,
    c: f64,
    w: f64,
    h: f64,
}

impl Plane {
    fn at(&self, u: f64, v: f64) -> f64 {
        self.a + self.b * v / self.h + self.c * u / self.w
    }

    /// Left column whose disparity maps it onto right column `x`:
    /// solves u = x + d(u, v).
    fn left_column(&self, x: f64, v: f64) -> f64 {
        (x + self.a + self.b * v / self.h) / (1.0 - self.c / self.w)
    }
}

pub fn generate_toy_scene(seed: u64, spec: &ToySceneSpec) -> Result<StereoSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (blo, bhi) = spec.background_range();
    let plane = loop {
        let a = rng.gen_range(blo..=bhi);
        let b = rng.gen_range(-(bhi - blo)..=(bhi - blo));
        let c = rng.gen_range(-(bhi - blo)..=(bhi - blo));
        let p = Plane {
            a,
            b,
            c,
            w: w as f64,
            h: h as f64,
        };
        let corners = [p.at(0.0, 0.0), p.at(w as f64, 0.0), p.at(0.0, h as f64), p.at(w as f64, h as f64)];
        if corners.iter().all(|d| (blo..=bhi).contains(d)) {
            break p;
        }
    };
    let margin = spec.disparity_range[1].ceil() as usize + 2;
    let background = dot_texture(&mut rng, h, w + margin);

    let n_objects = rng.gen_range(spec.objects[0]..=spec.objects[1]);
    let (olo, ohi) = spec.object_range();
    let mut objects = Vec::with_capacity(n_objects);
    let mut textures = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let shape = if rng.gen_bool(0.5) {
            ObjectShape::Rectangle
        } else {
            ObjectShape::Ellipse
        };
        let disparity = rng.gen_range(olo..=ohi) as f64;
        let rx = rng.gen_range(w as f64 / 12.0..=spec.max_half_width());
        let ry = rng.gen_range(h as f64 / 6.0..=h as f64 / 3.0);
        let cx = rng.gen_range(disparity + rx + 1.0..=w as f64 - 1.0 - rx);
        let cy = rng.gen_range(ry..=h as f64 - 1.0 - ry);
        let transparent = rng.gen_bool(spec.transparency_fraction);
        let alpha = rng.gen_range(spec.alpha_range[0]..=spec.alpha_range[1]);
        let tint = [
            rng.gen_range(0.3f32..1.0),
            rng.gen_range(0.3f32..1.0),
            rng.gen_range(0.3f32..1.0),
        ];
        textures.push(tinted_texture(&mut rng, h, w, tint));
        objects.push(ObjectPose {
            id: (i + 1) as u16,
            shape,
            center: [cx, cy],
            half_size: [rx, ry],
            disparity,
            transparent,
            alpha,
        });
    }
    // nearest (largest disparity) first; ties keep creation order
    let mut order: Vec<usize> = (0..n_objects).collect();
    order.sort_by(|&a, &b| objects[b].disparity.total_cmp(&objects[a].disparity));

    let mut left = RgbImage::new(w as u32, h as u32);
    let mut right = RgbImage::new(w as u32, h as u32);
    let mut gt = Array2::<f32>::zeros((h, w));
    let mut valid = Array2::<bool>::from_elem((h, w), false);
    let mut object_mask = Array2::<u16>::zeros((h, w));

    for v in 0..h {
        let vf = v as f64;
        for u in 0..w {
            let uf = u as f64;
            let hit = order.iter().copied().find(|&k| objects[k].contains(uf, vf));
            let (color, d) = match hit {
                Some(k) => {
                    let o = &objects[k];
                    let own = textures[k][[v, u]];
                    object_mask[[v, u]] = o.id;
                    let c = if o.transparent {
                        blend(own, background[[v, u]], o.alpha as f32)
                    } else {
                        own
                    };
                    (c, o.disparity)
                }
                None => (background[[v, u]], plane.at(uf, vf)),
            };
            left.put_pixel(u as u32, v as u32, to_rgb(color));
            if d < uf {
                gt[[v, u]] = d as f32;
                valid[[v, u]] = true;
            } else {
                gt[[v, u]] = f32::INFINITY;
            }
        }
        for x in 0..w {
            let xf = x as f64;
            let bg = sample_row(&background, v, plane.left_column(xf, vf));
            let hit = order.iter().copied().find(|&k| objects[k].contains(xf + objects[k].disparity, vf));
            let color = match hit {
                Some(k) => {
                    let o = &objects[k];
                    let own = textures[k][[v, x + o.disparity as usize]];
                    if o.transparent {
                        blend(own, bg, o.alpha as f32)
                    } else {
                        own
                    }
                }
                None => bg,
            };
            right.put_pixel(x as u32, v as u32, to_rgb(color));
        }
    }

    Ok(StereoSample {
        left,
        right,
        gt_disparity: gt,
        valid,
        object_mask,
        rig: CameraRig::toy(w, h),
        meta: SceneMeta {
            scene_id: format!("toy-{seed:016x}"),
            seed,
            background_plane: [plane.a, plane.b, plane.c],
            objects,
        },
    })
}
