//! Rectified-stereo geometry: disparity/depth conversion and point clouds.

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    /// Rig used by the toy generator: focal length equal to the image width,
    /// principal point at the centre, 10 cm baseline.
    pub fn toy(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            baseline: 0.1,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.baseline > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera rig {self:?}")))
        }
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }
}

/// `z = fx · baseline / d`; `None` for d ≤ 0 or non-finite d.
pub fn disparity_to_depth(d: f64, rig: &CameraRig) -> Option<f64> {
    if d > 0.0 && d.is_finite() {
        Some(rig.fx * rig.baseline / d)
    } else {
        None
    }
}

/// `d = fx · baseline / z`; `None` for z ≤ 0 or non-finite z.
pub fn depth_to_disparity(z: f64, rig: &CameraRig) -> Option<f64> {
    if z > 0.0 && z.is_finite() {
        Some(rig.fx * rig.baseline / z)
    } else {
        None
    }
}

/// Dense conversion. Holes (d ≤ 0, non-finite, or depth beyond `z_max`)
/// become `+inf`, the invalid marker used on disk.
pub fn disparity_map_to_depth(disp: ArrayView2<f32>, rig: &CameraRig, z_max: Option<f64>) -> Array2<f32> {
    disp.mapv(|d| match disparity_to_depth(d as f64, rig) {
        Some(z) if z_max.map_or(true, |m| z <= m) => z as f32,
        _ => f32::INFINITY,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII format: a first line with the point count, then one
    /// `x y z [r g b]` line per point.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 40);
        let _ = writeln!(out, "{}", self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
            if let Some(c) = &self.colors {
                let _ = write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2]);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_ascii(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let count: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| Error::malformed(path, "missing point count header"))?;
        let mut points = Vec::with_capacity(count);
        let mut colors: Vec<[u8; 3]> = Vec::new();
        let mut with_color = None;
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let has_color = match fields.len() {
                3 => false,
                6 => true,
                k => return Err(Error::malformed(path, format!("line {}: {k} fields", n + 2))),
            };
            if *with_color.get_or_insert(has_color) != has_color {
                return Err(Error::malformed(path, "mixed colored and uncolored points"));
            }
            let bad = || Error::malformed(path, format!("line {}: bad number", n + 2));
            let mut p = [0.0; 3];
            for (k, f) in fields[..3].iter().enumerate() {
                p[k] = f.parse().map_err(|_| bad())?;
            }
            points.push(p);
            if has_color {
                let mut c = [0u8; 3];
                for (k, f) in fields[3..].iter().enumerate() {
                    c[k] = f.parse().map_err(|_| bad())?;
                }
                colors.push(c);
            }
        }
        if points.len() != count {
            return Err(Error::malformed(
                path,
                format!("header declares {count} points, found {}", points.len()),
            ));
        }
        Ok(Self {
            points,
            colors: with_color.unwrap_or(false).then_some(colors),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ascii()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ascii(&text, path)
    }
}

/// Back-project every finite, positive depth pixel (u = column, v = row).
pub fn export_pointcloud(depth: ArrayView2<f32>, rig: &CameraRig, color: Option<&RgbImage>) -> Result<PointCloud> {
    let (h, w) = depth.dim();
    if let Some(img) = color {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::Shape(format!(
                "color image {}x{} vs depth {w}x{h}",
                img.width(),
                img.height()
            )));
        }
    }
    let mut points = Vec::new();
    let mut colors = color.map(|_| Vec::new());
    for ((v, u), &z) in depth.indexed_iter() {
        if !(z.is_finite() && z > 0.0) {
            continue;
        }
        points.push(rig.unproject(u as f64, v as f64, z as f64));
        if let (Some(cs), Some(img)) = (colors.as_mut(), color) {
            cs.push(img.get_pixel(u as u32, v as u32).0);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyDomain("depth map has no valid pixels".into()));
    }
    Ok(PointCloud { points, colors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> CameraRig {
        CameraRig {
            fx: 700.0,
            fy: 650.0,
            cx: 320.0,
            cy: 240.0,
            baseline: 0.12,
            width: 640,
            height: 480,
        }
    }

    #[test]
    fn reference_conversion() {
        assert_eq!(disparity_to_depth(84.0, &rig()), Some(1.0));
    }

    #[test]
    fn depth_round_trip() {
        for z in [0.3, 1.0, 5.0] {
            let d = depth_to_disparity(z, &rig()).unwrap();
            let back = disparity_to_depth(d, &rig()).unwrap();
            assert!(((back - z) / z).abs() < 1e-9);
        }
    }

    #[test]
    fn holes_and_limits() {
        assert_eq!(disparity_to_depth(0.0, &rig()), None);
        assert_eq!(disparity_to_depth(-1.0, &rig()), None);
        assert_eq!(disparity_to_depth(f64::NAN, &rig()), None);
        assert!(disparity_to_depth(1e-12, &rig()).unwrap() > 1e10);
        let d = Array2::from_shape_vec((1, 3), vec![84.0f32, 0.0, 1e-6]).unwrap();
        let z = disparity_map_to_depth(d.view(), &rig(), Some(100.0));
        assert_eq!(z[[0, 0]], 1.0);
        assert!(z[[0, 1]].is_infinite());
        assert!(z[[0, 2]].is_infinite());
    }

    #[test]
    fn principal_ray_and_unit_tangent() {
        let r = CameraRig { fy: 700.0, ..rig() };
        let mut depth = Array2::from_elem((480, 640), f32::INFINITY);
        depth[[240, 320]] = 2.0;
        let pc = export_pointcloud(depth.view(), &r, None).unwrap();
        assert_eq!(pc.points, vec![[0.0, 0.0, 2.0]]);
        let mut depth = Array2::from_elem((480, 1100), f32::INFINITY);
        depth[[240, 1020]] = 1.0;
        let r2 = CameraRig { width: 1100, ..r };
        let pc = export_pointcloud(depth.view(), &r2, None).unwrap();
        assert_eq!(pc.points, vec![[1.0, 0.0, 1.0]]);
    }

    #[test]
    fn empty_depth_is_an_error() {
        let depth = Array2::from_elem((4, 4), f32::INFINITY);
        assert!(export_pointcloud(depth.view(), &rig(), None).is_err());
    }

    #[test]
    fn ascii_round_trip_with_colors() {
        let pc = PointCloud {
            points: vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 2.0, 7.25]],
            colors: Some(vec![[1, 2, 3], [255, 0, 128]]),
        };
        let back = PointCloud::parse_ascii(&pc.to_ascii(), Path::new("x")).unwrap();
        assert_eq!(back, pc);
        assert!(PointCloud::parse_ascii("3\n1 2 3\n", Path::new("x")).is_err());
    }

    #[test]
    fn rig_validation() {
        rig().validate().unwrap();
        assert!(CameraRig { baseline: 0.0, ..rig() }.validate().is_err());
        assert!(CameraRig { cx: 640.0, ..rig() }.validate().is_err());
    }
}
